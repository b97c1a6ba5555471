// Entry point: two-tab single page app over the /api/v1 service.

import { ApiClient } from './api.js';
import { CurationView } from './curation.js';
import { ExplorerView } from './explorer.js';

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

async function init() {
  const api = new ApiClient();
  const content = byId('content');
  let curation: CurationView | null = null;

  async function showCuration() {
    content.innerHTML = '';
    curation = new CurationView(content, api);
    await curation.mount();
  }

  async function showExplorer() {
    curation?.unmount();
    curation = null;
    content.innerHTML = '';
    await new ExplorerView(content, api).mount();
  }

  byId('tab-curation').addEventListener('click', () => void showCuration());
  byId('tab-explorer').addEventListener('click', () => void showExplorer());
  await showExplorer();
}

void init();
