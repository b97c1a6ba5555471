// Retrieval explorer: pick a reference image, type a relative caption,
// choose query mode and inversion networks, inspect the ranked grid.
// Result cards are rendered in exactly the order the API returns; ground
// truths (from the loaded triplet file) are highlighted.

import type { ApiClient } from './api.js';
import type { QueryMode, RetrieveHit, Triplet } from './types.js';

const MODES: QueryMode[] = ['image-only', 'text-only', 'avg', 'composed'];

export class ExplorerView {
  private triplets: Triplet[] = [];
  private searched = false;

  constructor(
    private readonly container: HTMLElement,
    private readonly api: ApiClient,
  ) {}

  async mount(): Promise<void> {
    const [images, tinets, triplets] = await Promise.all([
      this.api.listImages(),
      this.api.listTinets(),
      this.api.listTriplets(),
    ]);
    this.triplets = triplets;
    this.container.innerHTML = `
      <div class="explorer">
        <form data-role="query-form">
          <label>reference
            <select data-role="image" name="image">
              ${images.map((im) =>
                `<option value="${im.image_id}">${im.image_id}</option>`).join('')}
            </select>
          </label>
          <label>caption
            <input data-role="caption" name="caption" type="text"
                   placeholder="relative caption">
          </label>
          <label>mode
            <select data-role="mode" name="mode">
              ${MODES.map((m) => `<option value="${m}">${m}</option>`).join('')}
            </select>
          </label>
          <label>networks
            <select data-role="tinets" name="tinets" multiple>
              ${tinets.map((t) => `<option value="${t}">${t}</option>`).join('')}
            </select>
          </label>
          <label>k
            <input data-role="k" name="k" type="number" value="10" min="1">
          </label>
          <button type="submit" data-role="search">search</button>
        </form>
        <p class="error" data-role="error"></p>
        <ol class="results" data-role="results"></ol>
      </div>`;

    const form = this.query<HTMLFormElement>('[data-role="query-form"]');
    form.addEventListener('submit', (ev) => {
      ev.preventDefault();
      void this.runQuery();
    });
    // switching mode re-queries in place once a first search has happened
    this.query<HTMLSelectElement>('[data-role="mode"]')
      .addEventListener('change', () => {
        if (this.searched) void this.runQuery();
      });
  }

  private query<T extends Element>(selector: string): T {
    const el = this.container.querySelector<T>(selector);
    if (!el) throw new Error(`missing element ${selector}`);
    return el;
  }

  private formState() {
    return {
      image: this.query<HTMLSelectElement>('[data-role="image"]').value,
      caption: this.query<HTMLInputElement>('[data-role="caption"]').value,
      mode: this.query<HTMLSelectElement>('[data-role="mode"]').value as QueryMode,
      tinets: Array.from(
        this.query<HTMLSelectElement>('[data-role="tinets"]').selectedOptions,
      ).map((o) => o.value),
      k: Number(this.query<HTMLInputElement>('[data-role="k"]').value) || 10,
    };
  }

  async runQuery(): Promise<void> {
    const state = this.formState();
    this.searched = true;
    const result = await this.api.retrieve({
      image_id: state.image,
      caption: state.caption,
      mode: state.mode,
      tinet_ids: state.tinets,
      k: state.k,
    });
    const errorBox = this.query<HTMLElement>('[data-role="error"]');
    const list = this.query<HTMLElement>('[data-role="results"]');
    if (result.kind === 'error') {
      errorBox.textContent = result.message;
      list.innerHTML = '';
      return;
    }
    errorBox.textContent = '';
    const gt = this.groundTruthFor(state.image, state.caption);
    list.innerHTML = result.hits.map((hit, index) =>
      this.resultCard(hit, index, gt.has(hit.image_id))).join('');
  }

  // ground truths for the current (reference, caption) pair, when the
  // loaded triplet file knows the query
  groundTruthFor(imageId: string, caption: string): Set<string> {
    const gt = new Set<string>();
    for (const t of this.triplets) {
      if (t.query_image_id === imageId &&
          t.relative_caption === caption) {
        for (const target of t.target_image_ids) gt.add(target);
      }
    }
    return gt;
  }

  private resultCard(hit: RetrieveHit, index: number, isGt: boolean): string {
    return `
      <li class="result${isGt ? ' ground-truth' : ''}"
          data-role="result" data-rank="${index + 1}"
          data-image-id="${hit.image_id}">
        <img src="${hit.thumbnail_url}" alt="${hit.image_id}">
        <span class="image-id">${hit.image_id}</span>
        <span class="score">${hit.score.toFixed(4)}</span>
        ${isGt ? '<span class="gt-badge">ground truth</span>' : ''}
      </li>`;
  }
}
