// Curation view: one candidate pair at a time, keyboard-driven verdicts.
// Keys: a = accept, r = reject. The queue is served by the backend in
// similarity order; after a restart the session resumes at the first
// unresolved pair because verdicts are durable server-side.

import type { ApiClient } from './api.js';
import type { CurationPair, Decision } from './types.js';

export class CurationView {
  private pair: CurationPair | null = null;
  private busy = false;
  private readonly keyHandler = (ev: KeyboardEvent) => this.onKey(ev);

  constructor(
    private readonly container: HTMLElement,
    private readonly api: ApiClient,
    private readonly annotator: string = 'ui',
  ) {}

  async mount(): Promise<void> {
    document.addEventListener('keydown', this.keyHandler);
    await this.loadNext();
  }

  unmount(): void {
    document.removeEventListener('keydown', this.keyHandler);
  }

  private onKey(ev: KeyboardEvent): void {
    if (ev.key === 'a') void this.submit('accept');
    if (ev.key === 'r') void this.submit('reject');
  }

  async loadNext(): Promise<void> {
    const next = await this.api.nextPair();
    if (next.kind === 'empty') {
      this.pair = null;
      this.renderDone();
      return;
    }
    this.pair = next.pair;
    this.renderPair(next.pair);
  }

  async submit(decision: Decision): Promise<void> {
    if (!this.pair || this.busy) return;
    this.busy = true;
    try {
      const result = await this.api.postVerdict(
        this.pair.pair_id, decision, this.annotator);
      if (result.kind === 'conflict') {
        // someone already resolved this pair (e.g. another tab); say so
        // and move on rather than silently skipping
        this.renderNotice(`Pair already resolved: ${result.message}`);
        await this.loadNext();
        return;
      }
      if (result.kind === 'error') {
        this.renderNotice(`Verdict failed: ${result.message}`);
        return;
      }
      await this.loadNext();
    } finally {
      this.busy = false;
    }
  }

  private renderPair(pair: CurationPair): void {
    this.container.innerHTML = `
      <div class="curation">
        <p class="progress" data-role="progress">${pair.remaining} pair(s) left</p>
        <div class="pair">
          <figure>
            <img data-role="target" src="${pair.image_urls.target}" alt="target">
            <figcaption>target: ${pair.target_id}</figcaption>
          </figure>
          <figure>
            <img data-role="candidate" src="${pair.image_urls.candidate}" alt="candidate">
            <figcaption>candidate: ${pair.candidate_id}</figcaption>
          </figure>
        </div>
        <p class="similarity">similarity ${pair.similarity.toFixed(4)}</p>
        <p class="hint">press <b>a</b> to accept, <b>r</b> to reject</p>
        <div class="buttons">
          <button data-role="accept">accept (a)</button>
          <button data-role="reject">reject (r)</button>
        </div>
        <p class="notice" data-role="notice"></p>
      </div>`;
    this.button('accept').onclick = () => void this.submit('accept');
    this.button('reject').onclick = () => void this.submit('reject');
  }

  private renderDone(): void {
    this.container.innerHTML = `
      <div class="curation done">
        <p class="banner" data-role="done">Queue empty - all pairs resolved.</p>
      </div>`;
  }

  private renderNotice(text: string): void {
    const notice = this.container.querySelector<HTMLElement>(
      '[data-role="notice"]');
    if (notice) notice.textContent = text;
  }

  private button(role: string): HTMLButtonElement {
    const el = this.container.querySelector<HTMLButtonElement>(
      `button[data-role="${role}"]`);
    if (!el) throw new Error(`missing button ${role}`);
    return el;
  }
}
