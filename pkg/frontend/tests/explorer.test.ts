import { beforeEach, describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { ExplorerView } from '../src/explorer.js';
import { flush, threePairFixture } from './mock_service.js';

function hits(ids: string[]): { image_id: string; score: number;
                                thumbnail_url: string }[] {
  return ids.map((id, i) => ({
    image_id: id,
    score: 0.9 - i * 0.1,
    thumbnail_url: `/api/v1/thumbnails/${id}`,
  }));
}

async function mountExplorer(service: ReturnType<typeof threePairFixture>) {
  service.install();
  document.body.innerHTML = '<main id="c"></main>';
  const container = document.getElementById('c') as HTMLElement;
  const view = new ExplorerView(container, new ApiClient());
  await view.mount();
  return { container, view };
}

function submitSearch(container: HTMLElement): void {
  container.querySelector<HTMLFormElement>('[data-role="query-form"]')!
    .dispatchEvent(new Event('submit', { cancelable: true }));
}

describe('retrieval explorer', () => {
  let service: ReturnType<typeof threePairFixture>;

  beforeEach(() => {
    service = threePairFixture();
  });

  it('renders results in exactly the API response order', async () => {
    // deliberately not score-sorted: the UI must not reorder
    service.retrieveHits = [
      { image_id: 'z9', score: 0.2, thumbnail_url: '/t/z9' },
      { image_id: 'a1', score: 0.9, thumbnail_url: '/t/a1' },
      { image_id: 'm5', score: 0.5, thumbnail_url: '/t/m5' },
    ];
    const { container } = await mountExplorer(service);
    submitSearch(container);
    await flush();
    const rendered = Array.from(
      container.querySelectorAll('[data-role="result"]'),
    ).map((el) => el.getAttribute('data-image-id'));
    expect(rendered).toEqual(['z9', 'a1', 'm5']);
    const ranks = Array.from(
      container.querySelectorAll('[data-role="result"]'),
    ).map((el) => el.getAttribute('data-rank'));
    expect(ranks).toEqual(['1', '2', '3']);
  });

  it('switching mode re-queries without a reload', async () => {
    service.retrieveHits = hits(['a', 'b']);
    const { container } = await mountExplorer(service);
    const modeSelect = container.querySelector<HTMLSelectElement>(
      '[data-role="mode"]')!;
    // before any search, changing mode must not fire a query
    modeSelect.value = 'text-only';
    modeSelect.dispatchEvent(new Event('change'));
    await flush();
    expect(service.retrieveCalls.length).toBe(0);

    submitSearch(container);
    await flush();
    expect(service.retrieveCalls.length).toBe(1);

    modeSelect.value = 'avg';
    modeSelect.dispatchEvent(new Event('change'));
    await flush();
    expect(service.retrieveCalls.length).toBe(2);
    expect(service.retrieveCalls[1].body.mode).toBe('avg');
  });

  it('shows API validation errors inline', async () => {
    service.retrieveError = { status: 400, message: 'caption required' };
    const { container } = await mountExplorer(service);
    submitSearch(container);
    await flush();
    expect(container.querySelector('[data-role="error"]')!.textContent)
      .toBe('caption required');
    expect(container.querySelectorAll('[data-role="result"]').length).toBe(0);
  });

  it('highlights ground truths from the loaded triplet file', async () => {
    service.triplets = [{
      query_image_id: 'ref1',
      relative_caption: 'a red coat',
      target_image_ids: ['hit2'],
    }];
    service.retrieveHits = hits(['hit1', 'hit2', 'hit3']);
    const { container } = await mountExplorer(service);
    container.querySelector<HTMLInputElement>('[data-role="caption"]')!
      .value = 'a red coat';
    submitSearch(container);
    await flush();
    const cards = Array.from(
      container.querySelectorAll('[data-role="result"]'));
    const flagged = cards.filter((c) => c.classList.contains('ground-truth'))
      .map((c) => c.getAttribute('data-image-id'));
    expect(flagged).toEqual(['hit2']);
  });

  it('passes form state through to the API body', async () => {
    service.retrieveHits = hits(['a']);
    const { container } = await mountExplorer(service);
    container.querySelector<HTMLInputElement>('[data-role="caption"]')!
      .value = 'blue jacket';
    const modeSelect = container.querySelector<HTMLSelectElement>(
      '[data-role="mode"]')!;
    modeSelect.value = 'composed';
    const tinets = container.querySelector<HTMLSelectElement>(
      '[data-role="tinets"]')!;
    tinets.options[0].selected = true;
    submitSearch(container);
    await flush();
    expect(service.retrieveCalls[0].body).toMatchObject({
      image_id: 'ref1',
      caption: 'blue jacket',
      mode: 'composed',
      tinet_ids: ['text'],
      k: 10,
    });
  });
});
