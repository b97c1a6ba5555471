// In-memory stand-in for the retrieval/curation service. State lives in the
// instance, so building a second view against the same instance behaves like
// reconnecting to a restarted (but durable) backend.

import type {
  CurationPair,
  Decision,
  RetrieveHit,
  Triplet,
} from '../src/types.js';

export interface SeedPair {
  pair_id: string;
  target_id: string;
  candidate_id: string;
  similarity: number;
}

export class MockService {
  readonly verdictLog: { pair_id: string; decision: Decision }[] = [];
  readonly resolved = new Set<string>();
  retrieveHits: RetrieveHit[] = [];
  retrieveError: { status: number; message: string } | null = null;
  retrieveCalls: { body: Record<string, unknown> }[] = [];
  triplets: Triplet[] = [];
  images = [{ image_id: 'ref1', thumbnail_url: '/api/v1/thumbnails/ref1' }];
  tinets = ['text', 'vis'];

  constructor(private readonly pairs: SeedPair[]) {}

  private unresolved(): SeedPair[] {
    return this.pairs
      .filter((p) => !this.resolved.has(p.pair_id))
      .sort((a, b) => b.similarity - a.similarity ||
        a.pair_id.localeCompare(b.pair_id));
  }

  private json(body: unknown, status = 200): Response {
    return new Response(JSON.stringify(body), {
      status,
      headers: { 'Content-Type': 'application/json' },
    });
  }

  resolveDirectly(pairId: string, decision: Decision): void {
    this.resolved.add(pairId);
    this.verdictLog.push({ pair_id: pairId, decision });
  }

  readonly fetch = async (
    input: RequestInfo | URL,
    init?: RequestInit,
  ): Promise<Response> => {
    const url = String(input);
    if (url.includes('/curation/next')) {
      const queue = this.unresolved();
      if (queue.length === 0) return new Response(null, { status: 204 });
      const p = queue[0];
      const pair: CurationPair = {
        ...p,
        remaining: queue.length,
        image_urls: {
          target: `/api/v1/thumbnails/${p.target_id}`,
          candidate: `/api/v1/thumbnails/${p.candidate_id}`,
        },
      };
      return this.json(pair);
    }
    if (url.includes('/curation/verdict')) {
      const body = JSON.parse(String(init?.body));
      const pair = this.pairs.find((p) => p.pair_id === body.pair_id);
      if (!pair) return this.json({ error: 'unknown pair' }, 404);
      if (this.resolved.has(pair.pair_id)) {
        return this.json({ error: `pair ${pair.pair_id} already resolved` }, 409);
      }
      this.resolved.add(pair.pair_id);
      this.verdictLog.push({ pair_id: pair.pair_id, decision: body.decision });
      if (body.decision === 'accept') {
        for (const triplet of this.triplets) {
          if (triplet.target_image_ids.includes(pair.target_id) &&
              !triplet.target_image_ids.includes(pair.candidate_id)) {
            triplet.target_image_ids.push(pair.candidate_id);
          }
        }
      }
      return this.json({
        status: 'recorded',
        pair_id: pair.pair_id,
        decision: body.decision,
        remaining: this.unresolved().length,
      });
    }
    if (url.includes('/retrieve')) {
      this.retrieveCalls.push({ body: JSON.parse(String(init?.body)) });
      if (this.retrieveError) {
        return this.json({ error: this.retrieveError.message },
          this.retrieveError.status);
      }
      return this.json({ results: this.retrieveHits });
    }
    if (url.includes('/images')) return this.json({ images: this.images });
    if (url.includes('/tinets')) return this.json({ tinets: this.tinets });
    if (url.includes('/triplets')) return this.json({ triplets: this.triplets });
    return this.json({ error: `no such route ${url}` }, 404);
  };

  install(): void {
    globalThis.fetch = this.fetch as typeof fetch;
  }
}

export function threePairFixture(): MockService {
  return new MockService([
    { pair_id: 't1::c1', target_id: 't1', candidate_id: 'c1', similarity: 0.9 },
    { pair_id: 't2::c2', target_id: 't2', candidate_id: 'c2', similarity: 0.7 },
    { pair_id: 't3::c3', target_id: 't3', candidate_id: 'c3', similarity: 0.5 },
  ]);
}

export async function flush(): Promise<void> {
  for (let i = 0; i < 8; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}
