// Typed client for the retrieval/curation service. All state changes go
// through postVerdict; everything else is read-only.

import type {
  CurationPair,
  Decision,
  ImageEntry,
  RetrieveHit,
  RetrieveRequest,
  Triplet,
  VerdictResponse,
} from './types.js';

export type NextPairResult =
  | { kind: 'pair'; pair: CurationPair }
  | { kind: 'empty' };

export type VerdictResult =
  | { kind: 'recorded'; response: VerdictResponse }
  | { kind: 'conflict'; message: string }
  | { kind: 'error'; message: string };

export type RetrieveResult =
  | { kind: 'results'; hits: RetrieveHit[] }
  | { kind: 'error'; message: string };

async function errorMessage(resp: Response): Promise<string> {
  try {
    const body = await resp.json();
    return typeof body.error === 'string' ? body.error : resp.statusText;
  } catch {
    return resp.statusText;
  }
}

export class ApiClient {
  constructor(private readonly base: string = '/api/v1') {}

  async retrieve(request: RetrieveRequest): Promise<RetrieveResult> {
    const resp = await fetch(`${this.base}/retrieve`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(request),
    });
    if (!resp.ok) {
      return { kind: 'error', message: await errorMessage(resp) };
    }
    const body = await resp.json();
    return { kind: 'results', hits: body.results as RetrieveHit[] };
  }

  async nextPair(): Promise<NextPairResult> {
    const resp = await fetch(`${this.base}/curation/next`);
    if (resp.status === 204) {
      return { kind: 'empty' };
    }
    if (!resp.ok) {
      throw new Error(await errorMessage(resp));
    }
    return { kind: 'pair', pair: (await resp.json()) as CurationPair };
  }

  async postVerdict(
    pairId: string,
    decision: Decision,
    annotator = '',
  ): Promise<VerdictResult> {
    const resp = await fetch(`${this.base}/curation/verdict`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ pair_id: pairId, decision, annotator }),
    });
    if (resp.status === 409) {
      return { kind: 'conflict', message: await errorMessage(resp) };
    }
    if (!resp.ok) {
      return { kind: 'error', message: await errorMessage(resp) };
    }
    return { kind: 'recorded', response: (await resp.json()) as VerdictResponse };
  }

  async listImages(limit = 500): Promise<ImageEntry[]> {
    const resp = await fetch(`${this.base}/images?limit=${limit}`);
    if (!resp.ok) return [];
    return (await resp.json()).images as ImageEntry[];
  }

  async listTinets(): Promise<string[]> {
    const resp = await fetch(`${this.base}/tinets`);
    if (!resp.ok) return [];
    return (await resp.json()).tinets as string[];
  }

  async listTriplets(): Promise<Triplet[]> {
    const resp = await fetch(`${this.base}/triplets`);
    if (!resp.ok) return [];
    return (await resp.json()).triplets as Triplet[];
  }
}
