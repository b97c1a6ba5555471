// API types for the /api/v1 surface.

export type QueryMode = 'image-only' | 'text-only' | 'avg' | 'composed';

export interface RetrieveRequest {
  image_id?: string;
  caption?: string;
  mode: QueryMode;
  tinet_ids?: string[];
  k: number;
}

export interface RetrieveHit {
  image_id: string;
  score: number;
  thumbnail_url: string;
}

export interface CurationPair {
  pair_id: string;
  target_id: string;
  candidate_id: string;
  similarity: number;
  remaining: number;
  image_urls: { target: string; candidate: string };
}

export type Decision = 'accept' | 'reject';

export interface VerdictResponse {
  status: string;
  pair_id: string;
  decision: Decision;
  remaining: number;
}

export interface Triplet {
  query_image_id: string;
  relative_caption: string;
  target_image_ids: string[];
}

export interface ImageEntry {
  image_id: string;
  thumbnail_url: string;
}
