/**
 * Typed client for the sparseqa HTTP service.
 *
 * This is a pure transport layer: every number it returns (scores, ranks,
 * token counts, latency) is echoed from the server verbatim. Nothing is
 * scored, parsed, or recomputed client-side.
 */

export interface DocumentSummary {
  doc_id: string;
  source: string;
  n_text: number;
  m_image: number;
}

export interface TextChunkView {
  chunk_id: string;
  order: number;
  modality: "text";
  section: string[];
  text: string;
}

export interface ImageChunkView {
  chunk_id: string;
  order: number;
  modality: "image";
  caption: string;
  label: string | null;
  blob_hash: string;
}

export type ChunkView = TextChunkView | ImageChunkView;

export interface DocumentDetail {
  doc_id: string;
  source: string;
  chunks: ChunkView[];
}

export interface EvidenceItem {
  chunk_id: string;
  modality: "text" | "image";
  score: number;
  rank: number;
  content_preview: string;
  blob_hash?: string;
}

export interface AskResponse {
  answer: string;
  evidence: EvidenceItem[];
  prompt_tokens: number;
  latency_ms: number;
  backend_id: string;
}

export interface IngestRequest {
  name?: string;
  content: string;
  blobs?: Record<string, string>;
}

/** Error taxonomy echoed by the service; `errorType` is the server-side
 * exception class name. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly errorType: string,
    readonly detail: string,
  ) {
    super(`${errorType} (${status}): ${detail}`);
  }
}

/** Human-readable, actionable message per service error response. */
export function describeError(err: unknown): string {
  if (!(err instanceof ApiError)) {
    return err instanceof Error ? err.message : String(err);
  }
  switch (err.status) {
    case 404:
      return "Document not found — it may have been removed. Reload the document list.";
    case 422:
      return `The document or request was rejected as invalid: ${err.detail}`;
    case 502:
      return "The answering backend or embedding provider is unavailable. Try again shortly.";
    case 507:
      return "The embedding cache is missing vectors for this document. Re-ingest it to rebuild the cache.";
    default:
      return `Service error: ${err.detail}`;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class Client {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.base + path, init);
    if (!res.ok) {
      let errorType = "HttpError";
      let detail = res.statusText;
      try {
        const body = (await res.json()) as { error?: string; detail?: string };
        errorType = body.error ?? errorType;
        detail = body.detail ?? detail;
      } catch {
        /* non-JSON error body: keep the status text */
      }
      throw new ApiError(res.status, errorType, detail);
    }
    return (await res.json()) as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("/health");
  }

  async listDocuments(): Promise<DocumentSummary[]> {
    const body = await this.request<{ documents: DocumentSummary[] }>("/documents");
    return body.documents;
  }

  getDocument(docId: string): Promise<DocumentDetail> {
    return this.request(`/documents/${encodeURIComponent(docId)}`);
  }

  ingest(req: IngestRequest): Promise<{ doc_id: string }> {
    return this.request("/documents", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
  }

  ask(docId: string, question: string, k?: number): Promise<AskResponse> {
    return this.request(`/documents/${encodeURIComponent(docId)}/ask`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ question, k: k ?? null }),
    });
  }

  /** URL for an image evidence blob; the browser fetches it directly. */
  blobUrl(docId: string, blobHash: string): string {
    return `${this.base}/documents/${encodeURIComponent(docId)}/blobs/${encodeURIComponent(blobHash)}`;
  }
}
