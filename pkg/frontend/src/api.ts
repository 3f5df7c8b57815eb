// Typed client over the service JSON API. The fetch function is injected so
// tests can drive the controllers against an in-memory service fixture.

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface Suggestion {
  phrase: string;
  score: number;
  evidence: string[];
}

export interface SuggestResult {
  kind: "suggestions" | "did_you_mean";
  query: string | null;
  items: Suggestion[];
}

export interface LexiconSnapshot {
  dimensions: Record<string, string[]>;
  provenance: Record<string, { kind: string }>;
  rejected: string[];
  artifacts: Record<string, string>;
}

export interface HighlightSpan {
  start: number;
  end: number;
  phrase: string;
  dimensions: string[];
}

export interface CommentRecord {
  id: string;
  body: string;
  author: string;
  score: number;
}

export interface NextComment {
  comment_id: string | null;
  exhausted: boolean;
  guidelines?: string;
  comment?: CommentRecord;
  parent?: CommentRecord | null;
  highlights?: HighlightSpan[];
  parent_highlights?: HighlightSpan[];
}

export interface ClassMetrics {
  precision: Record<string, number | null>;
  recall: Record<string, number | null>;
  balanced_accuracy: number | null;
  adjusted_balanced_accuracy: number | null;
}

export interface MetricsSnapshot {
  n_labels: number;
  n_skipped: number;
  eval_interval: number;
  tau: number;
  history: { n_labels: number; cv: ClassMetrics | null; holdout: ClassMetrics | null }[];
  stopped_at: number | null;
  complete: boolean;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(`service error ${status}`);
  }
}

export class ServiceClient {
  constructor(
    private readonly fetchFn: FetchLike,
    private readonly base: string = "",
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.base + path, init);
    const body = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, (body as { detail?: unknown }).detail);
    }
    return body as T;
  }

  getLexicon(): Promise<LexiconSnapshot> {
    return this.request("/lexicon");
  }

  suggest(query: string | null, n = 10): Promise<SuggestResult> {
    const params = new URLSearchParams();
    if (query !== null && query !== "") params.set("q", query);
    params.set("n", String(n));
    return this.request(`/lexicon/suggest?${params.toString()}`);
  }

  accept(phrase: string, dimensions: string[]): Promise<{ added: boolean; phrase: string }> {
    return this.request("/lexicon/accept", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ phrase, dimensions }),
    });
  }

  reject(phrase: string): Promise<{ rejected: string }> {
    return this.request("/lexicon/reject", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ phrase }),
    });
  }

  next(): Promise<NextComment> {
    return this.request("/annotate/next");
  }

  label(commentId: string, label: string): Promise<{ labeled: string; n_labels: number }> {
    return this.request("/annotate/label", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ comment_id: commentId, label }),
    });
  }

  skip(commentId: string): Promise<{ skipped: string }> {
    return this.request("/annotate/skip", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ comment_id: commentId }),
    });
  }

  metrics(): Promise<MetricsSnapshot> {
    return this.request("/annotate/metrics");
  }
}
