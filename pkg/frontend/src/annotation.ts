// Annotation view controller: one pending comment with parent context and
// dimension-tagged highlights, three label actions plus skip, and a metric
// strip that follows the server's evaluation cadence.

import { ApiError, MetricsSnapshot, NextComment, ServiceClient } from "./api.js";

export const LABEL_KEYS: Record<string, string> = {
  "1": "belief",
  "2": "dissonance",
  "3": "neutral",
  s: "skip",
};

export interface AnnotationViewState {
  current: NextComment | null;
  metrics: MetricsSnapshot | null;
  status: string;
  busy: boolean;
}

export class AnnotationController {
  state: AnnotationViewState = { current: null, metrics: null, status: "", busy: false };
  onChange: (state: AnnotationViewState) => void = () => {};

  constructor(private readonly client: ServiceClient) {}

  private emit(): void {
    this.onChange(this.state);
  }

  async start(): Promise<void> {
    await this.refreshMetrics();
    await this.fetchNext();
  }

  async fetchNext(): Promise<void> {
    this.state.current = await this.client.next();
    if (this.state.current.exhausted) {
      this.state.status = "pool exhausted";
    }
    this.emit();
  }

  async refreshMetrics(): Promise<void> {
    this.state.metrics = await this.client.metrics();
    this.emit();
  }

  /** Submit a label (or skip) for the pending comment, then optimistically
   * fetch the next one. A 409 means the server moved on: refetch and keep
   * the operator's place. */
  async act(action: string): Promise<void> {
    const pending = this.state.current?.comment_id;
    if (!pending || this.state.busy) return;
    this.state.busy = true;
    this.emit();
    const before = this.state.metrics?.history.length ?? 0;
    try {
      if (action === "skip") {
        await this.client.skip(pending);
      } else {
        await this.client.label(pending, action);
      }
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.state.status = "comment was no longer pending; refetched";
      } else {
        this.state.status = `request failed: ${String(error)}`;
        this.state.busy = false;
        this.emit();
        return;
      }
    }
    this.state.busy = false;
    await this.fetchNext();
    await this.refreshMetrics();
    const after = this.state.metrics?.history.length ?? 0;
    if (after > before) {
      this.state.status = `metrics updated at ${this.state.metrics?.n_labels} labels`;
      this.emit();
    }
  }

  keyboard(key: string): Promise<void> | undefined {
    const action = LABEL_KEYS[key];
    if (!action) return undefined;
    return this.act(action);
  }

  /** Latest metric-strip points: one per server evaluation. */
  strip(): { n: number; adjusted: number | null }[] {
    const history = this.state.metrics?.history ?? [];
    return history.map((entry) => ({
      n: entry.n_labels,
      adjusted: entry.cv?.adjusted_balanced_accuracy ?? null,
    }));
  }
}
