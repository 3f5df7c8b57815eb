// Lexicon-expansion view controller: dimension tabs with phrase chips, a
// debounced search box, and a suggestion panel with evidence comments. All
// state is a projection of the server; every mutation refetches.

import { ApiError, ServiceClient, SuggestResult } from "./api.js";

export interface LexiconViewState {
  dimensions: Record<string, string[]>;
  activeDimension: string | null;
  query: string;
  suggestions: SuggestResult | null;
  status: string;
}

export class LexiconController {
  state: LexiconViewState = {
    dimensions: {},
    activeDimension: null,
    query: "",
    suggestions: null,
    status: "",
  };
  onChange: (state: LexiconViewState) => void = () => {};

  private debounceHandle: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly client: ServiceClient,
    private readonly debounceMs = 250,
  ) {}

  private emit(): void {
    this.onChange(this.state);
  }

  async refreshLexicon(): Promise<void> {
    const snapshot = await this.client.getLexicon();
    this.state.dimensions = snapshot.dimensions;
    const names = Object.keys(snapshot.dimensions).sort();
    if (!this.state.activeDimension || !names.includes(this.state.activeDimension)) {
      this.state.activeDimension = names[0] ?? null;
    }
    this.emit();
  }

  selectDimension(name: string): void {
    this.state.activeDimension = name;
    this.emit();
  }

  /** Debounced search-box input; empty input shows the lexicon-driven list. */
  setQuery(query: string): void {
    this.state.query = query;
    if (this.debounceHandle !== null) clearTimeout(this.debounceHandle);
    this.debounceHandle = setTimeout(() => {
      this.debounceHandle = null;
      void this.search();
    }, this.debounceMs);
  }

  async search(): Promise<void> {
    const query = this.state.query.trim();
    try {
      this.state.suggestions = await this.client.suggest(query === "" ? null : query);
      this.state.status = this.state.suggestions.items.length
        ? ""
        : "no similar phrases";
    } catch (error) {
      if (error instanceof ApiError && error.status === 404) {
        this.state.suggestions = error.detail as SuggestResult;
        this.state.status = "no exact match; did you mean one of these?";
      } else {
        this.state.status = `request failed: ${String(error)}`;
      }
    }
    this.emit();
  }

  /** Accept into the given dimension (defaults to the active tab), then
   * refresh chips and re-rank suggestions so the accepted phrase vanishes. */
  async accept(phrase: string, dimension?: string): Promise<void> {
    const dim = dimension ?? this.state.activeDimension;
    if (!dim) {
      this.state.status = "pick a dimension first";
      this.emit();
      return;
    }
    try {
      const result = await this.client.accept(phrase, [dim]);
      this.state.status = result.added
        ? `added ${result.phrase} to ${dim}`
        : `${result.phrase} is already in the lexicon`;
    } catch (error) {
      this.state.status =
        error instanceof ApiError && error.status === 404
          ? `unknown phrase ${phrase}`
          : `request failed: ${String(error)}`;
      this.emit();
      return;
    }
    await this.refreshLexicon();
    await this.search();
  }

  async reject(phrase: string): Promise<void> {
    await this.client.reject(phrase);
    this.state.status = `rejected ${phrase} for this session`;
    await this.search();
  }

  chips(): { dimension: string; phrases: string[] }[] {
    return Object.keys(this.state.dimensions)
      .sort()
      .map((dimension) => ({
        dimension,
        phrases: [...this.state.dimensions[dimension]].sort(),
      }));
  }
}
