import type { LabelDto, TaskDto } from './types.js';

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client for the annotation service HTTP API. */
export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const body = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const err = body as { code?: string; message?: string };
      throw new ApiError(resp.status, err.code ?? 'unknown', err.message ?? resp.statusText);
    }
    return body;
  }

  async health(): Promise<boolean> {
    try {
      const body = (await this.request('/api/health')) as { status?: string };
      return body.status === 'ok';
    } catch {
      return false;
    }
  }

  async getTasks(project: string, annotator: string, limit: number): Promise<TaskDto[]> {
    const params = new URLSearchParams({ annotator, limit: String(limit) });
    return (await this.request(
      `/api/projects/${encodeURIComponent(project)}/tasks?${params}`,
    )) as TaskDto[];
  }

  /** Returns the number of labels the server actually accepted (duplicates
   * are silently dropped server-side, so resubmission yields 0). */
  async submitLabels(labels: LabelDto[]): Promise<number> {
    const body = (await this.request('/api/labels', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(labels),
    })) as { accepted: number };
    return body.accepted;
  }

  /** Server-side labeled-pair count for the project (progress source of truth). */
  async labeledPairCount(project: string): Promise<number> {
    const body = (await this.request(
      `/api/projects/${encodeURIComponent(project)}/export/split2`,
    )) as { pairs: unknown[] };
    return body.pairs.length;
  }
}
