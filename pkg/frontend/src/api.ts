/** Typed client for the annotation service.
 *
 * Methods never throw on HTTP errors; they return the status code with
 * the parsed body so callers can handle 409 rollbacks explicitly.
 */

import type {
  ApiResponse,
  DecisionBody,
  Progress,
  QueuePage,
  ReviewItem,
  SelectBody,
} from "./types.js";

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<ApiResponse<T>> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const text = await response.text();
    const data = text ? JSON.parse(text) : null;
    return { ok: response.ok, status: response.status, data: data as T };
  }

  private post<T>(path: string, body: unknown): Promise<ApiResponse<T>> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getQueue(limit = 50): Promise<ApiResponse<QueuePage>> {
    return this.request<QueuePage>(`/api/queue?limit=${limit}`);
  }

  getItem(id: string): Promise<ApiResponse<ReviewItem>> {
    return this.request<ReviewItem>(`/api/items/${id}`);
  }

  async getMaskBytes(id: string, ref?: string): Promise<Uint8Array | null> {
    const query = ref ? `?ref=${encodeURIComponent(ref)}` : "";
    const response = await this.fetchImpl(`${this.baseUrl}/api/masks/${id}${query}`);
    if (!response.ok) return null;
    return new Uint8Array(await response.arrayBuffer());
  }

  postDecision(id: string, body: DecisionBody): Promise<ApiResponse<ReviewItem>> {
    return this.post<ReviewItem>(`/api/items/${id}/decision`, body);
  }

  postMdResolve(
    id: string,
    body: { note: string; mask: string; reviewer: string },
  ): Promise<ApiResponse<ReviewItem>> {
    return this.post<ReviewItem>(`/api/items/${id}/md-resolve`, body);
  }

  postFinalize(): Promise<ApiResponse<{ round: number; dataset_size: number }>> {
    return this.post(`/api/rounds/finalize`, {});
  }

  getProposals(id: string): Promise<ApiResponse<{ id: string; proposals: string[] }>> {
    return this.request(`/api/stage3/${id}/proposals`);
  }

  postSelect(id: string, body: SelectBody): Promise<ApiResponse<ReviewItem>> {
    return this.post<ReviewItem>(`/api/stage3/${id}/select`, body);
  }

  getProgress(): Promise<ApiResponse<Progress>> {
    return this.request<Progress>(`/api/progress`);
  }
}
