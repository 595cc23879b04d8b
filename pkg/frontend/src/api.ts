/**
 * Typed client for the rating service HTTP API.
 *
 * All numeric rating levels pass through verbatim: the client never
 * rounds, rescales or otherwise transforms what the caller provides.
 */

export interface PairPayload {
  /** True when this rater has no unrated pairs left. */
  done: boolean;
  image_id?: string;
  healthy?: boolean;
  /** Panel name -> image URL (reference, synthesized, error map, k-space). */
  panels?: Record<string, string>;
  remaining?: number;
  /** The 10-level rating scale, as served by the backend. */
  levels?: number[];
  rated?: number;
}

export interface SubmitResult {
  stored: boolean;
  image_id: string;
  rater_id: string;
  level: number;
}

export interface AggregateResult {
  image_id: string;
  level: number;
  count: number;
}

export interface ApiError {
  error: string;
  message: string;
}

export class RequestFailed extends Error {
  constructor(
    readonly status: number,
    readonly body: ApiError | null,
  ) {
    super(body ? `${body.error}: ${body.message}` : `request failed (${status})`);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let body: ApiError | null = null;
    try {
      body = (await response.json()) as ApiError;
    } catch {
      body = null;
    }
    throw new RequestFailed(response.status, body);
  }
  return (await response.json()) as T;
}

export class RatingApi {
  constructor(readonly baseUrl: string = "") {}

  async nextPair(raterId: string): Promise<PairPayload> {
    const params = new URLSearchParams({ rater: raterId });
    return asJson(await fetch(`${this.baseUrl}/api/pairs/next?${params}`));
  }

  async submitRating(imageId: string, raterId: string, level: number): Promise<SubmitResult> {
    return asJson(
      await fetch(`${this.baseUrl}/api/ratings`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ image_id: imageId, rater_id: raterId, level }),
      }),
    );
  }

  async aggregate(imageId: string): Promise<AggregateResult> {
    return asJson(await fetch(`${this.baseUrl}/api/images/${imageId}/aggregate`));
  }
}
