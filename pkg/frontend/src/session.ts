/**
 * Rating session state machine for one rater.
 *
 * The queue is server-driven: a pair only leaves it once the service has
 * acknowledged the POST, so refreshing mid-session resumes at the first
 * unrated pair. Submission is optimistic for the user (input is accepted
 * immediately and the view advances on acknowledgment); if the POST fails
 * the current pair is restored and the pressed level kept for retry, so a
 * rating is never silently lost.
 */

import { PairPayload, RatingApi } from "./api.js";

export type SessionPhase = "idle" | "loading" | "rating" | "submitting" | "error" | "complete";

export interface PendingRating {
  imageId: string;
  level: number;
}

export class RatingSession {
  phase: SessionPhase = "idle";
  current: PairPayload | null = null;
  submittedCount = 0;
  lastError: string | null = null;
  pending: PendingRating | null = null;

  constructor(
    private readonly api: RatingApi,
    readonly raterId: string,
  ) {}

  /** Fetch the first (or next) unrated pair for this rater. */
  async advance(): Promise<void> {
    this.phase = "loading";
    try {
      const pair = await this.api.nextPair(this.raterId);
      if (pair.done) {
        this.current = null;
        this.phase = "complete";
      } else {
        this.current = pair;
        this.phase = "rating";
      }
      this.lastError = null;
    } catch (err) {
      this.phase = "error";
      this.lastError = String(err);
      throw err;
    }
  }

  async start(): Promise<void> {
    await this.advance();
  }

  /**
   * Submit the pressed level for the current pair. The level is posted
   * exactly as given - no rounding, no transformation.
   */
  async rate(level: number): Promise<void> {
    if (this.phase !== "rating" || this.current?.image_id === undefined) {
      throw new Error(`cannot rate in phase ${this.phase}`);
    }
    const snapshot = this.current;
    this.pending = { imageId: snapshot.image_id!, level };
    this.phase = "submitting";
    try {
      await this.api.submitRating(snapshot.image_id!, this.raterId, level);
    } catch (err) {
      // rollback: same pair stays current, pending kept for retry()
      this.current = snapshot;
      this.phase = "error";
      this.lastError = String(err);
      return;
    }
    this.submittedCount += 1;
    this.pending = null;
    await this.advance();
  }

  /** Re-send the rating that failed; no-op when nothing is pending. */
  async retry(): Promise<void> {
    if (this.pending === null) {
      if (this.phase === "error") {
        await this.advance();
      }
      return;
    }
    this.phase = "rating";
    const { level } = this.pending;
    await this.rate(level);
  }
}
