/** Rater session state machine.
 *
 * One in-flight submission at a time: while an answer is being sent, further
 * answers are ignored, so a double-click cannot produce two rows.  Failed
 * submissions are retried with backoff until the server acknowledges (or
 * reports a duplicate, which counts as delivered).  The only client-side
 * state is the worker token and the current trial.
 */

import { isDone, NextTask, RatingApi, TrialPayload } from "./api.js";

export type SessionState =
  | { kind: "loading" }
  | { kind: "trial"; trial: TrialPayload }
  | { kind: "done"; rated: number }
  | { kind: "error"; message: string; retry: () => void };

export interface SessionOptions {
  /** backoff between submit retries, milliseconds */
  retryDelayMs?: number;
  /** give up after this many network failures per submission */
  maxRetries?: number;
}

export class RaterSession {
  private state: SessionState = { kind: "loading" };
  private submitting = false;
  private listeners: ((s: SessionState) => void)[] = [];
  private retryDelayMs: number;
  private maxRetries: number;

  constructor(
    private api: RatingApi,
    private studyId: string,
    private worker: string,
    opts: SessionOptions = {},
  ) {
    this.retryDelayMs = opts.retryDelayMs ?? 800;
    this.maxRetries = opts.maxRetries ?? 10;
  }

  onChange(fn: (s: SessionState) => void): void {
    this.listeners.push(fn);
  }

  current(): SessionState {
    return this.state;
  }

  private setState(s: SessionState): void {
    this.state = s;
    for (const fn of this.listeners) {
      fn(s);
    }
  }

  async start(): Promise<void> {
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.setState({ kind: "loading" });
    let task: NextTask;
    try {
      task = await this.api.nextTask(this.studyId, this.worker);
    } catch (err) {
      this.setState({
        kind: "error",
        message: `could not reach the study server (${String(err)})`,
        retry: () => void this.advance(),
      });
      return;
    }
    if (isDone(task)) {
      this.setState({ kind: "done", rated: task.rated });
    } else {
      this.setState({ kind: "trial", trial: task });
    }
  }

  /** Submit the answer for the displayed trial, then advance. */
  async answer(value: string): Promise<void> {
    if (this.state.kind !== "trial" || this.submitting) {
      return; // nothing displayed, or a submission is already in flight
    }
    const trial = this.state.trial;
    this.submitting = true;
    try {
      let attempt = 0;
      for (;;) {
        try {
          await this.api.submitRating(this.studyId, this.worker, trial.trial_id, value);
          break; // accepted or duplicate: either way it is recorded exactly once
        } catch (err) {
          attempt += 1;
          if (attempt > this.maxRetries) {
            this.setState({
              kind: "error",
              message: `answer could not be delivered (${String(err)})`,
              retry: () => {
                this.setState({ kind: "trial", trial });
                void this.answer(value);
              },
            });
            return;
          }
          await sleep(this.retryDelayMs);
        }
      }
      await this.advance();
    } finally {
      this.submitting = false;
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
