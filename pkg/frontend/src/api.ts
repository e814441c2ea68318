/** Typed client for the rating-service HTTP API. */

export interface TrialPayload {
  trial_id: string;
  design: "mors" | "avb" | "abx";
  media: string[];
  prompt: string;
  progress: { rated: number; total: number };
}

export interface DonePayload {
  done: true;
  rated: number;
}

export type NextTask = TrialPayload | DonePayload;

export type SubmitResult = "accepted" | "duplicate";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export function isDone(task: NextTask): task is DonePayload {
  return (task as DonePayload).done === true;
}

export class RatingApi {
  constructor(
    private base: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  mediaUrl(ref: string): string {
    return this.base + ref;
  }

  async nextTask(studyId: string, worker: string): Promise<NextTask> {
    const url = `${this.base}/studies/${encodeURIComponent(studyId)}/next?worker=${encodeURIComponent(worker)}`;
    const resp = await this.fetchImpl(url);
    if (!resp.ok) {
      throw new ApiError(resp.status, await errText(resp));
    }
    return (await resp.json()) as NextTask;
  }

  /** Resolves "duplicate" on 409 so a retried submission can advance. */
  async submitRating(
    studyId: string,
    worker: string,
    trialId: string,
    answer: string,
  ): Promise<SubmitResult> {
    const url = `${this.base}/studies/${encodeURIComponent(studyId)}/ratings`;
    const resp = await this.fetchImpl(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ worker, trial: trialId, answer }),
    });
    if (resp.status === 409) {
      return "duplicate";
    }
    if (!resp.ok) {
      throw new ApiError(resp.status, await errText(resp));
    }
    return "accepted";
  }
}

async function errText(resp: Response): Promise<string> {
  try {
    const doc = await resp.json();
    return typeof doc.error === "string" ? doc.error : resp.statusText;
  } catch {
    return resp.statusText;
  }
}
