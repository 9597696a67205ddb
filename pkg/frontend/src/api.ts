import {
  AnnotationSubmission,
  PendingFailure,
  ServerStatus,
  SubmissionAck,
} from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class AnnotationApi {
  constructor(private readonly base: string = "") {}

  async listPending(): Promise<PendingFailure[]> {
    return this.getJson<PendingFailure[]>("/failures");
  }

  async status(): Promise<ServerStatus> {
    return this.getJson<ServerStatus>("/status");
  }

  // Pending failures carry server-relative image paths; prepend the host.
  imageUrl(failure: PendingFailure, index = 0): string {
    return `${this.base}${failure.images[index]}`;
  }

  async submit(sub: AnnotationSubmission): Promise<SubmissionAck> {
    const resp = await fetch(this.url("/annotations"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(sub),
    });
    const body = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, body.error ?? `HTTP ${resp.status}`);
    }
    return body as SubmissionAck;
  }

  private url(path: string): string {
    return `${this.base}/api/v1${path}`;
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.url(path));
    if (!resp.ok) {
      throw new ApiError(resp.status, `HTTP ${resp.status}`);
    }
    return (await resp.json()) as T;
  }
}
