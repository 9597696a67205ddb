import { AnnotationApi, ApiError } from "./api.js";
import { BoxEditor } from "./canvas.js";
import { AnnotationSubmission, PendingFailure, SubmissionAck } from "./types.js";

// Client state: the pending queue, one selected failure, and its box
// editor. All transitions live here so they can be tested without a DOM;
// main.ts renders this state and forwards events.
export class AnnotationApp {
  failures: PendingFailure[] = [];
  selected: PendingFailure | null = null;
  imageIndex = 0;
  editor: BoxEditor | null = null;
  trueNegative = false;
  lastAck: SubmissionAck | null = null;
  lastError = "";
  submitting = false;

  constructor(private readonly api: AnnotationApi) {}

  // One poll tick: refresh the queue, drop a selection the server has
  // already resolved, and auto-select the oldest failure when idle.
  async refresh(): Promise<void> {
    this.failures = await this.api.listPending();
    if (
      this.selected !== null &&
      !this.failures.some((f) => f.id === this.selected!.id)
    ) {
      this.clearSelection();
    }
    if (this.selected === null && this.failures.length > 0) {
      this.select(this.failures[0].id);
    }
  }

  select(id: string): void {
    const failure = this.failures.find((f) => f.id === id);
    if (failure === undefined) {
      throw new Error(`no pending failure ${id}`);
    }
    this.selected = failure;
    this.imageIndex = 0;
    this.editor = null;
    this.trueNegative = false;
    this.lastError = "";
  }

  // Called by the image onload handler once natural dimensions are known.
  openEditor(width: number, height: number): BoxEditor {
    if (this.selected === null) {
      throw new Error("no failure selected");
    }
    this.editor = new BoxEditor(width, height, this.selected.vocabulary);
    return this.editor;
  }

  chooseImage(index: number): void {
    if (this.selected === null) {
      throw new Error("no failure selected");
    }
    if (index < 0 || index >= this.selected.image_ids.length) {
      throw new Error(`image index ${index} out of range`);
    }
    this.imageIndex = index;
    this.editor = null;
  }

  // A true negative asserts the classes are absent, so it wipes any boxes.
  setTrueNegative(on: boolean): void {
    this.trueNegative = on;
    if (on && this.editor !== null) {
      this.editor.clear();
    }
  }

  canSubmit(): boolean {
    if (this.selected === null || this.submitting) {
      return false;
    }
    if (this.trueNegative) {
      return true;
    }
    return this.editor !== null && this.editor.count > 0;
  }

  buildSubmission(): AnnotationSubmission {
    if (this.selected === null) {
      throw new Error("no failure selected");
    }
    const sub: AnnotationSubmission = {
      id: this.selected.id,
      image_id: this.selected.image_ids[this.imageIndex],
    };
    if (this.trueNegative) {
      sub.true_negative = true;
    } else {
      sub.boxes = this.editor === null ? [] : this.editor.boxes();
    }
    return sub;
  }

  // Submit the current annotation. On success or 409 (someone else got
  // there first) the failure leaves the local queue; on 422 the selection
  // stays so the user can fix the boxes.
  async submit(): Promise<SubmissionAck | null> {
    if (!this.canSubmit()) {
      throw new Error("nothing valid to submit");
    }
    const sub = this.buildSubmission();
    this.submitting = true;
    try {
      const ack = await this.api.submit(sub);
      this.lastAck = ack;
      this.lastError = "";
      this.removeFailure(sub.id);
      return ack;
    } catch (err) {
      if (err instanceof ApiError) {
        this.lastError = `${err.status}: ${err.message}`;
        if (err.status === 409) {
          this.removeFailure(sub.id);
        }
        return null;
      }
      throw err;
    } finally {
      this.submitting = false;
    }
  }

  private removeFailure(id: string): void {
    this.failures = this.failures.filter((f) => f.id !== id);
    if (this.selected !== null && this.selected.id === id) {
      this.clearSelection();
    }
  }

  private clearSelection(): void {
    this.selected = null;
    this.editor = null;
    this.imageIndex = 0;
    this.trueNegative = false;
  }
}
