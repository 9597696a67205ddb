// Wire types for the annotation API. These mirror the server's JSON
// exactly; field names are the contract, not a style choice.

export interface WireBox {
  class: string;
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface PendingFailure {
  id: string;
  event_id: string;
  trial: number;
  task: string;
  reason: string;
  class_labels: string[];
  created_at_s: number;
  image_ids: string[];
  images: string[];
  vocabulary: string[];
}

export interface AnnotationSubmission {
  id: string;
  image_id: string;
  boxes?: WireBox[];
  true_negative?: boolean;
}

export interface SubmissionAck {
  id: string;
  example_id: string;
  clicks: number;
}

export interface ServerStatus {
  phase: string;
  trial: number;
  pending: number;
  events_total: number;
  annotations_total: number;
  examples: number;
  clicks: number;
  annotation_seconds: number;
  vocabulary: string[];
}
