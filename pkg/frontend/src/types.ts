/**
 * Wire types for the reader-study HTTP API.
 *
 * Deliberately mirrors only the documented payload fields: there is no
 * `source` field anywhere in these types, so provenance can never be
 * requested or rendered by this client.
 */

export type TaskName = 'realism' | 'helpfulness';

export interface TaskOption {
  value: number;
  label: string;
}

export interface TaskSpec {
  task: TaskName;
  options: TaskOption[];
}

export interface ItemPayload {
  item_id: string;
  image_url: string;
  overlay_url: string | null;
  tasks: TaskSpec[];
}

export interface Progress {
  answered: number;
  total: number;
}

export interface NextResponse {
  done: boolean;
  item: ItemPayload | null;
  progress: Progress;
}

export interface SubmitBody {
  item_id: string;
  task: TaskName;
  value: number;
}

export interface SubmitAck {
  ok: boolean;
  timestamp: string;
}
