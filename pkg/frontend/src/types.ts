/** Shared types mirroring the annotation service's JSON contract. */

export type Decision = "accept" | "reject" | "unsure" | "exclude";

export type ItemStatus =
  | "pending"
  | "accepted"
  | "rejected_pending_edit"
  | "modified"
  | "unsure_pending_md"
  | "excluded"
  | "denied"
  | "verified";

export interface ReviewItem {
  id: string;
  cls: string;
  image_ref: string;
  mask_ref: string;
  proposals: string[];
  status: ItemStatus;
  round_index: number;
  reviewer: string;
  md_note: string;
  decided_at: string;
  rerouted: boolean;
  verification_pending: boolean;
}

export interface QueuePage {
  items: ReviewItem[];
  total_pending: number;
}

export interface Progress {
  stage: string;
  round: number;
  champion: string | null;
  repository_size: number;
  pool_size: number;
  status_counts: Record<ItemStatus, number>;
  tallies: Record<string, number>;
}

export interface DecisionBody {
  decision: Decision;
  reviewer: string;
  mask?: string; // base64 P5 graymap
  note?: string;
}

export interface SelectBody {
  choice: number | "deny";
  reviewer: string;
}

export interface ConflictBody {
  conflict: true;
  idempotent?: boolean;
  item?: ReviewItem;
  detail?: string;
}

export interface ApiResponse<T> {
  ok: boolean;
  status: number;
  data: T;
}
