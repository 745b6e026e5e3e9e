// Wire types mirroring the review service's session payloads.

export type Verdict = "correct" | "incorrect" | "missing" | "unreviewed";

export interface ReviewItem {
  item_id: string;
  label: string;
  entity_type: string;
  chosen: Record<string, unknown> | null;
  judge_score: number | null;
  source_sentence: string;
  section_id: string;
  value: string | null;
  verdict: Verdict;
  corrected_value: Record<string, unknown> | null;
  note: string | null;
  added_by_reviewer: boolean;
}

export interface SessionSummary {
  session_id: string;
  run_id: string;
  task_id: string;
  model_name: string;
  status: "open" | "submitted" | "expired";
  opened_at: string;
  item_count: number;
  judge_mean: number | null;
}

export interface SessionDetail extends SessionSummary {
  items: ReviewItem[];
  guidance: string | null;
}

export interface Decision {
  item_id: string | null;
  verdict: Verdict;
  corrected_value?: Record<string, unknown>;
  note?: string;
}

export interface SubmitOptions {
  guidance?: string;
  approve_remainder: boolean;
  request_another_round: boolean;
}

export interface SubmitResponse {
  session_id: string;
  run_id: string;
  run_state: string;
}
