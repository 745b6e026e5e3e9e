// Review state and payload builders, kept free of DOM so the decision
// payloads are contract-testable byte for byte against the HTTP schema.

import type { Decision, ReviewItem, SubmitOptions, Verdict } from "./types.js";

export interface ItemEdit {
  verdict: Verdict;
  patch?: Record<string, unknown>;
  note?: string;
}

/**
 * Serialize a decisions payload exactly as POST /sessions/{id}/decisions
 * expects it. Key order is fixed (item_id, verdict, corrected_value, note)
 * and optional fields are omitted when absent, so the same review always
 * produces the same bytes.
 */
export function buildDecisionsPayload(decisions: Decision[]): string {
  const rows = decisions.map((d) => {
    const row: Record<string, unknown> = {
      item_id: d.item_id,
      verdict: d.verdict,
    };
    if (d.corrected_value !== undefined) row.corrected_value = d.corrected_value;
    if (d.note !== undefined) row.note = d.note;
    return row;
  });
  return JSON.stringify({ decisions: rows });
}

export function buildSubmitPayload(opts: SubmitOptions): string {
  const body: Record<string, unknown> = {};
  if (opts.guidance !== undefined && opts.guidance.trim() !== "") body.guidance = opts.guidance;
  body.approve_remainder = opts.approve_remainder;
  body.request_another_round = opts.request_another_round;
  return JSON.stringify(body);
}

/** Thumbs-up maps to "correct"; thumbs-down opens the correction editor. */
export function verdictForThumb(up: boolean): Verdict {
  return up ? "correct" : "incorrect";
}

export class ReviewState {
  readonly items: ReviewItem[];
  private edits = new Map<string, ItemEdit>();
  private dirty = new Set<string>();
  approveRemainder = false;
  guidance = "";

  constructor(items: ReviewItem[]) {
    // hydrate from the service draft: verdicts saved earlier survive reloads
    this.items = items.map((i) => ({ ...i }));
  }

  verdictOf(itemId: string): Verdict {
    const edit = this.edits.get(itemId);
    if (edit) return edit.verdict;
    const item = this.items.find((i) => i.item_id === itemId);
    return item ? item.verdict : "unreviewed";
  }

  /** Record a local edit; it stays dirty until the autosave succeeds. */
  reviewItem(itemId: string, verdict: Verdict, patch?: Record<string, unknown>, note?: string): void {
    if (verdict === "incorrect" && patch === undefined && (note === undefined || note.trim() === "")) {
      throw new Error("incorrect verdicts need a correction or a note");
    }
    this.edits.set(itemId, { verdict, patch, note });
    this.dirty.add(itemId);
  }

  isDirty(itemId?: string): boolean {
    return itemId === undefined ? this.dirty.size > 0 : this.dirty.has(itemId);
  }

  markSaved(itemIds: string[]): void {
    for (const id of itemIds) {
      this.dirty.delete(id);
      const edit = this.edits.get(id);
      const item = this.items.find((i) => i.item_id === id);
      if (edit && item) {
        item.verdict = edit.verdict;
        item.corrected_value = (edit.patch as ReviewItem["corrected_value"]) ?? null;
        item.note = edit.note ?? null;
      }
    }
  }

  unreviewedCount(): number {
    return this.items.filter((i) => this.verdictOf(i.item_id) === "unreviewed").length;
  }

  /** Submit stays disabled until every item has a verdict or the remainder is approved. */
  canSubmit(): boolean {
    return this.unreviewedCount() === 0 || this.approveRemainder;
  }

  decisionFor(itemId: string): Decision | null {
    const edit = this.edits.get(itemId);
    if (!edit) return null;
    const decision: Decision = { item_id: itemId, verdict: edit.verdict };
    if (edit.patch !== undefined) decision.corrected_value = edit.patch;
    if (edit.note !== undefined && edit.note.trim() !== "") decision.note = edit.note;
    return decision;
  }

  /** Decisions not yet acknowledged by the service, in item order. */
  pendingDecisions(): Decision[] {
    const out: Decision[] = [];
    for (const item of this.items) {
      if (this.dirty.has(item.item_id)) {
        const d = this.decisionFor(item.item_id);
        if (d) out.push(d);
      }
    }
    return out;
  }

  /** Every decision made in this state, in item order (for the contract test). */
  allDecisions(): Decision[] {
    const out: Decision[] = [];
    for (const item of this.items) {
      const d = this.decisionFor(item.item_id);
      if (d) out.push(d);
    }
    return out;
  }
}
