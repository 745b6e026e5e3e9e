// DOM wiring for the review console: session list, item table with
// thumbs-up/down verdicts, inline correction editor, draft autosave,
// gated submit, export download.

import { ApiClient, ApiError } from "./api.js";
import { ReviewState, verdictForThumb } from "./state.js";
import type { ReviewItem, SessionSummary } from "./types.js";

export class App {
  private state: ReviewState | null = null;
  private sessionId: string | null = null;
  private banner: HTMLElement;
  private root: HTMLElement;

  constructor(private api: ApiClient, container: HTMLElement) {
    container.innerHTML = `
      <header>
        <h1>quarry review console</h1>
        <div id="banner" class="banner hidden"></div>
      </header>
      <main id="root"></main>`;
    this.banner = container.querySelector("#banner") as HTMLElement;
    this.root = container.querySelector("#root") as HTMLElement;

    window.addEventListener("hashchange", () => this.route());
    window.addEventListener("beforeunload", (e) => {
      // dirty edits never leave the page without confirmation
      if (this.state && this.state.isDirty()) {
        e.preventDefault();
        e.returnValue = "";
      }
    });
  }

  async route(): Promise<void> {
    const hash = window.location.hash;
    const match = hash.match(/^#\/session\/(.+)$/);
    if (match) {
      await this.showSession(match[1]);
    } else {
      await this.showSessionList();
    }
  }

  private showError(e: unknown, retry: () => void): void {
    const message = e instanceof ApiError ? e.message : String(e);
    this.banner.classList.remove("hidden");
    this.banner.innerHTML = "";
    this.banner.append(`error: ${message} `);
    const button = document.createElement("button");
    button.textContent = "retry";
    button.onclick = () => {
      this.banner.classList.add("hidden");
      retry();
    };
    this.banner.append(button);
  }

  // -- session list ----------------------------------------------------------

  async showSessionList(): Promise<void> {
    this.state = null;
    this.sessionId = null;
    let sessions: SessionSummary[];
    try {
      sessions = await this.api.listOpenSessions();
    } catch (e) {
      this.showError(e, () => void this.showSessionList());
      return;
    }
    const rows = sessions
      .map(
        (s) => `
        <tr>
          <td><a href="#/session/${s.session_id}">${s.session_id}</a></td>
          <td>${s.run_id}</td><td>${s.task_id}</td><td>${s.model_name}</td>
          <td>${s.item_count}</td>
          <td>${s.judge_mean === null ? "–" : s.judge_mean.toFixed(3)}</td>
        </tr>`
      )
      .join("");
    this.root.innerHTML = `
      <h2>Open sessions</h2>
      ${sessions.length === 0 ? "<p>No runs are waiting for review.</p>" : ""}
      <table class="sessions">
        <thead><tr><th>session</th><th>run</th><th>task</th><th>model</th><th>items</th><th>judge mean</th></tr></thead>
        <tbody>${rows}</tbody>
      </table>`;
  }

  // -- one session ----------------------------------------------------------

  async showSession(sessionId: string): Promise<void> {
    if (this.state && this.state.isDirty() && !window.confirm("Discard unsaved edits?")) {
      return;
    }
    let detail;
    try {
      detail = await this.api.getSession(sessionId);
    } catch (e) {
      this.showError(e, () => void this.showSession(sessionId));
      return;
    }
    this.sessionId = sessionId;
    this.state = new ReviewState(detail.items);

    this.root.innerHTML = `
      <h2>Session ${detail.session_id}</h2>
      <p class="meta">run ${detail.run_id} · task ${detail.task_id} · model ${detail.model_name}
         · ${detail.items.length} items</p>
      <table class="items">
        <thead><tr>
          <th>label</th><th>type</th><th>concept</th><th>score</th><th>sentence</th><th>section</th><th>verdict</th><th></th>
        </tr></thead>
        <tbody id="item-rows"></tbody>
      </table>
      <section class="submit-box">
        <label>Guidance for the feedback agent (optional)
          <textarea id="guidance" rows="2"></textarea>
        </label>
        <label><input type="checkbox" id="approve-remainder"> approve remainder (unreviewed items count as correct)</label>
        <label><input type="checkbox" id="another-round"> request another review round</label>
        <div>
          <button id="submit" disabled>Submit review</button>
          <a id="export" href="${this.api.exportUrl(sessionId)}" download>download review file</a>
          <span id="progress"></span>
        </div>
      </section>`;

    const tbody = this.root.querySelector("#item-rows") as HTMLElement;
    for (const item of detail.items) tbody.append(this.renderItem(item));

    const approve = this.root.querySelector("#approve-remainder") as HTMLInputElement;
    approve.onchange = () => {
      this.state!.approveRemainder = approve.checked;
      this.refreshGate();
    };
    const another = this.root.querySelector("#another-round") as HTMLInputElement;
    const guidance = this.root.querySelector("#guidance") as HTMLTextAreaElement;
    const submit = this.root.querySelector("#submit") as HTMLButtonElement;
    submit.onclick = () => void this.submit(guidance.value, another.checked);
    this.refreshGate();
  }

  private renderItem(item: ReviewItem): HTMLElement {
    const tr = document.createElement("tr");
    tr.dataset.itemId = item.item_id;
    const concept = item.chosen ? String(item.chosen["curie"] ?? "") : "–";
    tr.innerHTML = `
      <td class="label">${item.label}</td>
      <td>${item.entity_type}</td>
      <td>${concept}</td>
      <td>${item.judge_score === null ? "–" : item.judge_score.toFixed(2)}</td>
      <td class="sentence">${item.source_sentence}</td>
      <td>${item.section_id}</td>
      <td class="verdict">${item.verdict}</td>
      <td class="controls">
        <button class="thumb up" title="correct">👍</button>
        <button class="thumb down" title="incorrect (opens correction editor)">👎</button>
      </td>`;
    (tr.querySelector(".thumb.up") as HTMLButtonElement).onclick = () => {
      this.review(item.item_id, tr, true);
    };
    (tr.querySelector(".thumb.down") as HTMLButtonElement).onclick = () => {
      this.openEditor(item, tr);
    };
    return tr;
  }

  private review(itemId: string, tr: HTMLElement, up: boolean, patch?: Record<string, unknown>, note?: string): void {
    if (!this.state || !this.sessionId) return;
    this.state.reviewItem(itemId, verdictForThumb(up), patch, note);
    (tr.querySelector(".verdict") as HTMLElement).textContent = this.state.verdictOf(itemId);
    this.refreshGate();
    void this.autosave();
  }

  /** Thumbs-down opens the inline correction editor for that row. */
  private openEditor(item: ReviewItem, tr: HTMLElement): void {
    const existing = tr.nextElementSibling;
    if (existing && existing.classList.contains("editor-row")) existing.remove();
    const editor = document.createElement("tr");
    editor.className = "editor-row";
    editor.innerHTML = `
      <td colspan="8">
        <label>corrected label <input class="patch-label" value="${item.label}"></label>
        <label>note <input class="patch-note" placeholder="why is this incorrect?"></label>
        <button class="apply">mark incorrect</button>
        <button class="cancel">cancel</button>
      </td>`;
    (editor.querySelector(".apply") as HTMLButtonElement).onclick = () => {
      const label = (editor.querySelector(".patch-label") as HTMLInputElement).value;
      const note = (editor.querySelector(".patch-note") as HTMLInputElement).value;
      const patch = label !== item.label ? { label } : undefined;
      if (patch === undefined && note.trim() === "") {
        window.alert("An incorrect verdict needs a corrected value or a note.");
        return;
      }
      this.review(item.item_id, tr, false, patch, note.trim() === "" ? undefined : note);
      editor.remove();
    };
    (editor.querySelector(".cancel") as HTMLButtonElement).onclick = () => editor.remove();
    tr.after(editor);
  }

  /** Draft autosave: every edit posts its decision; failures keep it dirty. */
  private async autosave(): Promise<void> {
    if (!this.state || !this.sessionId) return;
    const pending = this.state.pendingDecisions();
    if (pending.length === 0) return;
    try {
      await this.api.postDecisions(this.sessionId, pending);
      this.state.markSaved(pending.map((d) => d.item_id!).filter(Boolean));
    } catch (e) {
      this.showError(e, () => void this.autosave());
    }
    this.refreshGate();
  }

  private refreshGate(): void {
    if (!this.state) return;
    const submit = this.root.querySelector("#submit") as HTMLButtonElement | null;
    const progress = this.root.querySelector("#progress") as HTMLElement | null;
    if (submit) submit.disabled = !this.state.canSubmit();
    if (progress) {
      const left = this.state.unreviewedCount();
      const dirty = this.state.isDirty() ? " · saving…" : "";
      progress.textContent = left === 0 ? `all reviewed${dirty}` : `${left} unreviewed${dirty}`;
    }
  }

  private async submit(guidance: string, anotherRound: boolean): Promise<void> {
    if (!this.state || !this.sessionId || !this.state.canSubmit()) return;
    await this.autosave();
    if (this.state.isDirty()) return; // autosave failed; banner is showing
    try {
      const result = await this.api.submit(this.sessionId, {
        guidance,
        approve_remainder: this.state.approveRemainder,
        request_another_round: anotherRound,
      });
      this.root.insertAdjacentHTML(
        "afterbegin",
        `<p class="resumed">Review submitted; run ${result.run_id} is now <strong>${result.run_state}</strong>.
         <a href="#/">back to sessions</a></p>`
      );
      this.state = null;
    } catch (e) {
      this.showError(e, () => void this.submit(guidance, anotherRound));
    }
  }
}
