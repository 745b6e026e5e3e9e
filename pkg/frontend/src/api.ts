// Thin client over the review service. One base-URL setting; every call
// raises ApiError with the server's detail so the app can render it inline.

import { buildDecisionsPayload, buildSubmitPayload } from "./state.js";
import type { Decision, SessionDetail, SessionSummary, SubmitOptions, SubmitResponse } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let resp: Response;
    try {
      resp = await fetch(this.baseUrl + path, init);
    } catch (e) {
      throw new ApiError(0, `service unreachable: ${String(e)}`);
    }
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return resp;
  }

  async listOpenSessions(): Promise<SessionSummary[]> {
    const resp = await this.request("/sessions?status=open");
    const body = await resp.json();
    return body.sessions as SessionSummary[];
  }

  async getSession(sessionId: string): Promise<SessionDetail> {
    const resp = await this.request(`/sessions/${sessionId}`);
    return (await resp.json()) as SessionDetail;
  }

  async postDecisions(sessionId: string, decisions: Decision[]): Promise<void> {
    await this.request(`/sessions/${sessionId}/decisions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: buildDecisionsPayload(decisions),
    });
  }

  async submit(sessionId: string, opts: SubmitOptions): Promise<SubmitResponse> {
    const resp = await this.request(`/sessions/${sessionId}/submit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: buildSubmitPayload(opts),
    });
    return (await resp.json()) as SubmitResponse;
  }

  exportUrl(sessionId: string): string {
    return `${this.baseUrl}/sessions/${sessionId}/export`;
  }
}
