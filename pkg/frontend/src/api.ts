// Thin fetch client for the gateway. Every method resolves to plain data;
// HTTP status handling is centralized here so views never see a Response.

import type {
  Decision,
  EventsPage,
  SessionDescription,
  SessionEvent,
} from "./model.js";

export type DecisionOutcome = "delivered" | "conflict" | "unknown";

export interface StartSessionRequest {
  user_prompt: string;
  variant?: string;
  script?: unknown[];
  script_ref?: string;
  fixture?: Record<string, unknown>;
  fixture_ref?: string;
  policy?: string;
  policy_ref?: string;
}

export class GatewayError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class GatewayClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    return response;
  }

  private async requireOk(response: Response): Promise<unknown> {
    if (!response.ok) {
      const detail = await response.text();
      throw new GatewayError(detail || response.statusText, response.status);
    }
    return response.json();
  }

  async startSession(request: StartSessionRequest): Promise<SessionDescription> {
    const response = await this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    return (await this.requireOk(response)) as SessionDescription;
  }

  async listSessions(): Promise<SessionDescription[]> {
    const response = await this.request("/sessions");
    const body = (await this.requireOk(response)) as {
      sessions: SessionDescription[];
    };
    return body.sessions;
  }

  async pollEvents(
    sessionId: string,
    after: number,
    wait: number,
  ): Promise<EventsPage> {
    const query = `after=${after}&wait=${wait}`;
    const response = await this.request(
      `/sessions/${sessionId}/events?${query}`,
    );
    const page = (await this.requireOk(response)) as EventsPage;
    page.events = page.events as SessionEvent[];
    return page;
  }

  /**
   * Deliver a decision. Distinguishes the two expected non-success shapes:
   * 409 (someone already decided) and 404 (no such alert) — callers show
   * both as final card states rather than errors.
   */
  async postDecision(
    sessionId: string,
    alertId: string,
    decision: Decision,
  ): Promise<DecisionOutcome> {
    const response = await this.request(
      `/sessions/${sessionId}/alerts/${alertId}/decision`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ decision }),
      },
    );
    if (response.status === 409) return "conflict";
    if (response.status === 404) return "unknown";
    await this.requireOk(response);
    return "delivered";
  }
}
