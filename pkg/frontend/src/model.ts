// Wire types for the gateway's JSON API plus the client-side session state.
// The state is a pure reducer over the event stream: the server is the only
// source of truth and events arrive strictly ordered by seq.

export interface SessionEvent {
  seq: number;
  kind: string;
  session_id: string;
  payload: Record<string, unknown>;
}

export interface AlertSource {
  raw: string;
  atoms: string[];
}

export interface AlertPayload {
  id: string;
  flow_type: string;
  sink: Record<string, unknown>;
  sources: AlertSource[];
  advisory: string | null;
  status: string;
  created_at: string;
}

export interface SessionDescription {
  session_id: string;
  variant: string;
  user_prompt: string;
  status: string;
  pending_alerts: string[];
  events: number;
}

export interface EventsPage {
  session_id: string;
  events: SessionEvent[];
  finished: boolean;
  status: string;
}

export type Decision = "approved" | "denied";

const TERMINAL_KINDS = new Set(["final_answer", "error"]);

export class StreamGapError extends Error {}

/** Accumulated view of one session, fed by apply() in seq order. */
export class SessionState {
  readonly events: SessionEvent[] = [];
  readonly alerts = new Map<string, AlertPayload>();
  readonly decisions = new Map<string, Decision>();
  finalAnswer: string | null = null;
  failure: string | null = null;
  finished = false;

  get nextSeq(): number {
    return this.events.length;
  }

  apply(event: SessionEvent): void {
    if (event.seq !== this.nextSeq) {
      throw new StreamGapError(
        `expected seq ${this.nextSeq}, got ${event.seq}`,
      );
    }
    if (this.finished) {
      throw new StreamGapError(`event ${event.seq} after terminal event`);
    }
    this.events.push(event);
    switch (event.kind) {
      case "alert": {
        const alert = event.payload as unknown as AlertPayload;
        this.alerts.set(alert.id, alert);
        break;
      }
      case "decision": {
        const alertId = event.payload["alert_id"] as string;
        const decision = event.payload["decision"] as Decision;
        // one decision per alert: the stream never revises a verdict
        if (!this.decisions.has(alertId)) {
          this.decisions.set(alertId, decision);
        }
        break;
      }
      case "final_answer":
        this.finalAnswer = String(event.payload["text"] ?? "");
        break;
      case "error":
        this.failure = String(event.payload["message"] ?? "");
        break;
    }
    if (TERMINAL_KINDS.has(event.kind)) {
      this.finished = true;
    }
  }

  applyAll(events: SessionEvent[]): void {
    for (const event of events) {
      this.apply(event);
    }
  }

  get pendingAlerts(): AlertPayload[] {
    return [...this.alerts.values()].filter((a) => !this.decisions.has(a.id));
  }

  get waitingApproval(): boolean {
    return !this.finished && this.pendingAlerts.length > 0;
  }
}

/** Human phrasing of an alert sink. */
export function describeSink(sink: Record<string, unknown>): string {
  switch (sink["kind"]) {
    case "plugin":
      return `plugin call ${sink["plugin"]}`;
    case "final_answer":
      return "the final answer";
    case "context":
      return `agent context (field ${sink["path"]})`;
    case "cond_prompt":
      return "conditional prompt selection";
    default:
      return JSON.stringify(sink);
  }
}
