// Console wiring: start form, session picker, one live view per session.
// The poll loop is the only long-lived task; rendering is incremental and
// derives wholly from SessionState.

import { GatewayClient } from "./api.js";
import type { StartSessionRequest } from "./api.js";
import { SessionState } from "./model.js";
import type { Decision, SessionEvent } from "./model.js";
import { applyDecisionToCard, renderAlertCard } from "./alerts.js";
import { appendEvent } from "./timeline.js";

const POLL_WAIT_SECONDS = 20;
const BACKOFF_START_MS = 500;
const BACKOFF_CAP_MS = 8000;

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

export class SessionPanel {
  readonly state = new SessionState();
  readonly element: HTMLElement;
  private readonly timeline: HTMLElement;
  private readonly alertQueue: HTMLElement;
  private readonly answer: HTMLElement;
  private readonly statusBadge: HTMLElement;
  private readonly banner: HTMLElement;
  private readonly cards = new Map<string, HTMLElement>();
  private closed = false;

  constructor(
    private readonly client: GatewayClient,
    readonly sessionId: string,
  ) {
    this.element = document.createElement("article");
    this.element.className = "session";
    this.element.dataset.sessionId = sessionId;

    const header = document.createElement("header");
    const title = document.createElement("h2");
    title.textContent = sessionId;
    this.statusBadge = document.createElement("span");
    this.statusBadge.className = "status";
    this.statusBadge.textContent = "running";
    header.append(title, this.statusBadge);

    this.banner = document.createElement("div");
    this.banner.className = "banner";
    this.banner.hidden = true;

    this.alertQueue = document.createElement("div");
    this.alertQueue.className = "alert-queue";

    this.timeline = document.createElement("ol");
    this.timeline.className = "timeline";

    this.answer = document.createElement("div");
    this.answer.className = "answer";
    this.answer.hidden = true;

    this.element.append(header, this.banner, this.alertQueue, this.answer, this.timeline);
  }

  /** Apply one event and update every affected widget. */
  ingest(event: SessionEvent): void {
    this.state.apply(event);
    appendEvent(this.timeline, event);
    if (event.kind === "alert") {
      const alert = this.state.alerts.get(String(event.payload["id"]))!;
      const card = renderAlertCard(this.sessionId, alert, (alertId, decision) =>
        this.client.postDecision(this.sessionId, alertId, decision),
      );
      this.cards.set(alert.id, card);
      this.alertQueue.append(card);
    } else if (event.kind === "decision") {
      const alertId = String(event.payload["alert_id"]);
      const card = this.cards.get(alertId);
      if (card) {
        applyDecisionToCard(card, event.payload["decision"] as Decision);
      }
    } else if (event.kind === "final_answer") {
      this.answer.hidden = false;
      this.answer.textContent = this.state.finalAnswer ?? "";
    } else if (event.kind === "error") {
      this.answer.hidden = false;
      this.answer.textContent = `failed: ${this.state.failure ?? ""}`;
    }
    this.updateStatus();
  }

  private updateStatus(): void {
    if (this.state.finished) {
      this.statusBadge.textContent = this.state.failure ? "failed" : "finished";
    } else if (this.state.waitingApproval) {
      this.statusBadge.textContent = "waiting approval";
    } else {
      this.statusBadge.textContent = "running";
    }
    this.element.classList.toggle("waiting", this.state.waitingApproval);
  }

  close(): void {
    this.closed = true;
  }

  /** Long-poll until the session finishes; transient failures back off. */
  async run(): Promise<void> {
    let backoff = BACKOFF_START_MS;
    while (!this.closed) {
      let page;
      try {
        page = await this.client.pollEvents(
          this.sessionId,
          this.state.nextSeq - 1,
          POLL_WAIT_SECONDS,
        );
      } catch (error) {
        this.banner.hidden = false;
        this.banner.textContent =
          `gateway unreachable (${String(error)}) — retrying in ` +
          `${(backoff / 1000).toFixed(1)}s`;
        await sleep(backoff);
        backoff = Math.min(backoff * 2, BACKOFF_CAP_MS);
        continue;
      }
      this.banner.hidden = true;
      backoff = BACKOFF_START_MS;
      for (const event of page.events) {
        this.ingest(event);
      }
      if (page.finished) {
        this.updateStatus();
        return;
      }
    }
  }
}

export class ConsoleApp {
  private readonly panels = new Map<string, SessionPanel>();

  constructor(
    private readonly root: HTMLElement,
    private readonly client: GatewayClient,
  ) {}

  async start(request: StartSessionRequest): Promise<SessionPanel> {
    const description = await this.client.startSession(request);
    return this.open(description.session_id);
  }

  open(sessionId: string): SessionPanel {
    let panel = this.panels.get(sessionId);
    if (panel) return panel;
    panel = new SessionPanel(this.client, sessionId);
    this.panels.set(sessionId, panel);
    this.root.append(panel.element);
    void panel.run();
    return panel;
  }
}

/** Gateway base URL: `?gateway=http://host:port`, else same-origin. */
export function gatewayBase(search: string): string {
  const value = new URLSearchParams(search).get("gateway") ?? "";
  return value.replace(/\/+$/, "");
}

function bootstrap(): void {
  const root = document.getElementById("console");
  const form = document.getElementById("start-form") as HTMLFormElement | null;
  if (!root || !form) return;
  const app = new ConsoleApp(root, new GatewayClient(gatewayBase(window.location.search)));

  form.addEventListener("submit", (submitEvent) => {
    submitEvent.preventDefault();
    const data = new FormData(form);
    const request: StartSessionRequest = {
      user_prompt: String(data.get("user_prompt") ?? ""),
      variant: String(data.get("variant") ?? "pfi"),
    };
    const scriptRef = String(data.get("script_ref") ?? "").trim();
    const fixtureRef = String(data.get("fixture_ref") ?? "").trim();
    const policyRef = String(data.get("policy_ref") ?? "").trim();
    if (scriptRef) request.script_ref = scriptRef;
    if (fixtureRef) request.fixture_ref = fixtureRef;
    if (policyRef) request.policy_ref = policyRef;
    void app.start(request).catch((error) => {
      const banner = document.getElementById("form-error");
      if (banner) banner.textContent = String(error);
    });
  });

  void (async () => {
    for (const session of await app["client"].listSessions()) {
      app.open(session.session_id);
    }
  })().catch(() => {
    /* no sessions yet, or gateway briefly down — the form still works */
  });
}

if (typeof document !== "undefined" && document.readyState !== undefined) {
  if (document.readyState === "loading") {
    document.addEventListener("DOMContentLoaded", bootstrap);
  } else {
    bootstrap();
  }
}
