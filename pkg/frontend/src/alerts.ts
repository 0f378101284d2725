// Alert cards: the decision surface. Raw values from untrusted sources are
// rendered exclusively through textContent — never markup — and the
// approve/deny pair locks on first use so a double-click cannot produce a
// second request.

import type { AlertPayload, Decision } from "./model.js";
import { describeSink } from "./model.js";
import type { DecisionOutcome } from "./api.js";

export type SubmitDecision = (
  alertId: string,
  decision: Decision,
) => Promise<DecisionOutcome>;

function line(className: string, label: string, text: string): HTMLElement {
  const row = document.createElement("div");
  row.className = className;
  const tag = document.createElement("span");
  tag.className = "label";
  tag.textContent = label;
  const value = document.createElement("span");
  value.textContent = text;
  row.append(tag, value);
  return row;
}

function sourcePanel(source: { raw: string; atoms: string[] }): HTMLElement {
  const panel = document.createElement("div");
  panel.className = "source";
  const atoms = document.createElement("div");
  atoms.className = "atoms";
  atoms.textContent = source.atoms.join("  ");
  const raw = document.createElement("pre");
  raw.className = "raw";
  raw.textContent = source.raw;
  panel.append(atoms, raw);
  return panel;
}

export function renderAlertCard(
  sessionId: string,
  alert: AlertPayload,
  submit: SubmitDecision,
): HTMLElement {
  const card = document.createElement("section");
  card.className = `alert-card flow-${alert.flow_type}`;
  card.dataset.alertId = alert.id;

  const badge = document.createElement("span");
  badge.className = "badge";
  badge.textContent = alert.flow_type;
  const title = document.createElement("h3");
  title.append(badge, document.createTextNode(` ${alert.id}`));
  card.append(title);

  card.append(line("sink", "flows into", describeSink(alert.sink)));
  if (alert.advisory) {
    card.append(line("advisory", "advisory", alert.advisory));
  }
  for (const source of alert.sources) {
    card.append(sourcePanel(source));
  }

  const controls = document.createElement("div");
  controls.className = "controls";
  const approve = document.createElement("button");
  approve.className = "approve";
  approve.textContent = "Approve";
  const deny = document.createElement("button");
  deny.className = "deny";
  deny.textContent = "Deny";
  const verdict = document.createElement("span");
  verdict.className = "verdict";
  controls.append(approve, deny, verdict);
  card.append(controls);

  let submitted = false;
  const lock = () => {
    submitted = true;
    approve.disabled = true;
    deny.disabled = true;
  };
  const send = async (decision: Decision) => {
    if (submitted) return;
    lock();
    verdict.textContent = "sending…";
    try {
      const outcome = await submit(alert.id, decision);
      if (outcome === "delivered") {
        verdict.textContent = `${decision} (yours)`;
        card.classList.add("resolved", decision);
      } else if (outcome === "conflict") {
        verdict.textContent = "already decided elsewhere";
        card.classList.add("resolved");
      } else {
        verdict.textContent = "alert no longer exists";
        card.classList.add("resolved");
      }
    } catch (error) {
      verdict.textContent = `delivery failed: ${String(error)}`;
      // a failed send is not a decision — unlock so the operator can retry
      submitted = false;
      approve.disabled = false;
      deny.disabled = false;
    }
  };
  approve.addEventListener("click", () => void send("approved"));
  deny.addEventListener("click", () => void send("denied"));

  return card;
}

/** Reflect a decision event from the stream onto an existing card. */
export function applyDecisionToCard(card: HTMLElement, decision: Decision): void {
  card.classList.add("resolved", decision);
  for (const button of card.querySelectorAll("button")) {
    button.disabled = true;
  }
  const verdict = card.querySelector(".verdict");
  if (verdict && !verdict.textContent) {
    verdict.textContent = decision;
  }
}
