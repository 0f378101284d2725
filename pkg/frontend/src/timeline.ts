// Timeline rendering: one row per session event, in seq order. All dynamic
// strings go through textContent, so payload content can never execute.

import type { SessionEvent } from "./model.js";
import { describeSink } from "./model.js";

function row(event: SessionEvent, heading: string, body?: string): HTMLElement {
  const item = document.createElement("li");
  item.className = `event kind-${event.kind}`;
  item.dataset.seq = String(event.seq);
  const head = document.createElement("div");
  head.className = "head";
  const seq = document.createElement("span");
  seq.className = "seq";
  seq.textContent = `#${event.seq}`;
  const label = document.createElement("span");
  label.textContent = heading;
  head.append(seq, label);
  item.append(head);
  if (body !== undefined && body !== "") {
    const detail = document.createElement("pre");
    detail.className = "detail";
    detail.textContent = body;
    item.append(detail);
  }
  return item;
}

export function renderEvent(event: SessionEvent): HTMLElement {
  const p = event.payload;
  switch (event.kind) {
    case "step": {
      const actor = String(p["actor"]);
      const action = p["action"] ? ` ${String(p["action"])}` : "";
      const body = String(p["content"] ?? p["detail"] ?? "");
      return row(event, `${actor}${action}`, body);
    }
    case "plugin_call":
      return row(event, `calling ${p["name"]}`, JSON.stringify(p["args"]));
    case "trust_decision":
      return row(
        event,
        `trust check: ${p["label"]}`,
        `${p["plugin"]} ← ${(p["atoms"] as string[]).join(", ")}`,
      );
    case "spawn_untrusted":
      return row(
        event,
        "confined agent engaged",
        `${p["plugin"]} payload [${(p["payload_atoms"] as string[]).join(", ")}]`,
      );
    case "untrusted_result":
      return row(
        event,
        `confined agent finished (${p["steps"]} steps)`,
        JSON.stringify(p["result"]),
      );
    case "plugin_result": {
      const error = p["error"];
      if (error) return row(event, `${p["name"]} failed`, String(error));
      return row(event, `${p["name"]} returned`);
    }
    case "alert":
      return row(
        event,
        `alert ${p["id"]}: ${p["flow_type"]} → ${describeSink(
          p["sink"] as Record<string, unknown>,
        )}`,
      );
    case "decision":
      return row(event, `decision: ${p["decision"]} (${p["alert_id"]})`);
    case "final_answer":
      return row(event, "final answer", String(p["text"] ?? ""));
    case "error":
      return row(event, "session failed", String(p["message"] ?? ""));
    default:
      return row(event, event.kind, JSON.stringify(p));
  }
}

export function appendEvent(list: HTMLElement, event: SessionEvent): HTMLElement {
  const item = renderEvent(event);
  list.append(item);
  return item;
}
