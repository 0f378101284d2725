#!/usr/bin/env python3
"""Replay one shipped scenario and narrate its event stream.

Shows what the approval console sees: proxied context, raised alerts with
their sources, decisions, and the final answer. Try the same scenario under
different variants to compare behavior:

    python3 scripts/demo_session.py --scenario drive-sync-exfil --variant pfi
    python3 scripts/demo_session.py --scenario drive-sync-exfil --variant baseline
"""

from __future__ import annotations

import argparse
import json
import sys
import textwrap
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from pfi.agent import VARIANTS
from pfi.bench import load_suite, run_scenario


def indent(text: str) -> str:
    return textwrap.indent(text, "    ")


def narrate(event: dict) -> str:
    kind, payload = event["kind"], event["payload"]
    if kind == "step":
        text = payload.get("content") or payload.get("detail", "")
        label = payload["actor"]
        if "action" in payload:
            label += f" {payload['action']}"
        return f"[{event['seq']:>2}] {label}:\n" + indent(text)
    if kind == "plugin_result":
        head = f"[{event['seq']:>2}] plugin {payload['name']}"
        body = json.dumps({k: v for k, v in payload.items() if k != "name"},
                          indent=2, sort_keys=True)
        return head + "\n" + indent(body)
    if kind == "alert":
        lines = [f"[{event['seq']:>2}] ALERT {payload['id']} ({payload['flow_type']})",
                 f"    sink: {json.dumps(payload['sink'], sort_keys=True)}"]
        if payload.get("advisory"):
            lines.append(f"    advisory: {payload['advisory']}")
        for source in payload["sources"]:
            lines.append(f"    source {source['atoms']}: {source['raw']!r}")
        return "\n".join(lines)
    if kind == "decision":
        return f"[{event['seq']:>2}] decision: {payload['decision']} ({payload['alert_id']})"
    if kind == "final_answer":
        return f"[{event['seq']:>2}] FINAL ANSWER:\n" + indent(payload["text"])
    return f"[{event['seq']:>2}] {kind}: {json.dumps(payload, sort_keys=True)}"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--suite", type=Path, default=REPO_ROOT / "scenarios")
    parser.add_argument("--scenario", default="drive-sync-exfil")
    parser.add_argument("--variant", default="pfi", choices=VARIANTS)
    parser.add_argument("--approval-mode", default="auto_approve",
                        choices=("auto_approve", "auto_deny"))
    args = parser.parse_args()

    scenarios = {s.id: s for s in load_suite(args.suite)}
    if args.scenario not in scenarios:
        print(f"unknown scenario {args.scenario!r}; have: "
              f"{', '.join(sorted(scenarios))}", file=sys.stderr)
        return 2
    scenario = scenarios[args.scenario]

    print(f"=== {scenario.id} [{args.variant}] ({scenario.flow_category}) ===")
    print(f"user prompt: {scenario.user_prompt}")
    outcome = run_scenario(scenario, args.variant, approval_mode=args.approval_mode)

    for event in outcome.transcript.events:
        print(narrate(event.to_dict() if hasattr(event, "to_dict") else event))
    print("--- journal ---")
    for entry in outcome.transcript.journal:
        print(indent(json.dumps(entry, sort_keys=True)))
    print("--- verdict ---")
    print(f"utility_ok={outcome.utility_ok} "
          f"attacked_prompt={outcome.attacked_prompt} "
          f"attacked_data={outcome.attacked_data} "
          f"error={outcome.error!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
