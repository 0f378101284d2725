"""Command-line front door.

Four entry points: run one scripted session in the terminal (the operator
answers flow alerts on stdin), score a scenario suite across variants, lint
a trust-policy file, and serve the HTTP gateway.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .agent import VARIANTS, SessionConfig, run_session
from .bench import (
    APPROVAL_MODES,
    DEFAULT_AGENT_POLICY,
    BenchError,
    build_report,
    emit_report,
    load_suite,
    run_suite,
)
from .flowguard import APPROVED, DENIED, FlowAlert, StaticBroker
from .llm import LlmError, parse_script
from .plugins import FixtureError, default_registry, load_fixture
from .policy import (
    PolicyError,
    parse_agent_policy,
    parse_trust_policy,
    print_trust_policy,
)


def _render_alert(alert: FlowAlert) -> str:
    lines = [
        f"--- flow alert {alert.id} ({alert.flow_type}) ---",
        f"sink: {json.dumps(alert.sink, sort_keys=True)}",
    ]
    if alert.advisory:
        lines.append(f"advisory: {alert.advisory}")
    for source in alert.sources:
        lines.append(f"source [{', '.join(sorted(source.atoms))}]:")
        lines.append(f"  {source.raw!r}")
    return "\n".join(lines)


class TerminalBroker:
    """Shows each pending flow alert and asks the operator on stdin."""

    def decide(self, alert: FlowAlert) -> str:
        click.echo(_render_alert(alert), err=True)
        approved = click.confirm("Approve this flow?", default=False, err=True)
        return APPROVED if approved else DENIED


def _load_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot load {what} {path}: {exc}")


@click.group()
def main():
    """Flow-integrity tooling for tool-calling agents."""


@main.command()
@click.argument("prompt")
@click.option("--script", "script_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Scripted-model rules (JSON).")
@click.option("--fixture", "fixture_path", type=click.Path(exists=True, path_type=Path),
              help="World fixture (JSON); empty world when omitted.")
@click.option("--policy", "policy_path", type=click.Path(exists=True, path_type=Path),
              help="Trust-policy file; built-in rules only when omitted.")
@click.option("--agent-policy", "agent_policy_path",
              type=click.Path(exists=True, path_type=Path),
              help="Agent plugin allowlists (JSON); defaults to the standard split.")
@click.option("--variant", type=click.Choice(VARIANTS), default="pfi",
              show_default=True)
@click.option("--decide", type=click.Choice(["ask", "approve", "deny"]),
              default="ask", show_default=True,
              help="Answer flow alerts on stdin, or auto-resolve them all.")
def run(prompt, script_path, fixture_path, policy_path, agent_policy_path,
        variant, decide):
    """Run one session; the final answer goes to stdout, audit info to stderr."""
    registry = default_registry()
    try:
        script = parse_script(_load_json(script_path, "script"))
        fixture = load_fixture(
            _load_json(fixture_path, "fixture") if fixture_path else {}
        )
        policy = parse_trust_policy(
            policy_path.read_text() if policy_path else ""
        )
        agent_policy_doc = (
            _load_json(agent_policy_path, "agent policy")
            if agent_policy_path else DEFAULT_AGENT_POLICY
        )
        agent_policy = parse_agent_policy(json.dumps(agent_policy_doc), registry)
    except (LlmError, FixtureError, PolicyError) as exc:
        raise click.ClickException(str(exc))

    brokers = {
        "ask": TerminalBroker(),
        "approve": StaticBroker(APPROVED),
        "deny": StaticBroker(DENIED),
    }
    result = run_session(SessionConfig(
        user_prompt=prompt,
        trust_policy=policy,
        agent_policy=agent_policy,
        registry=registry,
        fixture=fixture,
        backend=script.instantiate(naive_compliance=True),
        broker=brokers[decide],
        variant=variant,
        session_id="cli",
    ))

    for entry in result.transcript.journal:
        click.echo(f"journal: {json.dumps(entry, sort_keys=True)}", err=True)
    if result.error is not None:
        raise click.ClickException(f"session failed: {result.error}")
    click.echo(result.final_answer)


@main.command()
@click.option("--suite", "suite_dir", type=click.Path(exists=True, file_okay=False,
              path_type=Path), required=True, help="Scenario suite directory.")
@click.option("--variants", default=",".join(VARIANTS), show_default=True,
              help="Comma-separated variant list.")
@click.option("--report", "fmt", type=click.Choice(["json", "markdown"]),
              default="json", show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              help="Write the report here instead of stdout.")
@click.option("--approval-mode", type=click.Choice(APPROVAL_MODES),
              default="auto_approve", show_default=True)
def bench(suite_dir, variants, fmt, out_path, approval_mode):
    """Run every scenario under each variant and emit the score report."""
    wanted = tuple(v.strip() for v in variants.split(",") if v.strip())
    try:
        scenarios = load_suite(suite_dir)
        outcomes = run_suite(scenarios, variants=wanted, approval_mode=approval_mode)
        text = emit_report(build_report(outcomes), fmt)
    except (BenchError, LlmError, FixtureError, PolicyError) as exc:
        raise click.ClickException(str(exc))
    if out_path:
        out_path.write_text(text)
        click.echo(f"wrote {fmt} report for {len(scenarios)} scenarios "
                   f"x {len(wanted)} variants to {out_path}", err=True)
    else:
        click.echo(text, nl=False)


@main.group()
def policy():
    """Trust-policy utilities."""


@policy.command()
@click.argument("policy_file", type=click.Path(exists=True, path_type=Path))
def check(policy_file):
    """Parse a trust-policy file and print the effective rule table."""
    try:
        parsed = parse_trust_policy(policy_file.read_text())
    except PolicyError as exc:
        raise click.ClickException(str(exc))
    click.echo(print_trust_policy(parsed))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8470, show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False,
              path_type=Path), help="Directory served for fixture_ref lookups.")
@click.option("--scripts", type=click.Path(exists=True, file_okay=False,
              path_type=Path), help="Directory served for script_ref lookups.")
@click.option("--policies", type=click.Path(exists=True, file_okay=False,
              path_type=Path), help="Directory served for policy_ref lookups.")
@click.option("--approval-timeout", default=120.0, show_default=True,
              help="Seconds before an unanswered alert is denied.")
def serve(host, port, fixtures, scripts, policies, approval_timeout):
    """Serve the session gateway over HTTP."""
    import uvicorn

    from .gateway import GatewayConfig, create_app

    app = create_app(GatewayConfig(
        fixtures_dir=fixtures,
        scripts_dir=scripts,
        policies_dir=policies,
        approval_timeout=approval_timeout,
    ))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
