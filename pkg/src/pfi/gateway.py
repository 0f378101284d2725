"""HTTP gateway: sessions as resources, approvals over the wire.

Each POSTed session runs in its own thread against an interactive broker;
clients follow the event stream with long-polling GETs and resolve pending
flow alerts with decision POSTs. Raw untrusted values surface only inside
alert payloads, so a console rendering this API sees exactly what the
approver is entitled to see and nothing more.
"""

from __future__ import annotations

import itertools
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .agent import VARIANTS, RunResult, SessionConfig, run_session
from .bench import DEFAULT_AGENT_POLICY
from .flowguard import APPROVED, DENIED, InteractiveBroker
from .llm import LlmError, Script, parse_script
from .plugins import FixtureError, default_registry, load_fixture
from .policy import PolicyError, parse_agent_policy, parse_trust_policy
from .transcript import EventLog, TranscriptError

MAX_WAIT_SECONDS = 25.0
DECISION_RETRY_SECONDS = 1.0  # covers the alert-emitted-but-broker-not-waiting gap


class GatewayError(ValueError):
    pass


@dataclass
class GatewayConfig:
    fixtures_dir: Optional[Path] = None
    scripts_dir: Optional[Path] = None
    policies_dir: Optional[Path] = None
    approval_timeout: float = 120.0
    trusted_steps: int = 20
    untrusted_steps: int = 10


def _resolve_ref(base: Optional[Path], ref: str, what: str) -> Path:
    if base is None:
        raise GatewayError(f"no {what} directory is configured")
    if Path(ref).is_absolute():
        raise GatewayError(f"{what} ref must be relative")
    root = base.resolve()
    target = (root / ref).resolve()
    if target != root and root not in target.parents:
        raise GatewayError(f"{what} ref {ref!r} escapes its directory")
    if not target.is_file():
        raise GatewayError(f"{what} ref {ref!r} not found")
    return target


@dataclass
class SessionHandle:
    id: str
    user_prompt: str
    variant: str
    log: EventLog
    broker: InteractiveBroker
    thread: threading.Thread
    result: Optional[RunResult] = None
    failure: Optional[str] = None

    @property
    def status(self) -> str:
        if self.failure is not None:
            return "failed"
        return "finished" if self.log.finished else "running"

    def describe(self) -> dict:
        return {
            "session_id": self.id,
            "variant": self.variant,
            "user_prompt": self.user_prompt,
            "status": self.status,
            "pending_alerts": self.broker.waiting_ids(),
            "events": len(self.log.snapshot()),
        }


class SessionManager:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self._sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def _agent_policy(self, registry):
        if self.config.policies_dir is not None:
            candidate = self.config.policies_dir / "agent_policy.json"
            if candidate.is_file():
                return parse_agent_policy(candidate.read_text(encoding="utf-8"), registry)
        return parse_agent_policy(json.dumps(DEFAULT_AGENT_POLICY), registry)

    def create(
        self,
        user_prompt: str,
        script: Script,
        fixture: dict,
        policy_text: str,
        variant: str,
    ) -> SessionHandle:
        with self._lock:
            session_id = f"s-{next(self._ids)}"
        registry = default_registry()
        log = EventLog(session_id)
        broker = InteractiveBroker(timeout=self.config.approval_timeout)
        session_config = SessionConfig(
            user_prompt=user_prompt,
            trust_policy=parse_trust_policy(policy_text),
            agent_policy=self._agent_policy(registry),
            registry=registry,
            fixture=fixture,
            backend=script.instantiate(naive_compliance=True),
            broker=broker,
            variant=variant,
            session_id=session_id,
            trusted_steps=self.config.trusted_steps,
            untrusted_steps=self.config.untrusted_steps,
            log=log,
        )
        handle = SessionHandle(
            id=session_id, user_prompt=user_prompt, variant=variant,
            log=log, broker=broker, thread=None,  # type: ignore[arg-type]
        )

        def runner():
            try:
                handle.result = run_session(session_config)
            except Exception as exc:  # surface crashes to pollers, fail closed
                handle.failure = str(exc)
                try:
                    log.emit("error", {"message": f"internal error: {exc}"})
                except TranscriptError:
                    pass

        handle.thread = threading.Thread(
            target=runner, name=f"session-{session_id}", daemon=True
        )
        with self._lock:
            self._sessions[session_id] = handle
        handle.thread.start()
        return handle

    def get(self, session_id: str) -> Optional[SessionHandle]:
        with self._lock:
            return self._sessions.get(session_id)

    def list(self) -> list[SessionHandle]:
        with self._lock:
            return list(self._sessions.values())


class CreateSessionRequest(BaseModel):
    user_prompt: str
    variant: str = "pfi"
    script: Optional[list] = None
    script_ref: Optional[str] = None
    fixture: Optional[dict] = None
    fixture_ref: Optional[str] = None
    policy: Optional[str] = None
    policy_ref: Optional[str] = None


class DecisionRequest(BaseModel):
    decision: str


def create_app(config: Optional[GatewayConfig] = None) -> FastAPI:
    config = config or GatewayConfig()
    manager = SessionManager(config)
    app = FastAPI(title="pfi gateway")
    # The approval console is served as static files from another origin.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["content-type"],
    )
    app.state.manager = manager

    def _bad_request(message: str):
        raise HTTPException(status_code=400, detail=message)

    def _load_session_inputs(req: CreateSessionRequest):
        if req.variant not in VARIANTS:
            _bad_request(f"unknown variant {req.variant!r}")
        if req.script is not None and req.script_ref is not None:
            _bad_request("give either 'script' or 'script_ref', not both")
        if req.fixture is not None and req.fixture_ref is not None:
            _bad_request("give either 'fixture' or 'fixture_ref', not both")
        if req.policy is not None and req.policy_ref is not None:
            _bad_request("give either 'policy' or 'policy_ref', not both")
        try:
            if req.script_ref is not None:
                path = _resolve_ref(config.scripts_dir, req.script_ref, "script")
                script = parse_script(path.read_text(encoding="utf-8"))
            else:
                script = parse_script(req.script or [])
            if req.fixture_ref is not None:
                path = _resolve_ref(config.fixtures_dir, req.fixture_ref, "fixture")
                fixture = load_fixture(path.read_text(encoding="utf-8"))
            else:
                fixture = load_fixture(req.fixture or {})
            if req.policy_ref is not None:
                path = _resolve_ref(config.policies_dir, req.policy_ref, "policy")
                policy_text = path.read_text(encoding="utf-8")
            else:
                policy_text = req.policy or ""
            parse_trust_policy(policy_text)  # reject malformed policies up front
        except (GatewayError, LlmError, FixtureError, PolicyError) as exc:
            _bad_request(str(exc))
        return script, fixture, policy_text

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        script, fixture, policy_text = _load_session_inputs(req)
        handle = manager.create(req.user_prompt, script, fixture, policy_text, req.variant)
        return handle.describe()

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": [h.describe() for h in manager.list()]}

    def _handle_or_404(session_id: str) -> SessionHandle:
        handle = manager.get(session_id)
        if handle is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
        return handle

    @app.get("/sessions/{session_id}/events")
    def get_events(
        session_id: str,
        after: int = Query(default=-1, ge=-1),
        wait: float = Query(default=0.0, ge=0.0),
    ):
        handle = _handle_or_404(session_id)
        wait = min(wait, MAX_WAIT_SECONDS)
        events = handle.log.events_after(after, wait)
        return {
            "session_id": session_id,
            "events": [e.to_dict() for e in events],
            "finished": handle.log.finished,
            "status": handle.status,
        }

    @app.post("/sessions/{session_id}/alerts/{alert_id}/decision")
    def post_decision(session_id: str, alert_id: str, req: DecisionRequest):
        if req.decision not in (APPROVED, DENIED):
            _bad_request(f"decision must be '{APPROVED}' or '{DENIED}'")
        handle = _handle_or_404(session_id)

        def alert_known() -> bool:
            return any(
                e.kind == "alert" and e.payload.get("id") == alert_id
                for e in handle.log.snapshot()
            )

        def already_decided() -> bool:
            return any(
                e.kind == "decision" and e.payload.get("alert_id") == alert_id
                for e in handle.log.snapshot()
            )

        deadline = time.monotonic() + DECISION_RETRY_SECONDS
        while True:
            if handle.broker.deliver(alert_id, req.decision):
                return {"session_id": session_id, "alert_id": alert_id,
                        "decision": req.decision, "status": "delivered"}
            if not alert_known():
                raise HTTPException(status_code=404, detail=f"no alert {alert_id!r}")
            if already_decided() or time.monotonic() >= deadline:
                raise HTTPException(
                    status_code=409, detail=f"alert {alert_id!r} is already decided"
                )
            time.sleep(0.02)  # alert event emitted, broker not yet waiting

    return app
