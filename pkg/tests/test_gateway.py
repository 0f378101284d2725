"""Gateway HTTP surface: session lifecycle, long-polling, decisions."""

from __future__ import annotations

import json
import threading
import time

import pytest
from fastapi.testclient import TestClient

from pfi.gateway import GatewayConfig, create_app

ECHO_SCRIPT = [
    {"role": "trusted", "trigger": "ping", "response": {"answer": "pong"}},
]

# pipeline that raises one explicit-data alert at the final answer
MEMO_FIXTURE = {
    "mailbox": [
        {"sender": "eve@partner.example", "subject": "memo",
         "body": "secret plans afoot", "unread": True}
    ]
}
MEMO_SCRIPT = [
    {"role": "trusted", "trigger": "Summarize the memo",
     "response": {"call": {"name": "get_unread_emails", "args": {}}}},
    {"role": "query_generator", "trigger": "get_unread_emails",
     "response": {"answer": '{"gist": "string"}'}},
    {"role": "untrusted", "trigger": "secret plans",
     "response": {"answer": '{"gist": "secret plans afoot"}'}},
    {"role": "trusted", "trigger": '"gist"',
     "response": {"answer": "Memo gist: #DATA0"}},
]


def make_client(**config_kwargs) -> TestClient:
    return TestClient(create_app(GatewayConfig(**config_kwargs)))


def wait_until(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


def events_of(client, session_id, after=-1, wait=0.0):
    response = client.get(
        f"/sessions/{session_id}/events", params={"after": after, "wait": wait}
    )
    assert response.status_code == 200
    return response.json()


def start_memo_session(client) -> str:
    response = client.post("/sessions", json={
        "user_prompt": "Summarize the memo",
        "fixture": MEMO_FIXTURE,
        "script": MEMO_SCRIPT,
    })
    assert response.status_code == 201
    return response.json()["session_id"]


def pending_alert_id(client, session_id) -> str:
    assert wait_until(lambda: any(
        e["kind"] == "alert" for e in events_of(client, session_id)["events"]
    ))
    alerts = [e for e in events_of(client, session_id)["events"] if e["kind"] == "alert"]
    return alerts[0]["payload"]["id"]


class TestSessionLifecycle:
    def test_create_run_finish(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "ping", "script": ECHO_SCRIPT,
        })
        assert response.status_code == 201
        body = response.json()
        session_id = body["session_id"]
        assert body["variant"] == "pfi"
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        payload = events_of(client, session_id)
        kinds = [e["kind"] for e in payload["events"]]
        assert kinds[0] == "step" and kinds[-1] == "final_answer"
        first = payload["events"][0]
        assert first["seq"] == 0
        assert first["payload"] == {"actor": "user", "content": "ping"}
        seqs = [e["seq"] for e in payload["events"]]
        assert seqs == list(range(len(seqs)))
        assert payload["status"] == "finished"

    def test_sessions_listing(self):
        client = make_client()
        client.post("/sessions", json={"user_prompt": "ping", "script": ECHO_SCRIPT})
        client.post("/sessions", json={"user_prompt": "ping", "script": ECHO_SCRIPT,
                                       "variant": "baseline"})
        listing = client.get("/sessions").json()["sessions"]
        assert [s["session_id"] for s in listing] == ["s-1", "s-2"]
        assert [s["variant"] for s in listing] == ["pfi", "baseline"]

    def test_events_pagination(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "ping", "script": ECHO_SCRIPT,
        })
        session_id = response.json()["session_id"]
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        all_events = events_of(client, session_id)["events"]
        tail = events_of(client, session_id, after=all_events[0]["seq"])["events"]
        assert tail == all_events[1:]
        assert events_of(client, session_id, after=all_events[-1]["seq"])["events"] == []

    def test_unknown_session_404(self):
        client = make_client()
        assert client.get("/sessions/s-99/events").status_code == 404
        response = client.post(
            "/sessions/s-99/alerts/alert-0/decision", json={"decision": "approved"}
        )
        assert response.status_code == 404

    def test_cross_origin_console_allowed(self):
        # The approval console is static files on another origin.
        client = make_client()
        response = client.get(
            "/sessions", headers={"origin": "http://localhost:9000"}
        )
        assert response.headers["access-control-allow-origin"] == "*"
        preflight = client.options("/sessions", headers={
            "origin": "http://localhost:9000",
            "access-control-request-method": "POST",
            "access-control-request-headers": "content-type",
        })
        assert preflight.status_code == 200
        assert "POST" in preflight.headers["access-control-allow-methods"]


class TestValidation:
    def test_unknown_variant(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "p", "script": [], "variant": "extra_secure",
        })
        assert response.status_code == 400

    def test_inline_and_ref_together_rejected(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "p", "script": [], "script_ref": "x.json",
        })
        assert response.status_code == 400

    def test_bad_script_and_policy(self):
        client = make_client()
        assert client.post("/sessions", json={
            "user_prompt": "p", "script": [{"trigger": "x"}],
        }).status_code == 400
        assert client.post("/sessions", json={
            "user_prompt": "p", "script": [], "policy": "allow\n",
        }).status_code == 400
        assert client.post("/sessions", json={
            "user_prompt": "p", "script": [], "fixture": {"weird": []},
        }).status_code == 400

    def test_ref_without_directory_rejected(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "p", "script_ref": "x.json",
        })
        assert response.status_code == 400
        assert "directory" in response.json()["detail"]

    def test_ref_resolution_and_traversal(self, tmp_path):
        scripts = tmp_path / "scripts"
        scripts.mkdir()
        (scripts / "echo.json").write_text(json.dumps(ECHO_SCRIPT))
        (tmp_path / "outside.json").write_text("[]")
        client = make_client(scripts_dir=scripts)

        ok = client.post("/sessions", json={
            "user_prompt": "ping", "script_ref": "echo.json",
        })
        assert ok.status_code == 201

        for evil in ("../outside.json", "/etc/passwd", "missing.json"):
            response = client.post("/sessions", json={
                "user_prompt": "p", "script_ref": evil,
            })
            assert response.status_code == 400, evil


class TestApprovalFlow:
    def test_alert_blocks_until_approved(self):
        client = make_client()
        session_id = start_memo_session(client)
        alert_id = pending_alert_id(client, session_id)

        listing = client.get("/sessions").json()["sessions"]
        assert listing[0]["status"] == "running"
        assert alert_id in listing[0]["pending_alerts"]

        response = client.post(
            f"/sessions/{session_id}/alerts/{alert_id}/decision",
            json={"decision": "approved"},
        )
        assert response.status_code == 200
        assert response.json()["status"] == "delivered"

        assert wait_until(lambda: events_of(client, session_id)["finished"])
        events = events_of(client, session_id)["events"]
        decisions = [e for e in events if e["kind"] == "decision"]
        assert decisions[0]["payload"] == {"alert_id": alert_id, "decision": "approved"}
        final = [e for e in events if e["kind"] == "final_answer"]
        assert final[0]["payload"]["text"] == "Memo gist: secret plans afoot"

    def test_denied_flow_blocks_the_answer(self):
        client = make_client()
        session_id = start_memo_session(client)
        alert_id = pending_alert_id(client, session_id)
        response = client.post(
            f"/sessions/{session_id}/alerts/{alert_id}/decision",
            json={"decision": "denied"},
        )
        assert response.status_code == 200
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        events = events_of(client, session_id)["events"]
        final = [e for e in events if e["kind"] == "final_answer"]
        # the scripted model retries the same answer; the guard keeps denying
        # until the step budget ends the session — the raw never leaves
        assert not final or "secret plans" not in final[0]["payload"]["text"]
        assert all(
            "secret plans" not in json.dumps(e["payload"])
            for e in events
            if e["kind"] not in ("alert",)
        )

    def test_duplicate_decision_conflicts(self):
        client = make_client()
        session_id = start_memo_session(client)
        alert_id = pending_alert_id(client, session_id)
        first = client.post(
            f"/sessions/{session_id}/alerts/{alert_id}/decision",
            json={"decision": "approved"},
        )
        assert first.status_code == 200
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        second = client.post(
            f"/sessions/{session_id}/alerts/{alert_id}/decision",
            json={"decision": "denied"},
        )
        assert second.status_code == 409

    def test_unknown_alert_404_and_bad_decision_400(self):
        client = make_client()
        session_id = start_memo_session(client)
        pending_alert_id(client, session_id)
        response = client.post(
            f"/sessions/{session_id}/alerts/alert-99/decision",
            json={"decision": "approved"},
        )
        assert response.status_code == 404
        response = client.post(
            f"/sessions/{session_id}/alerts/alert-0/decision",
            json={"decision": "maybe"},
        )
        assert response.status_code == 400

    def test_approval_timeout_fails_closed(self):
        client = make_client(approval_timeout=0.05)
        session_id = start_memo_session(client)
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        events = events_of(client, session_id)["events"]
        decisions = [e["payload"]["decision"] for e in events if e["kind"] == "decision"]
        assert decisions and all(d == "denied" for d in decisions)


class TestLongPoll:
    def test_poll_wakes_on_new_event(self):
        client = make_client()
        session_id = start_memo_session(client)
        alert_id = pending_alert_id(client, session_id)
        snapshot = events_of(client, session_id)["events"]
        last_seq = snapshot[-1]["seq"]

        def deliver_later():
            time.sleep(0.15)
            client.post(
                f"/sessions/{session_id}/alerts/{alert_id}/decision",
                json={"decision": "approved"},
            )

        thread = threading.Thread(target=deliver_later)
        thread.start()
        started = time.monotonic()
        payload = events_of(client, session_id, after=last_seq, wait=10.0)
        elapsed = time.monotonic() - started
        thread.join()
        assert payload["events"], "long-poll should return the decision event"
        assert elapsed < 5.0, f"long-poll did not wake early (took {elapsed:.2f}s)"

    def test_finished_session_returns_immediately_despite_huge_wait(self):
        client = make_client()
        response = client.post("/sessions", json={
            "user_prompt": "ping", "script": ECHO_SCRIPT,
        })
        session_id = response.json()["session_id"]
        assert wait_until(lambda: events_of(client, session_id)["finished"])
        last = events_of(client, session_id)["events"][-1]["seq"]
        started = time.monotonic()
        payload = events_of(client, session_id, after=last, wait=9999)
        assert time.monotonic() - started < 2.0
        assert payload["events"] == [] and payload["finished"]
