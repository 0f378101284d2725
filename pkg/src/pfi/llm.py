"""LLM port: a decision function from context to tool call or final answer.

Two backends are provided: a deterministic scripted backend used by the test
and benchmark harness, and a thin HTTP chat-completions adapter for live
models. The scripted backend makes agent behavior a pure function of
(role, context), which is what lets the whole benchmark assert exact
outcomes.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

ROLES = ("system", "user", "assistant", "plugin")

#: Script rules are scoped to the deciding agent: the trusted loop, the
#: untrusted worker, or the query-generation step.
SCRIPT_ROLES = ("trusted", "untrusted", "query_generator")

INJECT_MARKER = "INJECT: "


class LlmError(Exception):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    # set when an approval explicitly admitted untrusted raw content here
    approved_alert_id: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict

    def render(self) -> str:
        return f"{self.name}({json.dumps(self.args, sort_keys=True)})"


@dataclass(frozen=True)
class FinalAnswer:
    text: str


LlmDecision = Union[ToolCall, FinalAnswer]


class Backend(Protocol):
    def decide(
        self, role: str, messages: Sequence[ChatMessage], tools: Sequence
    ) -> "ToolCall | FinalAnswer": ...


@dataclass(frozen=True)
class ScriptRule:
    role: str
    trigger: str
    response: "ToolCall | FinalAnswer"
    trigger_kind: str = "literal"
    once: bool = False

    def __post_init__(self):
        if self.role not in SCRIPT_ROLES:
            raise LlmError(f"unknown script role {self.role!r}")
        if self.trigger_kind not in ("literal", "regex"):
            raise LlmError(f"unknown trigger kind {self.trigger_kind!r}")
        if self.trigger_kind == "regex":
            try:
                re.compile(self.trigger)
            except re.error as exc:
                raise LlmError(f"bad regex trigger {self.trigger!r}: {exc}") from None

    def matches(self, tail: str) -> bool:
        if self.trigger_kind == "literal":
            return self.trigger in tail
        return re.search(self.trigger, tail) is not None


@dataclass(frozen=True)
class Script:
    """Immutable rule set; instantiate one backend per session."""

    rules: tuple[ScriptRule, ...]

    def instantiate(self, naive_compliance: bool = False) -> "ScriptedBackend":
        return ScriptedBackend(self, naive_compliance=naive_compliance)


def parse_script(doc) -> Script:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise LlmError(f"script is not valid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise LlmError("script must be a JSON array of rules")
    rules = []
    for i, entry in enumerate(doc):
        try:
            rules.append(_parse_rule(entry))
        except LlmError as exc:
            raise LlmError(f"rule {i}: {exc}") from None
    return Script(tuple(rules))


def load_script(path) -> Script:
    with open(path, encoding="utf-8") as handle:
        return parse_script(handle.read())


def _parse_rule(entry) -> ScriptRule:
    if not isinstance(entry, dict):
        raise LlmError("rule must be an object")
    unknown = set(entry) - {"role", "trigger", "trigger_kind", "response", "once"}
    if unknown:
        raise LlmError(f"unknown fields {sorted(unknown)}")
    if "trigger" not in entry or "response" not in entry:
        raise LlmError("rule needs 'trigger' and 'response'")
    response = entry["response"]
    if not isinstance(response, dict):
        raise LlmError("response must be an object")
    if "answer" in response and "call" not in response:
        decision: ToolCall | FinalAnswer = FinalAnswer(str(response["answer"]))
    elif "call" in response and "answer" not in response:
        call = response["call"]
        if not isinstance(call, dict) or not isinstance(call.get("name"), str):
            raise LlmError("response.call needs a 'name'")
        args = call.get("args", {})
        if not isinstance(args, dict):
            raise LlmError("response.call args must be an object")
        decision = ToolCall(call["name"], args)
    else:
        raise LlmError("response must have exactly one of 'answer' or 'call'")
    return ScriptRule(
        role=entry.get("role", "trusted"),
        trigger=str(entry["trigger"]),
        response=decision,
        trigger_kind=entry.get("trigger_kind", "literal"),
        once=bool(entry.get("once", False)),
    )


class ScriptedBackend:
    """Deterministic decisions: first matching rule on the latest context tail.

    With ``naive_compliance`` on, any yet-unconsumed context line starting
    with ``INJECT: <plugin> <json-args>`` preempts the rules — the model
    blindly does what the most recent injected instruction says. This makes
    susceptibility to prompt injection a deterministic, testable fact rather
    than a model-dependent rate.
    """

    def __init__(self, script: Script, naive_compliance: bool = False):
        self.script = script
        self.naive_compliance = naive_compliance
        self._consumed_rules: set[int] = set()
        self._consumed_injections: set[str] = set()

    def decide(
        self, role: str, messages: Sequence[ChatMessage], tools: Sequence = ()
    ) -> "ToolCall | FinalAnswer":
        if not messages:
            raise LlmError("decide needs a non-empty context")
        if self.naive_compliance:
            injected = self._next_injection(messages)
            if injected is not None:
                return injected
        tail = messages[-1].content
        for index, rule in enumerate(self.script.rules):
            if rule.role != role:
                continue
            if rule.once and index in self._consumed_rules:
                continue
            if rule.matches(tail):
                if rule.once:
                    self._consumed_rules.add(index)
                return _fill_templates(rule.response, messages)
        return FinalAnswer(_last_plugin_content(messages))

    def _next_injection(self, messages: Sequence[ChatMessage]) -> Optional[ToolCall]:
        for message in messages:
            for line in message.content.splitlines():
                line = line.strip()
                if not line.startswith(INJECT_MARKER) or line in self._consumed_injections:
                    continue
                self._consumed_injections.add(line)
                body = line[len(INJECT_MARKER):]
                name, _, args_text = body.partition(" ")
                try:
                    args = json.loads(args_text) if args_text.strip() else {}
                except json.JSONDecodeError:
                    continue  # malformed injection: the model ignores it
                if isinstance(args, dict):
                    return ToolCall(name, args)
        return None


def _last_plugin_content(messages: Sequence[ChatMessage]) -> str:
    for message in reversed(messages):
        if message.role == "plugin":
            return message.content
    return messages[-1].content


def _fill_templates(
    decision: "ToolCall | FinalAnswer", messages: Sequence[ChatMessage]
) -> "ToolCall | FinalAnswer":
    def fill(text: str) -> str:
        if "{{" not in text:
            return text
        last_result = ""
        for message in reversed(messages):
            if message.role == "plugin":
                last_result = message.content
                break
        user_prompt = next((m.content for m in messages if m.role == "user"), "")
        return text.replace("{{last_result}}", last_result).replace(
            "{{user_prompt}}", user_prompt
        )

    if isinstance(decision, FinalAnswer):
        return FinalAnswer(fill(decision.text))
    return ToolCall(
        decision.name,
        {k: fill(v) if isinstance(v, str) else v for k, v in decision.args.items()},
    )


class RecordingBackend:
    """Wraps a backend and records every decide() input for audits."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[tuple[str, tuple[ChatMessage, ...]]] = []

    def decide(self, role, messages, tools=()):
        self.calls.append((role, tuple(messages)))
        return self.inner.decide(role, messages, tools)


class HttpBackend:
    """Chat-completions adapter. Configuration via PFI_LLM_* env vars.

    Tool calls are encoded with the common function-calling wire shape; the
    exact mapping is not load-bearing for the harness, which always uses the
    scripted backend.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str | None = None, client=None):
        import httpx

        self.endpoint = endpoint or os.environ.get("PFI_LLM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("PFI_LLM_API_KEY", "")
        self.model = model or os.environ.get("PFI_LLM_MODEL", "gpt-4o")
        if not self.endpoint:
            raise LlmError("PFI_LLM_ENDPOINT is not configured")
        self._client = client or httpx.Client(timeout=60.0)

    def decide(self, role, messages, tools=()):
        payload = {
            "model": self.model,
            "messages": [
                # plugin results ride in 'user' turns tagged with their origin
                {"role": m.role if m.role != "plugin" else "user",
                 "content": m.content if m.role != "plugin" else f"[plugin result] {m.content}"}
                for m in messages
            ],
            "tools": [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": getattr(t, "description", ""),
                        "parameters": getattr(t, "arg_schema", {"type": "object"}),
                    },
                }
                for t in tools
            ],
        }
        response = self._client.post(
            f"{self.endpoint.rstrip('/')}/chat/completions",
            json=payload,
            headers={"Authorization": f"Bearer {self.api_key}"},
        )
        if response.status_code != 200:
            raise LlmError(f"backend HTTP {response.status_code}: {response.text[:200]}")
        choice = response.json()["choices"][0]["message"]
        calls = choice.get("tool_calls") or []
        if calls:
            fn = calls[0]["function"]
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError as exc:
                raise LlmError(f"unparsable tool arguments: {exc}") from None
            return ToolCall(fn["name"], args)
        return FinalAnswer(choice.get("content") or "")
