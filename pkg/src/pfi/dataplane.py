"""Proxy table, typed queries, and the trusted/untrusted agent data contract.

Untrusted values never enter the trusted agent context directly: each one is
registered in a session-local proxy table and referenced by an opaque
``#DATA<n>`` token. Tokens are substituted back into plugin arguments and
final answers in a single pass, so a raw value that itself contains a token
is never re-expanded.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import date
from typing import Any

from .policy import TrustLabel, TrustPolicy, make_source_set, trust_check

PROXY_RE = re.compile(r"#DATA[0-9]+")

#: Leaf type names accepted in queries. ``prompt`` is a string extracted to
#: be followed as instructions; it is never proxied and is routed through the
#: flow guard instead.
SCALAR_TYPES = ("string", "integer", "boolean", "date", "prompt")


class DataPlaneError(ValueError):
    pass


class UnknownProxyError(DataPlaneError):
    def __init__(self, token: str):
        self.token = token
        super().__init__(f"unknown data proxy {token}")


@dataclass(frozen=True)
class DataValue:
    """A payload plus its provenance and the trust label derived from policy."""

    payload: str
    source: frozenset[str]
    label: TrustLabel

    @classmethod
    def create(cls, policy: TrustPolicy, payload: str, source) -> "DataValue":
        atoms = make_source_set(source)
        return cls(payload, atoms, trust_check(policy, atoms))


@dataclass(frozen=True)
class ProxyRecord:
    id: str
    raw: str
    source: frozenset[str]


class ProxyTable:
    """Session-local map of proxy tokens to raw untrusted values."""

    def __init__(self):
        self._records: dict[str, ProxyRecord] = {}
        self._next_index = 0

    def __len__(self) -> int:
        return len(self._records)

    def register(self, raw: str, source) -> str:
        """Store ``raw`` under a fresh ``#DATA<n>`` token and return the token.

        Identical raw values get distinct tokens: their provenance may differ.
        """
        atoms = make_source_set(source)
        token = f"#DATA{self._next_index}"
        self._next_index += 1
        self._records[token] = ProxyRecord(token, raw, atoms)
        return token

    def resolve(self, token: str) -> ProxyRecord:
        canonical = _canonical_token(token)
        if canonical not in self._records:
            raise UnknownProxyError(token)
        return self._records[canonical]

    def records(self) -> list[ProxyRecord]:
        return list(self._records.values())


def _canonical_token(token: str) -> str:
    # "#DATA07" names the same record as "#DATA7"; only canonical tokens are
    # ever generated, but scanning is lexical.
    if not PROXY_RE.fullmatch(token):
        raise DataPlaneError(f"not a proxy token: {token!r}")
    return f"#DATA{int(token[5:])}"


def scan_proxies(text: str) -> list[str]:
    """All maximal ``#DATA<digits>`` tokens in order, duplicates preserved."""
    return PROXY_RE.findall(text)


def substitute(table: ProxyTable, text: str) -> tuple[str, list[str]]:
    """Expand every proxy token in ``text`` in one pass.

    Returns the expanded text and the list of consumed tokens. Substituted
    content is not re-scanned, so tokens smuggled inside raw values stay
    literal. Unknown tokens raise :class:`UnknownProxyError`.
    """
    used: list[str] = []

    def expand(match: re.Match) -> str:
        record = table.resolve(match.group(0))
        used.append(record.id)  # canonical id, even for leading-zero aliases
        return record.raw

    return PROXY_RE.sub(expand, text), used


# --- typed queries -----------------------------------------------------------


@dataclass(frozen=True)
class Query:
    """Typed key-value contract the trusted agent issues to the untrusted one.

    ``spec`` mirrors the wire shape: a dict mapping keys to a type name, a
    nested dict, or a single-element list of an element type.
    """

    spec: dict

    def to_json(self) -> str:
        return json.dumps(self.spec, separators=(", ", ": "))

    def prompt_paths(self) -> list[str]:
        paths: list[str] = []
        _collect_prompt_paths(self.spec, "", paths)
        return paths


def _collect_prompt_paths(node, path: str, out: list[str]) -> None:
    if isinstance(node, dict):
        for key, child in node.items():
            _collect_prompt_paths(child, f"{path}.{key}" if path else key, out)
    elif node == "prompt":
        out.append(path)


def parse_query(serialized: str | dict) -> Query:
    """Validate a serialized query.

    Accepts nested objects and single-element lists; ``prompt`` is only legal
    as the direct type of an object key, not as a list element.
    """
    if isinstance(serialized, str):
        try:
            doc = json.loads(serialized)
        except json.JSONDecodeError as exc:
            raise DataPlaneError(f"query is not valid JSON: {exc}") from None
    else:
        doc = serialized
    if not isinstance(doc, dict) or not doc:
        raise DataPlaneError("query must be a non-empty object")
    _validate_query_node(doc, path="", in_list=False)
    return Query(doc)


def _validate_query_node(node, path: str, in_list: bool) -> None:
    if isinstance(node, dict):
        if not node:
            raise DataPlaneError(f"empty object type at {path or '<root>'}")
        for key, child in node.items():
            if not isinstance(key, str) or not key:
                raise DataPlaneError(f"invalid key {key!r} at {path or '<root>'}")
            _validate_query_node(child, f"{path}.{key}" if path else key, in_list)
    elif isinstance(node, list):
        if len(node) != 1:
            raise DataPlaneError(f"list type at {path} must have exactly one element type")
        _validate_query_node(node[0], f"{path}[]", in_list=True)
    elif isinstance(node, str):
        if node not in SCALAR_TYPES:
            raise DataPlaneError(f"unknown type {node!r} at {path}")
        if node == "prompt" and in_list:
            raise DataPlaneError(f"'prompt' in non-leaf position at {path}")
    else:
        raise DataPlaneError(f"invalid type declaration {node!r} at {path}")


def validate_result(query: Query, result) -> None:
    """Check that ``result`` mirrors the query's shape and types.

    Missing information must be encoded as explicit null; missing or extra
    keys are shape errors.
    """
    _validate_result_node(query.spec, result, path="")


def _validate_result_node(spec, value, path: str) -> None:
    where = path or "<root>"
    if value is None and path:
        # explicit null is legal anywhere below the root: it encodes missing
        # information for a leaf, a list, or a whole sub-object
        return
    if isinstance(spec, dict):
        if not isinstance(value, dict):
            raise DataPlaneError(f"expected object at {where}")
        if set(value) != set(spec):
            missing = set(spec) - set(value)
            extra = set(value) - set(spec)
            raise DataPlaneError(
                f"key mismatch at {where}: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for key, child_spec in spec.items():
            _validate_result_node(child_spec, value[key], f"{path}.{key}" if path else key)
        return
    if isinstance(spec, list):
        if not isinstance(value, list):
            raise DataPlaneError(f"expected list at {where}")
        for i, item in enumerate(value):
            _validate_result_node(spec[0], item, f"{path}[{i}]")
        return
    if spec in ("string", "prompt"):
        if not isinstance(value, str):
            raise DataPlaneError(f"expected {spec} at {where}")
    elif spec == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataPlaneError(f"expected integer at {where}")
    elif spec == "boolean":
        if not isinstance(value, bool):
            raise DataPlaneError(f"expected boolean at {where}")
    elif spec == "date":
        if not isinstance(value, str):
            raise DataPlaneError(f"expected ISO date string at {where}")
        try:
            date.fromisoformat(value)
        except ValueError:
            raise DataPlaneError(f"expected ISO date string at {where}") from None
    else:  # pragma: no cover - parse_query rejects unknown types
        raise DataPlaneError(f"unknown type {spec!r} at {where}")


def null_result(query: Query):
    """Result shape with every leaf and list set to explicit null."""

    def build(spec):
        if isinstance(spec, dict):
            return {key: build(child) for key, child in spec.items()}
        return None

    return build(query.spec)


def canonical_raw(value) -> str:
    """Canonical text stored in the proxy table for a typed leaf value."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return str(value)


def proxy_query_result(
    table: ProxyTable, query: Query, result, source
) -> tuple[Any, list[tuple[str, str]]]:
    """Replace every non-prompt leaf of ``result`` with a fresh proxy token.

    Integer and boolean leaves are proxied too (they are attacker-influenced
    values), stored as canonical text. Nulls pass through unproxied. Prompt
    leaves are removed from the proxied result and returned separately as
    ``(key-path, raw string)`` pairs for the flow guard.
    """
    validate_result(query, result)
    prompt_leaves: list[tuple[str, str]] = []

    def walk(spec, value, path: str):
        if value is None and path:
            return None
        if isinstance(spec, dict):
            out = {}
            for key, child_spec in spec.items():
                child_path = f"{path}.{key}" if path else key
                if child_spec == "prompt":
                    if value[key] is not None:
                        prompt_leaves.append((child_path, value[key]))
                    continue
                out[key] = walk(child_spec, value[key], child_path)
            return out
        if isinstance(spec, list):
            return [walk(spec[0], item, f"{path}[{i}]") for i, item in enumerate(value)]
        return table.register(canonical_raw(value), source)

    return walk(query.spec, result, ""), prompt_leaves
