"""Data-trustworthiness and agent-privilege policies.

Two policy kinds are handled here:

* the data trustworthiness policy: an ordered list of ``allow``/``deny``
  rules over source atoms, with deny taking precedence over allow, used to
  label every piece of data entering an agent context as Trusted or
  Untrusted;
* the agent privilege policy: per-role plugin allowlists for the trusted
  and untrusted agents.

Both are immutable after load and safe to share across sessions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

BUILTIN_ATOMS = frozenset({"system", "user", "unknown", "transparent"})

#: Resolution directive attached to plugin results that inherit the sources
#: of their inputs; never stored in a SourceSet and never valid in a policy.
TRANSPARENT = "transparent"


class PolicyError(ValueError):
    """Raised on malformed policy text or invalid policy contents."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def validate_atom(text: str) -> str:
    """Check that ``text`` is a well-formed source atom and return it.

    Atoms are either a bare builtin (``system``, ``user``, ``unknown``,
    ``transparent``) or ``namespace:qualifier`` where the namespace contains
    no whitespace and no ``*``.
    """
    if not text:
        raise PolicyError("empty source atom")
    if ":" in text:
        namespace, qualifier = text.split(":", 1)
        if not namespace or not qualifier:
            raise PolicyError(f"malformed source atom {text!r}")
        if any(c.isspace() for c in text) or "*" in namespace:
            raise PolicyError(f"malformed source atom {text!r}")
        return text
    if text not in BUILTIN_ATOMS:
        raise PolicyError(f"bare atom {text!r} is not a builtin source")
    return text


def make_source_set(atoms: Iterable[str]) -> frozenset[str]:
    """Validate and freeze a set of source atoms for storage.

    ``transparent`` must have been resolved by the caller before data is
    stored, so it is rejected here.
    """
    result = frozenset(validate_atom(a) for a in atoms)
    if not result:
        raise PolicyError("source set must be non-empty")
    if TRANSPARENT in result:
        raise PolicyError("'transparent' may not appear in a stored source set")
    return result


class TrustLabel(Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


@dataclass(frozen=True)
class Rule:
    effect: str  # "allow" | "deny"
    pattern: str

    def __post_init__(self):
        if self.effect not in ("allow", "deny"):
            raise PolicyError(f"unknown rule effect {self.effect!r}")
        _validate_pattern(self.pattern)


def _validate_pattern(pattern: str) -> None:
    if not pattern:
        raise PolicyError("empty source pattern")
    if any(c.isspace() for c in pattern):
        raise PolicyError(f"whitespace in source pattern {pattern!r}")
    if ":" in pattern:
        namespace, _qualifier = pattern.split(":", 1)
        if not namespace or "*" in namespace:
            raise PolicyError(f"malformed source pattern {pattern!r}")
        return
    if pattern == TRANSPARENT:
        raise PolicyError("'transparent' is a resolution directive, not a source")
    if pattern not in BUILTIN_ATOMS:
        raise PolicyError(f"bare pattern {pattern!r} is not a builtin source")


def match_pattern(pattern: str, atom: str) -> bool:
    """True iff ``pattern`` matches ``atom``.

    Namespaces compare literally; inside the qualifier ``*`` matches any run
    of characters (including ``.`` and ``/``). Bare builtins match literally.
    """
    if ":" not in pattern:
        return pattern == atom
    if ":" not in atom:
        return False
    p_ns, p_qual = pattern.split(":", 1)
    a_ns, a_qual = atom.split(":", 1)
    if p_ns != a_ns:
        return False
    return _glob_match(p_qual, a_qual)


def _glob_match(glob: str, text: str) -> bool:
    # Iterative matcher: '*' spans any run of characters, everything else is
    # literal. No '?', no character classes.
    parts = glob.split("*")
    if len(parts) == 1:
        return glob == text
    head, tail = parts[0], parts[-1]
    if not text.startswith(head) or not text.endswith(tail):
        return False
    if len(head) + len(tail) > len(text):
        return False
    pos = len(head)
    end = len(text) - len(tail)
    for middle in parts[1:-1]:
        if not middle:
            continue
        found = text.find(middle, pos, end)
        if found < 0:
            return False
        pos = found + len(middle)
    return True


#: Always-present rules: framework system data, the user's own prompts, and
#: plugin-generated log/confirmation messages are trusted by default.
BUILTIN_RULES = (
    Rule("allow", "system"),
    Rule("allow", "user"),
    Rule("allow", "plugin:*"),
)


@dataclass(frozen=True)
class TrustPolicy:
    """Parsed allow/deny rules plus the non-removable builtins."""

    rules: tuple[Rule, ...]
    name: str = "trust-policy"

    @property
    def effective_rules(self) -> tuple[Rule, ...]:
        return self.rules + BUILTIN_RULES


def parse_trust_policy(text: str, name: str = "trust-policy") -> TrustPolicy:
    """Parse policy source into a TrustPolicy.

    Grammar is line-oriented: ``allow <pattern>`` or ``deny <pattern>``, with
    ``#`` comments and blank lines ignored. Duplicate identical rules raise a
    warning and are kept once.
    """
    rules: list[Rule] = []
    seen: set[Rule] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise PolicyError(f"expected '<allow|deny> <pattern>', got {line!r}", lineno)
        effect, pattern = fields
        if effect not in ("allow", "deny"):
            raise PolicyError(f"unknown keyword {effect!r}", lineno)
        try:
            rule = Rule(effect, pattern)
        except PolicyError as exc:
            raise PolicyError(str(exc), lineno) from None
        if rule in seen:
            warnings.warn(f"{name}:{lineno}: duplicate rule '{effect} {pattern}'")
            continue
        seen.add(rule)
        rules.append(rule)
    return TrustPolicy(tuple(rules), name=name)


def print_trust_policy(policy: TrustPolicy) -> str:
    """Render the explicit rules back to policy text (builtins stay implicit)."""
    return "".join(f"{r.effect} {r.pattern}\n" for r in policy.rules)


def atom_trusted(policy: TrustPolicy, atom: str) -> bool:
    """An atom is trusted iff some allow rule matches and no deny rule does."""
    allowed = False
    for rule in policy.effective_rules:
        if match_pattern(rule.pattern, atom):
            if rule.effect == "deny":
                return False
            allowed = True
    return allowed


def trust_check(policy: TrustPolicy, source: frozenset[str] | set[str]) -> TrustLabel:
    """Label a source set: Trusted only if every atom is individually trusted.

    Atoms matched by no rule at all (including ``unknown``) are untrusted.
    """
    if not source:
        raise ValueError("trust_check requires a non-empty source set")
    if all(atom_trusted(policy, atom) for atom in source):
        return TrustLabel.TRUSTED
    return TrustLabel.UNTRUSTED


# --- agent privilege policy -------------------------------------------------

TRUSTED_ROLE = "trusted"
UNTRUSTED_ROLE = "untrusted"


@dataclass(frozen=True)
class AgentPolicy:
    """Plugin allowlists per agent role."""

    trusted_allow: frozenset[str]
    untrusted_allow: frozenset[str]
    name: str = "agent-policy"

    def allowed(self, role: str, plugin: str) -> bool:
        if role == TRUSTED_ROLE:
            return plugin in self.trusted_allow
        if role == UNTRUSTED_ROLE:
            return plugin in self.untrusted_allow
        raise ValueError(f"unknown agent role {role!r}")


def plugin_allowed(policy: AgentPolicy, role: str, plugin: str) -> bool:
    return policy.allowed(role, plugin)


def parse_agent_policy(text: str, registry, name: str = "agent-policy") -> AgentPolicy:
    """Parse a JSON agent policy and validate it against the plugin registry.

    Format: ``{"trusted": [names...], "untrusted": [names...]}``. Every name
    must be registered, and no privileged plugin may appear on the untrusted
    allowlist.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or set(doc) - {"trusted", "untrusted"}:
        raise PolicyError("agent policy must be an object with 'trusted'/'untrusted' lists")
    trusted = doc.get("trusted", [])
    untrusted = doc.get("untrusted", [])
    for key, names in (("trusted", trusted), ("untrusted", untrusted)):
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise PolicyError(f"'{key}' must be a list of plugin names")
    for plugin in [*trusted, *untrusted]:
        if not registry.has(plugin):
            raise PolicyError(f"unknown plugin {plugin!r}")
    for plugin in untrusted:
        if registry.get(plugin).privileged:
            raise PolicyError(f"privileged plugin {plugin!r} listed for the untrusted role")
    return AgentPolicy(frozenset(trusted), frozenset(untrusted), name=name)
