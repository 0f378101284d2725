"""Plugin registry, capability tokens, and the simulated environment.

Plugins run against a deterministic in-process environment (mailbox, cloud
drive, web index, file tree) loaded from a JSON fixture. Every record touch
is journaled so transcripts can be audited after the fact — in particular,
that nothing invoked under the untrusted capability ever touched a
private-marked record.

Dynamic-privilege plugins (drive search, shell) are split into ``_p``/``_u``
descriptors sharing one implementation: the ``_u`` descriptor permanently
binds the filtered behavior (public-only drive results, a path jail under
the shared directory), so confinement does not depend on the caller being
honest about its role.
"""

from __future__ import annotations

import copy
import json
import posixpath
import shlex
from dataclasses import dataclass, field
from typing import Callable, Optional

from .condlang import CondError, eval_cond_code

# capability tokens are plain opaque ids checked in-process; the trusted
# token dominates (authorizes unprivileged descriptors too)
CAP_TRUSTED = "cap-trusted"
CAP_UNTRUSTED = "cap-untrusted"

SHARED_ROOT = "/shared"

SOURCE_STRATEGIES = ("fixed", "per_result", "transparent", "unknown")


class PluginError(Exception):
    """Schema violations, unknown names/records, permission failures."""


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class PluginResult:
    """One returned record. ``source=None`` means transparent: the caller
    resolves provenance from the call's arguments."""

    value: str
    source: frozenset[str] | None


@dataclass(frozen=True)
class PluginDescriptor:
    name: str
    privileged: bool
    capability: str
    source_strategy: str
    arg_schema: dict[str, str]
    description: str
    handler: Optional[Callable] = None
    dynamic: bool = False
    restricted: bool = False  # the `_u` half of a split pair

    def __post_init__(self):
        if self.source_strategy not in SOURCE_STRATEGIES:
            raise ValueError(f"unknown source strategy {self.source_strategy!r}")


@dataclass
class JournalEntry:
    plugin: str
    capability: str
    operation: str  # read | list | write | delete | send
    target: str
    sharing: str | None = None

    def to_dict(self) -> dict:
        return {
            "plugin": self.plugin,
            "capability": self.capability,
            "operation": self.operation,
            "target": self.target,
            "sharing": self.sharing,
        }


class Environment:
    """Mutable per-session copy of a fixture plus the access journal."""

    def __init__(self, fixture: dict):
        self.mailbox: list[dict] = copy.deepcopy(fixture.get("mailbox", []))
        self.drive: list[dict] = copy.deepcopy(fixture.get("drive", []))
        self.web: dict[str, dict] = copy.deepcopy(fixture.get("web", {}))
        self.fs: dict[str, dict] = copy.deepcopy(fixture.get("fs", {}))
        self.journal: list[JournalEntry] = []

    def log(self, entry: JournalEntry) -> None:
        self.journal.append(entry)


def load_fixture(source) -> dict:
    """Validate fixture JSON (dict, JSON text, or file path) and return it."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):  # a path, not inline JSON
            with open(text, encoding="utf-8") as handle:
                text = handle.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FixtureError(f"fixture is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FixtureError("fixture must be a JSON object")
    unknown = set(doc) - {"mailbox", "drive", "web", "fs"}
    if unknown:
        raise FixtureError(f"unknown fixture sections {sorted(unknown)}")
    for i, message in enumerate(doc.get("mailbox", [])):
        for key in ("sender", "subject", "body"):
            if not isinstance(message.get(key), str):
                raise FixtureError(f"mailbox[{i}].{key} must be a string")
    for i, entry in enumerate(doc.get("drive", [])):
        if entry.get("sharing") not in ("private", "public"):
            raise FixtureError(f"drive[{i}]: unknown sharing level {entry.get('sharing')!r}")
        for key in ("name", "content"):
            if not isinstance(entry.get(key), str):
                raise FixtureError(f"drive[{i}].{key} must be a string")
    for origin, page in doc.get("web", {}).items():
        if not isinstance(page, dict) or not isinstance(page.get("content"), str):
            raise FixtureError(f"web[{origin}] needs string content")
    for path, record in doc.get("fs", {}).items():
        if record.get("ownership") not in ("private", "shared"):
            raise FixtureError(f"fs[{path}]: unknown ownership {record.get('ownership')!r}")
        if not isinstance(record.get("content"), str):
            raise FixtureError(f"fs[{path}].content must be a string")
    return doc


# --- plugin handlers ----------------------------------------------------------
# Handlers return a list of (value, atoms-or-None); invoke() applies the
# descriptor's source strategy on top.


def _render_email(message: dict) -> str:
    return (
        f"From: {message['sender']}\n"
        f"Subject: {message['subject']}\n"
        f"Body: {message['body']}"
    )


def _h_get_unread_emails(env: Environment, args, desc, cap):
    out = []
    for message in env.mailbox:
        if not message.get("unread", True):
            continue
        env.log(JournalEntry(desc.name, cap, "read", f"email:{message['sender']}"))
        out.append((_render_email(message), frozenset({f"email:{message['sender']}"})))
    return out


def _h_search_emails(env: Environment, args, desc, cap):
    needle = args["query"]
    out = []
    for message in env.mailbox:
        if needle in message["subject"] or needle in message["body"]:
            env.log(JournalEntry(desc.name, cap, "read", f"email:{message['sender']}"))
            out.append((_render_email(message), frozenset({f"email:{message['sender']}"})))
    return out


def _h_send_email(env: Environment, args, desc, cap):
    env.log(JournalEntry(desc.name, cap, "send", args["To"]))
    return [(f"Email sent to {args['To']}", None)]


def _h_drive_search(env: Environment, args, desc, cap):
    query = args.get("query")
    name = args.get("name")
    if query is None and name is None:
        raise PluginError("drive_search needs 'query' or 'name'")
    out = []
    for entry in env.drive:
        if desc.restricted and entry["sharing"] != "public":
            if name is not None and entry["name"] == name:
                raise PluginError(f"permission denied: {name!r} is not public")
            continue
        if name is not None:
            if entry["name"] != name:
                continue
        elif query not in entry["name"] and query not in entry["content"]:
            continue
        env.log(JournalEntry(desc.name, cap, "read", entry["name"], entry["sharing"]))
        out.append(
            (
                f"File: {entry['name']}\n{entry['content']}",
                frozenset({f"cloud:{entry['sharing']}"}),
            )
        )
    return out


def _h_file_read(env: Environment, args, desc, cap):
    for entry in env.drive:
        if entry["name"] == args["name"]:
            env.log(JournalEntry(desc.name, cap, "read", entry["name"], entry["sharing"]))
            return [(entry["content"], frozenset({f"cloud:{entry['sharing']}"}))]
    raise PluginError(f"no such file {args['name']!r}")


def _h_web_search(env: Environment, args, desc, cap):
    needle = args["query"]
    out = []
    for origin, page in env.web.items():
        title = page.get("title", origin)
        if needle in title or needle in page["content"]:
            env.log(JournalEntry(desc.name, cap, "read", origin))
            out.append(
                (
                    f"Title: {title}\nURL: {origin}\n{page['content']}",
                    frozenset({f"web:{origin}"}),
                )
            )
    return out


def _h_get_webpage(env: Environment, args, desc, cap):
    page = env.web.get(args["url"])
    if page is None:
        raise PluginError(f"no such page {args['url']!r}")
    env.log(JournalEntry(desc.name, cap, "read", args["url"]))
    return [(page["content"], frozenset({f"web:{args['url']}"}))]


def _h_calculator(env: Environment, args, desc, cap):
    try:
        value = eval_cond_code(args["expr"], {})
    except CondError as exc:
        raise PluginError(f"calculator: {exc}") from None
    return [(str(value), None)]


def _shell_resolve(desc: PluginDescriptor, path: str) -> str:
    base = SHARED_ROOT if desc.restricted else "/"
    if not path.startswith("/"):
        path = f"{base}/{path}"
    resolved = posixpath.normpath(path)
    if resolved.startswith("//"):  # POSIX keeps a leading double slash
        resolved = "/" + resolved.lstrip("/")
    if desc.restricted and resolved != SHARED_ROOT and not resolved.startswith(SHARED_ROOT + "/"):
        raise PluginError(f"permission denied: {path!r} is outside {SHARED_ROOT}")
    return resolved


def _shell_atoms(record: dict) -> frozenset[str]:
    return frozenset({f"shell:{record['ownership']}"})


def _h_bash_shell(env: Environment, args, desc, cap):
    try:
        tokens = shlex.split(args["cmd"])
    except ValueError as exc:
        raise PluginError(f"shell: {exc}") from None
    if not tokens:
        raise PluginError("shell: empty command")
    command, rest = tokens[0], tokens[1:]
    flags = [t for t in rest if t.startswith("-")]
    operands = [t for t in rest if not t.startswith("-")]

    if command == "ls":
        target = _shell_resolve(desc, operands[0] if operands else ".")
        out = []
        prefix = target.rstrip("/") + "/" if target != "/" else "/"
        for path in sorted(env.fs):
            if path == target or path.startswith(prefix):
                record = env.fs[path]
                env.log(JournalEntry(desc.name, cap, "list", path, record["ownership"]))
                out.append((path, _shell_atoms(record)))
        return out

    if command == "cat":
        if not operands:
            raise PluginError("shell: cat needs a path")
        path = _shell_resolve(desc, operands[0])
        record = env.fs.get(path)
        if record is None:
            raise PluginError(f"shell: no such file {path}")
        env.log(JournalEntry(desc.name, cap, "read", path, record["ownership"]))
        return [(record["content"], _shell_atoms(record))]

    if command == "echo":
        # only the append form writes: echo <text...> >> <path>
        if ">>" not in rest:
            return [(" ".join(rest), None)]
        split_at = rest.index(">>")
        text = " ".join(rest[:split_at])
        if len(rest) != split_at + 2:
            raise PluginError("shell: echo append needs exactly one target path")
        path = _shell_resolve(desc, rest[split_at + 1])
        record = env.fs.get(path)
        if record is None:
            ownership = "shared" if path.startswith(SHARED_ROOT) else "private"
            record = {"ownership": ownership, "content": ""}
            env.fs[path] = record
        record["content"] = record["content"] + text + "\n"
        env.log(JournalEntry(desc.name, cap, "write", path, record["ownership"]))
        return [(f"appended to {path}", None)]

    if command == "rm":
        if operands == ["*"] or (operands and operands[0] in ("*", "/*")):
            base = SHARED_ROOT if desc.restricted else "/"
            victims = [
                p for p in sorted(env.fs)
                if base == "/" or p == base or p.startswith(base + "/")
            ]
        elif operands:
            victims = [_shell_resolve(desc, operands[0])]
        else:
            raise PluginError("shell: rm needs a path")
        deleted = []
        for path in victims:
            record = env.fs.get(path)
            if record is None:
                if "-f" in flags or "-rf" in flags:
                    continue
                raise PluginError(f"shell: no such file {path}")
            env.log(JournalEntry(desc.name, cap, "delete", path, record["ownership"]))
            del env.fs[path]
            deleted.append(path)
        return [(f"removed {len(deleted)} file(s)", None)]

    raise PluginError(f"shell: unsupported command {command!r}")


# --- registry -----------------------------------------------------------------


@dataclass
class Registry:
    descriptors: dict[str, PluginDescriptor] = field(default_factory=dict)

    def register(self, descriptor: PluginDescriptor) -> None:
        if descriptor.name in self.descriptors:
            raise PluginError(f"duplicate plugin {descriptor.name!r}")
        self.descriptors[descriptor.name] = descriptor

    def has(self, name: str) -> bool:
        return name in self.descriptors

    def get(self, name: str) -> PluginDescriptor:
        if name not in self.descriptors:
            raise PluginError(f"unknown plugin {name!r}")
        return self.descriptors[name]

    def names(self) -> list[str]:
        return sorted(self.descriptors)

    def split_dynamic(self, name: str) -> tuple[PluginDescriptor, PluginDescriptor]:
        """Create ``<name>_p`` / ``<name>_u`` from a dynamic descriptor.

        The base descriptor stays registered (the unsplit agent variants use
        it); the `_u` half binds the restricted behavior and the untrusted
        capability.
        """
        base = self.get(name)
        if not base.dynamic:
            raise PluginError(f"plugin {name!r} is not dynamic")
        priv = PluginDescriptor(
            name=f"{name}_p",
            privileged=True,
            capability=CAP_TRUSTED,
            source_strategy=base.source_strategy,
            arg_schema=base.arg_schema,
            description=f"{base.description} (privileged capability)",
            handler=base.handler,
        )
        restricted = PluginDescriptor(
            name=f"{name}_u",
            privileged=False,
            capability=CAP_UNTRUSTED,
            source_strategy=base.source_strategy,
            arg_schema=base.arg_schema,
            description=f"{base.description} (restricted capability)",
            handler=base.handler,
            restricted=True,
        )
        self.register(priv)
        self.register(restricted)
        return priv, restricted


def _validate_args(descriptor: PluginDescriptor, args: dict) -> None:
    if not isinstance(args, dict):
        raise PluginError(f"{descriptor.name}: args must be an object")
    required = {k for k in descriptor.arg_schema if not k.endswith("?")}
    known = {k.rstrip("?") for k in descriptor.arg_schema}
    missing = required - set(args)
    if missing:
        raise PluginError(f"{descriptor.name}: missing argument(s) {sorted(missing)}")
    extra = set(args) - known
    if extra:
        raise PluginError(f"{descriptor.name}: unknown argument(s) {sorted(extra)}")
    for key, value in args.items():
        if not isinstance(value, str):
            raise PluginError(f"{descriptor.name}: argument {key!r} must be a string")


def invoke(
    registry: Registry, env: Environment, capability: str, name: str, args: dict
) -> list[PluginResult]:
    """Execute a plugin under a capability token and annotate provenance."""
    descriptor = registry.get(name)
    if capability != descriptor.capability and capability != CAP_TRUSTED:
        raise PluginError(f"capability does not authorize {name!r}")
    if descriptor.handler is None:
        raise PluginError(f"{name!r} is a built-in handled by the flow guard")
    _validate_args(descriptor, args)
    records = descriptor.handler(env, args, descriptor, capability)
    results = []
    for value, atoms in records:
        if descriptor.source_strategy == "fixed":
            source: frozenset[str] | None = frozenset({f"plugin:{descriptor.name}"})
        elif descriptor.source_strategy == "per_result":
            # write confirmations carry the plugin's own provenance
            source = atoms if atoms is not None else frozenset({f"plugin:{descriptor.name}"})
        elif descriptor.source_strategy == "transparent":
            source = None
        else:
            source = frozenset({"unknown"})
        results.append(PluginResult(value=value, source=source))
    return results


COND_PROMPT = "cond_prompt"


def default_registry() -> Registry:
    registry = Registry()
    registry.register(
        PluginDescriptor(
            "get_unread_emails", True, CAP_TRUSTED, "per_result",
            {}, "Fetch unread inbox messages.", _h_get_unread_emails,
        )
    )
    registry.register(
        PluginDescriptor(
            "search_emails", True, CAP_TRUSTED, "per_result",
            {"query": "string"}, "Search mailbox by substring.", _h_search_emails,
        )
    )
    registry.register(
        PluginDescriptor(
            "send_email", True, CAP_TRUSTED, "fixed",
            {"To": "string", "Subject": "string", "Body": "string"},
            "Send an email.", _h_send_email,
        )
    )
    registry.register(
        PluginDescriptor(
            "drive_search", True, CAP_TRUSTED, "per_result",
            {"query?": "string", "name?": "string"},
            "Search cloud drive files.", _h_drive_search, dynamic=True,
        )
    )
    registry.register(
        PluginDescriptor(
            "file_read", True, CAP_TRUSTED, "per_result",
            {"name": "string"}, "Read one drive file by name.", _h_file_read,
        )
    )
    registry.register(
        PluginDescriptor(
            "web_search", False, CAP_UNTRUSTED, "per_result",
            {"query": "string"}, "Search the public web index.", _h_web_search,
        )
    )
    registry.register(
        PluginDescriptor(
            "get_webpage", False, CAP_UNTRUSTED, "per_result",
            {"url": "string"}, "Fetch one page by URL.", _h_get_webpage,
        )
    )
    registry.register(
        PluginDescriptor(
            "calculator", False, CAP_UNTRUSTED, "transparent",
            {"expr": "string"}, "Evaluate an arithmetic expression.", _h_calculator,
        )
    )
    registry.register(
        PluginDescriptor(
            "bash_shell", True, CAP_TRUSTED, "per_result",
            {"cmd": "string"}, "Run a stub shell command (ls/cat/echo>>/rm).",
            _h_bash_shell, dynamic=True,
        )
    )
    registry.register(
        PluginDescriptor(
            COND_PROMPT, True, CAP_TRUSTED, "fixed",
            {"condition": "string", "prompt": "string", "code": "string"},
            "Conditionally select the next prompt from untrusted values.",
        )
    )
    registry.split_dynamic("drive_search")
    registry.split_dynamic("bash_shell")
    return registry
