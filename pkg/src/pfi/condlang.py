"""Small, deterministic expression language for conditional prompt selection.

Arbitrary code from the model never runs inside the privileged loop; instead
the conditional step is expressed in this language over bound condition
values ``c0…cN`` and evaluated here. The result is an integer index into a
prompt list.

Grammar (whitespace-insensitive, case-sensitive keywords)::

    expr     := 'if' expr 'then' expr 'else' expr | or_expr
    or_expr  := and_expr ('or' and_expr)*
    and_expr := not_expr ('and' not_expr)*
    not_expr := 'not' not_expr | cmp_expr
    cmp_expr := add_expr (('=='|'!='|'<'|'<='|'>'|'>=') add_expr)?
    add_expr := mul_expr (('+'|'-') mul_expr)*
    mul_expr := unary (('*'|'/'|'%') unary)*
    unary    := '-' unary | atom
    atom     := INT | 'true' | 'false' | cN | '(' expr ')'

Values are integers, booleans, or strings (strings only enter via bindings).
``if``/``and``/``or``/``not`` require booleans; ``and``/``or`` evaluate both
operands (no short-circuit, so evaluation errors are deterministic); ordering
comparisons require integers; ``==``/``!=`` require same-typed operands;
``/`` and ``%`` truncate toward zero; ``if`` evaluates only the taken branch.
The whole expression must yield an integer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Union

Value = Union[int, bool, str]


class CondError(ValueError):
    """Parse or evaluation failure; callers treat it as a denial."""


@dataclass(frozen=True)
class Lit:
    value: int | bool


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # '-' | 'not'
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # arithmetic, comparison, 'and', 'or'
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class If:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr"


Expr = Union[Lit, Var, Unary, Binary, If]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<op>==|!=|<=|>=|[()+\-*/%<>])|(?P<int>[0-9]+)|(?P<word>[A-Za-z_][A-Za-z0-9_]*))"
)

_KEYWORDS = {"if", "then", "else", "and", "or", "not", "true", "false"}
_VAR_RE = re.compile(r"c[0-9]+\Z")
_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")


def _tokenize(code: str) -> list[str]:
    tokens: list[str] = []
    pos = 0
    while pos < len(code):
        match = _TOKEN_RE.match(code, pos)
        if match is None:
            rest = code[pos:].lstrip()
            if not rest:
                break
            raise CondError(f"illegal character {rest[0]!r}")
        tokens.append(match.group("op") or match.group("int") or match.group("word"))
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise CondError("unexpected end of code")
        if expected is not None and tok != expected:
            raise CondError(f"expected {expected!r}, got {tok!r}")
        self.pos += 1
        return tok

    def expr(self) -> Expr:
        if self.peek() == "if":
            self.take("if")
            cond = self.expr()
            self.take("then")
            then = self.expr()
            self.take("else")
            return If(cond, then, self.expr())
        return self.or_expr()

    def or_expr(self) -> Expr:
        node = self.and_expr()
        while self.peek() == "or":
            self.take("or")
            node = Binary("or", node, self.and_expr())
        return node

    def and_expr(self) -> Expr:
        node = self.not_expr()
        while self.peek() == "and":
            self.take("and")
            node = Binary("and", node, self.not_expr())
        return node

    def not_expr(self) -> Expr:
        if self.peek() == "not":
            self.take("not")
            return Unary("not", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> Expr:
        node = self.add_expr()
        if self.peek() in _CMP_OPS:
            op = self.take()
            node = Binary(op, node, self.add_expr())
        return node

    def add_expr(self) -> Expr:
        node = self.mul_expr()
        while self.peek() in ("+", "-"):
            node = Binary(self.take(), node, self.mul_expr())
        return node

    def mul_expr(self) -> Expr:
        node = self.unary()
        while self.peek() in ("*", "/", "%"):
            node = Binary(self.take(), node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek() == "-":
            self.take()
            return Unary("-", self.unary())
        return self.atom()

    def atom(self) -> Expr:
        tok = self.take()
        if tok == "(":
            node = self.expr()
            self.take(")")
            return node
        if tok == "true":
            return Lit(True)
        if tok == "false":
            return Lit(False)
        if tok.isdigit():
            return Lit(int(tok))
        if _VAR_RE.match(tok):
            return Var(tok)
        if tok in _KEYWORDS:
            raise CondError(f"unexpected keyword {tok!r}")
        raise CondError(f"unexpected token {tok!r}")


def parse_cond(code: str) -> Expr:
    parser = _Parser(_tokenize(code))
    tree = parser.expr()
    if parser.peek() is not None:
        raise CondError(f"trailing tokens starting at {parser.peek()!r}")
    return tree


def _need_bool(value: Value, what: str) -> bool:
    if not isinstance(value, bool):
        raise CondError(f"{what} must be boolean")
    return value


def _need_int(value: Value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CondError(f"expected integer, got {value!r}")
    return value


def _eval(node: Expr, bindings: dict[str, Value]) -> Value:
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Var):
        if node.name not in bindings:
            raise CondError(f"unbound condition variable {node.name}")
        return bindings[node.name]
    if isinstance(node, If):
        taken = node.then if _need_bool(_eval(node.cond, bindings), "if condition") else node.orelse
        return _eval(taken, bindings)
    if isinstance(node, Unary):
        val = _eval(node.operand, bindings)
        if node.op == "not":
            return not _need_bool(val, "'not' operand")
        return -_need_int(val)
    op = node.op
    lhs = _eval(node.left, bindings)
    rhs = _eval(node.right, bindings)
    if op in ("and", "or"):
        left = _need_bool(lhs, f"'{op}' operand")
        right = _need_bool(rhs, f"'{op}' operand")
        return (left and right) if op == "and" else (left or right)
    if op in ("==", "!="):
        if isinstance(lhs, bool) != isinstance(rhs, bool) or type(lhs) is not type(rhs):
            raise CondError("type mismatch in equality")
        return (lhs == rhs) if op == "==" else (lhs != rhs)
    if op in ("<", "<=", ">", ">="):
        la, ra = _need_int(lhs), _need_int(rhs)
        return {"<": la < ra, "<=": la <= ra, ">": la > ra, ">=": la >= ra}[op]
    a, b = _need_int(lhs), _need_int(rhs)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        raise CondError("division by zero")
    quot, rem = abs(a) // abs(b), abs(a) % abs(b)
    if op == "/":
        return quot if (a >= 0) == (b >= 0) else -quot
    return rem if a >= 0 else -rem


def eval_cond_code(
    code: str, bindings: dict[str, Value], n_prompts: int | None = None
) -> int:
    """Evaluate ``code`` to a prompt index.

    With ``n_prompts`` the index is range-checked; without it the caller is
    expected to clamp (see :func:`clamp_index`).
    """
    result = _eval(parse_cond(code), bindings)
    index = _need_int(result)
    if n_prompts is not None and not 0 <= index < n_prompts:
        raise CondError(f"prompt index {index} out of range for {n_prompts} prompts")
    return index


def clamp_index(index: int, n_prompts: int) -> int:
    if n_prompts <= 0:
        raise CondError("empty prompt list")
    return min(max(index, 0), n_prompts - 1)


def parse_condition_value(raw: str) -> Value:
    """Typed re-parse of a proxied raw value for use as a condition binding."""
    if raw == "true":
        return True
    if raw == "false":
        return False
    if re.fullmatch(r"-?[0-9]+", raw):
        return int(raw)
    return raw


class ConditionUse(Enum):
    """Advisory classification of how a conditional uses its inputs.

    Alerts stay alerts either way; this only flags the two patterns a human
    reviewer can fast-path: code that ignores its condition values, and code
    whose every reachable outcome is the same prompt text.
    """

    USES_CONDITION = "uses_condition"
    CONDITION_UNUSED = "condition_unused"
    ALL_BRANCHES_IDENTICAL = "all_branches_identical"


def _vars_used(node: Expr) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Unary):
        return _vars_used(node.operand)
    if isinstance(node, Binary):
        return _vars_used(node.left) | _vars_used(node.right)
    if isinstance(node, If):
        return _vars_used(node.cond) | _vars_used(node.then) | _vars_used(node.orelse)
    return set()


def _possible_indices(node: Expr) -> set[int] | None:
    """Result values the expression can statically take; None = unbounded."""
    if isinstance(node, Lit):
        return {node.value} if not isinstance(node.value, bool) else None
    if isinstance(node, If):
        then = _possible_indices(node.then)
        orelse = _possible_indices(node.orelse)
        if then is None or orelse is None:
            return None
        return then | orelse
    return None


def analyze_condition_use(
    code: str, conditions: list[str], prompts: list[str]
) -> ConditionUse:
    tree = parse_cond(code)
    bound = {f"c{i}" for i in range(len(conditions))}
    if not (_vars_used(tree) & bound):
        return ConditionUse.CONDITION_UNUSED
    indices = _possible_indices(tree)
    if indices is None:
        selected = set(prompts)
    else:
        selected = {prompts[clamp_index(i, len(prompts))] for i in indices}
    if len(selected) <= 1:
        return ConditionUse.ALL_BRANCHES_IDENTICAL
    return ConditionUse.USES_CONDITION
