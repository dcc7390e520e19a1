"""Sandboxed expression language for reward forms.

Grammar (EBNF)::

    expr     = "let" IDENT "=" expr "in" expr | additive ;
    additive = term { ("+" | "-") term } ;
    term     = unary { ("*" | "/") unary } ;
    unary    = "-" unary | primary ;
    primary  = NUMBER | IDENT | ref | call | "(" expr ")" ;
    ref      = ("obs" | "sla") "(" STRING ")" ;
    call     = ("abs" | "exp") "(" expr ")"
             | ("min" | "max") "(" expr "," expr ")"
             | "clip" "(" expr "," expr "," expr ")" ;

``#`` starts a comment that runs to the end of the line. There are no loops,
conditionals or assignments, so evaluation is O(node count). Evaluation works
on floats or on equal-length numpy arrays (one reward per element).
"""
from __future__ import annotations

import hashlib
import re
import textwrap
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

# the EBNF block of the module docstring, shipped to LLM prompts verbatim
GRAMMAR = textwrap.dedent(__doc__.split("::\n", 1)[1].split("\n\n``#``", 1)[0]).strip()

MAX_NODES = 512
MAX_DEPTH = 32

FUNCTIONS = {"abs": 1, "exp": 1, "min": 2, "max": 2, "clip": 3}
KEYWORDS = {"let", "in", "obs", "sla"} | set(FUNCTIONS)


class DslError(ValueError):
    pass


class DslSyntaxError(DslError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


class DslLimitError(DslError):
    pass


class DslEvalError(DslError):
    pass


class DivisionByZeroError(DslEvalError):
    pass


class MissingBindingError(DslEvalError):
    def __init__(self, kind: str, name: str):
        super().__init__(f"missing {kind} binding {name!r}")
        self.kind = kind
        self.name = name


class NonFiniteError(DslEvalError):
    pass


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Obs:
    name: str


@dataclass(frozen=True)
class Sla:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Let:
    name: str
    value: "Node"
    body: "Node"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


Node = Union[Num, Obs, Sla, Var, Let, Neg, BinOp, Call]


def children(node: Node) -> tuple:
    if isinstance(node, Let):
        return (node.value, node.body)
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    return ()


def node_count(node: Node) -> int:
    return 1 + sum(node_count(c) for c in children(node))


def depth(node: Node) -> int:
    return 1 + max((depth(c) for c in children(node)), default=0)


# --- lexer -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<str>"[^"\n]*"|'[^'\n]*')
  | (?P<op>[-+*/(),=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def tokenize(source: str) -> list[Token]:
    out = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append(Token(kind, m.group(), pos))
        pos = m.end()
    out.append(Token("eof", "", len(source)))
    return out


# --- parser ----------------------------------------------------------------

class _Parser:
    def __init__(self, source: str):
        self.tokens = tokenize(source)
        self.i = 0
        self.nesting = 0
        self.scope: list[str] = []

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _describe(self, tok: Token) -> str:
        return "end of input" if tok.kind == "eof" else repr(tok.text)

    def expect(self, text: str) -> Token:
        tok = self.tok
        if tok.text != text or tok.kind == "str":
            raise DslSyntaxError(f"expected {text!r}, found {self._describe(tok)}", tok.pos)
        self.i += 1
        return tok

    def enter(self):
        self.nesting += 1
        if self.nesting > MAX_DEPTH:
            raise DslLimitError(f"expression nesting exceeds {MAX_DEPTH}")

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "eof":
            raise DslSyntaxError(f"unexpected {self._describe(self.tok)}", self.tok.pos)
        return node

    def expr(self) -> Node:
        self.enter()
        try:
            if self.tok.kind == "ident" and self.tok.text == "let":
                self.i += 1
                name_tok = self.tok
                if name_tok.kind != "ident" or name_tok.text in KEYWORDS:
                    raise DslSyntaxError(f"expected a variable name, found {self._describe(name_tok)}", name_tok.pos)
                self.i += 1
                self.expect("=")
                value = self.expr()
                self.expect("in")
                self.scope.append(name_tok.text)
                body = self.expr()
                self.scope.pop()
                return Let(name_tok.text, value, body)
            return self.additive()
        finally:
            self.nesting -= 1

    def additive(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            self.enter()
            try:
                return Neg(self.unary())
            finally:
                self.nesting -= 1
        return self.primary()

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "ident":
            self.i += 1
            if tok.text in ("obs", "sla"):
                self.expect("(")
                s = self.tok
                if s.kind != "str":
                    raise DslSyntaxError(f"expected a quoted name, found {self._describe(s)}", s.pos)
                self.i += 1
                self.expect(")")
                name = s.text[1:-1]
                return Obs(name) if tok.text == "obs" else Sla(name)
            if tok.text in FUNCTIONS:
                self.expect("(")
                args = [self.expr()]
                while self.tok.text == "," and self.tok.kind == "op":
                    self.i += 1
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[tok.text]:
                    raise DslSyntaxError(
                        f"{tok.text}() takes {FUNCTIONS[tok.text]} argument(s), got {len(args)}", tok.pos
                    )
                return Call(tok.text, tuple(args))
            if tok.text in KEYWORDS:
                raise DslSyntaxError(f"unexpected keyword {tok.text!r}", tok.pos)
            if tok.text not in self.scope:
                raise DslSyntaxError(f"unbound identifier {tok.text!r}", tok.pos)
            return Var(tok.text)
        raise DslSyntaxError(f"unexpected {self._describe(tok)}", tok.pos)


# --- printer ---------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    s = repr(float(v))
    return f"({s})" if v < 0 or s.startswith("-") else s


def pretty(node: Node) -> str:
    """Canonical source text; re-parses to an identical tree."""
    return _pp(node, 0)


def _pp(node: Node, ctx: int) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Obs):
        return f'obs("{node.name}")'
    if isinstance(node, Sla):
        return f'sla("{node.name}")'
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}(" + ", ".join(_pp(a, 0) for a in node.args) + ")"
    if isinstance(node, Let):
        s = f"let {node.name} = {_pp(node.value, 0)} in {_pp(node.body, 0)}"
        return f"({s})" if ctx > 0 else s
    if isinstance(node, Neg):
        return "-" + _pp(node.operand, 3)
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        s = f"{_pp(node.left, p)} {node.op} {_pp(node.right, p + 1)}"
        return f"({s})" if p < ctx else s
    raise TypeError(node)


# --- reward form -----------------------------------------------------------

def _collect(node: Node, kind: type) -> set[str]:
    found = {node.name} if isinstance(node, kind) else set()
    for c in children(node):
        found |= _collect(c, kind)
    return found


@dataclass(frozen=True)
class RewardForm:
    source: str
    ast: Node
    required_obs: frozenset
    required_sla: frozenset
    id: str

    @property
    def canonical(self) -> str:
        return pretty(self.ast)

    def to_file_text(self) -> str:
        return f"# reward-form id: {self.id}\n{self.canonical}\n"


def form_from_ast(ast: Node, source: str | None = None) -> RewardForm:
    canonical = pretty(ast)
    return RewardForm(
        source=canonical if source is None else source,
        ast=ast,
        required_obs=frozenset(_collect(ast, Obs)),
        required_sla=frozenset(_collect(ast, Sla)),
        id=hashlib.sha256(canonical.encode()).hexdigest()[:16],
    )


def parse(source: str) -> RewardForm:
    """Parse reward source text into a validated, hashed form."""
    ast = _Parser(source).parse()
    n = node_count(ast)
    if n > MAX_NODES:
        raise DslLimitError(f"expression has {n} nodes, limit is {MAX_NODES}")
    d = depth(ast)
    if d > MAX_DEPTH:
        raise DslLimitError(f"expression depth {d} exceeds {MAX_DEPTH}")
    return form_from_ast(ast, source)


def load_reward_file(path) -> RewardForm:
    from pathlib import Path

    return parse(Path(path).read_text(encoding="utf-8"))


# --- evaluation ------------------------------------------------------------

def _eval(node: Node, obs: Mapping, psi: Mapping, env: dict):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Obs):
        try:
            return obs[node.name]
        except KeyError:
            raise MissingBindingError("obs", node.name) from None
    if isinstance(node, Sla):
        try:
            return psi[node.name]
        except KeyError:
            raise MissingBindingError("sla", node.name) from None
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Let):
        inner = dict(env)
        inner[node.name] = _eval(node.value, obs, psi, env)
        return _eval(node.body, obs, psi, inner)
    if isinstance(node, Neg):
        return -_eval(node.operand, obs, psi, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, obs, psi, env)
        b = _eval(node.right, obs, psi, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0.0):
            raise DivisionByZeroError("division by zero")
        return a / b
    if isinstance(node, Call):
        args = [_eval(a, obs, psi, env) for a in node.args]
        if node.fn == "abs":
            return np.abs(args[0]) if isinstance(args[0], np.ndarray) else abs(args[0])
        if node.fn == "exp":
            return np.exp(args[0])
        if node.fn == "min":
            return np.minimum(args[0], args[1])
        if node.fn == "max":
            return np.maximum(args[0], args[1])
        if node.fn == "clip":
            return np.minimum(np.maximum(args[0], args[1]), args[2])
    raise TypeError(node)


def evaluate(form: RewardForm, obs: Mapping, psi: Mapping):
    """Evaluate a form. Scalars in give a float out; arrays give an array."""
    with np.errstate(all="ignore"):
        out = _eval(form.ast, obs, psi, {})
    arr = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("reward evaluated to a non-finite value")
    if arr.ndim == 0:
        return float(arr)
    return arr


# --- validation ------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    name: str = ""

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "name": self.name}


def _ranges(schema) -> dict[str, tuple[float, float]]:
    if isinstance(schema, Mapping):
        return {k: (float(v[0]), float(v[1])) for k, v in schema.items()}
    return {k: (0.0, 1.0) for k in schema}


def validate(form: RewardForm, obs_schema, sla_schema, n_probes: int = 32, seed: int = 0) -> list[Issue]:
    """Name checks plus probe evaluation. An empty list means the form is usable.

    Schemas are either name sets or ``name -> (lo, hi)`` mappings giving the
    probe sampling range (sets default to ``[0, 1]``).
    """
    obs_r = _ranges(obs_schema)
    sla_r = _ranges(sla_schema)
    issues = [Issue("unknown-obs", f"observation {n!r} is not available", n)
              for n in sorted(form.required_obs - set(obs_r))]
    issues += [Issue("unknown-sla", f"SLA parameter {n!r} is not available", n)
               for n in sorted(form.required_sla - set(sla_r))]
    if issues:
        return issues
    rng = np.random.default_rng(seed)
    obs = {n: rng.uniform(*obs_r[n], size=n_probes) for n in sorted(form.required_obs)}
    psi = {n: rng.uniform(*sla_r[n], size=n_probes) for n in sorted(form.required_sla)}
    try:
        evaluate(form, obs, psi)
    except DivisionByZeroError as exc:
        return [Issue("division-by-zero", str(exc))]
    except NonFiniteError as exc:
        return [Issue("non-finite", str(exc))]
    except MissingBindingError as exc:
        return [Issue("missing-binding", str(exc), exc.name)]
    return []
