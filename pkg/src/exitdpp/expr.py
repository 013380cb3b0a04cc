"""Coefficient expression language.

Expressions are arithmetic over ``t``, ``x1..xd`` and ``u1..um`` with the
operators ``+ - * / ^``, unary minus and the functions

    abs, min, max, exp, log, sin, cos, sqrt, sign, tanh

Precedence from tightest: ``^`` (right associative), unary ``-``, ``* /``,
``+ -``. So ``-x1^2`` is ``-(x1^2)`` and ``2^-1`` is ``0.5``.

Conventions fixed for determinism: ``sign(0) = 0`` and ``0^0 = 1``.
Division by zero, ``log`` of a non-positive number, ``sqrt`` of a negative
number and any other operation producing NaN raise :class:`EvaluationError`
rather than returning NaN.

Evaluation is vectorized: ``x`` may be a vector of shape ``(d,)`` or a batch
of shape ``(n, d)``; ``t`` a scalar or shape ``(n,)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class ExpressionError(ValueError):
    """Base class for parse and evaluation failures."""


class ParseError(ExpressionError):
    def __init__(self, message, text="", offset=None):
        self.text = text
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class EvaluationError(ExpressionError):
    def __init__(self, message, subexpr=None):
        self.subexpr = subexpr
        suffix = f" in {to_string(subexpr)!r}" if subexpr is not None else ""
        super().__init__(f"{message}{suffix}")


# ---------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # "t", "x" or "u"
    index: int = 0  # 1-based for x and u


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


FUNCTIONS = {
    "abs": 1, "exp": 1, "log": 1, "sin": 1, "cos": 1, "sqrt": 1,
    "sign": 1, "tanh": 1, "min": -2, "max": -2,
}  # negative arity: at least that many

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_VAR = re.compile(r"^(x|u)([1-9][0-9]*)$")


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text, d, m):
        self.text = text
        self.d = d
        self.m = m
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value or kind == "end":
            got = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, got {got}", self.text, pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", self.text, pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[:2] == ("op", "("):
                return self.call(val, pos)
            return self.variable(val, pos)
        if (kind, val) == ("op", "("):
            node = self.expr()
            self.expect(")")
            return node
        got = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {got}", self.text, pos)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", self.text, pos)
        self.take()  # "("
        args = [self.expr()]
        while self.peek()[:2] == ("op", ","):
            self.take()
            args.append(self.expr())
        self.expect(")")
        arity = FUNCTIONS[name]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            want = arity if arity > 0 else f"at least {-arity}"
            raise ParseError(f"{name} takes {want} argument(s), got {len(args)}", self.text, pos)
        return Call(name, tuple(args))

    def variable(self, name, pos):
        if name == "t":
            return Var("t")
        m = _VAR.match(name)
        if m is None:
            raise ParseError(f"unknown identifier {name!r}", self.text, pos)
        kind, idx = m.group(1), int(m.group(2))
        limit = self.d if kind == "x" else self.m
        if idx > limit:
            raise ParseError(
                f"variable index out of range: {name} (dimension {limit})", self.text, pos)
        return Var(kind, idx)


def parse(text, d, m=0):
    """Parse ``text`` into an expression tree over ``t, x1..xd, u1..um``."""
    if not isinstance(text, str):
        raise ParseError(f"expression must be a string, got {type(text).__name__}")
    return _Parser(text, d, m).parse()


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_string(node):
    """Render an expression; ``parse(to_string(e))`` rebuilds ``e`` exactly."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return "t" if node.kind == "t" else f"{node.kind}{node.index}"
    if isinstance(node, Neg):
        return f"-({to_string(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_string(node.left)} {node.op} {to_string(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_string(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def variables(node):
    """Set of ``(kind, index)`` pairs referenced by ``node``."""
    if isinstance(node, Var):
        return {(node.kind, node.index)}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    return set().union(*(variables(a) for a in node.args))


def depends_on(node, kind):
    return any(k == kind for k, _ in variables(node))


# ---------------------------------------------------------------- evaluation


def _fail_if_nan(result, node, *inputs):
    if np.isnan(result).any():
        clean = True
        for a in inputs:
            if np.isnan(a).any():
                clean = False
        if clean:
            raise EvaluationError("operation produced NaN", node)
    return result


def _ev(node, t, x, u, shape):
    if isinstance(node, Num):
        return np.full(shape, node.value)
    if isinstance(node, Var):
        if node.kind == "t":
            return np.broadcast_to(np.asarray(t, dtype=float), shape)
        src = x if node.kind == "x" else u
        return src[..., node.index - 1]
    if isinstance(node, Neg):
        return -_ev(node.operand, t, x, u, shape)
    if isinstance(node, BinOp):
        a = _ev(node.left, t, x, u, shape)
        b = _ev(node.right, t, x, u, shape)
        with np.errstate(all="ignore"):
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return _fail_if_nan(a * b, node, a, b)
            if node.op == "/":
                if (b == 0).any():
                    raise EvaluationError("division by zero", node)
                return _fail_if_nan(a / b, node, a, b)
            # "^": numpy already gives 0**0 == 1
            if ((a == 0) & (b < 0)).any():
                raise EvaluationError("division by zero (0 raised to a negative power)", node)
            return _fail_if_nan(np.power(a, b), node, a, b)
    if isinstance(node, Call):
        args = [_ev(arg, t, x, u, shape) for arg in node.args]
        name = node.name
        a = args[0]
        with np.errstate(all="ignore"):
            if name == "min":
                return np.minimum.reduce(args)
            if name == "max":
                return np.maximum.reduce(args)
            if name == "log":
                if (a <= 0).any():
                    raise EvaluationError("log of non-positive value", node)
                return np.log(a)
            if name == "sqrt":
                if (a < 0).any():
                    raise EvaluationError("sqrt of negative value", node)
                return np.sqrt(a)
            fn = {"abs": np.abs, "exp": np.exp, "sin": np.sin, "cos": np.cos,
                  "sign": np.sign, "tanh": np.tanh}[name]
            return _fail_if_nan(fn(a), node, a)
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(node, t, x, u=()):
    """Evaluate ``node`` at ``(t, x, u)``.

    Scalar inputs (``x`` of shape ``(d,)``) give a Python float; batched
    inputs (``x`` of shape ``(n, d)``) give an array of shape ``(n,)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim <= 1:
        xb = np.atleast_1d(x)[None, :]
        ub = np.atleast_1d(u)[None, :] if u.size else np.zeros((1, 0))
        return float(_ev(node, np.asarray(t, dtype=float), xb, ub, (1,))[0])
    n = x.shape[0]
    if u.ndim < 2:
        u = np.broadcast_to(u.reshape(1, -1) if u.size else np.zeros((1, 0)), (n, u.size))
    t = np.asarray(t, dtype=float)
    out = _ev(node, t, x, u, (n,))
    return np.array(out, dtype=float, copy=True)


class Compiled:
    """A parsed expression bundled with its source text and dimensions."""

    def __init__(self, text, d, m=0):
        self.text = text
        self.d = d
        self.m = m
        self.tree = parse(text, d, m)
        self.uses_t = depends_on(self.tree, "t")
        self.uses_x = depends_on(self.tree, "x")
        self.uses_u = depends_on(self.tree, "u")

    def __call__(self, t, x, u=()):
        return evaluate(self.tree, t, x, u)

    def __repr__(self):
        return f"Compiled({self.text!r})"
