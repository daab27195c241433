"""Expression language for coefficient functions of ``(t, y)``.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = primary [ "^" unary ] ;          (* right associative *)
    primary = number | "t" | "y" | func "(" expr { "," expr } ")"
            | "(" expr ")" ;
    func    = "exp" | "log" | "sin" | "cos" | "tanh" | "sech" | "sqrt"
            | "abs" | "min" | "max" | "clamp" | "ifle" ;

``clamp(x, lo, hi)`` is ``min(max(x, lo), hi)``.  ``ifle(p, q, a, b)`` is
``a`` when ``p <= q`` else ``b``; it is emitted by :func:`differentiate` for
the piecewise primitives and accepted by the parser so that printed
derivatives re-parse.

At a kink the derivative takes the left branch: ``min(u, v)`` and
``max(u, v)`` differentiate along their first argument on ties, and
``abs(u)`` along ``-u`` at ``u == 0``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprSyntaxError",
    "ExprDomainError",
    "parse",
    "to_text",
    "evaluate",
    "differentiate",
    "substitute",
    "depends_on",
    "to_numpy",
    "to_njit",
]

VARIABLES = ("t", "y")
ARITY = {
    "exp": 1,
    "log": 1,
    "sin": 1,
    "cos": 1,
    "tanh": 1,
    "sech": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
    "clamp": 3,
    "ifle": 4,
}

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


class ExprSyntaxError(ValueError):
    def __init__(self, message, text, offset, expected=()):
        self.text = text
        self.offset = offset
        self.line = text.count("\n", 0, offset) + 1
        self.column = offset - (text.rfind("\n", 0, offset) + 1) + 1
        self.expected = tuple(sorted(expected))
        detail = f"{message} at offset {offset} (line {self.line}, column {self.column})"
        if self.expected:
            detail += "; expected one of: " + ", ".join(self.expected)
        super().__init__(detail)


class ExprDomainError(ArithmeticError):
    def __init__(self, message, node):
        self.node = node
        self.offset = node.pos
        where = f" at offset {node.pos}" if node.pos is not None else ""
        super().__init__(f"{message}{where} in {to_text(node)!r}")


# -- AST ---------------------------------------------------------------------


class Expr:
    """Base node.  Nodes are immutable; ``pos`` is the source offset."""

    __slots__ = ()

    def __str__(self):
        return to_text(self)

    def eval(self, t, y):
        return evaluate(self, t, y)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float
    pos: int | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str
    pos: int | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr
    pos: int | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr
    pos: int | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Call(Expr):
    func: str
    args: tuple
    pos: int | None = field(default=None, compare=False, repr=False)


# -- parser ------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if m is None or m.end() == i:
            raise ExprSyntaxError(f"unexpected character {text[i]!r}", text, i)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        i = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    _PRIMARY_START = ("number", "identifier", "(", "-")

    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected, tok=None):
        kind, value, pos = tok or self.peek()
        what = "end of input" if kind == "end" else f"token {value!r}"
        raise ExprSyntaxError(f"unexpected {what}", self.text, pos, expected)

    def expect_op(self, op):
        tok = self.peek()
        if tok[0] != "op" or tok[1] != op:
            self.fail((op,))
        return self.advance()

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(("+", "-", "*", "/", "^", "end of input"))
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            _, op, pos = self.advance()
            node = BinOp(op, node, self.term(), pos=pos)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            _, op, pos = self.advance()
            node = BinOp(op, node, self.unary(), pos=pos)
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.advance()
            return Neg(self.unary(), pos=tok[2])
        return self.power()

    def power(self):
        base = self.primary()
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary(), pos=tok[2])
        return base

    def primary(self):
        kind, value, pos = tok = self.peek()
        if kind == "num":
            self.advance()
            return Num(float(value), pos=pos)
        if kind == "name":
            self.advance()
            nxt = self.peek()
            is_call = nxt[0] == "op" and nxt[1] == "("
            if value in VARIABLES and not is_call:
                return Var(value, pos=pos)
            if value not in ARITY:
                raise ExprSyntaxError(f"unknown identifier {value!r}", self.text, pos)
            if not is_call:
                self.fail(("(",))
            self.advance()
            args = [self.expr()]
            while self.peek()[0] == "op" and self.peek()[1] == ",":
                self.advance()
                args.append(self.expr())
            self.expect_op(")")
            if len(args) != ARITY[value]:
                raise ExprSyntaxError(
                    f"{value} takes {ARITY[value]} argument(s), got {len(args)}", self.text, pos
                )
            return Call(value, tuple(args), pos=pos)
        if kind == "op" and value == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        self.fail(self._PRIMARY_START, tok)


def parse(text: str) -> Expr:
    """Parse ``text`` into an AST; raises :class:`ExprSyntaxError`."""
    return _Parser(text).parse()


# -- printing ------------------------------------------------------------------


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    if isinstance(node, Num) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return _PREC["neg"]
    return _PREC["atom"]


def _num_text(v):
    if v != v or v in (math.inf, -math.inf):
        raise ValueError(f"cannot print non-finite literal {v!r}")
    return repr(float(v))


def to_text(node: Expr) -> str:
    """Print with the minimum parentheses needed to re-parse to the same tree."""
    if isinstance(node, Num):
        return _num_text(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        if _prec(node.arg) < _PREC["neg"]:
            inner = f"({inner})"
        return "-" + inner
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(to_text(a) for a in node.args) + ")"
    p = _PREC[node.op]
    left, right = to_text(node.left), to_text(node.right)
    if node.op == "^":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _PREC["neg"]:
            right = f"({right})"
    else:
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
    return f"{left} {node.op} {right}" if p < 3 else f"{left}{node.op}{right}"


# -- evaluation ------------------------------------------------------------------


def _sech(u):
    return 1.0 / np.cosh(u)


def evaluate(node: Expr, t, y):
    """Evaluate on scalars or broadcastable arrays.

    Raises :class:`ExprDomainError` for log/sqrt outside their domain,
    division by zero and any non-finite intermediate result.
    """
    scalar = np.isscalar(t) and np.isscalar(y)
    with np.errstate(all="ignore"):
        out = _ev(node, np.asarray(t, dtype=float), np.asarray(y, dtype=float))
    out = np.broadcast_to(out, np.broadcast(np.asarray(t), np.asarray(y)).shape)
    return float(out) if scalar else np.array(out, dtype=float)


def _check(node, value):
    if not np.all(np.isfinite(value)):
        raise ExprDomainError("non-finite result", node)
    return value


def _ev(node, t, y):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return t if node.name == "t" else y
    if isinstance(node, Neg):
        return -_ev(node.arg, t, y)
    if isinstance(node, BinOp):
        a = _ev(node.left, t, y)
        b = _ev(node.right, t, y)
        if node.op == "+":
            return _check(node, a + b)
        if node.op == "-":
            return _check(node, a - b)
        if node.op == "*":
            return _check(node, a * b)
        if node.op == "/":
            if np.any(b == 0):
                raise ExprDomainError("division by zero", node)
            return _check(node, a / b)
        if np.any((a < 0) & (b != np.round(b))):
            raise ExprDomainError("negative base with non-integer exponent", node)
        if np.any((a == 0) & (b < 0)):
            raise ExprDomainError("zero raised to a negative power", node)
        return _check(node, np.power(a, b))
    args = [_ev(a, t, y) for a in node.args]
    f = node.func
    if f == "log":
        if np.any(args[0] <= 0):
            raise ExprDomainError("log of nonpositive value", node)
        return np.log(args[0])
    if f == "sqrt":
        if np.any(args[0] < 0):
            raise ExprDomainError("sqrt of negative value", node)
        return np.sqrt(args[0])
    if f == "exp":
        return _check(node, np.exp(args[0]))
    if f == "sin":
        return np.sin(args[0])
    if f == "cos":
        return np.cos(args[0])
    if f == "tanh":
        return np.tanh(args[0])
    if f == "sech":
        return _sech(args[0])
    if f == "abs":
        return np.abs(args[0])
    if f == "min":
        return np.where(args[0] <= args[1], args[0], args[1])
    if f == "max":
        return np.where(args[0] >= args[1], args[0], args[1])
    if f == "clamp":
        x, lo, hi = args
        m = np.where(x >= lo, x, lo)
        return np.where(m <= hi, m, hi)
    p, q, a, b = args
    return np.where(p <= q, a, b)


# -- construction helpers with constant folding ----------------------------------

_ZERO = Num(0.0)
_ONE = Num(1.0)


def _is(node, v):
    return isinstance(node, Num) and node.value == v


def _fold(node):
    try:
        return Num(evaluate(node, 0.0, 0.0))
    except ExprDomainError:
        return node


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _add(a, b):
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if isinstance(b, Neg):
        return _sub(a, b.arg)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is(b, 0):
        return a
    if _is(a, 0):
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a, b):
    if _is(a, 0) or _is(b, 0):
        return _ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if _is(a, -1):
        return _neg(b)
    if _is(b, -1):
        return _neg(a)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def _div(a, b):
    if _is(a, 0):
        return _ZERO
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0:
        return Num(a.value / b.value)
    return BinOp("/", a, b)


def _pow(a, b):
    if _is(b, 0):
        return _ONE
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return _fold(BinOp("^", a, b))
    return BinOp("^", a, b)


def _call(f, *args):
    node = Call(f, tuple(args))
    if all(isinstance(a, Num) for a in args):
        return _fold(node)
    return node


def depends_on(node: Expr, var: str) -> bool:
    if isinstance(node, Var):
        return node.name == var
    if isinstance(node, Num):
        return False
    if isinstance(node, Neg):
        return depends_on(node.arg, var)
    if isinstance(node, BinOp):
        return depends_on(node.left, var) or depends_on(node.right, var)
    return any(depends_on(a, var) for a in node.args)


# -- differentiation -------------------------------------------------------------


def differentiate(node: Expr, var: str) -> Expr:
    """Symbolic partial derivative with respect to ``var`` ("t" or "y")."""
    if var not in VARIABLES:
        raise ValueError(f"can only differentiate with respect to t or y, not {var!r}")
    return _d(node, var)


def _d(node, v):
    if isinstance(node, Num):
        return _ZERO
    if isinstance(node, Var):
        return _ONE if node.name == v else _ZERO
    if not depends_on(node, v):
        return _ZERO
    if isinstance(node, Neg):
        return _neg(_d(node.arg, v))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        da, db = _d(a, v), _d(b, v)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Num(2.0)))
        # power
        if not depends_on(b, v):
            return _mul(_mul(b, _pow(a, _sub(b, _ONE))), da)
        if not depends_on(a, v):
            return _mul(_mul(node, _call("log", a)), db)
        return _mul(node, _add(_mul(db, _call("log", a)), _div(_mul(b, da), a)))
    f = node.func
    args = node.args
    if f == "min":
        return _call("ifle", args[0], args[1], _d(args[0], v), _d(args[1], v))
    if f == "max":
        return _call("ifle", args[1], args[0], _d(args[0], v), _d(args[1], v))
    if f == "clamp":
        x, lo, hi = args
        inner = _call("max", x, lo)
        return _d(_call("min", inner, hi), v)
    if f == "ifle":
        p, q, a, b = args
        return _call("ifle", p, q, _d(a, v), _d(b, v))
    u = args[0]
    du = _d(u, v)
    if f == "exp":
        return _mul(node, du)
    if f == "log":
        return _div(du, u)
    if f == "sin":
        return _mul(_call("cos", u), du)
    if f == "cos":
        return _neg(_mul(_call("sin", u), du))
    if f == "tanh":
        return _mul(_pow(_call("sech", u), Num(2.0)), du)
    if f == "sech":
        return _neg(_mul(_mul(node, _call("tanh", u)), du))
    if f == "sqrt":
        return _div(du, _mul(Num(2.0), node))
    if f == "abs":
        return _call("ifle", u, _ZERO, _neg(du), du)
    raise AssertionError(f)


def substitute(node: Expr, **values: float) -> Expr:
    """Replace variables by numeric constants, e.g. ``substitute(f, t=1.0)``."""
    if isinstance(node, Var):
        return Num(float(values[node.name])) if node.name in values else node
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.arg, **values), pos=node.pos)
    if isinstance(node, BinOp):
        return BinOp(
            node.op, substitute(node.left, **values), substitute(node.right, **values), pos=node.pos
        )
    return Call(node.func, tuple(substitute(a, **values) for a in node.args), pos=node.pos)


# -- compilation ---------------------------------------------------------------


def _source(node, lib):
    if isinstance(node, Num):
        return f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_source(node.arg, lib)})"
    if isinstance(node, BinOp):
        op = "**" if node.op == "^" else node.op
        return f"({_source(node.left, lib)} {op} {_source(node.right, lib)})"
    a = [_source(x, lib) for x in node.args]
    f = node.func
    if lib == "np":
        simple = {"exp", "log", "sin", "cos", "tanh", "sqrt", "abs"}
        if f in simple:
            return f"np.{f}({a[0]})"
        if f == "sech":
            return f"(1.0 / np.cosh({a[0]}))"
        if f == "min":
            return f"_min({a[0]}, {a[1]})"
        if f == "max":
            return f"_max({a[0]}, {a[1]})"
        if f == "clamp":
            return f"_min(_max({a[0]}, {a[1]}), {a[2]})"
        return f"np.where({a[0]} <= {a[1]}, {a[2]}, {a[3]})"
    if f == "abs":
        return f"abs({a[0]})"
    if f == "sech":
        return f"(1.0 / math.cosh({a[0]}))"
    if f == "min":
        return f"_min({a[0]}, {a[1]})"
    if f == "max":
        return f"_max({a[0]}, {a[1]})"
    if f == "clamp":
        return f"_min(_max({a[0]}, {a[1]}), {a[2]})"
    if f == "ifle":
        return f"({a[2]} if {a[0]} <= {a[1]} else {a[3]})"
    return f"math.{f}({a[0]})"


def _np_min(a, b):
    return np.where(a <= b, a, b)


def _np_max(a, b):
    return np.where(a >= b, a, b)


def to_numpy(node: Expr) -> Callable:
    """Compile to a vectorised ``f(t, y)`` (no domain checks; returns float arrays)."""
    src = f"def _f(t, y):\n    return {_source(node, 'np')}\n"
    ns = {"np": np, "_min": _np_min, "_max": _np_max}
    exec(compile(src, f"<expr {to_text(node)[:40]}>", "exec"), ns)
    inner = ns["_f"]

    def f(t, y):
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            out = inner(t, y)
        return np.array(np.broadcast_to(out, np.broadcast(t, y).shape), dtype=float)

    f.source = src
    return f


def _py_min(a, b):
    return a if a <= b else b


def _py_max(a, b):
    return a if a >= b else b


def to_python(node: Expr) -> Callable:
    """Compile to a scalar ``f(t, y)`` over :mod:`math`; numba-compatible source."""
    src = f"def _f(t, y):\n    return float({_source(node, 'math')})\n"
    ns = {"math": math, "_min": _py_min, "_max": _py_max}
    exec(compile(src, f"<expr {to_text(node)[:40]}>", "exec"), ns)
    fn = ns["_f"]
    fn.source = src
    return fn


def to_njit(node: Expr) -> Callable:
    """Compile to a numba ``@njit`` scalar function ``f(t, y)``."""
    from ._accel import njit

    src = f"def _f(t, y):\n    return float({_source(node, 'math')})\n"
    ns = {"math": math, "_min": njit(_py_min), "_max": njit(_py_max)}
    exec(compile(src, f"<expr {to_text(node)[:40]}>", "exec"), ns)
    return njit(ns["_f"])
