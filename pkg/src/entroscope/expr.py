"""Expression language for test functions and maps.

Grammar::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := base ("^" integer)?
    base   := number | ident | ident "(" expr ("," expr)* ")" | "(" expr ")" | "-" base

Unary minus binds tighter than ``^`` (``-y1^2`` is ``(-y1)^2``); the
printer inserts whatever parentheses are needed to keep the tree intact.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.stats import qmc

from .spaces import ModelSpace, TestFunction

__all__ = [
    "ExpressionError",
    "EvaluationError",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Pow",
    "Call",
    "parse_expression",
    "to_source",
    "count_nodes",
    "compile_expression",
    "estimate_bound",
    "make_test_function",
    "FUNCTIONS",
]

BOUND_INFLATION = 1.25


class ExpressionError(ValueError):
    """Syntax or name error, located at ``line:column`` (1-based)."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at {line}:{column}")
        self.line = line
        self.column = column


class EvaluationError(ValueError):
    """Runtime failure of an expression at a specific point."""


# -- tree ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float
    pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Node"
    pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int
    pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: tuple = field(default=(1, 1), compare=False)


Node = Union[Num, Var, Neg, BinOp, Pow, Call]


def _bump(*args):
    r2 = sum(a * a for a in args)
    inside = r2 < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        out = np.exp(-1.0 / np.where(inside, 1.0 - r2, 1.0))
    return np.where(inside, out, 0.0)


# name -> (min arity, max arity or None, implementation)
FUNCTIONS = {
    "sin": (1, 1, np.sin),
    "cos": (1, 1, np.cos),
    "exp": (1, 1, np.exp),
    "sqrt": (1, 1, np.sqrt),
    "abs": (1, 1, np.abs),
    "atan": (1, 1, np.arctan),
    "norm": (1, None, lambda *a: np.sqrt(sum(v * v for v in a))),
    "bump": (1, None, _bump),
}

_VARIABLE = re.compile(r"y[1-9]|theta")


# -- lexer --------------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: tuple


def _tokenize(src: str) -> list[_Tok]:
    toks, i, line, col = [], 0, 1, 1
    while i < len(src):
        m = _TOKEN.match(src, i)
        if not m:
            raise ExpressionError(f"unexpected character {src[i]!r}", line, col)
        text = m.group()
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, text, (line, col)))
        for ch in text:
            if ch == "\n":
                line, col = line + 1, 1
            else:
                col += 1
        i = m.end()
    toks.append(_Tok("end", "", (line, col)))
    return toks


# -- parser -------------------------------------------------------------------------

class _Parser:
    def __init__(self, src: str, variables: Optional[set]):
        self.toks = _tokenize(src)
        self.i = 0
        self.variables = variables

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.peek()
        raise ExpressionError(msg, *tok.pos)

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text or tok.kind != "op":
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            self.fail(f"expected {text!r}, found {found}")
        return self.take()

    def parse(self) -> Node:
        if self.peek().kind == "end":
            self.fail("empty expression")
        node = self.expr()
        if self.peek().kind != "end":
            self.fail(f"unexpected {self.peek().text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            tok = self.take()
            node = BinOp(tok.text, node, self.term(), tok.pos)
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            tok = self.take()
            node = BinOp(tok.text, node, self.factor(), tok.pos)
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek().kind == "op" and self.peek().text == "^":
            tok = self.take()
            ex = self.peek()
            if ex.kind != "num" or not ex.text.isdigit():
                self.fail("exponent must be a non-negative integer", ex)
            self.take()
            node = Pow(node, int(ex.text), tok.pos)
        return node

    def base(self) -> Node:
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return Num(float(tok.text), tok.pos)
        if tok.kind == "op" and tok.text == "-":
            self.take()
            return Neg(self.base(), tok.pos)
        if tok.kind == "op" and tok.text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "ident":
            self.take()
            return self.identifier(tok)
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        self.fail(f"unexpected {found}")

    def identifier(self, tok: _Tok) -> Node:
        name = tok.text
        is_call = self.peek().kind == "op" and self.peek().text == "("
        if name in FUNCTIONS:
            if not is_call:
                self.fail(f"function {name} needs arguments", tok)
            self.take()
            args = [self.expr()]
            while self.peek().kind == "op" and self.peek().text == ",":
                self.take()
                args.append(self.expr())
            self.expect(")")
            lo, hi, _ = FUNCTIONS[name]
            if len(args) < lo or (hi is not None and len(args) > hi):
                want = str(lo) if hi == lo else f"at least {lo}"
                self.fail(f"{name} takes {want} argument(s), got {len(args)}", tok)
            return Call(name, tuple(args), tok.pos)
        if not _VARIABLE.fullmatch(name) or (self.variables is not None and name not in self.variables):
            self.fail(f"unknown variable {name}" if not is_call else f"unknown function {name}", tok)
        if is_call:
            self.fail(f"{name} is not a function", tok)
        return Var(name, tok.pos)


def parse_expression(src: str, space: Optional[ModelSpace] = None) -> Node:
    """Parse ``src``; with a ``space``, only its variables are accepted."""
    variables = set(space.variables()) if space is not None else None
    return _Parser(src, variables).parse()


# -- printing -----------------------------------------------------------------------

def _level(node: Node) -> int:
    if isinstance(node, BinOp):
        return 1 if node.op in "+-" else 2
    if isinstance(node, Pow):
        return 3
    return 4


def _fmt_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_source(node: Node, need: int = 1) -> str:
    """Shortest-parenthesization source that parses back to the same tree."""
    if _level(node) < need:
        return f"({to_source(node, 1)})"
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + to_source(node.operand, 4)
    if isinstance(node, Pow):
        return f"{to_source(node.base, 4)}^{node.exponent}"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a, 1) for a in node.args)})"
    lvl = _level(node)
    return f"{to_source(node.left, lvl)} {node.op} {to_source(node.right, lvl + 1)}"


def count_nodes(node: Node) -> int:
    if isinstance(node, (Num, Var)):
        return 1
    if isinstance(node, Neg):
        return 1 + count_nodes(node.operand)
    if isinstance(node, Pow):
        return 1 + count_nodes(node.base) + 1
    if isinstance(node, Call):
        return 1 + sum(count_nodes(a) for a in node.args)
    return 1 + count_nodes(node.left) + count_nodes(node.right)


# -- evaluation ---------------------------------------------------------------------

def _where(pts: np.ndarray, mask: np.ndarray) -> list:
    return pts[int(np.argmax(mask))].tolist()


def compile_expression(node: Node, space: ModelSpace, src: str = ""):
    """Vectorized evaluator ``(N, dim) -> (N,)``.

    ``0/0`` evaluates to 0 (the ray-limit convention for directional
    quotients at their center); a nonzero value over 0, ``sqrt`` of a
    negative number or a non-finite result raise :class:`EvaluationError`.
    """
    index = {name: space.variable_index(name) for name in space.variables()}

    def ev(n: Node, pts: np.ndarray) -> np.ndarray:
        if isinstance(n, Num):
            return np.full(pts.shape[0], n.value)
        if isinstance(n, Var):
            return pts[:, index[n.name]].astype(float)
        if isinstance(n, Neg):
            return -ev(n.operand, pts)
        if isinstance(n, Pow):
            return ev(n.base, pts) ** n.exponent
        if isinstance(n, Call):
            args = [ev(a, pts) for a in n.args]
            if n.name == "sqrt" and np.any(args[0] < 0):
                bad = args[0] < 0
                raise EvaluationError(f"sqrt of negative value at {n.pos[0]}:{n.pos[1]} "
                                      f"(point {_where(pts, bad)})")
            with np.errstate(over="ignore"):
                out = FUNCTIONS[n.name][2](*args)
            return np.asarray(out, dtype=float)
        a, b = ev(n.left, pts), ev(n.right, pts)
        if n.op == "+":
            return a + b
        if n.op == "-":
            return a - b
        if n.op == "*":
            return a * b
        zero = b == 0
        if np.any(zero & (a != 0)):
            raise EvaluationError(f"division by zero at {n.pos[0]}:{n.pos[1]} "
                                  f"(point {_where(pts, zero & (a != 0))})")
        return np.where(zero, 0.0, a / np.where(zero, 1.0, b))

    def evaluator(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = ev(node, pts)
        bad = ~np.isfinite(out)
        if np.any(bad):
            raise EvaluationError(f"non-finite value of {src or to_source(node)!r} "
                                  f"at point {_where(pts, bad)}")
        return out

    return evaluator


def estimate_bound(evaluator, box, samples: int = 4096, extra_points=None) -> float:
    """``1.25 * max |f|`` over a Halton sample of ``box`` and any extra points."""
    lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in box)
    u = qmc.Halton(d=lo.size, scramble=False).random(samples)
    pts = lo + u * (hi - lo)
    if extra_points is not None:
        pts = np.vstack([pts, np.atleast_2d(extra_points)])
    m = float(np.max(np.abs(evaluator(pts))))
    return BOUND_INFLATION * m if m > 0 else 1e-300


def make_test_function(src: str, space: ModelSpace, bound: Optional[float] = None, box=None,
                       extra_points=None, label: Optional[str] = None) -> TestFunction:
    """Parse ``src`` into a :class:`TestFunction`.

    Without ``bound`` the sup-bound is estimated on ``box`` (and
    ``extra_points``) and the function is flagged ``bound_estimated``.
    """
    node = parse_expression(src, space)
    ev = compile_expression(node, space, src)
    label = label or to_source(node)
    if bound is not None:
        return TestFunction(ev, space, float(bound), label)
    if box is None:
        raise ValueError(f"{src!r}: supply a bound or a region to estimate one")
    b = estimate_bound(ev, box, extra_points=extra_points)
    return TestFunction(ev, space, b, label, bound_estimated=True)
