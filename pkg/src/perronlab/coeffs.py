"""Deterministic expression language for coefficients, payoffs, and test functions.

Grammar (also documented in the README):

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := atom ("^" unary)?          # right-associative
    atom    := NUMBER | "t" | "x"<k> | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Whitelisted calls: exp, tanh, sin, cos, abs (one argument), min, max (two
arguments).  Variables are the time variable ``t`` and space variables
``x1..xd``.  Power exponents must be constant sub-expressions so that
differentiation stays inside the grammar.

Expressions are immutable after parsing and safe to evaluate concurrently.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ExprDomainError, ExprSyntaxError, NonDifferentiableError

__all__ = [
    "Expr",
    "parse",
    "differentiate",
    "Program",
    "compile_program",
    "FUNCTIONS",
]

FUNCTIONS = {"exp": 1, "tanh": 1, "sin": 1, "cos": 1, "abs": 1, "min": 2, "max": 2}

_SMOOTH_CALLS = {"exp", "tanh", "sin", "cos"}


# --------------------------------------------------------------------------
# AST nodes


@dataclass(frozen=True)
class Const:
    value: float

    def __str__(self) -> str:
        return repr(self.value)


@dataclass(frozen=True)
class TimeVar:
    def __str__(self) -> str:
        return "t"


@dataclass(frozen=True)
class SpaceVar:
    index: int  # 1-based, as written in source

    def __str__(self) -> str:
        return f"x{self.index}"


@dataclass(frozen=True)
class Neg:
    arg: "Node"

    def __str__(self) -> str:
        return f"-{_wrap(self.arg, 25)}"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"

    def __str__(self) -> str:
        prec = _PRECEDENCE[self.op]
        lhs = _wrap(self.left, prec)
        # right operand needs parens at equal precedence for - / ^ chains
        rhs = _wrap(self.right, prec + (0 if self.op in "+*" else 1))
        return f"{lhs} {self.op} {rhs}" if self.op != "^" else f"{lhs}^{rhs}"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


Node = Union[Const, TimeVar, SpaceVar, Neg, BinOp, Call]

_PRECEDENCE = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}


def _wrap(node: Node, parent_prec: int) -> str:
    text = str(node)
    if isinstance(node, BinOp) and _PRECEDENCE[node.op] < parent_prec:
        return f"({text})"
    if isinstance(node, Neg) and parent_prec > 10:
        return f"({text})"
    return text


# --------------------------------------------------------------------------
# Public expression wrapper


@dataclass(frozen=True)
class Expr:
    """Parsed expression tree with its declared state dimension."""

    root: Node
    dim: int

    def __str__(self) -> str:
        return str(self.root)

    def __call__(self, t, x):
        return self.evaluate(t, x)

    def evaluate(self, t, x):
        """Evaluate at time ``t`` and point ``x`` (length-``dim`` sequence).

        Accepts scalars or numpy arrays (broadcast together); raises
        ExprDomainError instead of returning non-finite values.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        scalar = np.ndim(t) == 0 and x.ndim == 1
        if x.ndim == 1:
            coords = [x[i] for i in range(self.dim)]
        else:
            coords = [x[..., i] for i in range(self.dim)]
        with np.errstate(all="ignore"):
            out = _eval_node(self.root, t, coords)
            out = np.asarray(out, dtype=float)
        bad = ~np.isfinite(out)
        if bad.any():
            raise ExprDomainError(
                f"non-finite value evaluating '{self}' "
                f"(first offense at flat index {int(np.argmax(bad))})"
            )
        if scalar:
            return float(out)
        batch = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        if out.shape != batch:
            out = np.broadcast_to(out, batch).copy()
        return out

    def depends_on_time(self) -> bool:
        return _uses_time(self.root)

    def is_constant(self) -> bool:
        return not _uses_time(self.root) and not _used_space_vars(self.root)


def _uses_time(node: Node) -> bool:
    if isinstance(node, TimeVar):
        return True
    if isinstance(node, Neg):
        return _uses_time(node.arg)
    if isinstance(node, BinOp):
        return _uses_time(node.left) or _uses_time(node.right)
    if isinstance(node, Call):
        return any(_uses_time(a) for a in node.args)
    return False


def _used_space_vars(node: Node) -> set[int]:
    if isinstance(node, SpaceVar):
        return {node.index}
    if isinstance(node, Neg):
        return _used_space_vars(node.arg)
    if isinstance(node, BinOp):
        return _used_space_vars(node.left) | _used_space_vars(node.right)
    if isinstance(node, Call):
        out: set[int] = set()
        for a in node.args:
            out |= _used_space_vars(a)
        return out
    return set()


def _eval_node(node: Node, t, coords):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, TimeVar):
        return t
    if isinstance(node, SpaceVar):
        return coords[node.index - 1]
    if isinstance(node, Neg):
        return np.negative(_eval_node(node.arg, t, coords))
    if isinstance(node, BinOp):
        a = _eval_node(node.left, t, coords)
        b = _eval_node(node.right, t, coords)
        if node.op == "+":
            return np.add(a, b)
        if node.op == "-":
            return np.subtract(a, b)
        if node.op == "*":
            return np.multiply(a, b)
        if node.op == "/":
            if np.any(np.asarray(b) == 0.0):
                raise ExprDomainError(f"division by zero in '{node}'")
            return np.divide(a, b)
        if node.op == "^":
            return np.power(a, b)
    if isinstance(node, Call):
        args = [_eval_node(a, t, coords) for a in node.args]
        if node.name == "exp":
            return np.exp(args[0])
        if node.name == "tanh":
            return np.tanh(args[0])
        if node.name == "sin":
            return np.sin(args[0])
        if node.name == "cos":
            return np.cos(args[0])
        if node.name == "abs":
            return np.abs(args[0])
        if node.name == "min":
            return np.minimum(args[0], args[1])
        if node.name == "max":
            return np.maximum(args[0], args[1])
    raise AssertionError(f"unreachable node {node!r}")


# --------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            raise ExprSyntaxError(f"unexpected character {stripped[0]!r}", pos)
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]], dim: int):
        self.tokens = tokens
        self.i = 0
        self.dim = dim

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, value, pos = self.peek()
        if value != text:
            raise ExprSyntaxError(f"expected {text!r}, found {value or 'end of input'!r}", pos)
        return self.advance()

    def parse_expr(self) -> Node:
        node = self.parse_term()
        while self.peek()[1] in ("+", "-"):
            op = self.advance()[1]
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> Node:
        node = self.parse_unary()
        while self.peek()[1] in ("*", "/"):
            op = self.advance()[1]
            node = BinOp(op, node, self.parse_unary())
        return node

    def parse_unary(self) -> Node:
        if self.peek()[1] == "-":
            self.advance()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self) -> Node:
        base = self.parse_atom()
        if self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.parse_unary())
        return base

    def parse_atom(self) -> Node:
        kind, value, pos = self.advance()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if value == "t":
                return TimeVar()
            m = re.fullmatch(r"x(\d+)", value)
            if m:
                idx = int(m.group(1))
                if not 1 <= idx <= self.dim:
                    raise ExprSyntaxError(
                        f"variable x{idx} out of range for dimension {self.dim}", pos
                    )
                return SpaceVar(idx)
            if value in FUNCTIONS:
                self.expect("(")
                args = [self.parse_expr()]
                while self.peek()[1] == ",":
                    self.advance()
                    args.append(self.parse_expr())
                self.expect(")")
                if len(args) != FUNCTIONS[value]:
                    raise ExprSyntaxError(
                        f"{value} takes {FUNCTIONS[value]} argument(s), got {len(args)}", pos
                    )
                return Call(value, tuple(args))
            raise ExprSyntaxError(f"unknown identifier {value!r}", pos)
        if value == "(":
            node = self.parse_expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected token {value or 'end of input'!r}", pos)


def parse(source: str, dim: int = 1) -> Expr:
    """Parse ``source`` into an Expr over ``t, x1..x<dim>``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    parser = _Parser(_tokenize(source), dim)
    root = parser.parse_expr()
    kind, value, pos = parser.peek()
    if kind != "end":
        raise ExprSyntaxError(f"trailing input {value!r}", pos)
    return Expr(root, dim)


# --------------------------------------------------------------------------
# Symbolic differentiation


def differentiate(e: Expr, wrt: str) -> Expr:
    """Exact partial derivative of ``e`` w.r.t. ``"t"`` or ``"x<k>"``.

    Raises NonDifferentiableError for min/max/abs and for powers with a
    non-constant exponent.
    """
    if wrt == "t":
        target: Node = TimeVar()
    else:
        m = re.fullmatch(r"x(\d+)", wrt)
        if not m:
            raise ValueError(f"wrt must be 't' or 'x<k>', got {wrt!r}")
        idx = int(m.group(1))
        if not 1 <= idx <= e.dim:
            raise ValueError(f"variable {wrt} out of range for dimension {e.dim}")
        target = SpaceVar(idx)
    return Expr(_diff(e.root, target), e.dim)


_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is_zero(n: Node) -> bool:
    return isinstance(n, Const) and n.value == 0.0


def _is_one(n: Node) -> bool:
    return isinstance(n, Const) and n.value == 1.0


def _add(a: Node, b: Node) -> Node:
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return BinOp("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_zero(b):
        return a
    if _is_zero(a):
        return Neg(b)
    return BinOp("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_zero(a) or _is_zero(b):
        return _ZERO
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    return BinOp("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_zero(a):
        return _ZERO
    if _is_one(b):
        return a
    return BinOp("/", a, b)


def _diff(node: Node, target: Node) -> Node:
    if isinstance(node, Const):
        return _ZERO
    if isinstance(node, (TimeVar, SpaceVar)):
        return _ONE if node == target else _ZERO
    if isinstance(node, Neg):
        d = _diff(node.arg, target)
        return _ZERO if _is_zero(d) else Neg(d)
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        da, db = _diff(a, target), _diff(b, target)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            # (a/b)' = a'/b - a b'/b^2
            return _sub(_div(da, b), _div(_mul(a, db), BinOp("^", b, Const(2.0))))
        if node.op == "^":
            if not isinstance(b, Const):
                raise NonDifferentiableError(
                    f"cannot differentiate power with non-constant exponent in '{node}'"
                )
            if _is_zero(da):
                return _ZERO
            c = b.value
            if c == 0.0:
                return _ZERO
            inner = a if c == 2.0 else BinOp("^", a, Const(c - 1.0))
            return _mul(Const(c), _mul(inner, da))
    if isinstance(node, Call):
        if node.name in ("min", "max", "abs"):
            raise NonDifferentiableError(
                f"{node.name} is not differentiable at kinks; "
                f"cannot differentiate '{node}'"
            )
        (arg,) = node.args
        da = _diff(arg, target)
        if _is_zero(da):
            return _ZERO
        if node.name == "exp":
            outer: Node = Call("exp", (arg,))
        elif node.name == "tanh":
            # tanh' = 1 - tanh^2
            outer = _sub(_ONE, BinOp("^", Call("tanh", (arg,)), Const(2.0)))
        elif node.name == "sin":
            outer = Call("cos", (arg,))
        elif node.name == "cos":
            outer = Neg(Call("sin", (arg,)))
        else:
            raise AssertionError(node.name)
        return _mul(outer, da)
    raise AssertionError(f"unreachable node {node!r}")


# --------------------------------------------------------------------------
# Postfix compilation (consumed by the kernels)

OP_CONST = 0
OP_T = 1
OP_X = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_POW = 7
OP_NEG = 8
OP_EXP = 9
OP_TANH = 10
OP_SIN = 11
OP_COS = 12
OP_ABS = 13
OP_MIN = 14
OP_MAX = 15

_CALL_OPS = {
    "exp": OP_EXP,
    "tanh": OP_TANH,
    "sin": OP_SIN,
    "cos": OP_COS,
    "abs": OP_ABS,
    "min": OP_MIN,
    "max": OP_MAX,
}


@dataclass(frozen=True)
class Program:
    """Postfix form of an Expr: parallel opcode/argument arrays plus constants."""

    codes: np.ndarray  # int32, shape (n,)
    args: np.ndarray  # int32, shape (n,): const index or 0-based space index
    consts: np.ndarray  # float64
    stack_size: int
    source: str

    def constant_value(self) -> float | None:
        """The value if the program is a single constant, else None."""
        if len(self.codes) == 1 and self.codes[0] == OP_CONST:
            return float(self.consts[self.args[0]])
        return None


def compile_program(e: Expr) -> Program:
    codes: list[int] = []
    args: list[int] = []
    consts: list[float] = []

    def emit(node: Node) -> int:
        if isinstance(node, Const):
            codes.append(OP_CONST)
            args.append(len(consts))
            consts.append(node.value)
            return 1
        if isinstance(node, TimeVar):
            codes.append(OP_T)
            args.append(0)
            return 1
        if isinstance(node, SpaceVar):
            codes.append(OP_X)
            args.append(node.index - 1)
            return 1
        if isinstance(node, Neg):
            depth = emit(node.arg)
            codes.append(OP_NEG)
            args.append(0)
            return depth
        if isinstance(node, BinOp):
            d1 = emit(node.left)
            d2 = emit(node.right)
            codes.append({"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}[node.op])
            args.append(0)
            return max(d1, 1 + d2)
        if isinstance(node, Call):
            if len(node.args) == 1:
                depth = emit(node.args[0])
            else:
                d1 = emit(node.args[0])
                d2 = emit(node.args[1])
                depth = max(d1, 1 + d2)
            codes.append(_CALL_OPS[node.name])
            args.append(0)
            return depth
        raise AssertionError(f"unreachable node {node!r}")

    depth = emit(e.root)
    return Program(
        codes=np.asarray(codes, dtype=np.int32),
        args=np.asarray(args, dtype=np.int32),
        consts=np.asarray(consts, dtype=np.float64),
        stack_size=depth,
        source=str(e),
    )
