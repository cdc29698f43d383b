"""Arithmetic expression language for system maps, with symbolic derivatives.

Expressions are written over the variables ``x1..xn``, ``u1..um``, ``z1..zp``
and the scalar slot ``s``.  They are tokenized, parsed into an immutable AST,
and compiled into vectorized numpy closures together with the AST of every
partial derivative, so analytic Jacobians are available wherever the
expressions are smooth.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ExprError", "LexError", "ParseError", "EvalError", "DomainError",
    "Token", "Node", "CompiledMap",
    "tokenize", "parse", "parse_expr", "evaluate", "differentiate",
    "simplify", "to_string", "free_variables", "compile_map", "default_variables",
]

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "tanh": 1, "sqrt": 1, "abs": 1,
             "sat": 1, "min": 2, "max": 2}
# right-continuous Heaviside; only appears in derivative ASTs
INTERNAL_FUNCTIONS = {"step": 1}

_VAR_RE = re.compile(r"^(?:[xuz][1-9][0-9]*|s)$")


class ExprError(Exception):
    """Base class for expression-layer failures."""


class LexError(ExprError):
    def __init__(self, offset: int, char: str):
        super().__init__(f"unrecognized character {char!r} at offset {offset}")
        self.offset = offset


class ParseError(ExprError):
    def __init__(self, position: int, message: str):
        super().__init__(f"syntax error at token {position}: {message}")
        self.position = position


class EvalError(ExprError):
    pass


class DomainError(EvalError):
    pass


# ---------------------------------------------------------------------------
# lexing

@dataclass(frozen=True)
class Token:
    kind: str  # 'num' | 'ident' | 'op'
    text: str
    offset: int

    @property
    def value(self) -> float:
        return float(self.text)


_NUMBER = re.compile(r"(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_OPS = set("+-*/^(),")


def tokenize(source: str) -> list[Token]:
    """Split ``source`` into tokens; offsets are byte offsets into UTF-8."""
    tokens: list[Token] = []
    pos = 0
    while pos < len(source):
        ch = source[pos]
        if ch.isspace():
            pos += 1
            continue
        m = _NUMBER.match(source, pos)
        if m:
            tokens.append(Token("num", m.group(), _byte_offset(source, pos)))
            pos = m.end()
            continue
        m = _IDENT.match(source, pos)
        if m:
            tokens.append(Token("ident", m.group(), _byte_offset(source, pos)))
            pos = m.end()
            continue
        if ch in _OPS:
            tokens.append(Token("op", ch, _byte_offset(source, pos)))
            pos += 1
            continue
        raise LexError(_byte_offset(source, pos), ch)
    return tokens


def _byte_offset(source: str, pos: int) -> int:
    return len(source[:pos].encode("utf-8"))


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Node:
    """Immutable expression node.

    ``kind`` is one of ``const``, ``var``, ``neg``, ``binop``, ``call``.
    ``value`` holds the float for constants, the name for variables, the
    operator symbol for binops and the function name for calls.
    """

    kind: str
    value: object = None
    children: tuple["Node", ...] = ()

    def __post_init__(self):
        arity = {"const": 0, "var": 0, "neg": 1, "binop": 2}
        if self.kind == "call":
            name = self.value
            expected = FUNCTIONS.get(name, INTERNAL_FUNCTIONS.get(name))
            if expected is None:
                raise ValueError(f"unknown function {name!r}")
            if len(self.children) != expected:
                raise ValueError(f"{name} takes {expected} argument(s)")
        elif self.kind in arity:
            if len(self.children) != arity[self.kind]:
                raise ValueError(f"malformed {self.kind} node")
            if self.kind == "binop" and self.value not in ("+", "-", "*", "/", "^"):
                raise ValueError(f"unknown operator {self.value!r}")
        else:
            raise ValueError(f"unknown node kind {self.kind!r}")

    def __str__(self) -> str:
        return to_string(self)


def const(v: float) -> Node:
    return Node("const", float(v))


def var(name: str) -> Node:
    return Node("var", name)


def _bin(op: str, a: Node, b: Node) -> Node:
    return Node("binop", op, (a, b))


def _call(name: str, *args: Node) -> Node:
    return Node("call", name, tuple(args))


# ---------------------------------------------------------------------------
# parsing

class _Parser:
    def __init__(self, tokens: Sequence[Token], internal: bool):
        self.toks = list(tokens)
        self.i = 0
        self.internal = internal

    def peek(self) -> Token | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def is_op(self, *ops: str) -> bool:
        t = self.peek()
        return t is not None and t.kind == "op" and t.text in ops

    def expect(self, op: str) -> None:
        if not self.is_op(op):
            found = self.peek()
            raise ParseError(self.i, f"expected {op!r}, found "
                             f"{found.text if found else 'end of input'!r}")
        self.i += 1

    def parse(self) -> Node:
        if not self.toks:
            raise ParseError(0, "empty expression")
        node = self.expr()
        if self.peek() is not None:
            raise ParseError(self.i, f"unexpected token {self.peek().text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.is_op("+", "-"):
            op = self.peek().text
            self.i += 1
            node = _bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.is_op("*", "/"):
            op = self.peek().text
            self.i += 1
            node = _bin(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.is_op("-"):
            self.i += 1
            return Node("neg", None, (self.unary(),))
        if self.is_op("+"):
            self.i += 1
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.is_op("^"):
            self.i += 1
            # unary -> power makes '^' right-associative
            return _bin("^", base, self.unary())
        return base

    def primary(self) -> Node:
        t = self.peek()
        if t is None:
            raise ParseError(self.i, "unexpected end of input")
        if t.kind == "num":
            self.i += 1
            return const(t.value)
        if t.kind == "ident":
            self.i += 1
            if self.is_op("("):
                return self.call(t)
            if t.text in FUNCTIONS or t.text in INTERNAL_FUNCTIONS:
                raise ParseError(self.i - 1, f"function {t.text!r} used without arguments")
            if not _VAR_RE.match(t.text):
                raise ParseError(self.i - 1, f"unknown identifier {t.text!r}")
            return var(t.text)
        if self.is_op("("):
            self.i += 1
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(self.i, f"unexpected token {t.text!r}")

    def call(self, name_tok: Token) -> Node:
        name = name_tok.text
        arity = FUNCTIONS.get(name)
        if arity is None and self.internal:
            arity = INTERNAL_FUNCTIONS.get(name)
        if arity is None:
            raise ParseError(self.i - 1, f"unknown function {name!r}")
        start = self.i - 1
        self.expect("(")
        args: list[Node] = []
        if not self.is_op(")"):
            args.append(self.expr())
            while self.is_op(","):
                self.i += 1
                args.append(self.expr())
        self.expect(")")
        if len(args) != arity:
            raise ParseError(start, f"arity: {name} takes {arity} argument(s), got {len(args)}")
        return _call(name, *args)


def parse(tokens: Sequence[Token], *, internal: bool = False) -> Node:
    """Parse a token sequence.

    Precedence from tightest: ``^`` (right-associative), unary minus,
    ``*``/``/``, ``+``/``-``.  ``internal=True`` also accepts the helper
    functions that appear in printed derivative expressions.
    """
    return _Parser(tokens, internal).parse()


def parse_expr(source: str, *, internal: bool = False) -> Node:
    return parse(tokenize(source), internal=internal)


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def to_string(node: Node) -> str:
    """Canonical printed form; re-parsing it yields an equivalent AST."""
    if node.kind == "const":
        v = node.value
        text = repr(float(v))
        return f"({text})" if v < 0 else text
    if node.kind == "var":
        return node.value
    if node.kind == "call":
        return f"{node.value}(" + ", ".join(to_string(c) for c in node.children) + ")"
    if node.kind == "neg":
        return "-" + _wrap(node.children[0], _PREC["neg"], strict=False)
    op = node.value
    a, b = node.children
    p = _PREC[op]
    if op == "^":
        return _wrap(a, p, strict=True) + "^" + _wrap(b, p, strict=False)
    return _wrap(a, p, strict=False) + f" {op} " + _wrap(b, p, strict=True)


def _wrap(node: Node, parent: int, strict: bool) -> str:
    text = to_string(node)
    if node.kind == "binop":
        p = _PREC[node.value]
    elif node.kind == "neg":
        p = _PREC["neg"]
    else:
        return text
    if p < parent or (strict and p == parent):
        return f"({text})"
    return text


def free_variables(node: Node) -> set[str]:
    if node.kind == "var":
        return {node.value}
    out: set[str] = set()
    for c in node.children:
        out |= free_variables(c)
    return out


# ---------------------------------------------------------------------------
# scalar evaluation

def _sat(v):
    return np.maximum(-1.0, np.minimum(1.0, v))


def _step(v):
    return np.where(np.asarray(v) >= 0.0, 1.0, 0.0)


_UNARY = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh,
          "abs": np.abs, "sat": _sat, "step": _step}


def evaluate(node: Node, bindings: Mapping[str, float]) -> float:
    """Evaluate ``node`` in double precision.

    Raises
    ------
    EvalError
        If a free variable is unbound.
    DomainError
        On ``sqrt`` of a negative number, division by zero, or a
        non-integer power of a negative base.
    """
    return float(_eval(node, bindings))


def _eval(node: Node, env: Mapping[str, object]):
    kind = node.kind
    if kind == "const":
        return node.value
    if kind == "var":
        try:
            return env[node.value]
        except KeyError:
            raise EvalError(f"unbound variable {node.value!r}") from None
    if kind == "neg":
        return -_eval(node.children[0], env)
    if kind == "call":
        args = [_eval(c, env) for c in node.children]
        name = node.value
        if name == "sqrt":
            return _checked_sqrt(args[0])
        if name == "min":
            return np.minimum(args[0], args[1])
        if name == "max":
            return np.maximum(args[0], args[1])
        with np.errstate(over="ignore"):
            return _UNARY[name](args[0])
    a = _eval(node.children[0], env)
    b = _eval(node.children[1], env)
    op = node.value
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return _checked_div(a, b)
    return _checked_pow(a, b)


def _checked_sqrt(v):
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of a negative number")
    return np.sqrt(v)


def _checked_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise DomainError("division by zero")
    return np.true_divide(a, b)


def _checked_pow(a, b):
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    bad = (a_arr < 0) & (np.floor(b_arr) != b_arr)
    if np.any(bad):
        raise DomainError("non-integer power of a negative number")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise DomainError("zero raised to a negative power")
    with np.errstate(over="ignore"):
        return np.power(a_arr, b_arr) if a_arr.ndim or b_arr.ndim else float(a_arr ** b_arr)


# ---------------------------------------------------------------------------
# differentiation

ZERO, ONE = const(0.0), const(1.0)


def _is_const(n: Node, v: float | None = None) -> bool:
    return n.kind == "const" and (v is None or n.value == v)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    return _bin("+", a, b)


def _sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    return _bin("-", a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    if _is_const(b) and not _is_const(a):
        return _bin("*", b, a)
    return _bin("*", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0:
        return const(a.value / b.value)
    return _bin("/", a, b)


def _neg(a):
    if _is_const(a):
        return const(-a.value)
    if a.kind == "neg":
        return a.children[0]
    return Node("neg", None, (a,))


def _pow(a, b):
    if _is_const(b, 0.0):
        return ONE
    if _is_const(b, 1.0):
        return a
    return _bin("^", a, b)


def simplify(node: Node) -> Node:
    """Bottom-up constant folding and identity removal."""
    if node.kind in ("const", "var"):
        return node
    kids = tuple(simplify(c) for c in node.children)
    if node.kind == "neg":
        return _neg(kids[0])
    if node.kind == "call":
        if all(_is_const(k) for k in kids) and node.value != "sqrt":
            return const(evaluate(Node("call", node.value, kids), {}))
        return Node("call", node.value, kids)
    a, b = kids
    return {"+": _add, "-": _sub, "*": _mul, "/": _div, "^": _pow}[node.value](a, b)


def differentiate(node: Node, wrt: str) -> Node:
    """Symbolic partial derivative of ``node`` with respect to ``wrt``.

    ``abs``, ``sat``, ``min`` and ``max`` use right-continuous one-sided
    rules at their kinks (``abs'(0) = 1``, ``sat'(-1) = 1``, ``sat'(1) = 0``,
    ties in ``min``/``max`` select the first argument).
    """
    return simplify(_d(node, wrt))


def _d(n: Node, v: str) -> Node:
    k = n.kind
    if k == "const":
        return ZERO
    if k == "var":
        return ONE if n.value == v else ZERO
    if k == "neg":
        return _neg(_d(n.children[0], v))
    if k == "binop":
        a, b = n.children
        da, db = _d(a, v), _d(b, v)
        op = n.value
        if op == "+":
            return _add(da, db)
        if op == "-":
            return _sub(da, db)
        if op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, const(2.0)))
        # power
        if v not in free_variables(b):
            if _is_const(da, 0.0):
                return ZERO
            return _mul(_mul(b, _pow(a, simplify(_sub(b, ONE)))), da)
        if v not in free_variables(a):
            base = simplify(a)
            if not _is_const(base) or base.value <= 0:
                raise ExprError("variable exponent requires a positive constant base")
            return _mul(_mul(n, const(math.log(base.value))), db)
        raise ExprError("power with variable base and exponent is not differentiable "
                        "in this grammar")
    # calls
    name = n.value
    if name in ("min", "max"):
        a, b = n.children
        da, db = _d(a, v), _d(b, v)
        if _is_const(da, 0.0) and _is_const(db, 0.0):
            return ZERO
        # min: a selected where a <= b; max: a selected where a >= b
        sel = _call("step", _sub(b, a)) if name == "min" else _call("step", _sub(a, b))
        return _add(_mul(sel, da), _mul(_sub(ONE, sel), db))
    (a,) = n.children
    da = _d(a, v)
    if _is_const(da, 0.0):
        return ZERO
    if name == "sin":
        outer = _call("cos", a)
    elif name == "cos":
        outer = _neg(_call("sin", a))
    elif name == "exp":
        outer = n
    elif name == "tanh":
        outer = _sub(ONE, _pow(n, const(2.0)))
    elif name == "sqrt":
        outer = _div(const(0.5), n)
    elif name == "abs":
        outer = _sub(_mul(const(2.0), _call("step", a)), ONE)
    elif name == "sat":
        outer = _sub(_call("step", _add(a, ONE)), _call("step", _sub(a, ONE)))
    elif name == "step":
        return ZERO
    else:  # pragma: no cover - guarded by Node validation
        raise ExprError(f"no derivative rule for {name}")
    return _mul(outer, da)


# ---------------------------------------------------------------------------
# compilation

def default_variables(n: int, prefix: str = "x") -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


def _to_py(node: Node) -> str:
    k = node.kind
    if k == "const":
        return repr(float(node.value))
    if k == "var":
        return f"V[{node.value!r}]"
    if k == "neg":
        return f"(-{_to_py(node.children[0])})"
    if k == "call":
        args = ", ".join(_to_py(c) for c in node.children)
        return f"F_{node.value}({args})"
    a, b = (_to_py(c) for c in node.children)
    op = node.value
    if op == "/":
        return f"F_div({a}, {b})"
    if op == "^":
        return f"F_pow({a}, {b})"
    return f"({a} {op} {b})"


_NAMESPACE = {
    "F_sin": np.sin, "F_cos": np.cos, "F_exp": np.exp, "F_tanh": np.tanh,
    "F_abs": np.abs, "F_sat": _sat, "F_step": _step, "F_min": np.minimum,
    "F_max": np.maximum, "F_sqrt": _checked_sqrt, "F_div": _checked_div,
    "F_pow": _checked_pow,
}


def _lambdify(node: Node):
    code = compile(_to_py(node), "<expr>", "eval")
    ns = dict(_NAMESPACE)

    def fn(V):
        with np.errstate(over="ignore", invalid="ignore"):
            return eval(code, ns, {"V": V})
    return fn


class CompiledMap:
    """A vector map ``R^n_in -> R^n_out`` defined by expressions.

    Inputs are ordered by ``variables`` (default ``x1..x{n_in}``).  Calling
    the map on a 1-D array evaluates one point; ``batch`` accepts an
    ``(N, n_in)`` array.  ``jacobian`` returns the ``(n_out, n_in)`` matrix
    of symbolic partial derivatives.
    """

    def __init__(self, exprs: Sequence[Node], variables: Sequence[str]):
        self.exprs = tuple(exprs)
        self.variables = tuple(variables)
        self.n_in = len(self.variables)
        self.n_out = len(self.exprs)
        self.derivatives = tuple(
            tuple(differentiate(e, v) for v in self.variables) for e in self.exprs)
        self._f = [_lambdify(e) for e in self.exprs]
        self._df = [[_lambdify(d) for d in row] for row in self.derivatives]

    def _env(self, X: np.ndarray) -> dict:
        return {name: X[..., j] for j, name in enumerate(self.variables)}

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n_in)
        env = {name: float(x[j]) for j, name in enumerate(self.variables)}
        return np.array([float(f(env)) for f in self._f])

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n_in)
        env = {name: float(x[j]) for j, name in enumerate(self.variables)}
        return np.array([[float(d(env)) for d in row] for row in self._df]).reshape(
            self.n_out, self.n_in)

    def batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_in)
        env = self._env(X)
        out = np.empty((X.shape[0], self.n_out))
        for i, f in enumerate(self._f):
            out[:, i] = f(env)
        return out

    def batch_jacobian(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_in)
        env = self._env(X)
        out = np.empty((X.shape[0], self.n_out, self.n_in))
        for i, row in enumerate(self._df):
            for j, d in enumerate(row):
                out[:, i, j] = d(env)
        return out

    def __repr__(self) -> str:
        body = ", ".join(to_string(e) for e in self.exprs)
        return f"CompiledMap([{body}], variables={list(self.variables)})"


def compile_map(exprs: Sequence[Node | str], n_in: int, n_out: int,
                variables: Sequence[str] | None = None) -> CompiledMap:
    """Compile expressions into a map with analytic Jacobian.

    Parameters
    ----------
    exprs : sequence of Node or str
        One expression per output coordinate.
    n_in, n_out : int
        Declared input and output dimensions.
    variables : sequence of str, optional
        Input variable names in order; defaults to ``x1..x{n_in}``.

    Raises
    ------
    ValueError
        On a dimension mismatch or a free variable outside ``variables``.
    """
    nodes = [parse_expr(e) if isinstance(e, str) else e for e in exprs]
    if len(nodes) != n_out:
        raise ValueError(f"dimension mismatch: {len(nodes)} expressions for n_out={n_out}")
    variables = list(variables) if variables is not None else default_variables(n_in)
    if len(variables) != n_in:
        raise ValueError(f"dimension mismatch: {len(variables)} variables for n_in={n_in}")
    allowed = set(variables)
    for i, node in enumerate(nodes):
        extra = free_variables(node) - allowed
        if extra:
            raise ValueError(f"expression {i} uses undeclared variable(s) {sorted(extra)}")
    return CompiledMap(nodes, variables)
