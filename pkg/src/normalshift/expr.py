"""Analytic scalar expressions with exact forward-mode differentiation.

Every user-declared field (metric entries, generating functions, conformal
factors, hypersurface maps) is parsed from an infix string into an immutable
AST and evaluated with dual numbers, so first and second derivatives are
exact to machine precision for the supported operator set:

    +  -  *  /  ^    neg    sin cos exp ln sqrt tanh

Evaluation is numpy-transparent: bindings may be floats or arrays of any
common broadcastable shape, and derivatives come back with the same shape.
Domain violations (ln of non-positive, division by zero, sqrt of negative,
fractional power of non-positive base) raise ``EvalDomainError`` naming the
offending subexpression; NaNs are never propagated silently.

Grammar (EBNF, also documented in docs/scenarios.md):

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = "-" , unary | power ;
    power   = atom , [ "^" , unary ] ;            (* right-associative *)
    atom    = number | name | name "(" expr ")" | "(" expr ")" ;
    name    = letter , { letter | digit | "_" } ;

Function names are exactly: sin, cos, exp, ln, sqrt, tanh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import EvalDomainError, ExprSyntaxError, UnknownVariableError

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Expr",
    "DualValue",
    "parse",
    "to_source",
    "eval_dual",
]

_FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt", "tanh")


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # neg | sin | cos | exp | ln | sqrt | tanh
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str  # + - * / ^
    left: "Node"
    right: "Node"


Node = Union[Const, Var, Unary, Binary]


def variables_of(node: Node) -> set:
    """Names of all variables appearing in the tree."""
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Unary):
        return variables_of(node.arg)
    if isinstance(node, Binary):
        return variables_of(node.left) | variables_of(node.right)
    return set()


# --------------------------------------------------------------------------
# Tokenizer / parser
# --------------------------------------------------------------------------

class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind  # num | name | op | lparen | rparen | end
        self.text = text
        self.pos = pos


def _tokenize(source: str) -> list:
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            seen_dot = seen_exp = False
            while j < n:
                d = source[j]
                if d.isdigit():
                    j += 1
                elif d == "." and not seen_dot and not seen_exp:
                    seen_dot = True
                    j += 1
                elif d in "eE" and not seen_exp and j > i:
                    # exponent must be followed by digits or sign+digits
                    k = j + 1
                    if k < n and source[k] in "+-":
                        k += 1
                    if k < n and source[k].isdigit():
                        seen_exp = True
                        j = k
                    else:
                        break
                else:
                    break
            tokens.append(_Token("num", source[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("name", source[i:j], i))
            i = j
            continue
        if c in "+-*/^":
            tokens.append(_Token("op", c, i))
            i += 1
            continue
        if c == "(":
            tokens.append(_Token("lparen", c, i))
            i += 1
            continue
        if c == ")":
            tokens.append(_Token("rparen", c, i))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", source, i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, variables):
        self.source = source
        self.tokens = _tokenize(source)
        self.pos = 0
        self.variables = None if variables is None else set(variables)

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind, what):
        tok = self.peek()
        if tok.kind != kind:
            raise ExprSyntaxError(f"expected {what}", self.source, tok.pos)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {tok.text!r}", self.source, tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.advance()
            return Unary("neg", self.unary())
        if tok.kind == "op" and tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        tok = self.advance()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "name":
            if self.peek().kind == "lparen":
                if tok.text not in _FUNCTIONS:
                    raise ExprSyntaxError(
                        f"unknown function {tok.text!r}", self.source, tok.pos
                    )
                self.advance()
                arg = self.expr()
                self.expect("rparen", "')'")
                return Unary(tok.text, arg)
            if self.variables is not None and tok.text not in self.variables:
                raise UnknownVariableError(tok.text, self.source, tok.pos)
            return Var(tok.text)
        if tok.kind == "lparen":
            node = self.expr()
            self.expect("rparen", "')'")
            return node
        raise ExprSyntaxError("expected a value", self.source, tok.pos)


# --------------------------------------------------------------------------
# Canonical printer
# --------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt_const(value: float) -> str:
    if value < 0:
        return f"(-{format(-value, '.17g')})"
    return format(value, ".17g")


def to_source(node: Node) -> str:
    """Canonical infix form; ``parse(to_source(t))`` reproduces ``t`` for
    any parser-produced tree."""
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            inner = to_source(node.arg)
            if isinstance(node.arg, Binary) and _PREC[node.arg.op] < _PREC["neg"]:
                inner = f"({inner})"
            # -x^2 must stay -(x^2): wrap '^' too since unary binds looser
            elif isinstance(node.arg, Binary):
                inner = f"({inner})"
            return f"-{inner}"
        return f"{node.op}({to_source(node.arg)})"
    if isinstance(node, Binary):
        lp = to_source(node.left)
        rp = to_source(node.right)
        p = _PREC[node.op]
        if isinstance(node.left, (Binary, Unary)) and node.left.op != "neg":
            if isinstance(node.left, Binary) and (
                _PREC[node.left.op] < p or node.op == "^"
            ):
                lp = f"({lp})"
        elif isinstance(node.left, Unary) and node.left.op == "neg":
            lp = f"({lp})"
        if isinstance(node.right, Binary):
            # right operand needs parens at equal precedence for - / ^ chains
            if _PREC[node.right.op] < p or (
                _PREC[node.right.op] == p and node.op in ("-", "/", "*", "+")
            ):
                rp = f"({rp})"
        elif isinstance(node.right, Unary) and node.right.op == "neg":
            if node.op != "^":
                rp = f"({rp})"
        return f"{lp} {node.op} {rp}"
    raise TypeError(f"not an AST node: {node!r}")


# --------------------------------------------------------------------------
# Dual numbers (forward mode, multi-variable, nestable, array-friendly)
# --------------------------------------------------------------------------

class _Dual:
    """Value plus a gradient keyed by variable name.

    Parts may be floats, numpy arrays, or nested ``_Dual`` instances (nesting
    yields exact second derivatives). Only the operations the evaluator needs
    are implemented.
    """

    __slots__ = ("val", "grad")

    def __init__(self, val, grad):
        self.val = val
        self.grad = grad  # dict name -> part

    def __add__(self, other):
        if isinstance(other, _Dual):
            g = dict(self.grad)
            for k, d in other.grad.items():
                g[k] = g[k] + d if k in g else d
            return _Dual(self.val + other.val, g)
        return _Dual(self.val + other, dict(self.grad))

    __radd__ = __add__

    def __neg__(self):
        return _Dual(-self.val, {k: -d for k, d in self.grad.items()})

    def __sub__(self, other):
        return self + (-other) if isinstance(other, _Dual) else _Dual(
            self.val - other, dict(self.grad)
        )

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, _Dual):
            g = {k: d * other.val for k, d in self.grad.items()}
            for k, d in other.grad.items():
                g[k] = g[k] + self.val * d if k in g else self.val * d
            return _Dual(self.val * other.val, g)
        return _Dual(self.val * other, {k: d * other for k, d in self.grad.items()})

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            g = {k: d * inv for k, d in self.grad.items()}
            for k, d in other.grad.items():
                term = val * inv * d
                g[k] = g[k] - term if k in g else -term
            return _Dual(val, g)
        return _Dual(self.val / other, {k: d / other for k, d in self.grad.items()})

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        val = other * inv
        return _Dual(val, {k: -val * inv * d for k, d in self.grad.items()})


def _real(x):
    """Underlying float/array of a possibly nested dual."""
    while isinstance(x, _Dual):
        x = x.val
    return x


def _chain(x, fval, dfval):
    return _Dual(fval, {k: dfval * d for k, d in x.grad.items()})


def _sin(x):
    if isinstance(x, _Dual):
        return _chain(x, _sin(x.val), _cos(x.val))
    return np.sin(x)


def _cos(x):
    if isinstance(x, _Dual):
        return _chain(x, _cos(x.val), -_sin(x.val))
    return np.cos(x)


def _exp(x):
    if isinstance(x, _Dual):
        e = _exp(x.val)
        return _chain(x, e, e)
    return np.exp(x)


def _ln(x):
    if isinstance(x, _Dual):
        return _chain(x, _ln(x.val), 1.0 / x.val)
    return np.log(x)


def _sqrt(x):
    if isinstance(x, _Dual):
        s = _sqrt(x.val)
        return _chain(x, s, 0.5 / s)
    return np.sqrt(x)


def _tanh(x):
    if isinstance(x, _Dual):
        t = _tanh(x.val)
        return _chain(x, t, 1.0 - t * t)
    return np.tanh(x)


_UNARY_FN = {"sin": _sin, "cos": _cos, "exp": _exp, "ln": _ln,
             "sqrt": _sqrt, "tanh": _tanh}


def _ipow(x, k: int):
    if k == 0:
        return 1.0
    if k < 0:
        return 1.0 / _ipow(x, -k)
    out = x
    for _ in range(k - 1):
        out = out * x
    return out


def _const_int_exponent(node: Node):
    """Integer value of a constant exponent node, else None."""
    if isinstance(node, Const) and float(node.value).is_integer():
        return int(node.value)
    if isinstance(node, Unary) and node.op == "neg":
        inner = _const_int_exponent(node.arg)
        return None if inner is None else -inner
    return None


def _eval(node: Node, env: Mapping) -> object:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalDomainError("unbound variable", node.name) from None
    if isinstance(node, Unary):
        x = _eval(node.arg, env)
        if node.op == "neg":
            return -x
        if node.op == "ln" and np.any(_real(x) <= 0.0):
            raise EvalDomainError("ln of non-positive value", to_source(node))
        if node.op == "sqrt":
            r = _real(x)
            if np.any(r < 0.0):
                raise EvalDomainError("sqrt of negative value", to_source(node))
            if isinstance(x, _Dual) and np.any(r == 0.0):
                raise EvalDomainError("sqrt derivative at zero", to_source(node))
        return _UNARY_FN[node.op](x)
    if isinstance(node, Binary):
        a = _eval(node.left, env)
        if node.op == "^":
            k = _const_int_exponent(node.right)
            if k is not None:
                if k < 0 and np.any(_real(a) == 0.0):
                    raise EvalDomainError("zero raised to negative power",
                                          to_source(node))
                return _ipow(a, k)
            b = _eval(node.right, env)
            if np.any(_real(a) <= 0.0):
                raise EvalDomainError("fractional power of non-positive base",
                                      to_source(node))
            return _exp(b * _ln(a))
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(_real(b) == 0.0):
                raise EvalDomainError("division by zero", to_source(node))
            return a / b
    raise TypeError(f"not an AST node: {node!r}")


# --------------------------------------------------------------------------
# Public evaluation API
# --------------------------------------------------------------------------

@dataclass
class DualValue:
    """Evaluation result: value, requested first derivatives, and requested
    second derivatives keyed by variable-name pair."""

    value: object
    derivatives: dict
    second: dict


class Expr:
    """Immutable parsed expression. Evaluation is pure; instances are safe
    for unrestricted concurrent use."""

    __slots__ = ("root", "variables")

    def __init__(self, root: Node, variables=None):
        self.root = root
        self.variables = frozenset(
            variables if variables is not None else variables_of(root)
        )

    @property
    def source(self) -> str:
        return to_source(self.root)

    def __repr__(self):
        return f"Expr({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expr) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    def __call__(self, bindings: Mapping) -> object:
        return _eval(self.root, bindings)

    def grad(self, bindings: Mapping, names: Sequence[str]) -> list:
        dv = eval_dual(self, bindings, first=names)
        return [dv.derivatives[n] for n in names]

    def subst(self, name: str, replacement: "Expr | Node") -> "Expr":
        """New expression with every occurrence of ``name`` replaced."""
        rep = replacement.root if isinstance(replacement, Expr) else replacement

        def walk(node):
            if isinstance(node, Var):
                return rep if node.name == name else node
            if isinstance(node, Unary):
                return Unary(node.op, walk(node.arg))
            if isinstance(node, Binary):
                return Binary(node.op, walk(node.left), walk(node.right))
            return node

        return Expr(walk(self.root))


def parse(source: str, variables: Iterable[str] | None = None) -> Expr:
    """Parse ``source`` over the declared variable set.

    With ``variables=None`` any name is accepted; otherwise a reference to an
    undeclared name raises ``UnknownVariableError`` with its byte offset.
    """
    root = _Parser(source, variables).parse()
    return Expr(root)


def eval_dual(expr: Expr, bindings: Mapping, first: Sequence[str] = (),
              second: Sequence[tuple] = ()) -> DualValue:
    """Evaluate with exact forward-mode derivatives.

    ``first`` lists variable names for first derivatives; ``second`` lists
    (p, q) pairs for second derivatives (computed by nesting forward mode).
    Bindings may be floats or broadcastable numpy arrays.
    """
    missing = expr.variables - set(bindings)
    if missing:
        raise EvalDomainError("unbound variable", sorted(missing)[0])
    first = tuple(first)
    second = tuple(second)
    if not first and not second:
        return DualValue(_eval(expr.root, bindings), {}, {})

    inner_keys = set(first) | {q for _, q in second}
    outer_keys = {p for p, _ in second}

    env = {}
    for name, value in bindings.items():
        val = _Dual(value, {name: 1.0}) if name in inner_keys else value
        if outer_keys:
            g = {name: 1.0} if name in outer_keys else {}
            val = _Dual(val, g)
        env[name] = val

    out = _eval(expr.root, env)

    if not outer_keys:
        inner = out if isinstance(out, _Dual) else _Dual(out, {})
        value = inner.val
        derivs = {k: inner.grad.get(k, _zero_like(value)) for k in first}
        return DualValue(value, derivs, {})

    outer = out if isinstance(out, _Dual) else _Dual(out, {})
    inner = outer.val if isinstance(outer.val, _Dual) else _Dual(outer.val, {})
    value = inner.val
    derivs = {k: inner.grad.get(k, _zero_like(value)) for k in first}
    sec = {}
    for p, q in second:
        dp = outer.grad.get(p)
        if dp is None:
            sec[(p, q)] = _zero_like(value)
        else:
            dp = dp if isinstance(dp, _Dual) else _Dual(dp, {})
            sec[(p, q)] = dp.grad.get(q, _zero_like(value))
    return DualValue(value, derivs, sec)


def _zero_like(value):
    return np.zeros_like(value) if isinstance(value, np.ndarray) else 0.0
