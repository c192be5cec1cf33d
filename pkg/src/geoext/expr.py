"""Arithmetic expression ASTs with exact differentiation.

Grammar (documented in docs/format.md):

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' exponent)*          # left associative
    exponent := '-' exponent | atom
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Functions: sin, cos, tan, exp, ln, sqrt.  Whitespace is insignificant.
Evaluation is total on the declared domain or raises EvalDomainError;
NaN is never propagated silently.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import EvalDomainError, ParseError

FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "sqrt")


class Expr:
    """Base node. Instances are immutable and hashable."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # one of + - * / ^
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


# ---------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)"
                       r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
                       r"|(?P<op>[-+*/^()]))")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            off = len(text) - len(rest)
            raise ParseError(f"unexpected character {rest[0]!r}", off,
                             {"number", "name", "operator"})
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, off = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"got {val or 'end of input'!r}", off, {op})
        return self.take()

    def parse(self):
        if self.peek()[0] == "end":
            raise ParseError("empty expression", 0, {"number", "name", "("})
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ParseError(f"trailing input {val!r}", off, {"end of input"})
        return e

    def expr(self):
        e = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                e = BinOp(val, e, self.term())
            else:
                return e

    def term(self):
        e = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.take()
                e = BinOp(val, e, self.unary())
            else:
                return e

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        e = self.atom()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "^":
                self.take()
                e = BinOp("^", e, self.exponent())
            else:
                return e

    def exponent(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.exponent())
        return self.atom()

    def atom(self):
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", off,
                                     set(FUNCTIONS))
                self.take()
                arg = self.expr()
                self.expect_op(")")
                return Call(val, arg)
            return Var(val)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise ParseError(f"got {val or 'end of input'!r}", off,
                         {"number", "name", "("})


def parse(text):
    """Parse an expression string into an Expr tree."""
    return _Parser(text).parse()


# --------------------------------------------------------------- evaluation

def evaluate(e, env):
    """Evaluate e with env mapping variable names to floats."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise EvalDomainError(f"unbound variable {e.name!r}") from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, BinOp):
        a = evaluate(e.left, env)
        b = evaluate(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0.0:
                raise EvalDomainError("division by zero")
            return a / b
        # pow: non-integer exponent requires a positive base
        if b != round(b):
            if a <= 0.0:
                raise EvalDomainError(
                    f"non-integer power of non-positive base {a}")
            return math.pow(a, b)
        if a == 0.0 and b < 0:
            raise EvalDomainError("zero raised to a negative power")
        return math.pow(a, b) if a >= 0 else (-1.0) ** int(b) * math.pow(-a, b)
    if isinstance(e, Call):
        x = evaluate(e.arg, env)
        if e.func == "sin":
            return math.sin(x)
        if e.func == "cos":
            return math.cos(x)
        if e.func == "tan":
            return math.tan(x)
        if e.func == "exp":
            return math.exp(x)
        if e.func == "ln":
            if x <= 0.0:
                raise EvalDomainError(f"ln of non-positive value {x}")
            return math.log(x)
        if e.func == "sqrt":
            if x < 0.0:
                raise EvalDomainError(f"sqrt of negative value {x}")
            return math.sqrt(x)
    raise TypeError(f"not an Expr: {e!r}")


# ------------------------------------------------- folding smart constructors

def _num(x):
    return Num(float(x))


def _is(e, v):
    return isinstance(e, Num) and e.value == v


def add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return _num(0.0)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return BinOp("*", a, b)


def div(a, b):
    if _is(a, 0.0) and not _is(b, 0.0):
        return _num(0.0)
    if _is(b, 1.0):
        return a
    return BinOp("/", a, b)


def neg(a):
    if isinstance(a, Num):
        return _num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def pow_(a, b):
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return _num(1.0)
    return BinOp("^", a, b)


def call(func, arg):
    return Call(func, arg)


# ------------------------------------------------------------ differentiation

def differentiate(e, var):
    """Exact derivative of e with respect to variable name var.

    Only constant folding is applied; no further simplification is promised.
    """
    if isinstance(e, Num):
        return _num(0.0)
    if isinstance(e, Var):
        return _num(1.0 if e.name == var else 0.0)
    if isinstance(e, Neg):
        return neg(differentiate(e.arg, var))
    if isinstance(e, BinOp):
        da = differentiate(e.left, var)
        db = differentiate(e.right, var)
        a, b = e.left, e.right
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        if e.op == "/":
            return div(sub(mul(da, b), mul(a, db)), pow_(b, _num(2.0)))
        # d(a^b) = a^b * (db*ln(a) + b*da/a); constant exponent shortcut
        if isinstance(b, Num):
            return mul(mul(b, pow_(a, _num(b.value - 1.0))), da)
        return mul(pow_(a, b),
                   add(mul(db, call("ln", a)), div(mul(b, da), a)))
    if isinstance(e, Call):
        d = differentiate(e.arg, var)
        u = e.arg
        if e.func == "sin":
            return mul(call("cos", u), d)
        if e.func == "cos":
            return neg(mul(call("sin", u), d))
        if e.func == "tan":
            return div(d, pow_(call("cos", u), _num(2.0)))
        if e.func == "exp":
            return mul(call("exp", u), d)
        if e.func == "ln":
            return div(d, u)
        if e.func == "sqrt":
            return div(d, mul(_num(2.0), call("sqrt", u)))
    raise TypeError(f"not an Expr: {e!r}")


# ----------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def pretty(e):
    """Render e so that parse(pretty(e)) reproduces the same tree."""
    return _render(e, 0, "")


def _render(e, parent_prec, side):
    if isinstance(e, Num):
        v = e.value
        if v < 0:
            return _render(Neg(_num(-v)), parent_prec, side)
        text = repr(v)
        if text.endswith(".0"):
            text = text[:-2]
        return text
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({_render(e.arg, 0, '')})"
    if isinstance(e, Neg):
        inner = _render(e.arg, _PREC["neg"], "u")
        text = f"-{inner}"
        # parenthesize when embedded where unary minus would rebind
        return f"({text})" if parent_prec > _PREC["neg"] or side == "r*" else text
    if isinstance(e, BinOp):
        prec = _PREC[e.op]
        # all binary ops left associative: right child needs parens at eq prec
        lt = _render(e.left, prec, "l")
        rt = _render(e.right, prec + 1, "r*" if e.op in "*/^" else "r")
        text = f"{lt} {e.op} {rt}" if e.op in "+-" else f"{lt}{e.op}{rt}"
        if parent_prec > prec:
            return f"({text})"
        # equal precedence on the right side: we already bumped child prec
        return text
    raise TypeError(f"not an Expr: {e!r}")


# --------------------------------------------------------------- compiling

def _pow_rt(a, b):
    if b != round(b):
        if a <= 0.0:
            raise EvalDomainError(
                f"non-integer power of non-positive base {a}")
        return math.pow(a, b)
    if a == 0.0 and b < 0:
        raise EvalDomainError("zero raised to a negative power")
    return math.pow(a, b) if a >= 0 else (-1.0) ** int(b) * math.pow(-a, b)


_RUNTIME = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "exp": math.exp,
    "_ln": math.log, "_sqrt": math.sqrt, "_pow": _pow_rt,
}


def _emit(e, bound):
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        if e.name not in bound:
            raise EvalDomainError(f"unbound variable {e.name!r}")
        return e.name
    if isinstance(e, Neg):
        return f"(-{_emit(e.arg, bound)})"
    if isinstance(e, BinOp):
        a, b = _emit(e.left, bound), _emit(e.right, bound)
        if e.op == "^":
            return f"_pow({a}, {b})"
        return f"({a} {e.op} {b})"
    if isinstance(e, Call):
        inner = _emit(e.arg, bound)
        fn = {"ln": "_ln", "sqrt": "_sqrt"}.get(e.func, e.func)
        return f"{fn}({inner})"
    raise TypeError(f"not an Expr: {e!r}")


def compile_fn(e, varnames, params=None):
    """Compile e to a fast positional function of varnames.

    Parameter values are baked in as literals.  Raises the same
    EvalDomainError class as evaluate() on domain violations."""
    if params:
        e = substitute(e, {k: Num(float(v)) for k, v in params.items()})
    src = f"lambda {', '.join(varnames)}: {_emit(e, set(varnames))}"
    raw = eval(src, dict(_RUNTIME))  # noqa: S307 - controlled source

    def fn(*args):
        try:
            return raw(*args)
        except (ValueError, ZeroDivisionError, OverflowError) as err:
            raise EvalDomainError(str(err)) from None

    fn.source = src
    return fn


def variables(e):
    """Set of variable names occurring in e."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, Call):
        return variables(e.arg)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    raise TypeError(f"not an Expr: {e!r}")


def substitute(e, bindings):
    """Replace variables by sub-expressions (used for config [defs])."""
    if isinstance(e, Var):
        return bindings.get(e.name, e)
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, bindings))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, bindings))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, bindings),
                     substitute(e.right, bindings))
    raise TypeError(f"not an Expr: {e!r}")
