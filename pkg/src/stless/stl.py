"""Signal temporal logic over discrete-time signals.

Formulas are finite trees of linear predicates, Boolean connectives and
bounded temporal operators. Interval bounds are step indices. Quantitative
robustness follows the usual min/max semantics; the sign of the robustness
at t=0 decides satisfaction.

Evaluation is vectorized: a batch of signals is scored in one pass of numpy
window operations, because the samplers call the monitor in their inner loop.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

__all__ = [
    "Signal",
    "LinearPredicate",
    "Pred",
    "Not",
    "And",
    "Or",
    "Always",
    "Eventually",
    "Until",
    "StlFormula",
    "StlSyntaxError",
    "SignalTooShortError",
    "parse",
    "render",
    "horizon",
    "robustness",
    "robustness_batch",
    "negate",
    "collect_predicates",
]


class StlSyntaxError(ValueError):
    """Parse failure, carrying 1-based line/column of the offending token."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SignalTooShortError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Signal:
    """A T x q matrix of channel values with unique channel names."""

    values: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("signal values must be a T x q matrix")
        if values.shape[0] < 1:
            raise ValueError("signal needs at least one time step")
        names = tuple(self.channel_names)
        if len(names) != values.shape[1]:
            raise ValueError("channel_names length must match signal width")
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def q(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LinearPredicate:
    """Affine constraint coeffs . s_t + offset >= 0 over the channel vector."""

    coeffs: tuple[float, ...]
    offset: float
    label: str = ""

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if not any(c != 0.0 for c in coeffs):
            raise ValueError("predicate coefficients must not all be zero")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "offset", float(self.offset))
        if not self.label:
            object.__setattr__(self, "label", _render_predicate(self))

    def coeff_array(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=float)


def _check_interval(t1: int, t2: int):
    if not (isinstance(t1, (int, np.integer)) and isinstance(t2, (int, np.integer))):
        raise ValueError("interval bounds must be integers")
    if t1 < 0 or t2 < 0:
        raise ValueError("interval bounds must be non-negative")
    if t1 > t2:
        raise ValueError(f"interval [{t1},{t2}] has t1 > t2")


@dataclass(frozen=True)
class Pred:
    pred: LinearPredicate


@dataclass(frozen=True)
class Not:
    child: "StlFormula"


@dataclass(frozen=True)
class And:
    children: tuple["StlFormula", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple["StlFormula", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


@dataclass(frozen=True)
class Always:
    t1: int
    t2: int
    child: "StlFormula"

    def __post_init__(self):
        _check_interval(self.t1, self.t2)


@dataclass(frozen=True)
class Eventually:
    t1: int
    t2: int
    child: "StlFormula"

    def __post_init__(self):
        _check_interval(self.t1, self.t2)


@dataclass(frozen=True)
class Until:
    t1: int
    t2: int
    left: "StlFormula"
    right: "StlFormula"

    def __post_init__(self):
        _check_interval(self.t1, self.t2)


StlFormula = Union[Pred, Not, And, Or, Always, Eventually, Until]


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<NUMBER>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)
  | (?P<IDENT>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<GE>>=)
  | (?P<LE><=)
  | (?P<SYM>[()\[\],*+\-&|!])
  | (?P<WS>\s+)
""",
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise StlSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "WS":
            tokens.append(_Token("SYM" if kind in ("GE", "LE") else kind, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(_Token("EOF", "", line, col))
    return tokens


class _Parser:
    """Recursive descent for the concrete grammar.

    Precedence, loosest first: `|`, `&`, infix `U[a,b]` (right associative),
    unary prefixes `!`, `G[a,b]`, `F[a,b]`, then atoms and parentheses.
    """

    def __init__(self, text: str, channels: Iterable[str]):
        self.tokens = _tokenize(text)
        self.i = 0
        self.channels = tuple(channels)
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("declared channel names must be unique")

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.text != text:
            raise StlSyntaxError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.column)
        return self.advance()

    def error(self, message: str):
        tok = self.peek()
        raise StlSyntaxError(message, tok.line, tok.column)

    def parse(self) -> StlFormula:
        phi = self.parse_or()
        if self.peek().kind != "EOF":
            self.error(f"unexpected trailing input {self.peek().text!r}")
        return phi

    def parse_or(self) -> StlFormula:
        parts = [self.parse_and()]
        while self.peek().text == "|":
            self.advance()
            parts.append(self.parse_and())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def parse_and(self) -> StlFormula:
        parts = [self.parse_until()]
        while self.peek().text == "&":
            self.advance()
            parts.append(self.parse_until())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def parse_until(self) -> StlFormula:
        left = self.parse_unary()
        if self.peek().text == "U" and self.tokens[self.i + 1].text == "[":
            self.advance()
            t1, t2 = self.parse_interval()
            right = self.parse_until()
            return Until(t1, t2, left, right)
        return left

    def parse_interval(self) -> tuple[int, int]:
        self.expect("[")
        t1 = self.parse_bound()
        self.expect(",")
        t2 = self.parse_bound()
        closing = self.peek()
        self.expect("]")
        if t1 > t2:
            raise StlSyntaxError(f"interval [{t1},{t2}] has t1 > t2", closing.line, closing.column)
        return t1, t2

    def parse_bound(self) -> int:
        tok = self.peek()
        if tok.kind != "NUMBER":
            self.error("expected a non-negative integer bound")
        value = float(tok.text)
        if value != int(value):
            self.error("interval bounds must be integers")
        self.advance()
        return int(value)

    def parse_unary(self) -> StlFormula:
        tok = self.peek()
        if tok.text == "!":
            self.advance()
            return Not(self.parse_unary())
        if tok.kind == "IDENT" and tok.text in ("G", "F") and self.tokens[self.i + 1].text == "[":
            self.advance()
            t1, t2 = self.parse_interval()
            child = self.parse_unary()
            return Always(t1, t2, child) if tok.text == "G" else Eventually(t1, t2, child)
        if tok.text == "(":
            self.advance()
            phi = self.parse_or()
            self.expect(")")
            return phi
        return self.parse_atom()

    def parse_atom(self) -> StlFormula:
        start = self.peek()
        lhs_coeffs, lhs_const = self.parse_linexpr()
        op = self.peek()
        if op.text not in (">=", "<="):
            self.error("expected '>=' or '<=' in predicate")
        self.advance()
        rhs_coeffs, rhs_const = self.parse_linexpr()
        coeffs = [l - r for l, r in zip(lhs_coeffs, rhs_coeffs)]
        const = lhs_const - rhs_const
        if op.text == "<=":
            coeffs = [-c for c in coeffs]
            const = -const
        if not any(c != 0.0 for c in coeffs):
            raise StlSyntaxError("predicate has no channel term", start.line, start.column)
        return Pred(LinearPredicate(tuple(coeffs), const))

    def parse_linexpr(self) -> tuple[list[float], float]:
        coeffs = [0.0] * len(self.channels)
        const = 0.0
        sign = 1.0
        tok = self.peek()
        if tok.text in ("+", "-"):
            sign = -1.0 if tok.text == "-" else 1.0
            self.advance()
        coeffs, const = self.parse_term(coeffs, const, sign)
        while self.peek().text in ("+", "-"):
            sign = -1.0 if self.advance().text == "-" else 1.0
            coeffs, const = self.parse_term(coeffs, const, sign)
        return coeffs, const

    def parse_term(self, coeffs: list[float], const: float, sign: float):
        tok = self.peek()
        while tok.text in ("+", "-"):
            if tok.text == "-":
                sign = -sign
            self.advance()
            tok = self.peek()
        if tok.kind == "NUMBER":
            self.advance()
            value = sign * float(tok.text)
            if self.peek().text == "*":
                self.advance()
                name_tok = self.peek()
                if name_tok.kind != "IDENT":
                    self.error("expected channel name after '*'")
                self.advance()
                coeffs[self.channel_index(name_tok)] += value
            else:
                const += value
        elif tok.kind == "IDENT":
            self.advance()
            value = sign
            if self.peek().text == "*":
                self.advance()
                num_tok = self.peek()
                if num_tok.kind != "NUMBER":
                    self.error("expected number after '*'")
                self.advance()
                value = sign * float(num_tok.text)
            coeffs[self.channel_index(tok)] += value
        else:
            self.error("expected a term (number or channel)")
        return coeffs, const

    def channel_index(self, tok: _Token) -> int:
        try:
            return self.channels.index(tok.text)
        except ValueError:
            raise StlSyntaxError(f"unknown channel name {tok.text!r}", tok.line, tok.column) from None


def parse(text: str, channels: Iterable[str]) -> StlFormula:
    """Parse specification text against the declared channel list."""
    return _Parser(text, channels).parse()


def _format_coeff(value: float) -> str:
    return repr(float(value))


def _render_predicate(pred: LinearPredicate) -> str:
    parts = []
    for j, c in enumerate(pred.coeffs):
        if c == 0.0:
            continue
        parts.append(f"{_format_coeff(c)}*ch{j}")
    return " + ".join(parts) + f" + {_format_coeff(pred.offset)} >= 0"


def render(phi: StlFormula, channels: Iterable[str]) -> str:
    """Concrete-syntax text such that parse(render(phi)) == phi."""
    channels = tuple(channels)

    def pred_text(pred: LinearPredicate) -> str:
        terms = [
            (c, f"{_format_coeff(abs(c))}*{channels[j]}")
            for j, c in enumerate(pred.coeffs)
            if c != 0.0
        ]
        terms.append((pred.offset, _format_coeff(abs(pred.offset))))
        text = "-" + terms[0][1] if terms[0][0] < 0 else terms[0][1]
        for value, body in terms[1:]:
            text += (" - " if value < 0 else " + ") + body
        return "(" + text + " >= 0)"

    def go(node: StlFormula) -> str:
        if isinstance(node, Pred):
            return pred_text(node.pred)
        if isinstance(node, Not):
            return "!" + go(node.child)
        if isinstance(node, And):
            return "(" + " & ".join(go(c) for c in node.children) + ")"
        if isinstance(node, Or):
            return "(" + " | ".join(go(c) for c in node.children) + ")"
        if isinstance(node, Always):
            return f"G[{node.t1},{node.t2}] " + go(node.child)
        if isinstance(node, Eventually):
            return f"F[{node.t1},{node.t2}] " + go(node.child)
        if isinstance(node, Until):
            return "(" + go(node.left) + f" U[{node.t1},{node.t2}] " + go(node.right) + ")"
        raise TypeError(f"not an STL node: {node!r}")

    return go(phi)


# ---------------------------------------------------------------------------
# semantics


def horizon(phi: StlFormula) -> int:
    """Minimum signal length needed to evaluate the formula at t=0."""
    if isinstance(phi, Pred):
        return 1
    if isinstance(phi, Not):
        return horizon(phi.child)
    if isinstance(phi, (And, Or)):
        return max(horizon(c) for c in phi.children)
    if isinstance(phi, (Always, Eventually)):
        return phi.t2 + horizon(phi.child)
    if isinstance(phi, Until):
        return phi.t2 + max(horizon(phi.left), horizon(phi.right))
    raise TypeError(f"not an STL node: {phi!r}")


def _window_view(arr: np.ndarray, width: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(arr, width, axis=-1)


def _eval(phi: StlFormula, values: np.ndarray, memo: dict) -> np.ndarray:
    """Robustness of ``phi`` at every valid start time; shape (B, T_valid)."""
    key = id(phi)
    if key in memo:
        return memo[key]
    if isinstance(phi, Pred):
        out = values @ phi.pred.coeff_array() + phi.pred.offset
    elif isinstance(phi, Not):
        out = -_eval(phi.child, values, memo)
    elif isinstance(phi, (And, Or)):
        parts = [_eval(c, values, memo) for c in phi.children]
        width = min(p.shape[-1] for p in parts)
        stack = np.stack([p[..., :width] for p in parts])
        out = stack.min(axis=0) if isinstance(phi, And) else stack.max(axis=0)
    elif isinstance(phi, (Always, Eventually)):
        child = _eval(phi.child, values, memo)
        win = _window_view(child[..., phi.t1 :], phi.t2 - phi.t1 + 1)
        out = win.min(axis=-1) if isinstance(phi, Always) else win.max(axis=-1)
    elif isinstance(phi, Until):
        left = _eval(phi.left, values, memo)
        right = _eval(phi.right, values, memo)
        width = min(left.shape[-1], right.shape[-1])
        w1 = _window_view(left[..., :width], phi.t2 + 1)
        w2 = _window_view(right[..., :width], phi.t2 + 1)
        running_min = np.minimum.accumulate(w1, axis=-1)
        candidates = np.minimum(w2, running_min)
        out = candidates[..., phi.t1 :].max(axis=-1)
    else:
        raise TypeError(f"not an STL node: {phi!r}")
    memo[key] = out
    return out


def robustness_batch(values: np.ndarray, phi: StlFormula, t: int = 0) -> np.ndarray:
    """Robustness of a batch of signals, values shaped (B, T, q) -> (B,)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("batch values must be shaped (B, T, q)")
    need = t + horizon(phi)
    if values.shape[1] < need:
        raise SignalTooShortError(
            f"signal has {values.shape[1]} steps; need {need} to evaluate at t={t}"
        )
    return _eval(phi, values, {})[:, t]


def robustness(signal: Signal | np.ndarray, phi: StlFormula, t: int = 0) -> float:
    """Quantitative robustness of one signal at time ``t``."""
    values = signal.values if isinstance(signal, Signal) else np.asarray(signal, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return float(robustness_batch(values[None, :, :], phi, t)[0])


def negate(phi: StlFormula) -> StlFormula:
    """Formula whose robustness is the exact negation of ``phi``'s."""
    if isinstance(phi, Not):
        return phi.child
    return Not(phi)


def collect_predicates(phi: StlFormula) -> list[tuple[LinearPredicate, frozenset[int]]]:
    """Predicate leaves with the absolute time indices they can be active at.

    The windows are a (possibly conservative) superset of the times at which
    each predicate can be the min/max achiever when evaluating at t=0.
    """
    found: dict[int, tuple[LinearPredicate, set[int]]] = {}
    order: list[int] = []

    def visit(node: StlFormula, window: set[int]):
        if isinstance(node, Pred):
            key = id(node)
            if key not in found:
                found[key] = (node.pred, set())
                order.append(key)
            found[key][1].update(window)
        elif isinstance(node, Not):
            visit(node.child, window)
        elif isinstance(node, (And, Or)):
            for c in node.children:
                visit(c, window)
        elif isinstance(node, (Always, Eventually)):
            shifted = {w + tau for w in window for tau in range(node.t1, node.t2 + 1)}
            visit(node.child, shifted)
        elif isinstance(node, Until):
            right_window = {w + tau for w in window for tau in range(node.t1, node.t2 + 1)}
            left_window = {w + tau for w in window for tau in range(0, node.t2 + 1)}
            visit(node.right, right_window)
            visit(node.left, left_window)
        else:
            raise TypeError(f"not an STL node: {node!r}")

    visit(phi, {0})
    return [(found[k][0], frozenset(found[k][1])) for k in order]
