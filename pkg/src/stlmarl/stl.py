"""Temporal-logic formulas over multi-entity trajectories.

The supported fragment is deliberately small: ``true``, predicates,
negation, conjunction, disjunction, and a bounded *eventually* operator
``F[a,b]``.  Time is discrete; window bounds are step indices.  Every
predicate is a signed margin function over a trajectory state, which gives
a single source of truth for both semantics:

* quantitative robustness: atom -> margin, not -> negate, and -> min,
  or -> max, F[a,b] -> max over the shifted window;
* boolean satisfaction: atom -> margin > 0, the rest by the usual
  recursion.

Two evaluation modes exist.  The strict mode (``robustness``,
``evaluate_boolean``) refuses windows that reach past the end of the
trajectory.  The prefix mode (``prefix_robustness``) clips every window to
the observed steps and is total, which is what a reward monitor needs when
it runs alongside an episode that is still in progress.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import reduce

import numpy as np


class FormulaSyntaxError(ValueError):
    """Raised on malformed specification text; carries the offending offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class TraceTooShortError(ValueError):
    """Strict-mode evaluation hit a window that reaches past the trace end."""


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


class Trajectory:
    """A time-indexed table of named 2-D entity positions.

    ``entities`` maps an entity name to an array of shape ``(n_states, 2)``.
    States are indexed 0..T contiguously; ``prefix(t)`` exposes exactly the
    first ``t + 1`` states as views, so prefix evaluation never copies.
    """

    def __init__(self, entities: dict[str, np.ndarray]):
        if not entities:
            raise ValueError("trajectory needs at least one entity")
        lengths = set()
        converted = {}
        for name, arr in entities.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"entity {name!r} must have shape (n_states, 2)")
            lengths.add(arr.shape[0])
            converted[name] = arr
        if len(lengths) != 1:
            raise ValueError(f"entities disagree on state count: {sorted(lengths)}")
        n = lengths.pop()
        if n < 1:
            raise ValueError("trajectory must contain at least one state")
        self.entities = converted
        self._n_states = n

    def __len__(self) -> int:
        return self._n_states

    @property
    def last_index(self) -> int:
        return self._n_states - 1

    def position(self, name: str, t: int) -> np.ndarray:
        return self.entities[name][t]

    def prefix(self, t: int) -> "Trajectory":
        if not 0 <= t <= self.last_index:
            raise IndexError(f"prefix end {t} outside 0..{self.last_index}")
        return Trajectory({name: arr[: t + 1] for name, arr in self.entities.items()})


def save_trace(traj: Trajectory, path) -> None:
    """Write a trajectory as JSON Lines: one ``{"t", "entities"}`` object per step."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in range(len(traj)):
            entities = {name: [float(x) for x in arr[t]] for name, arr in traj.entities.items()}
            fh.write(json.dumps({"t": t, "entities": entities}) + "\n")


def load_trace(path) -> Trajectory:
    """Read a JSON Lines trace.  Extra per-line fields are ignored."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno + 1}: invalid JSON ({exc})") from exc
            rows.append((lineno + 1, obj))
    if not rows:
        raise ValueError(f"{path}: empty trace")
    names = set(rows[0][1]["entities"])
    entities = {name: [] for name in names}
    for expect_t, (lineno, obj) in enumerate(rows):
        if obj.get("t") != expect_t:
            raise ValueError(f"{path}: line {lineno}: expected t={expect_t}, got {obj.get('t')}")
        if set(obj["entities"]) != names:
            raise ValueError(f"{path}: line {lineno}: entity set changed mid-trace")
        for name in names:
            entities[name].append(obj["entities"][name])
    return Trajectory({name: np.asarray(vals, dtype=float) for name, vals in entities.items()})


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


class Predicate:
    """A named margin function: positive margin means the predicate holds."""

    name: str

    def margin(self, traj: Trajectory, t: int) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class DistancePredicate(Predicate):
    """Holds when ``first`` is strictly closer than ``threshold`` to ``second``.

    The margin is ``threshold - ||p_first - p_second||_2``.
    """

    first: str
    second: str
    threshold: float

    @property
    def name(self) -> str:
        return f"dist({self.first},{self.second})<{self.threshold:g}"

    def margin(self, traj: Trajectory, t: int) -> float:
        a = traj.position(self.first, t)
        b = traj.position(self.second, t)
        return self.threshold - math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class FunctionPredicate(Predicate):
    """Wraps an arbitrary margin callable under a stable name.

    Equality is by name, so two registry entries with the same name compare
    equal regardless of the wrapped callable's identity.
    """

    name: str
    fn: object

    def margin(self, traj: Trajectory, t: int) -> float:
        return self.fn(traj, t)

    def __eq__(self, other):
        return isinstance(other, FunctionPredicate) and self.name == other.name

    def __hash__(self):
        return hash(self.name)


# ---------------------------------------------------------------------------
# Formula nodes
# ---------------------------------------------------------------------------


class Formula:
    """Base class for formula nodes; instances are immutable after creation."""

    def __and__(self, other: "Formula") -> "Formula":
        return And(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return Or(self, other)

    def __invert__(self) -> "Formula":
        return Not(self)

    def __str__(self) -> str:
        return format_formula(self)


@dataclass(frozen=True)
class TrueFormula(Formula):
    pass


@dataclass(frozen=True)
class Atom(Formula):
    predicate: Predicate


@dataclass(frozen=True)
class Not(Formula):
    child: Formula


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Eventually(Formula):
    """``F[lo,hi] child``: the child holds somewhere in the shifted window."""

    lo: int
    hi: int
    child: Formula

    def __post_init__(self):
        if not (isinstance(self.lo, int) and isinstance(self.hi, int)):
            raise TypeError("window bounds must be integers")
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"invalid window [{self.lo},{self.hi}]: need 0 <= lo <= hi")


def conjoin(formulas: list[Formula]) -> Formula:
    """Left-folded conjunction of a nonempty formula list."""
    if not formulas:
        raise ValueError("conjoin needs at least one formula")
    return reduce(And, formulas)


def formula_horizon(formula: Formula) -> int:
    """Largest time offset the formula can inspect relative to its start.

    Strict evaluation at time 0 needs a trace with at least this many
    steps after the first state.
    """
    if isinstance(formula, (TrueFormula, Atom)):
        return 0
    if isinstance(formula, Not):
        return formula_horizon(formula.child)
    if isinstance(formula, (And, Or)):
        return max(formula_horizon(formula.left), formula_horizon(formula.right))
    if isinstance(formula, Eventually):
        return formula.hi + formula_horizon(formula.child)
    raise TypeError(f"unknown formula node {type(formula).__name__}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def robustness(formula: Formula, traj: Trajectory, t: int) -> float:
    """Strict-mode quantitative semantics at time ``t``.

    Positive means satisfied, negative means violated, and the magnitude is
    the satisfaction margin.  Raises :class:`TraceTooShortError` if any
    window, shifted to its evaluation time, reaches past the trace end.
    """
    if not 0 <= t <= traj.last_index:
        raise TraceTooShortError(f"time {t} outside trace indices 0..{traj.last_index}")
    if isinstance(formula, TrueFormula):
        return math.inf
    if isinstance(formula, Atom):
        return formula.predicate.margin(traj, t)
    if isinstance(formula, Not):
        return -robustness(formula.child, traj, t)
    if isinstance(formula, And):
        return min(robustness(formula.left, traj, t), robustness(formula.right, traj, t))
    if isinstance(formula, Or):
        return max(robustness(formula.left, traj, t), robustness(formula.right, traj, t))
    if isinstance(formula, Eventually):
        start, stop = t + formula.lo, t + formula.hi
        if stop > traj.last_index:
            raise TraceTooShortError(
                f"window [{start},{stop}] exceeds trace end {traj.last_index}"
            )
        return max(robustness(formula.child, traj, u) for u in range(start, stop + 1))
    raise TypeError(f"unknown formula node: {formula!r}")


def evaluate_boolean(formula: Formula, traj: Trajectory, t: int) -> bool:
    """Strict-mode boolean semantics at time ``t``; window rules as in robustness."""
    if not 0 <= t <= traj.last_index:
        raise TraceTooShortError(f"time {t} outside trace indices 0..{traj.last_index}")
    if isinstance(formula, TrueFormula):
        return True
    if isinstance(formula, Atom):
        return formula.predicate.margin(traj, t) > 0.0
    if isinstance(formula, Not):
        return not evaluate_boolean(formula.child, traj, t)
    if isinstance(formula, And):
        return evaluate_boolean(formula.left, traj, t) and evaluate_boolean(formula.right, traj, t)
    if isinstance(formula, Or):
        return evaluate_boolean(formula.left, traj, t) or evaluate_boolean(formula.right, traj, t)
    if isinstance(formula, Eventually):
        start, stop = t + formula.lo, t + formula.hi
        if stop > traj.last_index:
            raise TraceTooShortError(
                f"window [{start},{stop}] exceeds trace end {traj.last_index}"
            )
        return any(evaluate_boolean(formula.child, traj, u) for u in range(start, stop + 1))
    raise TypeError(f"unknown formula node: {formula!r}")


DEFAULT_PREFIX_FLOOR = -10.0


def prefix_robustness(formula: Formula, prefix: Trajectory, floor: float = DEFAULT_PREFIX_FLOOR) -> float:
    """Robustness at t=0 with every window clipped to the observed steps.

    A window whose clipped range is empty contributes ``floor`` instead of
    raising, so the function is total and usable as a per-step reward while
    an episode is still running.  With ``lo = 0`` windows the result is the
    running max over the prefix and converges to the strict value once the
    full trace is available.
    """
    return _prefix_rob(formula, prefix, 0, floor)


def latest_robustness(formula: Formula, prefix: Trajectory, floor: float = DEFAULT_PREFIX_FLOOR) -> float:
    """Robustness read at the newest observed step, windows clipped.

    Where :func:`prefix_robustness` keeps the formula anchored at t=0 (so a
    reach task reports the best margin seen so far), this anchors it at the
    last step of the prefix: a ``F[0,h]`` reach task reports the margin of
    the current state alone.  Windows that exclude the newest step floor
    out, so the value is only informative for formulas whose windows start
    at offset 0.  Useful for monitoring how the instantaneous margin moves
    while a trace is being recorded.
    """
    return _prefix_rob(formula, prefix, prefix.last_index, floor)


def _prefix_rob(formula: Formula, traj: Trajectory, t: int, floor: float) -> float:
    if isinstance(formula, TrueFormula):
        return math.inf
    if isinstance(formula, Atom):
        return formula.predicate.margin(traj, t)
    if isinstance(formula, Not):
        return -_prefix_rob(formula.child, traj, t, floor)
    if isinstance(formula, And):
        return min(_prefix_rob(formula.left, traj, t, floor), _prefix_rob(formula.right, traj, t, floor))
    if isinstance(formula, Or):
        return max(_prefix_rob(formula.left, traj, t, floor), _prefix_rob(formula.right, traj, t, floor))
    if isinstance(formula, Eventually):
        start = t + formula.lo
        stop = min(t + formula.hi, traj.last_index)
        if start > stop:
            return floor
        return max(_prefix_rob(formula.child, traj, u, floor) for u in range(start, stop + 1))
    raise TypeError(f"unknown formula node: {formula!r}")


# ---------------------------------------------------------------------------
# Concrete syntax
# ---------------------------------------------------------------------------
#
#   phi  := "true" | atom | "not" phi | phi "and" phi | phi "or" phi
#         | "F[" INT "," INT "]" phi | "(" phi ")"
#   atom := IDENT | "dist(" IDENT "," IDENT ")" "<" NUMBER
#
# Precedence: not and F bind tighter than "and", which binds tighter than
# "or".  Binary operators associate to the left.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<sym>[()\[\],<]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group(kind)
        tokens.append((kind, value, m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, registry):
        self.tokens = tokens
        self.registry = registry or {}
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise FormulaSyntaxError(f"expected {want!r}, found {tok[1] or 'end of input'!r}", tok[2])
        return self.advance()

    def parse(self) -> Formula:
        node = self.parse_or()
        tok = self.peek()
        if tok[0] != "eof":
            raise FormulaSyntaxError(f"unexpected trailing input {tok[1]!r}", tok[2])
        return node

    def parse_or(self) -> Formula:
        node = self.parse_and()
        while self.peek()[:2] == ("ident", "or"):
            self.advance()
            node = Or(node, self.parse_and())
        return node

    def parse_and(self) -> Formula:
        node = self.parse_unary()
        while self.peek()[:2] == ("ident", "and"):
            self.advance()
            node = And(node, self.parse_unary())
        return node

    def parse_unary(self) -> Formula:
        kind, value, pos = self.peek()
        if (kind, value) == ("ident", "not"):
            self.advance()
            return Not(self.parse_unary())
        if (kind, value) == ("ident", "F") and self.tokens[self.i + 1][:2] == ("sym", "["):
            self.advance()
            self.advance()
            lo = self._window_bound()
            self.expect("sym", ",")
            hi = self._window_bound()
            self.expect("sym", "]")
            if lo < 0 or hi < lo:
                raise FormulaSyntaxError(f"invalid window [{lo},{hi}]: need 0 <= lo <= hi", pos)
            return Eventually(lo, hi, self.parse_unary())
        return self.parse_atom()

    def _window_bound(self) -> int:
        kind, value, pos = self.advance()
        if kind != "num" or not value.isdigit():
            raise FormulaSyntaxError(f"window bound must be a nonnegative integer, found {value!r}", pos)
        return int(value)

    def parse_atom(self) -> Formula:
        kind, value, pos = self.peek()
        if (kind, value) == ("sym", "("):
            self.advance()
            node = self.parse_or()
            self.expect("sym", ")")
            return node
        if (kind, value) == ("ident", "true"):
            self.advance()
            return TrueFormula()
        if (kind, value) == ("ident", "dist"):
            self.advance()
            self.expect("sym", "(")
            first = self.expect("ident")[1]
            self.expect("sym", ",")
            second = self.expect("ident")[1]
            self.expect("sym", ")")
            self.expect("sym", "<")
            nkind, nvalue, npos = self.advance()
            if nkind != "num":
                raise FormulaSyntaxError(f"expected a number after '<', found {nvalue!r}", npos)
            return Atom(DistancePredicate(first, second, float(nvalue)))
        if kind == "ident":
            self.advance()
            if value not in self.registry:
                raise FormulaSyntaxError(f"unknown atom {value!r}", pos)
            return Atom(self.registry[value])
        raise FormulaSyntaxError(f"expected a formula, found {value or 'end of input'!r}", pos)


def parse_formula(text: str, registry: dict[str, Predicate] | None = None) -> Formula:
    """Parse specification text into a formula tree.

    ``registry`` resolves bare-identifier atoms; ``dist(a, b) < r`` atoms
    are self-contained.  Parsing, pretty-printing, and re-parsing yields a
    structurally identical tree.
    """
    return _Parser(_tokenize(text), registry).parse()


_LEVEL_OR, _LEVEL_AND, _LEVEL_UNARY = 0, 1, 2


def _fmt(formula: Formula, min_level: int) -> str:
    if isinstance(formula, TrueFormula):
        return "true"
    if isinstance(formula, Atom):
        pred = formula.predicate
        if isinstance(pred, DistancePredicate):
            return f"dist({pred.first}, {pred.second}) < {pred.threshold!r}"
        return pred.name
    if isinstance(formula, Not):
        return _wrap(f"not {_fmt(formula.child, _LEVEL_UNARY)}", _LEVEL_UNARY, min_level)
    if isinstance(formula, Eventually):
        return _wrap(
            f"F[{formula.lo},{formula.hi}] {_fmt(formula.child, _LEVEL_UNARY)}",
            _LEVEL_UNARY,
            min_level,
        )
    if isinstance(formula, And):
        text = f"{_fmt(formula.left, _LEVEL_AND)} and {_fmt(formula.right, _LEVEL_AND + 1)}"
        return _wrap(text, _LEVEL_AND, min_level)
    if isinstance(formula, Or):
        text = f"{_fmt(formula.left, _LEVEL_OR)} or {_fmt(formula.right, _LEVEL_OR + 1)}"
        return _wrap(text, _LEVEL_OR, min_level)
    raise TypeError(f"unknown formula node: {formula!r}")


def _wrap(text: str, level: int, min_level: int) -> str:
    return f"({text})" if level < min_level else text


def format_formula(formula: Formula) -> str:
    """Render a formula in the concrete syntax with minimal parentheses."""
    return _fmt(formula, _LEVEL_OR)
