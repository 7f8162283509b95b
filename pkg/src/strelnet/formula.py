"""STREL abstract syntax, a text parser/printer and small structural analyses.

Surface grammar (whitespace-insensitive)::

    until   := or    ( 'U' '[' a ',' b ']' or )*
    or      := and   ( '|' and )*
    and     := sp    ( '&' sp )*
    sp      := unary ( ('R' | 'O') '{' dist '<=' d '}' unary )*
    unary   := '!' unary | ('F' | 'G') '[' a ',' b ']' unary
             | 'E' '{' dist '>' d '}' unary | primary
    primary := 'true' | 'false' | label | predicate | '(' until ')'
    predicate := 'distTo(' x ',' y ... ')' cmp r | 'minPairDist' cmp r
               | 'coord(' i ')' cmp r          with cmp in {'<=', '>'}

Binary operators are left-associative.  ``format`` always parenthesises
binary nodes, so ``parse(format(f)) == f`` holds for every formula.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Union


class Distance(str, enum.Enum):
    HOPS = "hops"
    EUCLID = "euclid"


LE = "<="
GT = ">"


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


# -- predicate functions ---------------------------------------------------

@dataclass(frozen=True)
class DistTo:
    """Euclidean distance from the agent to a fixed point."""

    point: tuple


@dataclass(frozen=True)
class MinPairDist:
    """Distance from the agent to its nearest team mate."""


@dataclass(frozen=True)
class Coord:
    axis: int

    def __post_init__(self):
        if self.axis < 0:
            raise ValueError("coordinate axis must be non-negative")


PredicateFn = Union[DistTo, MinPairDist, Coord]


# -- formula nodes ---------------------------------------------------------

def _check_interval(a, b):
    if not (isinstance(a, int) and isinstance(b, int)):
        raise ValueError("time bounds must be integers")
    if a < 0 or b < a:
        raise ValueError(f"invalid time interval [{a},{b}]")


def _check_radius(d):
    if not d > 0 or not math.isfinite(d):
        raise ValueError(f"spatial bound must be positive and finite, got {d}")


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Atom:
    label: str


@dataclass(frozen=True)
class Predicate:
    fn: PredicateFn
    cmp: str
    threshold: float

    def __post_init__(self):
        if self.cmp not in (LE, GT):
            raise ValueError(f"comparison must be '<=' or '>', got {self.cmp!r}")
        if not math.isfinite(self.threshold):
            raise ValueError("predicate threshold must be finite")


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Until:
    a: int
    b: int
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Eventually:
    a: int
    b: int
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Always:
    a: int
    b: int
    arg: "Formula"

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Reach:
    dist: Distance
    d: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_radius(self.d)


@dataclass(frozen=True)
class Escape:
    dist: Distance
    d: float
    arg: "Formula"

    def __post_init__(self):
        _check_radius(self.d)


@dataclass(frozen=True)
class Surround:
    dist: Distance
    d: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_radius(self.d)


Formula = Union[Const, Atom, Predicate, Not, And, Or, Until, Eventually, Always,
                Reach, Escape, Surround]

UNARY = (Not, Eventually, Always, Escape)
BINARY = (And, Or, Until, Reach, Surround)


def children(f: Formula) -> tuple:
    if isinstance(f, UNARY):
        return (f.arg,)
    if isinstance(f, BINARY):
        return (f.left, f.right)
    return ()


def walk(f: Formula) -> Iterator[Formula]:
    """Pre-order traversal."""
    yield f
    for c in children(f):
        yield from walk(c)


def atom_labels(f: Formula) -> set:
    return {n.label for n in walk(f) if isinstance(n, Atom)}


def depth(f: Formula) -> int:
    cs = children(f)
    return 1 + (max(depth(c) for c in cs) if cs else 0)


# -- analyses ----------------------------------------------------------------

def horizon(f: Formula) -> int:
    """Number of future steps needed to decide ``f`` at the current step."""
    if isinstance(f, (Eventually, Always)):
        return f.b + horizon(f.arg)
    if isinstance(f, Until):
        return f.b + max(horizon(f.left), horizon(f.right))
    cs = children(f)
    return max((horizon(c) for c in cs), default=0)


SURROUND_VARIANTS = ("negated-escape", "negated-escape-union", "verbatim")


def expand_surround(f: Formula, variant: str = "negated-escape") -> Formula:
    """Replace every surround node by its reach/escape definition.

    All variants share ``p & !(p R !(p | q)) & <escape part> & (p R q)``;
    the escape part is ``!E p`` (``negated-escape``), ``!E (p | q)``
    (``negated-escape-union``) or ``E p`` (``verbatim``).
    """
    if variant not in SURROUND_VARIANTS:
        raise ValueError(f"unknown surround variant {variant!r}")
    if isinstance(f, Surround):
        p = expand_surround(f.left, variant)
        q = expand_surround(f.right, variant)
        if variant == "negated-escape":
            esc = Not(Escape(f.dist, f.d, p))
        elif variant == "negated-escape-union":
            esc = Not(Escape(f.dist, f.d, Or(p, q)))
        else:
            esc = Escape(f.dist, f.d, p)
        return And(p, And(Not(Reach(f.dist, f.d, p, Not(Or(p, q)))),
                          And(esc, Reach(f.dist, f.d, p, q))))
    if isinstance(f, Not):
        return Not(expand_surround(f.arg, variant))
    if isinstance(f, (Eventually, Always)):
        return type(f)(f.a, f.b, expand_surround(f.arg, variant))
    if isinstance(f, Escape):
        return Escape(f.dist, f.d, expand_surround(f.arg, variant))
    if isinstance(f, (And, Or)):
        return type(f)(expand_surround(f.left, variant), expand_surround(f.right, variant))
    if isinstance(f, Until):
        return Until(f.a, f.b, expand_surround(f.left, variant),
                     expand_surround(f.right, variant))
    if isinstance(f, Reach):
        return Reach(f.dist, f.d, expand_surround(f.left, variant),
                     expand_surround(f.right, variant))
    return f


# -- printing ------------------------------------------------------------

def _num(x: float) -> str:
    return repr(float(x))


def _fmt_pred(p: Predicate) -> str:
    fn = p.fn
    if isinstance(fn, DistTo):
        head = "distTo(" + ",".join(_num(c) for c in fn.point) + ")"
    elif isinstance(fn, MinPairDist):
        head = "minPairDist"
    else:
        head = f"coord({fn.axis})"
    return f"({head} {p.cmp} {_num(p.threshold)})"


def format(f: Formula) -> str:  # noqa: A001 - mirrors parse()
    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Atom):
        return f.label
    if isinstance(f, Predicate):
        return _fmt_pred(f)
    if isinstance(f, Not):
        return "!" + format(f.arg)
    if isinstance(f, Eventually):
        return f"F[{f.a},{f.b}] " + format(f.arg)
    if isinstance(f, Always):
        return f"G[{f.a},{f.b}] " + format(f.arg)
    if isinstance(f, Escape):
        return f"E{{{f.dist.value} > {_num(f.d)}}} " + format(f.arg)
    if isinstance(f, And):
        return f"({format(f.left)} & {format(f.right)})"
    if isinstance(f, Or):
        return f"({format(f.left)} | {format(f.right)})"
    if isinstance(f, Until):
        return f"({format(f.left)} U[{f.a},{f.b}] {format(f.right)})"
    if isinstance(f, Reach):
        return f"({format(f.left)} R{{{f.dist.value} <= {_num(f.d)}}} {format(f.right)})"
    if isinstance(f, Surround):
        return f"({format(f.left)} O{{{f.dist.value} <= {_num(f.d)}}} {format(f.right)})"
    raise TypeError(f"not a formula: {f!r}")


# -- parsing -------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|<|>|[!&|()\[\]{},])
""", re.VERBOSE)

_TEMPORAL = {"F", "G", "U"}
_SPATIAL = {"R", "E", "O"}
_FUNCTIONS = {"distTo", "minPairDist", "coord"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}",
                                     line, pos - line_start + 1)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        else:
            for i, ch in enumerate(m.group()):
                if ch == "\n":
                    line += 1
                    line_start = pos + i + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str, attributes: Optional[set]):
        self.toks = _tokenize(text)
        self.i = 0
        self.attributes = attributes

    # token helpers
    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.peek()
        raise FormulaSyntaxError(msg, tok.line, tok.col)

    def take(self) -> _Tok:
        t = self.peek()
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text:
            found = "end of input" if t.kind == "eof" else repr(t.text)
            self.error(f"expected {text!r}, found {found}")
        return self.take()

    def is_op(self, name: str, opener: str) -> bool:
        return self.peek().text == name and self.peek(1).text == opener

    # grammar
    def parse(self):
        f = self.until()
        if self.peek().kind != "eof":
            self.error(f"unexpected {self.peek().text!r}")
        return f

    def until(self):
        f = self.disj()
        while self.is_op("U", "["):
            tok = self.take()
            a, b = self.interval(tok)
            f = Until(a, b, f, self.disj())
        return f

    def disj(self):
        f = self.conj()
        while self.peek().text == "|":
            self.take()
            f = Or(f, self.conj())
        return f

    def conj(self):
        f = self.spatial()
        while self.peek().text == "&":
            self.take()
            f = And(f, self.spatial())
        return f

    def spatial(self):
        f = self.unary()
        while self.is_op("R", "{") or self.is_op("O", "{"):
            tok = self.take()
            dist, d = self.dist_bound(LE)
            node = Reach if tok.text == "R" else Surround
            f = node(dist, d, f, self.unary())
        return f

    def unary(self):
        t = self.peek()
        if t.text == "!":
            self.take()
            return Not(self.unary())
        if t.text in ("F", "G") and self.peek(1).text == "[":
            self.take()
            a, b = self.interval(t)
            node = Eventually if t.text == "F" else Always
            return node(a, b, self.unary())
        if self.is_op("E", "{"):
            self.take()
            dist, d = self.dist_bound(GT)
            return Escape(dist, d, self.unary())
        return self.primary()

    def interval(self, at: _Tok):
        self.expect("[")
        a = self.integer()
        self.expect(",")
        b = self.integer()
        self.expect("]")
        if a < 0 or b < a:
            self.error(f"invalid time interval [{a},{b}]", at)
        return a, b

    def integer(self) -> int:
        t = self.peek()
        if t.kind != "num" or not re.fullmatch(r"[-+]?\d+", t.text):
            self.error("expected an integer step count")
        self.take()
        return int(t.text)

    def number(self) -> float:
        t = self.peek()
        if t.kind != "num":
            self.error("expected a number")
        self.take()
        return float(t.text)

    def dist_bound(self, cmp: str):
        self.expect("{")
        t = self.peek()
        try:
            dist = Distance(t.text)
        except ValueError:
            self.error(f"unknown distance function {t.text!r} (use 'hops' or 'euclid')")
        self.take()
        self.expect(cmp)
        tok = self.peek()
        d = self.number()
        if not d > 0:
            self.error("spatial bound must be positive", tok)
        self.expect("}")
        return dist, d

    def comparison(self) -> str:
        t = self.peek()
        if t.text not in (LE, GT):
            self.error("predicates compare with '<=' or '>'")
        self.take()
        return t.text

    def primary(self):
        t = self.peek()
        if t.text == "(":
            self.take()
            f = self.until()
            self.expect(")")
            return f
        if t.kind != "ident":
            found = "end of input" if t.kind == "eof" else repr(t.text)
            self.error(f"expected a formula, found {found}")
        self.take()
        if t.text == "true":
            return Const(True)
        if t.text == "false":
            return Const(False)
        if t.text == "minPairDist":
            cmp = self.comparison()
            return Predicate(MinPairDist(), cmp, self.number())
        if t.text == "distTo":
            self.expect("(")
            pt = [self.number()]
            while self.peek().text == ",":
                self.take()
                pt.append(self.number())
            self.expect(")")
            cmp = self.comparison()
            return Predicate(DistTo(tuple(pt)), cmp, self.number())
        if t.text == "coord":
            self.expect("(")
            axis = self.integer()
            if axis < 0:
                self.error("coordinate axis must be non-negative", t)
            self.expect(")")
            cmp = self.comparison()
            return Predicate(Coord(axis), cmp, self.number())
        if self.peek().text == "(":
            self.error(f"unknown predicate {t.text!r}", t)
        if t.text in _TEMPORAL | _SPATIAL and self.peek().text in ("[", "{"):
            self.error(f"misplaced operator {t.text!r}", t)
        if self.attributes is not None and t.text not in self.attributes:
            self.error(f"unknown attribute {t.text!r}", t)
        return Atom(t.text)


def parse(text: str, attributes: Optional[Iterable[str]] = None) -> Formula:
    """Parse formula text; ``attributes`` restricts the admissible labels."""
    attrs = set(attributes) if attributes is not None else None
    return _Parser(text, attrs).parse()


def check_dimension(f: Formula, dim: int) -> None:
    """Raise if a predicate refers to a coordinate the scenario does not have."""
    for n in walk(f):
        if isinstance(n, Predicate):
            if isinstance(n.fn, Coord) and n.fn.axis >= dim:
                raise ValueError(f"coord({n.fn.axis}) out of range for dimension {dim}")
            if isinstance(n.fn, DistTo) and len(n.fn.point) != dim:
                raise ValueError(f"distTo point has {len(n.fn.point)} coordinates, "
                                 f"scenario dimension is {dim}")
