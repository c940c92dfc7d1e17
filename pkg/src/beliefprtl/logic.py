"""PRTL formulas: AST, concrete-syntax parser, and chance-constraint semantics.

A predicate ``p[eps](c.x <= b)`` holds on a Gaussian belief N(mu, Sigma) when
``P(b - c.x >= 0) > 1 - eps``, which for a Gaussian is the deterministic test

    c.mu + q * sqrt(c' Sigma c) < b,   q = Phi^{-1}(1 - eps).

The negated predicate asks for ``P(c.x - b >= 0) > 1 - eps``.  Because both
sides need probability above one half, a belief can satisfy the predicate, its
negation, or neither, but never both.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Predicate",
    "Formula",
    "Const",
    "Atom",
    "AP",
    "And",
    "Or",
    "Until",
    "Release",
    "TRUE",
    "FALSE",
    "Eventually",
    "Always",
    "AbstractedFormula",
    "FormulaSyntaxError",
    "normal_cdf",
    "normal_quantile",
    "chance_margin",
    "pred_holds",
    "parse_formula",
    "format_formula",
    "extract_subformulas",
    "atoms_of",
    "is_temporal_free",
    "eval_state",
    "formula_depth",
]

PSD_TOL = 1e-9


# ---------------------------------------------------------------------------
# Normal distribution
# ---------------------------------------------------------------------------

def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@functools.lru_cache(maxsize=4096)
def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF by bisection on :func:`normal_cdf`.

    Bisection runs until the bracket stops shrinking in floating point, so
    the result is the best double for the erfc-based CDF.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile probability must lie in (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    return _bisect_quantile(p)


def _bisect_quantile(p: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    # pick whichever endpoint has the smaller CDF error
    return lo if abs(normal_cdf(lo) - p) <= abs(normal_cdf(hi) - p) else hi


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Predicate:
    """Linear chance predicate ``P(b - c.x >= 0) > 1 - eps`` (or its negation)."""

    c: tuple[float, ...]
    b: float
    eps: float
    negated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "eps", float(self.eps))
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"predicate tolerance must lie in (0, 0.5), got {self.eps}")
        if not any(v != 0.0 for v in self.c):
            raise ValueError("predicate has a zero coefficient vector")

    @property
    def dim(self) -> int:
        return len(self.c)

    @property
    def base(self) -> "Predicate":
        """The non-negated predicate sharing this half-space."""
        return Predicate(self.c, self.b, self.eps, False) if self.negated else self

    def negate(self) -> "Predicate":
        return Predicate(self.c, self.b, self.eps, not self.negated)

    @property
    def quantile(self) -> float:
        return normal_quantile(1.0 - self.eps)


class Formula:
    """Base class of PRTL AST nodes."""

    __slots__ = ()

    def __and__(self, other):
        return And(self, other)

    def __or__(self, other):
        return Or(self, other)

    def __str__(self):
        return format_formula(self)


@dataclass(frozen=True)
class Const(Formula):
    value: bool


@dataclass(frozen=True)
class Atom(Formula):
    pred: Predicate


@dataclass(frozen=True)
class AP(Formula):
    """Reference to the ``index``-th state subformula of an abstracted formula."""

    index: int


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Until(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Release(Formula):
    left: Formula
    right: Formula


TRUE = Const(True)
FALSE = Const(False)


def Eventually(f: Formula) -> Formula:
    return Until(TRUE, f)


def Always(f: Formula) -> Formula:
    return Release(FALSE, f)


def is_temporal_free(f: Formula) -> bool:
    if isinstance(f, (Until, Release)):
        return False
    if isinstance(f, (And, Or)):
        return is_temporal_free(f.left) and is_temporal_free(f.right)
    return True


def formula_depth(f: Formula) -> int:
    if isinstance(f, (And, Or, Until, Release)):
        return 1 + max(formula_depth(f.left), formula_depth(f.right))
    return 0


def atoms_of(f: Formula) -> list[Predicate]:
    """Distinct base predicates in order of first occurrence."""
    out: list[Predicate] = []
    seen: set[Predicate] = set()

    def walk(g):
        if isinstance(g, Atom):
            p = g.pred.base
            if p not in seen:
                seen.add(p)
                out.append(p)
        elif isinstance(g, (And, Or, Until, Release)):
            walk(g.left)
            walk(g.right)

    walk(f)
    return out


# ---------------------------------------------------------------------------
# Chance constraints
# ---------------------------------------------------------------------------

def _check_cov(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
        raise ValueError("covariance is not symmetric")
    if cov.size and np.linalg.eigvalsh(cov).min() < -PSD_TOL:
        raise ValueError("covariance is indefinite")
    return cov


def _sigma(c: np.ndarray, cov: np.ndarray) -> float:
    return math.sqrt(max(float(c @ cov @ c), 0.0))


def chance_margin(pred: Predicate, cov) -> float:
    """Effective right-hand side of the deterministic chance constraint.

    For a plain predicate the belief satisfies it iff ``c.mu < b_eff`` with
    ``b_eff = b - q*sqrt(c' Sigma c)``.  For a negated predicate the returned
    value is ``-b - q*sqrt(c' Sigma c)`` and the test is ``-c.mu < b_eff``.
    """
    cov = _check_cov(cov)
    c = np.asarray(pred.c)
    if cov.shape[0] != c.size:
        raise ValueError(f"predicate dimension {c.size} does not match covariance {cov.shape}")
    spread = pred.quantile * _sigma(c, cov)
    return (-pred.b if pred.negated else pred.b) - spread


def _holds(pred: Predicate, mean: np.ndarray, cov: np.ndarray) -> bool:
    c = np.asarray(pred.c)
    spread = pred.quantile * _sigma(c, cov)
    d = float(c @ mean)
    if pred.negated:
        return -d < -pred.b - spread
    return d < pred.b - spread


def pred_holds(pred: Predicate, belief) -> bool:
    """Strict satisfaction of ``pred`` by a Gaussian belief (mean, cov)."""
    mean = np.asarray(belief.mean, dtype=float)
    if mean.size != pred.dim:
        raise ValueError(f"belief dimension {mean.size} does not match predicate {pred.dim}")
    cov = _check_cov(belief.cov)
    if cov.shape[0] != mean.size:
        raise ValueError("belief mean and covariance dimensions disagree")
    return _holds(pred, mean, cov)


def eval_state(f: Formula, holds) -> bool:
    """Evaluate a temporal-free formula; ``holds(pred)`` decides each literal."""
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Atom):
        return bool(holds(f.pred))
    if isinstance(f, And):
        return eval_state(f.left, holds) and eval_state(f.right, holds)
    if isinstance(f, Or):
        return eval_state(f.left, holds) or eval_state(f.right, holds)
    raise ValueError(f"not a state formula: {f!r}")


# ---------------------------------------------------------------------------
# Subformula abstraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AbstractedFormula:
    """Temporal skeleton over atomic propositions ``AP(i) -> aps[i]``."""

    aps: tuple[Formula, ...]
    skeleton: Formula

    def substitute(self) -> Formula:
        def sub(g):
            if isinstance(g, AP):
                return self.aps[g.index]
            if isinstance(g, (And, Or, Until, Release)):
                return type(g)(sub(g.left), sub(g.right))
            return g

        return sub(self.skeleton)


def extract_subformulas(formula: Formula) -> AbstractedFormula:
    """Replace every maximal temporal-free subformula by a shared AP.

    Boolean constants stay constants; they carry no information about the
    belief and are not worth a proposition.
    """
    aps: list[Formula] = []
    index: dict[Formula, int] = {}

    def walk(g):
        if isinstance(g, Const):
            return g
        if is_temporal_free(g):
            if g not in index:
                index[g] = len(aps)
                aps.append(g)
            return AP(index[g])
        return type(g)(walk(g.left), walk(g.right))

    skeleton = walk(formula)
    return AbstractedFormula(tuple(aps), skeleton)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.column = col


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<pbr>p\[)
  | (?P<var>x\d+\b)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|[()\[\]&|!*+\-])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"G", "F", "U", "R"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            s = m.group()
            if kind == "ident" and s in _KEYWORDS:
                kind = "kw"
            toks.append(_Tok(kind, s, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


@dataclass
class _Parser:
    text: str
    atoms: Mapping[str, Formula]
    dim: int | None
    toks: list[_Tok] = field(default_factory=list)
    i: int = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        return FormulaSyntaxError(msg, self.text, tok.pos)

    def expect(self, text):
        t = self.next()
        if t.text != text:
            raise self.error(f"expected {text!r}, found {t.text or 'end of input'!r}", t)
        return t

    def accept(self, text):
        if self.peek().text == text and self.peek().kind in ("op", "kw"):
            return self.next()
        return None

    # formula := release
    def formula(self):
        return self.release()

    def release(self):
        left = self.until()
        if self.accept("R"):
            return Release(left, self.release())
        return left

    def until(self):
        left = self.disj()
        if self.accept("U"):
            return Until(left, self.until())
        return left

    def disj(self):
        f = self.conj()
        while self.accept("|"):
            f = Or(f, self.conj())
        return f

    def conj(self):
        f = self.unary()
        while self.accept("&"):
            f = And(f, self.unary())
        return f

    def unary(self):
        t = self.peek()
        if t.kind == "kw" and t.text == "G":
            self.next()
            return Always(self.unary())
        if t.kind == "kw" and t.text == "F":
            self.next()
            return Eventually(self.unary())
        if self.accept("("):
            f = self.formula()
            self.expect(")")
            return f
        return self.atom()

    def atom(self):
        negate = self.accept("!") is not None
        t = self.peek()
        if t.kind == "pbr":
            pred = self.predicate(t)
            return Atom(pred.negate() if negate else pred)
        if t.kind == "ident":
            self.next()
            if t.text in ("true", "false") and t.text not in self.atoms:
                if negate:
                    raise self.error("negation of a constant", t)
                return TRUE if t.text == "true" else FALSE
            if t.text not in self.atoms:
                raise self.error(f"undeclared atom {t.text!r}", t)
            f = self.atoms[t.text]
            if negate:
                if not isinstance(f, Atom):
                    raise self.error(f"negation of compound atom {t.text!r}", t)
                return Atom(f.pred.negate())
            return f
        raise self.error(f"expected an atom, found {t.text or 'end of input'!r}", t)

    def number(self):
        sign = -1.0 if self.accept("-") else 1.0
        if not sign < 0:
            self.accept("+")
        t = self.next()
        if t.kind != "num":
            raise self.error(f"expected a number, found {t.text or 'end of input'!r}", t)
        return sign * float(t.text)

    def predicate(self, start):
        self.next()  # p[
        eps_tok = self.peek()
        eps = self.number()
        self.expect("]")
        self.expect("(")
        coeffs = self.linexpr()
        cmp_tok = self.next()
        if cmp_tok.text not in ("<=", ">="):
            raise self.error("expected '<=' or '>='", cmp_tok)
        b = self.number()
        self.expect(")")
        n = self.dim if self.dim is not None else max(coeffs)
        if max(coeffs) > n:
            raise self.error(f"state index x{max(coeffs)} exceeds dimension {n}", start)
        c = [0.0] * n
        for k, v in coeffs.items():
            c[k - 1] += v
        if cmp_tok.text == ">=":
            c = [0.0 - v for v in c]
            b = 0.0 - b
        if not 0.0 < eps < 0.5:
            raise self.error(f"tolerance {eps} outside (0, 0.5)", eps_tok)
        if not any(v != 0.0 for v in c):
            raise self.error("zero coefficient vector", start)
        return Predicate(tuple(c), b, eps)

    def linexpr(self):
        coeffs: dict[int, float] = {}
        sign = 1.0
        if self.accept("-"):
            sign = -1.0
        else:
            self.accept("+")
        while True:
            k, v = self.term()
            coeffs[k] = coeffs.get(k, 0.0) + sign * v
            if self.accept("+"):
                sign = 1.0
            elif self.accept("-"):
                sign = -1.0
            else:
                return coeffs

    def term(self):
        t = self.next()
        if t.kind == "var":
            return self.var_index(t), 1.0
        if t.kind == "num":
            self.expect("*")
            v = self.next()
            if v.kind != "var":
                raise self.error("expected a state variable x<i>", v)
            return self.var_index(v), float(t.text)
        raise self.error(f"expected a term, found {t.text or 'end of input'!r}", t)

    def var_index(self, t):
        k = int(t.text[1:])
        if k < 1:
            raise self.error("state variables are 1-based", t)
        return k


def parse_formula(
    text: str,
    atoms: Mapping[str, Formula] | None = None,
    dim: int | None = None,
) -> Formula:
    """Parse PRTL concrete syntax.

    ``atoms`` maps identifiers to already-parsed temporal-free formulas.  When
    ``dim`` is given every predicate vector is padded to that length,
    otherwise to the largest state index in the text.  ``true`` and
    ``false`` are constants unless declared as atoms.
    """
    toks = _tokenize(text)
    if dim is None:
        # one common dimension for every predicate of the formula
        dim = max((int(t.text[1:]) for t in toks if t.kind == "var"), default=None)
    p = _Parser(text, atoms or {}, dim)
    p.toks = toks
    f = p.formula()
    if p.peek().kind != "eof":
        raise p.error(f"unexpected {p.peek().text!r}")
    return f


def _fmt_real(v: float) -> str:
    return repr(float(v))


def _fmt_pred(p: Predicate) -> str:
    terms = []
    for k, v in enumerate(p.c, start=1):
        if v == 0.0:
            continue
        sign = "-" if v < 0 else "+"
        body = f"{_fmt_real(abs(v))}*x{k}"
        if not terms:
            terms.append(body if sign == "+" else f"-{body}")
        else:
            terms.append(f"{sign} {body}")
    s = f"p[{_fmt_real(p.eps)}]({' '.join(terms)} <= {_fmt_real(p.b)})"
    return "!" + s if p.negated else s


def format_formula(f: Formula) -> str:
    """Fully parenthesised concrete syntax; ``parse_formula`` inverts it."""
    if isinstance(f, Atom):
        return _fmt_pred(f.pred)
    if isinstance(f, AP):
        return f"AP{f.index + 1}"
    if isinstance(f, Const):
        return "true" if f.value else "false"
    if isinstance(f, Until) and f.left == TRUE:
        return f"F {format_formula(f.right)}"
    if isinstance(f, Release) and f.left == FALSE:
        return f"G {format_formula(f.right)}"
    op = {And: "&", Or: "|", Until: "U", Release: "R"}[type(f)]
    return f"({format_formula(f.left)} {op} {format_formula(f.right)})"


def predicates_matrix(preds: Sequence[Predicate]) -> tuple[np.ndarray, np.ndarray]:
    """Stack predicate normals and offsets into arrays."""
    if not preds:
        return np.zeros((0, 0)), np.zeros(0)
    return np.array([p.c for p in preds], dtype=float), np.array([p.b for p in preds])
