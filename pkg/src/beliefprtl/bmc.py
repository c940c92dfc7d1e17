"""Explicit-state bounded model checking for lasso-shaped words.

The search runs over pairs (cell, tau) where ``tau`` is the truth vector of
the temporal subformulas at the current position.  Local Until/Release
expansion ties consecutive positions together, and an eventuality check on
the loop rules out the spurious fixpoints that local consistency admits.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .logic import AP, And, Const, Formula, Or, Release, Until


@dataclass(frozen=True)
class LassoPath:
    """Cells ``Q_0 .. Q_K`` with back-edge ``Q_K -> Q_L``."""

    cells: tuple[int, ...]
    loop_index: int

    @property
    def K(self) -> int:
        return len(self.cells) - 1

    def to_json(self) -> dict:
        return {"cells": list(self.cells), "loop_index": self.loop_index}

    @classmethod
    def from_json(cls, d) -> "LassoPath":
        return cls(tuple(int(c) for c in d["cells"]), int(d["loop_index"]))

    def key(self) -> tuple:
        return (self.cells, self.loop_index)


@dataclass(frozen=True)
class SimpleKripke:
    """Bare transition system (initial state, successor lists, AP labels)."""

    initial: int
    succ: tuple
    labels: tuple


def _skeleton(spec) -> Formula:
    return getattr(spec, "skeleton", spec)


# ---------------------------------------------------------------------------
# Semantics on a fixed lasso word
# ---------------------------------------------------------------------------

def eval_on_lasso(skeleton, labels: Sequence, L: int) -> bool:
    """Truth of ``skeleton`` at position 0 of ``labels[:L] (labels[L:])^omega``."""
    f = _skeleton(skeleton)
    n = len(labels)
    if not 0 <= L < n:
        raise ValueError("loop index out of range")
    nxt = list(range(1, n)) + [L]
    cache: dict[Formula, list[bool]] = {}

    def ev(g) -> list[bool]:
        if g in cache:
            return cache[g]
        if isinstance(g, Const):
            out = [g.value] * n
        elif isinstance(g, AP):
            out = [g.index in lab for lab in labels]
        elif isinstance(g, And):
            a, b = ev(g.left), ev(g.right)
            out = [x and y for x, y in zip(a, b)]
        elif isinstance(g, Or):
            a, b = ev(g.left), ev(g.right)
            out = [x or y for x, y in zip(a, b)]
        elif isinstance(g, (Until, Release)):
            a, b = ev(g.left), ev(g.right)
            until = isinstance(g, Until)
            out = [not until] * n
            changed = True
            while changed:
                changed = False
                for i in reversed(range(n)):
                    if until:
                        v = b[i] or (a[i] and out[nxt[i]])
                    else:
                        v = b[i] and (a[i] or out[nxt[i]])
                    if v != out[i]:
                        out[i] = v
                        changed = True
        else:
            raise ValueError(f"unsupported node in skeleton: {g!r}")
        cache[g] = out
        return out

    return ev(f)[0]


# ---------------------------------------------------------------------------
# Local expansion tables
# ---------------------------------------------------------------------------

class _Tableau:
    """Per-label transition table over temporal truth vectors."""

    def __init__(self, skeleton: Formula):
        self.root = skeleton
        self.temporal: list[Formula] = []
        self.pos: dict[Formula, int] = {}
        self._collect(skeleton)
        self.m = len(self.temporal)
        self._cache: dict[frozenset, dict] = {}

    def _collect(self, g):
        if isinstance(g, (And, Or, Until, Release)):
            self._collect(g.left)
            self._collect(g.right)
            if isinstance(g, (Until, Release)) and g not in self.pos:
                self.pos[g] = len(self.temporal)
                self.temporal.append(g)

    def value(self, g, label, tau: int) -> bool:
        if isinstance(g, Const):
            return g.value
        if isinstance(g, AP):
            return g.index in label
        if isinstance(g, And):
            return self.value(g.left, label, tau) and self.value(g.right, label, tau)
        if isinstance(g, Or):
            return self.value(g.left, label, tau) or self.value(g.right, label, tau)
        return bool(tau >> self.pos[g] & 1)

    def expand(self, label, nu: int) -> int:
        """Current truth vector given the next-position vector ``nu``."""
        tau = 0
        for j, g in enumerate(self.temporal):
            a = self.value(g.left, label, tau)
            b = self.value(g.right, label, tau)
            nj = bool(nu >> j & 1)
            v = (b or (a and nj)) if isinstance(g, Until) else (b and (a or nj))
            if v:
                tau |= 1 << j
        return tau

    def obligations(self, label, tau: int) -> tuple[int, int]:
        """(need, have) eventuality masks at one loop position."""
        need = have = 0
        for j, g in enumerate(self.temporal):
            t = bool(tau >> j & 1)
            b = self.value(g.right, label, tau)
            if isinstance(g, Until):
                need |= (1 << j) if t else 0
                have |= (1 << j) if b else 0
            else:
                need |= (1 << j) if not t else 0
                have |= (1 << j) if not b else 0
        return need, have

    def table(self, label) -> dict:
        """Map ``tau -> [nu, ...]`` (ascending) for one label."""
        key = frozenset(label)
        if key not in self._cache:
            t: dict[int, list[int]] = {}
            for nu in range(1 << self.m):
                t.setdefault(self.expand(label, nu), []).append(nu)
            self._cache[key] = t
        return self._cache[key]


class _Product:
    """Product of a Kripke structure with the local tableau."""

    def __init__(self, kripke, skeleton: Formula):
        self.kripke = kripke
        self.tab = _Tableau(skeleton)
        self.N = len(kripke.succ)
        self.succ = [tuple(sorted(s)) for s in kripke.succ]
        self.labels = [frozenset(l) for l in kripke.labels]
        self.root_ok = [
            [tau for tau in self.tab.table(self.labels[c]) if self.tab.value(self.tab.root, self.labels[c], tau)]
            for c in range(self.N)
        ]
        self._ob: dict = {}
        self._dist: np.ndarray | None = None
        self._good: set | None = None

    def options(self, c: int, tau: int) -> list[int]:
        return self.tab.table(self.labels[c]).get(tau, [])

    def ob(self, c: int, tau: int) -> tuple[int, int]:
        k = (c, tau)
        if k not in self._ob:
            self._ob[k] = self.tab.obligations(self.labels[c], tau)
        return self._ob[k]

    @property
    def dist(self) -> np.ndarray:
        """All-pairs shortest path lengths (BFS), ``inf`` if unreachable."""
        if self._dist is None:
            d = np.full((self.N, self.N), np.inf)
            for s in range(self.N):
                d[s, s] = 0
                q = deque([s])
                while q:
                    u = q.popleft()
                    for v in self.succ[u]:
                        if d[s, v] == np.inf:
                            d[s, v] = d[s, u] + 1
                            q.append(v)
            self._dist = d
        return self._dist

    def nodes_from_initial(self) -> list[tuple[int, int]]:
        c0 = self.kripke.initial
        return [(c0, tau) for tau in self.root_ok[c0]]

    def edges(self, node):
        c, tau = node
        for nu in self.options(c, tau):
            for c2 in self.succ[c]:
                if nu in self.tab.table(self.labels[c2]):
                    yield (c2, nu)

    def good_nodes(self) -> set:
        """Product nodes from which an accepting cycle is reachable."""
        if self._good is not None:
            return self._good
        nodes = list({n for c in range(self.N) for n in ((c, t) for t in self.tab.table(self.labels[c]))})
        nodes.sort()
        idx = {n: i for i, n in enumerate(nodes)}
        adj = [[idx[m] for m in self.edges(n)] for n in nodes]
        fair = _fair_nodes(adj, [self.ob(*n) for n in nodes])
        # backward closure from fair SCC members
        radj = [[] for _ in nodes]
        for u, outs in enumerate(adj):
            for v in outs:
                radj[v].append(u)
        good = set(fair)
        q = deque(fair)
        while q:
            v = q.popleft()
            for u in radj[v]:
                if u not in good:
                    good.add(u)
                    q.append(u)
        self._good = {nodes[i] for i in good}
        return self._good


def _fair_nodes(adj: list[list[int]], obs: list[tuple[int, int]]) -> list[int]:
    """Nodes lying on a cycle that discharges its own eventualities.

    A cycle is accepting when every obligation raised somewhere on it is met
    somewhere on it.  SCCs failing this lose the nodes raising unmet
    obligations and are re-examined.
    """
    out: list[int] = []
    stack = [list(range(len(adj)))]
    while stack:
        members = stack.pop()
        if not members:
            continue
        loc = {v: i for i, v in enumerate(members)}
        rows, cols = [], []
        for v in members:
            for w in adj[v]:
                if w in loc:
                    rows.append(loc[v])
                    cols.append(loc[w])
        g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(members),) * 2)
        ncomp, comp = connected_components(g, directed=True, connection="strong")
        self_loop = set(r for r, c in zip(rows, cols) if r == c)
        groups: dict[int, list[int]] = {}
        for i, k in enumerate(comp):
            groups.setdefault(int(k), []).append(i)
        for grp in groups.values():
            if len(grp) == 1 and grp[0] not in self_loop:
                continue
            need = have = 0
            for i in grp:
                nd, hv = obs[members[i]]
                need |= nd
                have |= hv
            missing = need & ~have
            if not missing:
                out.extend(members[i] for i in grp)
            else:
                keep = [members[i] for i in grp if not obs[members[i]][0] & missing]
                if len(keep) < len(grp):
                    stack.append(keep)
    return out


def satisfiable(kripke, spec) -> bool:
    """True iff some lasso of any length from the initial cell satisfies ``spec``."""
    prod = _Product(kripke, _skeleton(spec))
    good = prod.good_nodes()
    return any(n in good for n in prod.nodes_from_initial())


# ---------------------------------------------------------------------------
# Bounded search
# ---------------------------------------------------------------------------

def iter_lassos(kripke, spec, k_max: int, blocklist=frozenset(), k_min: int = 0):
    """Yield satisfying lassos in (K, L, lexicographic cells) order.

    Lassos in ``blocklist`` (pairs ``(cells, loop_index)``) are skipped.  The
    blocklist is read live, so lassos blocked while iterating are honoured.
    """
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    prod = _Product(kripke, _skeleton(spec))
    good = prod.good_nodes()
    if not any(n in good for n in prod.nodes_from_initial()):
        return
    for K in range(k_min, k_max + 1):
        for L in range(K + 1):
            for cells in _search(prod, good, K, L, blocklist):
                yield LassoPath(tuple(cells), L)


def find_lasso(kripke, spec, k_max: int, blocklist=frozenset(), k_min: int = 0) -> LassoPath | None:
    """Satisfying lasso with minimal K, then minimal L, then lexicographic cells.

    Lassos in ``blocklist`` are skipped.  Returns None if no admissible
    lasso with ``K <= k_max`` exists.
    """
    blocked = {(tuple(c), int(l)) for c, l in blocklist}
    return next(iter_lassos(kripke, spec, k_max, blocked, k_min), None)


def _search(prod: _Product, good: set, K: int, L: int, blocked):
    """Cell sequences for a fixed (K, L), in lexicographic order.

    Each DFS node carries every tableau configuration compatible with the
    cell prefix, so the cell order alone drives the search.  A subtree is
    memoised as dead only if it produced nothing and skipped no blocked lasso.
    """
    dist = prod.dist
    failed: set = set()
    cells: list[int] = [0] * (K + 1)

    def enter(i, c, pairs):
        # pairs: iterable of (tau, tauL, need, have) before position i is scored
        out = set()
        for tau, tauL, need, have in pairs:
            if (c, tau) not in good:
                continue
            if i == L:
                tauL = tau
            if i >= L:
                nd, hv = prod.ob(c, tau)
                need, have = need | nd, have | hv
            out.add((tau, tauL, need, have))
        return frozenset(out)

    # generator; returns True when the subtree produced or skipped something
    def dfs(i, c, configs):
        if not configs:
            return False
        cL = c if i == L else (cells[L] if i > L else -1)
        if i >= L and dist[c, cL] > K - i + 1:
            return False
        key = (i, c, configs, cL)
        if key in failed:
            return False
        cells[i] = c
        live = False
        if i == K:
            if cL in prod.succ[c] and any(
                tauL in prod.options(c, tau) and not need & ~have
                for tau, tauL, need, have in configs
            ):
                live = True
                if (tuple(cells), L) not in blocked:
                    yield list(cells)
        else:
            for c2 in prod.succ[c]:
                t2 = prod.tab.table(prod.labels[c2])
                nxt = [
                    (nu, tauL, need, have)
                    for tau, tauL, need, have in configs
                    for nu in prod.options(c, tau)
                    if nu in t2
                ]
                sub = yield from dfs(i + 1, c2, enter(i + 1, c2, nxt))
                live |= sub
                cells[i] = c
        if not live:
            failed.add(key)
        return live

    c0 = prod.kripke.initial
    yield from dfs(0, c0, enter(0, c0, [(tau, -1, 0, 0) for tau in prod.root_ok[c0]]))
