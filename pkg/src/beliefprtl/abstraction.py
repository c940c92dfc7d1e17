"""Three-valued sign abstraction of belief space and its Kripke structure.

Every atomic predicate splits belief space into three parts: the predicate
holds (POS), its PRTL negation holds (NEG), or neither holds (UNKNOWN).  A
cell is one sign vector over all predicates.  Cells are represented in mean
space by polytopic enclosures, and two cells are connected when their
enclosures (widened by same-label neighbours) overlap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .belief import BeliefState
from .logic import AbstractedFormula, Predicate, eval_state, normal_quantile
from .polytope import Polytope, polytopes_intersect


class Sign(enum.IntEnum):
    NEG = -1
    UNKNOWN = 0
    POS = 1


@dataclass(frozen=True)
class Cell:
    signs: tuple[Sign, ...]
    id: int = -1


class PredicateTable:
    """Vectorised sign evaluation for a fixed list of base predicates."""

    def __init__(self, preds: Sequence[Predicate]):
        for p in preds:
            if p.negated:
                raise ValueError("cells are defined over non-negated base predicates")
        self.preds = list(preds)
        k = len(self.preds)
        n = self.preds[0].dim if preds else 0
        self.C = np.array([p.c for p in preds], dtype=float).reshape(k, n)
        self.b = np.array([p.b for p in preds], dtype=float)
        self.q = np.array([p.quantile for p in preds], dtype=float)

    def __len__(self):
        return len(self.preds)

    def signs(self, mean: np.ndarray, cov: np.ndarray) -> tuple[Sign, ...]:
        if not self.preds:
            return ()
        if mean.size != self.C.shape[1]:
            raise ValueError(f"belief dimension {mean.size} does not match predicates {self.C.shape[1]}")
        d = self.C @ mean
        spread = self.q * np.sqrt(np.clip(np.einsum("ij,jk,ik->i", self.C, cov, self.C), 0.0, None))
        out = []
        for di, bi, si in zip(d, self.b, spread):
            if di < bi - si:
                out.append(Sign.POS)
            elif -di < -bi - si:
                out.append(Sign.NEG)
            else:
                out.append(Sign.UNKNOWN)
        return tuple(out)


def abstract_belief(belief: BeliefState, preds: Sequence[Predicate]) -> Cell:
    """Sign vector of a belief (cell id unknown without a Kripke structure)."""
    return Cell(PredicateTable(preds).signs(belief.mean, belief.cov))


def literal_true(signs: Sequence[Sign], index: dict[Predicate, int], pred: Predicate) -> bool:
    s = signs[index[pred.base]]
    return s == (Sign.NEG if pred.negated else Sign.POS)


def enclosure(
    cell: Cell,
    preds: Sequence[Predicate],
    cov_max: np.ndarray,
    box: Polytope,
    cov_min: np.ndarray | None = None,
) -> Polytope:
    """Mean-space polytope containing every belief of the cell.

    POS and NEG use the smallest reachable spread (zero unless ``cov_min`` is
    given); UNKNOWN uses the largest, ``cov_max``.
    """
    rows, rhs = [], []
    cov_max = np.asarray(cov_max, dtype=float)
    for s, p in zip(cell.signs, preds):
        c = np.asarray(p.c)
        q = p.quantile
        sig_max = np.sqrt(max(c @ cov_max @ c, 0.0))
        sig_min = 0.0 if cov_min is None else np.sqrt(max(c @ cov_min @ c, 0.0))
        if s == Sign.POS:
            rows.append(c)
            rhs.append(p.b - q * sig_min)
        elif s == Sign.NEG:
            rows.append(-c)
            rhs.append(-p.b - q * sig_min)
        else:
            rows.append(c)
            rhs.append(p.b + q * sig_max)
            rows.append(-c)
            rhs.append(-p.b + q * sig_max)
    if not rows:
        return box
    return box.intersect(Polytope(np.array(rows), np.array(rhs)))


def enumerate_cells(preds, cov_max, box, cov_min=None) -> tuple[list[Cell], list[Polytope], int]:
    """All sign vectors with non-empty enclosure, found by pruned DFS.

    Returns ``(cells, enclosures, pruned)`` where ``pruned`` counts the full
    sign vectors discarded as empty.
    """
    k = len(preds)
    cells: list[Cell] = []
    polys: list[Polytope] = []
    pruned = 0
    order = (Sign.POS, Sign.UNKNOWN, Sign.NEG)

    def dfs(prefix):
        nonlocal pruned
        depth = len(prefix)
        poly = enclosure(Cell(tuple(prefix)), preds[:depth], cov_max, box, cov_min)
        if poly.is_empty():
            pruned += 3 ** (k - depth)
            return
        if depth == k:
            cells.append(Cell(tuple(prefix), len(cells)))
            polys.append(poly)
            return
        for s in order:
            dfs(prefix + [s])

    dfs([])
    return cells, polys, pruned


@dataclass
class KripkeStructure:
    preds: list[Predicate]
    aps: tuple
    cells: list[Cell]
    enclosures: list[Polytope]
    initial: int
    succ: list[tuple[int, ...]]
    labels: list[frozenset[int]]
    pruned: int = 0
    _index: dict = field(default_factory=dict, repr=False)
    _table: PredicateTable | None = field(default=None, repr=False)

    def __post_init__(self):
        self._index = {c.signs: c.id for c in self.cells}
        self._table = PredicateTable(self.preds)

    def __len__(self):
        return len(self.cells)

    def has_edge(self, a: int, b: int) -> bool:
        return b in self.succ[a]

    def signs_of(self, belief: BeliefState) -> tuple[Sign, ...]:
        return self._table.signs(belief.mean, belief.cov)

    def cell_of(self, belief: BeliefState) -> int | None:
        """Cell id of a belief, or None if its sign vector was pruned."""
        return self._index.get(self.signs_of(belief))

    def in_cell(self, belief: BeliefState, cell_id: int) -> bool:
        return self.signs_of(belief) == self.cells[cell_id].signs

    def is_path(self, ids: Sequence[int]) -> bool:
        return all(self.has_edge(a, b) for a, b in zip(ids, ids[1:]))

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "predicates": [{"c": list(p.c), "b": p.b, "eps": p.eps} for p in self.preds],
            "cells": [{"id": c.id, "signs": [int(s) for s in c.signs]} for c in self.cells],
            "labels": [sorted(l) for l in self.labels],
            "transitions": [list(s) for s in self.succ],
            "initial": self.initial,
            "pruned": self.pruned,
        }


def label_of(signs, preds, aps) -> frozenset[int]:
    """APs true on every belief of a cell; UNKNOWN falsifies both literals."""
    index = {p: i for i, p in enumerate(preds)}
    return frozenset(
        i for i, phi in enumerate(aps)
        if eval_state(phi, lambda pr: literal_true(signs, index, pr))
    )


def build_kripke(
    spec: AbstractedFormula,
    preds: Sequence[Predicate],
    b0: BeliefState,
    cov_max,
    box: Polytope,
    cov_min=None,
    label_union: bool = True,
) -> KripkeStructure:
    """Kripke structure over all non-empty cells.

    With ``label_union`` two cells are connected when their enclosures,
    each widened by the overlapping cells carrying the same label, intersect.
    Without it, only direct enclosure overlap counts.
    """
    preds = list(preds)
    cells, polys, pruned = enumerate_cells(preds, cov_max, box, cov_min)
    labels = [label_of(c.signs, preds, spec.aps) for c in cells]
    N = len(cells)

    overlap = np.eye(N, dtype=bool)
    for i in range(N):
        for j in range(i + 1, N):
            overlap[i, j] = overlap[j, i] = polytopes_intersect(polys[i], polys[j])

    # same-label neighbourhood of each cell, one level deep
    group = [
        [j for j in range(N) if (labels[j] == labels[i] and overlap[i, j]) or j == i]
        if label_union else [i]
        for i in range(N)
    ]
    succ = []
    for i in range(N):
        reach = np.zeros(N, dtype=bool)
        for a in group[i]:
            reach |= overlap[a]
        out = [j for j in range(N) if any(reach[b] for b in group[j])]
        succ.append(tuple(out))

    signs0 = PredicateTable(preds).signs(b0.mean, b0.cov)
    ids = {c.signs: c.id for c in cells}
    if signs0 not in ids:
        raise ValueError("initial belief lies in no cell; check cov_max and the workspace box")
    return KripkeStructure(preds, tuple(spec.aps), cells, polys, ids[signs0], succ, labels, pruned)


Lasso = tuple  # (cells tuple, loop index)


def block_lasso(blocklist: Iterable, lasso) -> frozenset:
    """Return a blocklist that additionally rejects exactly this lasso."""
    return frozenset(blocklist) | {(tuple(lasso.cells), lasso.loop_index)}


def destutter(ids: Sequence[int]) -> list[int]:
    out: list[int] = []
    for i in ids:
        if not out or out[-1] != i:
            out.append(i)
    return out
