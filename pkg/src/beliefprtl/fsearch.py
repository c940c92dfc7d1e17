"""Sparse sampling-based search realising a lasso as a belief trajectory.

A tree of MLO beliefs grows from the initial belief.  Every vertex carries a
progress index ``k``: its belief lies in the k-th cell of the lasso and the
path from the root visited cells ``0..k`` in order.  Extensions track a
sampled target with mean LQR and then refine the run with belief LQR.  Once
a vertex reaches the last cell, the loop is closed with an exact n-step mean
steer back to a belief recorded at the loop entry.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .abstraction import KripkeStructure
from .belief import BeliefState, LinearSystem, mlo_step
from .bmc import LassoPath
from .control import RiccatiError, belief_to_vec, blqr, clamp_control, loop_controls, lqr
from .polytope import Polytope

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class SearchParams:
    delta_near: float = 0.5
    delta_drain: float = 0.25
    w_sigma: float = 1.0
    t_min: int = 1
    t_max: int = 20
    q_mean: float = 1.0
    q_cov: float = 10.0
    qf_mean: float = 10.0
    qf_cov: float = 100.0
    r: float = 1.0
    iterations: int = 500
    tol_loop: float = 1e-4
    tol_psd: float = 1e-6
    advance_bias: float = 0.5
    entry_bias: float = 0.5

    def to_json(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass
class Plan:
    """Belief path ``b_0 .. b_H`` with inputs, region map and loop entry.

    ``index_map[t]`` is the lasso position of step ``t`` for ``t < H``; the
    final belief ``b_H`` closes the loop onto ``b_{loop_entry}`` and sits at
    position ``lasso.loop_index``.
    """

    beliefs: list[BeliefState]
    controls: np.ndarray
    index_map: list[int]
    loop_entry: int
    lasso: LassoPath

    @property
    def H(self) -> int:
        return len(self.controls)

    @property
    def cost(self) -> tuple[int, float]:
        return (self.H, float(np.trace(self.beliefs[-1].cov)))

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "beliefs": [b.to_json() for b in self.beliefs],
            "controls": np.asarray(self.controls).tolist(),
            "index_map": list(self.index_map),
            "loop_entry": self.loop_entry,
            "lasso": self.lasso.to_json(),
        }

    @classmethod
    def from_json(cls, d) -> "Plan":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"format_version: unsupported plan format {d.get('format_version')!r}")
        beliefs = [BeliefState.from_json(b) for b in d["beliefs"]]
        m = len(d["controls"][0]) if d["controls"] else 0
        controls = np.array(d["controls"], dtype=float).reshape(len(d["controls"]), m)
        return cls(beliefs, controls, [int(i) for i in d["index_map"]], int(d["loop_entry"]),
                   LassoPath.from_json(d["lasso"]))

    def to_csv(self) -> str:
        n = self.beliefs[0].dim
        m = self.controls.shape[1] if self.controls.ndim == 2 else 0
        cols = (["t"] + [f"mu_{i + 1}" for i in range(n)]
                + [f"cov_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
                + [f"u_{i + 1}" for i in range(m)] + ["index", "cell", "loop_entry"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for t, b in enumerate(self.beliefs):
            idx = self.index_map[t] if t < self.H else self.lasso.loop_index
            u = [repr(float(v)) for v in self.controls[t]] if t < self.H else [""] * m
            w.writerow([t] + [repr(float(v)) for v in b.mean] + [repr(float(v)) for v in b.cov.ravel()]
                       + u + [idx, self.lasso.cells[idx], int(t == self.loop_entry)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Plan":
        rows = list(csv.reader(io.StringIO(text)))
        head, body = rows[0], rows[1:]
        n = sum(1 for c in head if c.startswith("mu_"))
        m = sum(1 for c in head if c.startswith("u_"))
        beliefs, controls, index, cells = [], [], [], []
        entry = -1
        for r in body:
            mu = np.array([float(v) for v in r[1:1 + n]])
            cov = np.array([float(v) for v in r[1 + n:1 + n + n * n]]).reshape(n, n)
            beliefs.append(BeliefState(mu, cov))
            us = r[1 + n + n * n:1 + n + n * n + m]
            if all(us):
                controls.append([float(v) for v in us])
            index.append(int(r[-3]))
            cells.append(int(r[-2]))
            if r[-1] == "1":
                entry = len(beliefs) - 1
        H = len(controls)
        K = max(index[:H]) if H else 0
        lasso_cells = [0] * (K + 1)
        for i, c in zip(index, cells):
            lasso_cells[i] = c
        return cls(beliefs, np.array(controls, dtype=float).reshape(H, m), index[:H], entry,
                   LassoPath(tuple(lasso_cells), index[H]))


# ---------------------------------------------------------------------------
# Search tree
# ---------------------------------------------------------------------------

@dataclass
class Vertex:
    belief: BeliefState
    progress: int
    cost: tuple[int, float]
    parent: int
    controls: np.ndarray  # inputs of the incoming edge
    beliefs: list[BeliefState]  # beliefs after each incoming input
    indices: list[int]  # lasso position of each of those beliefs
    active: bool = True


@dataclass
class SearchTree:
    vertices: list[Vertex] = field(default_factory=list)

    def active(self) -> list[int]:
        return [i for i, v in enumerate(self.vertices) if v.active]

    def path(self, i: int) -> tuple[list[BeliefState], list[np.ndarray], list[int]]:
        """Beliefs, inputs and lasso positions from the root to vertex ``i``."""
        chain = []
        while i >= 0:
            chain.append(i)
            i = self.vertices[i].parent
        chain.reverse()
        root = self.vertices[chain[0]]
        beliefs, controls, idx = [root.belief], [], [root.progress]
        for j in chain[1:]:
            v = self.vertices[j]
            beliefs.extend(v.beliefs)
            controls.extend(v.controls)
            idx.extend(v.indices)
        return beliefs, controls, idx


def belief_distance(a: BeliefState, b: BeliefState, w_sigma: float = 1.0) -> float:
    return float(np.linalg.norm(a.mean - b.mean) + w_sigma * np.linalg.norm(a.cov - b.cov))


class Regions:
    """Lasso positions with their sign vectors and mean-space enclosures."""

    def __init__(self, kripke: KripkeStructure, lasso: LassoPath):
        self.kripke = kripke
        self.lasso = lasso
        self.signs = [kripke.cells[c].signs for c in lasso.cells]
        self.polys: list[Polytope] = [kripke.enclosures[c] for c in lasso.cells]
        self.K = lasso.K

    def signs_of(self, b: BeliefState):
        return self.kripke.signs_of(b)

    def contains(self, k: int, b: BeliefState) -> bool:
        return self.signs_of(b) == self.signs[k]


def uniform_in(poly: Polytope, rng: np.random.Generator, budget: int = 10_000) -> np.ndarray | None:
    """Uniform point of a polytope by rejection from its bounding box."""
    bounds = poly.bounds
    if bounds is None:
        return None
    lo, hi = bounds
    for _ in range(budget):
        z = rng.uniform(lo, hi)
        if poly.contains(z, 0.0):
            return z
    return None


def sample(tree: SearchTree, regions: Regions, cov_max: np.ndarray,
           rng: np.random.Generator) -> tuple[BeliefState, int]:
    """Random belief and lasso position, biased towards sparse positions.

    Position ``k`` is drawn with weight ``1 / (1 + active vertices at k)``
    and the mean uniformly from its enclosure.
    """
    active = tree.active()
    counts = np.zeros(regions.K + 1)
    for i in active:
        counts[tree.vertices[i].progress] += 1
    weights = np.array([0.0 if regions.polys[k].is_empty() else 1.0 / (1.0 + counts[k])
                        for k in range(regions.K + 1)])
    if weights.sum() > 0:
        k = int(rng.choice(regions.K + 1, p=weights / weights.sum()))
        mu = uniform_in(regions.polys[k], rng)
        if mu is not None:
            return BeliefState(mu, rng.uniform() * cov_max), k
    j = active[int(rng.integers(len(active)))]
    b = tree.vertices[j].belief
    return BeliefState(b.mean + 0.1 * rng.standard_normal(b.dim), b.cov), tree.vertices[j].progress


def best_nearest(tree: SearchTree, b_rand: BeliefState, delta_near: float, w_sigma: float = 1.0,
                 position: int | None = None) -> tuple[int, int]:
    """Cheapest active vertex within ``delta_near``, else the nearest one.

    With ``position`` set, only vertices at that lasso position or the one
    before it are candidates (all active vertices if there are none).
    """
    active = tree.active()
    if position is not None:
        near = [i for i in active if position - 1 <= tree.vertices[i].progress <= position]
        active = near or active
    best = None
    nearest = None
    for i in active:
        v = tree.vertices[i]
        d = belief_distance(v.belief, b_rand, w_sigma)
        if d <= delta_near and (best is None or v.cost < tree.vertices[best].cost):
            best = i
        if nearest is None or d < nearest[0]:
            nearest = (d, i)
    i = best if best is not None else nearest[1]
    return i, tree.vertices[i].progress


def dominates(a: Vertex, b: Vertex) -> bool:
    return a.progress >= b.progress and a.cost < b.cost


def drain(tree: SearchTree, new: int, delta_drain: float, w_sigma: float = 1.0) -> None:
    """Deactivate vertices near ``new`` that are dominated, or ``new`` itself."""
    vn = tree.vertices[new]
    for i in tree.active():
        if i == new:
            continue
        v = tree.vertices[i]
        if belief_distance(v.belief, vn.belief, w_sigma) > delta_drain:
            continue
        if dominates(v, vn):
            vn.active = False
            return
    for i in tree.active():
        if i == new:
            continue
        v = tree.vertices[i]
        if belief_distance(v.belief, vn.belief, w_sigma) <= delta_drain and dominates(vn, v):
            v.active = False


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

@dataclass
class Steering:
    """Per-search constants shared by every propagation."""

    sys: LinearSystem
    params: SearchParams
    box: Polytope
    F: np.ndarray
    Q: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray

    @classmethod
    def build(cls, sys: LinearSystem, params: SearchParams, box: Polytope) -> "Steering":
        n, m = sys.n, sys.m
        F = lqr(sys.A, sys.B, params.q_mean * np.eye(n), params.r * np.eye(m))
        d = n + n * (n + 1) // 2
        wq = np.r_[np.full(n, params.q_mean), np.full(d - n, params.q_cov)]
        wf = np.r_[np.full(n, params.qf_mean), np.full(d - n, params.qf_cov)]
        return cls(sys, params, box, F, np.diag(wq), np.diag(wf), params.r * np.eye(m))

    def clamp(self, u):
        return clamp_control(u, self.sys.H_u, self.sys.c_u)


def _run_cost(st: Steering, beliefs, controls, target) -> float:
    s = np.array([belief_to_vec(b.mean, b.cov) for b in beliefs]) - target
    J = np.einsum("ti,ij,tj->", s[:-1], st.Q, s[:-1]) + s[-1] @ st.Q_f @ s[-1]
    return float(J + np.einsum("ti,ij,tj->", controls, st.R, controls))


def steer(st: Steering, b0: BeliefState, mu_final: np.ndarray, T: int):
    """LQR tracking run refined by one belief-LQR pass.

    Returns ``(beliefs, controls)`` with ``beliefs[0] = b0``.
    """
    sys = st.sys
    beliefs, controls = [b0], []
    for _ in range(T):
        u = st.clamp(-st.F @ (beliefs[-1].mean - mu_final))
        controls.append(u)
        beliefs.append(mlo_step(sys, beliefs[-1], u))
    controls = np.array(controls)
    n = sys.n
    target = np.r_[mu_final, np.zeros(n * (n + 1) // 2)]
    best = (_run_cost(st, beliefs, controls, target), beliefs, controls)
    gains = blqr(sys, beliefs, controls, st.Q, st.Q_f, st.R, target)
    for alpha in (1.0, 0.5, 0.25):
        bs, us = [b0], []
        for t in range(T):
            ds = belief_to_vec(bs[-1].mean, bs[-1].cov) - gains.s_nom[t]
            u = st.clamp(gains.u_nom[t] - gains.F[t] @ ds + alpha * gains.k[t])
            us.append(u)
            bs.append(mlo_step(sys, bs[-1], u))
        us = np.array(us)
        J = _run_cost(st, bs, us, target)
        if J < best[0]:
            best = (J, bs, us)
    return best[1], best[2]


def propagate(st: Steering, regions: Regions, v: Vertex, rng: np.random.Generator, entries=None):
    """Extend vertex ``v``; returns ``(beliefs, controls, indices)`` or None.

    The run is cut at the first belief that leaves cells ``k`` and ``k+1``,
    falls back from ``k+1`` to ``k``, or leaves the workspace box.
    """
    p = st.params
    k = v.progress
    K = regions.K
    if k < K and rng.uniform() < p.advance_bias:
        tgt = k + 1
    else:
        tgt = k
    mu_final = None
    if k == K and entries and rng.uniform() < p.entry_bias:
        mu_final = entries[int(rng.integers(len(entries)))]
    if mu_final is None:
        mu_final = uniform_in(regions.polys[tgt], rng, budget=1000)
        if mu_final is None:
            return None
    T = int(rng.integers(p.t_min, p.t_max + 1))
    try:
        beliefs, controls = steer(st, v.belief, mu_final, T)
    except (np.linalg.LinAlgError, RiccatiError) as exc:
        log.debug("propagation skipped: %s", exc)
        return None
    out_b, out_u, out_i = [], [], []
    cur = k
    for b, u in zip(beliefs[1:], controls):
        if not st.box.contains(b.mean, 0.0):
            break
        s = regions.signs_of(b)
        if cur < K and s == regions.signs[cur + 1]:
            cur += 1
        elif s != regions.signs[cur]:
            break
        out_b.append(b)
        out_u.append(u)
        out_i.append(cur)
    if not out_b:
        return None
    return out_b, np.array(out_u), out_i


# ---------------------------------------------------------------------------
# Loop closure
# ---------------------------------------------------------------------------

def close_loop(st: Steering, regions: Regions, tree: SearchTree, i: int) -> Plan | None:
    """Try every loop-entry step on the path to vertex ``i`` (latest first)."""
    sys, p = st.sys, st.params
    beliefs, controls, idx = tree.path(i)
    L, K = regions.lasso.loop_index, regions.K
    b_end = beliefs[-1]
    for h in reversed(range(len(beliefs))):
        if idx[h] != L:
            continue
        target = beliefs[h]
        try:
            lc = loop_controls(sys, b_end.mean, target.mean)
        except ValueError:
            return None
        if lc.residual >= p.tol_loop:
            continue
        run = [b_end]
        for u in lc.controls:
            run.append(mlo_step(sys, run[-1], u))
        # closing steps stay in the last cell and land in the loop cell
        if not all(regions.contains(K, b) and st.box.contains(b.mean, 0.0) for b in run[1:-1]):
            continue
        last = run[-1]
        if not regions.contains(L, last):
            continue
        if np.abs(last.mean - target.mean).max() >= p.tol_loop:
            continue
        gap = target.cov + p.tol_psd * np.eye(sys.n) - last.cov
        if np.linalg.eigvalsh(0.5 * (gap + gap.T)).min() < 0.0:
            continue
        tail_idx = [K] * (len(run) - 2)
        return Plan(
            beliefs=beliefs + run[1:],
            controls=np.array(list(controls) + list(lc.controls)).reshape(-1, sys.m),
            index_map=idx + tail_idx,
            loop_entry=h,
            lasso=regions.lasso,
        )
    return None


def feas_run(st: Steering, regions: Regions, tree: SearchTree) -> Plan | None:
    """Cheapest closed plan over all vertices that reached the last cell."""
    best = None
    for i, v in enumerate(tree.vertices):
        if v.progress != regions.K:
            continue
        plan = close_loop(st, regions, tree, i)
        if plan is not None and (best is None or plan.cost < best.cost):
            best = plan
    return best


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

@dataclass
class SearchOutcome:
    plan: Plan | None
    iterations: int
    vertices: int
    reason: str = ""


def fsearch(
    sys: LinearSystem,
    kripke: KripkeStructure,
    lasso: LassoPath,
    b0: BeliefState,
    box: Polytope,
    cov_max: np.ndarray,
    params: SearchParams,
    rng: np.random.Generator,
) -> SearchOutcome:
    """Grow a sparse belief tree along ``lasso`` and close its loop.

    Runs at most ``(K + 1) * params.iterations`` expansions and stops early
    once a vertex in the last cell admits a loop closure.
    """
    regions = Regions(kripke, lasso)
    if not regions.contains(0, b0):
        return SearchOutcome(None, 0, 0, "initial belief is not in the first lasso cell")
    st = Steering.build(sys, params, box)
    tree = SearchTree([Vertex(b0, 0, (0, float(np.trace(b0.cov))), -1, np.zeros((0, sys.m)), [], [])])
    K = lasso.K
    if K == 0:
        plan = close_loop(st, regions, tree, 0)
        if plan is not None:
            return SearchOutcome(plan, 0, 1)
    budget = (K + 1) * params.iterations
    for it in range(1, budget + 1):
        b_rand, k_rand = sample(tree, regions, cov_max, rng)
        i, _ = best_nearest(tree, b_rand, params.delta_near, params.w_sigma, k_rand)
        v = tree.vertices[i]
        entries = None
        if v.progress == K:
            bs_v, _, idx_v = tree.path(i)
            entries = [b.mean for b, j in zip(bs_v, idx_v) if j == lasso.loop_index]
        ext = propagate(st, regions, v, rng, entries)
        if ext is None:
            continue
        bs, us, idx = ext
        cost = (v.cost[0] + len(us), float(np.trace(bs[-1].cov)))
        tree.vertices.append(Vertex(bs[-1], idx[-1], cost, i, us, bs, idx))
        new = len(tree.vertices) - 1
        drain(tree, new, params.delta_drain, params.w_sigma)
        if idx[-1] == K:
            plan = close_loop(st, regions, tree, new)
            if plan is not None:
                log.info("lasso realised after %d iterations (%d vertices)", it, len(tree.vertices))
                return SearchOutcome(plan, it, len(tree.vertices))
    plan = feas_run(st, regions, tree)
    if plan is not None:
        return SearchOutcome(plan, budget, len(tree.vertices))
    reached = max(v.progress for v in tree.vertices)
    return SearchOutcome(None, budget, len(tree.vertices),
                         f"budget exhausted; furthest lasso position reached {reached} of {K}")
