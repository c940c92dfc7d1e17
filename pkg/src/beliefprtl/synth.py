"""Counterexample-guided synthesis loop, plan checking and Monte Carlo runs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .abstraction import KripkeStructure, Sign
from .belief import BeliefState, belief_step_batch, mlo_step, psd_sqrt
from .bmc import LassoPath, iter_lassos, satisfiable
from .fsearch import Plan, fsearch

log = logging.getLogger(__name__)

PLAN = "plan"
NO_LASSO = "infeasible_abstraction"
BUDGET = "budget_exhausted"
EXIT_CODES = {PLAN: 0, NO_LASSO: 2, BUDGET: 3}


@dataclass
class SynthesisResult:
    status: str
    plan: Plan | None = None
    lasso: LassoPath | None = None
    lassos_proposed: int = 0
    lassos_blocked: int = 0
    blocked: list = field(default_factory=list)
    seed: int = 0
    wall_time: float = 0.0
    reason: str = ""

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def statistics(self, with_time: bool = False) -> dict:
        d = {
            "status": self.status,
            "lassos_proposed": self.lassos_proposed,
            "lassos_blocked": self.lassos_blocked,
            "blocked": [{"cells": list(c), "loop_index": l} for c, l in self.blocked],
            "seed": self.seed,
            "reason": self.reason,
        }
        if with_time:
            d["wall_time"] = self.wall_time
        return d


def id_prtl(scenario, seed: int | None = None, k_max: int | None = None, iterations: int | None = None,
            kripke: KripkeStructure | None = None) -> SynthesisResult:
    """Alternate lasso proposals and feasibility searches until one succeeds.

    Every failed lasso is blocked and the model checker is queried again.
    The search for lasso ``j`` uses its own generator seeded with
    ``(seed, j)``, so outcomes do not depend on earlier search lengths.
    """
    t0 = time.perf_counter()
    seed = scenario.seed if seed is None else seed
    k_max = scenario.k_max if k_max is None else k_max
    params = scenario.params
    if iterations is not None:
        params = type(params)(**{**params.to_json(), "iterations": iterations})
    kripke = scenario.kripke() if kripke is None else kripke
    spec = scenario.abstracted
    blocked: list = []
    blockset: set = set()
    res = SynthesisResult(BUDGET, seed=seed)
    # the generator reads blockset live, so continuing it is the same as
    # re-querying the model checker with the enlarged blocklist
    proposals = iter_lassos(kripke, spec, k_max, blockset)
    while True:
        if scenario.max_lassos is not None and res.lassos_proposed >= scenario.max_lassos:
            res.reason = f"lasso budget of {scenario.max_lassos} exhausted"
            break
        lasso = next(proposals, None)
        if lasso is None:
            if not satisfiable(kripke, spec):
                res.status = NO_LASSO
                res.reason = "no lasso of any length satisfies the specification in the abstraction"
            else:
                res.reason = f"every satisfying lasso with K <= {k_max} failed the feasibility search"
            break
        res.lassos_proposed += 1
        log.info("lasso %d: K=%d L=%d cells=%s", res.lassos_proposed, lasso.K, lasso.loop_index, lasso.cells)
        rng = np.random.default_rng([seed, res.lassos_proposed])
        out = fsearch(scenario.system, kripke, lasso, scenario.b0, scenario.box, scenario.cov_max, params, rng)
        if out.plan is not None:
            report = check_plan(out.plan, lasso, scenario, kripke)
            if not report.ok:
                raise AssertionError(f"search produced an invalid plan: {report.message}")
            res.status, res.plan, res.lasso = PLAN, out.plan, lasso
            res.reason = ""
            break
        log.info("lasso blocked: %s", out.reason)
        blockset.add(lasso.key())
        blocked.append(lasso.key())
        res.lassos_blocked += 1
    res.blocked = blocked
    res.wall_time = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# Plan checking
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    step: int
    kind: str
    message: str


@dataclass
class CheckReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first(self) -> Violation | None:
        return self.violations[0] if self.violations else None

    @property
    def message(self) -> str:
        v = self.first
        return "ok" if v is None else f"step {v.step}: {v.kind}: {v.message}"


def check_plan(plan: Plan, lasso: LassoPath, scenario, kripke: KripkeStructure | None = None,
               replay_tol: float = 1e-9) -> CheckReport:
    """Verify a plan against every planning constraint; stops at the first failure."""
    kripke = scenario.kripke() if kripke is None else kripke
    sys, p = scenario.system, scenario.params
    H = plan.H
    K, L = lasso.K, lasso.loop_index

    def fail(step, kind, msg):
        return CheckReport([Violation(step, kind, msg)])

    if plan.lasso != lasso:
        return fail(0, "lasso", "plan was built for a different lasso")
    if len(plan.beliefs) != H + 1 or len(plan.index_map) != H:
        return fail(0, "shape", "need H+1 beliefs and H index entries for H controls")
    if H < 1:
        return fail(0, "shape", "a plan needs at least one control to close its loop")
    b0 = plan.beliefs[0]
    if np.abs(b0.mean - scenario.b0.mean).max() > replay_tol or np.abs(b0.cov - scenario.b0.cov).max() > replay_tol:
        return fail(0, "initial", "first belief differs from the scenario's initial belief")
    for t in range(H):
        u = plan.controls[t]
        if not sys.input_admissible(u):
            return fail(t, "input", f"control {u.tolist()} violates the input set")
        nxt = mlo_step(sys, plan.beliefs[t], u)
        got = plan.beliefs[t + 1]
        err = max(np.abs(nxt.mean - got.mean).max(), np.abs(nxt.cov - got.cov).max())
        if err > replay_tol:
            return fail(t, "dynamics", f"replay mismatch {err:.3e} after control {t}")
    idx = plan.index_map
    if idx[0] != 0:
        return fail(0, "index", "plan must start at lasso position 0")
    for t in range(1, H):
        if idx[t] - idx[t - 1] not in (0, 1):
            return fail(t, "index", "index map must advance by 0 or 1 per step")
    if idx[-1] != K:
        return fail(H - 1, "index", f"plan never reaches lasso position {K}")
    for t in range(H + 1):
        k = idx[t] if t < H else L
        want = kripke.cells[lasso.cells[k]].signs
        got = kripke.signs_of(plan.beliefs[t])
        if got != want:
            bad = [i for i, (a, b) in enumerate(zip(got, want)) if a != b]
            names = ", ".join(f"predicate {i}: {Sign(got[i]).name} (want {Sign(want[i]).name})" for i in bad)
            return fail(t, "chance", f"belief leaves cell {lasso.cells[k]}; {names}")
    h = plan.loop_entry
    if not 0 <= h < H or idx[h] != L:
        return fail(h, "loop", f"loop entry step {h} is not at lasso position {L}")
    bh, bH = plan.beliefs[h], plan.beliefs[H]
    gap = float(np.abs(bH.mean - bh.mean).max())
    if gap >= p.tol_loop:
        return fail(H, "loop", f"mean closure error {gap:.3e} >= {p.tol_loop}")
    ev = float(np.linalg.eigvalsh(bh.cov + p.tol_psd * np.eye(sys.n) - bH.cov).min())
    if ev < 0.0:
        return fail(H, "loop", f"final covariance exceeds loop-entry covariance (eigenvalue {ev:.3e})")
    return CheckReport([])


def abstract_trace(plan: Plan, kripke: KripkeStructure) -> list[int | None]:
    return [kripke.cell_of(b) for b in plan.beliefs]


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class MonteCarloReport:
    """Empirical satisfaction statistics of an open-loop plan execution.

    ``true_freq[t, i]`` is the fraction of rollouts whose true state satisfies
    ``c_i' x <= b_i`` after ``t`` inputs; ``planned_signs[t, i]`` is the sign
    of predicate ``i`` in the planned belief.  ``belief_freq[t]`` is the
    fraction of rollouts whose filtered belief lies in the planned cell.
    """

    rollouts: int
    seed: int
    predicates: list[dict]
    planned_signs: np.ndarray
    true_freq: np.ndarray
    belief_freq: np.ndarray

    def min_freq_where(self, i: int, sign: Sign = Sign.POS) -> float:
        """Smallest frequency of the planned literal over steps planned as ``sign``."""
        mask = self.planned_signs[:, i] == int(sign)
        if not mask.any():
            return float("nan")
        f = self.true_freq[mask, i]
        return float((f if sign == Sign.POS else 1.0 - f).min())

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "rollouts": self.rollouts,
            "seed": self.seed,
            "predicates": self.predicates,
            "planned_signs": self.planned_signs.tolist(),
            "true_freq": self.true_freq.tolist(),
            "belief_freq": self.belief_freq.tolist(),
        }


def monte_carlo(plan: Plan, scenario, M: int, seed: int = 0, kripke: KripkeStructure | None = None) -> MonteCarloReport:
    """Execute the plan's inputs open loop on ``M`` sampled systems.

    Rollout ``r`` draws all of its noise from a generator seeded with
    ``seed + r``; rollouts are then advanced together as one batch.
    """
    if M < 1:
        raise ValueError("need at least one rollout")
    kripke = scenario.kripke() if kripke is None else kripke
    sys = scenario.system
    n, p, H = sys.n, sys.p, plan.H
    x0n = np.empty((M, n))
    wn = np.empty((M, H, n))
    vn = np.empty((M, H, p))
    for r in range(M):
        g = np.random.default_rng(seed + r)
        x0n[r] = g.standard_normal(n)
        wn[r] = g.standard_normal((H, n))
        vn[r] = g.standard_normal((H, p))
    preds = kripke.preds
    Cp = np.array([q.c for q in preds]).reshape(len(preds), n)
    bp = np.array([q.b for q in preds])
    cells = [kripke.cells[plan.lasso.cells[k]].signs for k in plan.index_map] + \
        [kripke.cells[plan.lasso.cells[plan.lasso.loop_index]].signs]

    x = scenario.b0.mean + x0n @ psd_sqrt(scenario.b0.cov).T
    mean = np.repeat(scenario.b0.mean[None], M, axis=0)
    cov = np.repeat(scenario.b0.cov[None], M, axis=0)
    sqrtW = psd_sqrt(sys.W)
    true_freq = np.empty((H + 1, len(preds)))
    belief_freq = np.empty(H + 1)

    def record(t):
        true_freq[t] = (x @ Cp.T <= bp).mean(axis=0) if len(preds) else []
        belief_freq[t] = np.mean([kripke._table.signs(mean[r], cov[r]) == cells[t] for r in range(M)])

    record(0)
    for t in range(H):
        u = np.repeat(plan.controls[t][None], M, axis=0)
        x = x @ sys.A.T + u @ sys.B.T + wn[:, t] @ sqrtW.T
        y = x @ sys.C.T + np.sqrt(sys.noise.diag(x)) * vn[:, t]
        _, cov, f, Kg = belief_step_batch(sys, mean, cov, u)
        innov = y - f @ sys.C.T
        mean = f + np.einsum("rij,rj->ri", Kg, innov)
        record(t + 1)
    planned = np.array([[int(s) for s in kripke.signs_of(b)] for b in plan.beliefs]).reshape(H + 1, len(preds))
    return MonteCarloReport(
        rollouts=M,
        seed=seed,
        predicates=[{"c": list(q.c), "b": q.b, "eps": q.eps} for q in preds],
        planned_signs=planned,
        true_freq=true_freq,
        belief_freq=belief_freq,
    )
