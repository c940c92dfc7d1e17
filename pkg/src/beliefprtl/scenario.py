"""Scenario files: the complete planning problem in one JSON document."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .abstraction import KripkeStructure, build_kripke
from .belief import BeliefState, ConstantNoise, LinearSystem, MinPolyNoise, NoiseModel, PolyTerm
from .fsearch import SearchParams
from .logic import AbstractedFormula, Formula, FormulaSyntaxError, atoms_of, extract_subformulas, parse_formula
from .polytope import Polytope

FORMAT_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario; the message starts with the offending field."""


@dataclass
class Scenario:
    name: str
    system: LinearSystem
    b0: BeliefState
    box: Polytope
    lower: np.ndarray
    upper: np.ndarray
    cov_max: np.ndarray
    cov_floor: np.ndarray | None
    atoms: dict[str, Formula]
    spec_text: str
    spec: Formula
    params: SearchParams
    k_max: int
    seed: int
    max_lassos: int | None = None
    label_union: bool = True

    @property
    def abstracted(self) -> AbstractedFormula:
        return extract_subformulas(self.spec)

    @property
    def predicates(self):
        return atoms_of(self.spec)

    def kripke(self) -> KripkeStructure:
        try:
            return build_kripke(self.abstracted, self.predicates, self.b0, self.cov_max, self.box, self.cov_floor,
                                self.label_union)
        except ValueError as exc:
            raise ScenarioError(f"initial_belief: {exc}") from None


def _matrix(d, key, shape=None) -> np.ndarray:
    if key not in d:
        raise ScenarioError(f"{key}: missing")
    try:
        M = np.array(d[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{key}: not a numeric array ({exc})") from None
    if not np.all(np.isfinite(M)):
        raise ScenarioError(f"{key}: contains non-finite entries")
    if shape is not None and M.shape != shape:
        raise ScenarioError(f"{key}: expected shape {shape}, got {M.shape}")
    return M


def _psd(name, M, n):
    if M.shape != (n, n):
        raise ScenarioError(f"{name}: expected shape {(n, n)}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ScenarioError(f"{name}: not symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-9:
        raise ScenarioError(f"{name}: not positive semidefinite")


def _noise(d, p) -> NoiseModel:
    kind = d.get("kind")
    try:
        if kind == "constant":
            model = ConstantNoise(d["variances"])
        elif kind == "min_poly":
            terms = tuple(
                tuple(PolyTerm(int(t["index"]) - 1, float(t["shift"]), int(t["power"]), float(t.get("coef", 1.0)))
                      for t in out)
                for out in d["terms"]
            )
            model = MinPolyNoise(d["const"], d["floor"], terms)
        else:
            raise ScenarioError(f"system.noise.kind: unknown noise model {kind!r}")
    except KeyError as exc:
        raise ScenarioError(f"system.noise.{exc.args[0]}: missing") from None
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"system.noise: {exc}") from None
    if model.p != p:
        raise ScenarioError(f"system.noise: model has {model.p} outputs but C has {p} rows")
    return model


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format_version") != FORMAT_VERSION:
        raise ScenarioError(f"format_version: expected {FORMAT_VERSION}, got {d.get('format_version')!r}")
    if "system" not in d:
        raise ScenarioError("system: missing")
    s = d["system"]
    A = _matrix(s, "A")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ScenarioError(f"system.A: expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    B = _matrix(s, "B")
    if B.ndim != 2 or B.shape[0] != n:
        raise ScenarioError(f"system.B: expected {n} rows, got shape {B.shape}")
    C = _matrix(s, "C")
    if C.ndim != 2 or C.shape[1] != n:
        raise ScenarioError(f"system.C: expected {n} columns, got shape {C.shape}")
    W = _matrix(s, "W")
    _psd("system.W", W, n)
    if "noise" not in s:
        raise ScenarioError("system.noise: missing")
    noise = _noise(s["noise"], C.shape[0])
    if "input_set" not in s:
        raise ScenarioError("system.input_set: missing")
    H_u = _matrix(s["input_set"], "H")
    c_u = _matrix(s["input_set"], "c").reshape(-1)
    if H_u.ndim != 2 or H_u.shape[1] != B.shape[1] or H_u.shape[0] != c_u.size:
        raise ScenarioError("system.input_set: H and c disagree with each other or with B")
    sys = LinearSystem(A, B, C, W, noise, H_u, c_u)
    try:
        sys.validate()
    except ValueError as exc:
        raise ScenarioError(f"system.{exc}") from None

    if "initial_belief" not in d:
        raise ScenarioError("initial_belief: missing")
    mu0 = _matrix(d["initial_belief"], "mean").reshape(-1)
    if mu0.size != n:
        raise ScenarioError(f"initial_belief.mean: expected length {n}, got {mu0.size}")
    S0 = _matrix(d["initial_belief"], "cov")
    _psd("initial_belief.cov", S0, n)

    if "workspace" not in d:
        raise ScenarioError("workspace: missing")
    lower = _matrix(d["workspace"], "lower").reshape(-1)
    upper = _matrix(d["workspace"], "upper").reshape(-1)
    if lower.size != n or upper.size != n or np.any(lower >= upper):
        raise ScenarioError("workspace: lower/upper must have length n with lower < upper")
    if np.any(mu0 < lower) or np.any(mu0 > upper):
        raise ScenarioError("initial_belief.mean: outside the workspace box")

    cov_max = _matrix(d, "cov_max")
    _psd("cov_max", cov_max, n)
    floor_spec = d.get("cov_floor", "auto")
    if floor_spec == "auto":
        cov_floor = sys.covariance_floor()
    elif floor_spec is None:
        cov_floor = None
    else:
        cov_floor = _matrix(d, "cov_floor")
        _psd("cov_floor", cov_floor, n)

    label_union = d.get("kripke", {}).get("label_union", True)
    if not isinstance(label_union, bool):
        raise ScenarioError("kripke.label_union: must be true or false")

    atoms: dict[str, Formula] = {}
    for name, text in d.get("atoms", {}).items():
        try:
            atoms[name] = parse_formula(text, atoms, dim=n)
        except FormulaSyntaxError as exc:
            raise ScenarioError(f"atoms.{name}: {exc}") from None
        except ValueError as exc:
            raise ScenarioError(f"atoms.{name}: {exc}") from None
    if "spec" not in d:
        raise ScenarioError("spec: missing")
    try:
        spec = parse_formula(d["spec"], atoms, dim=n)
    except ValueError as exc:
        raise ScenarioError(f"spec: {exc}") from None
    for p in atoms_of(spec):
        if p.dim != n:
            raise ScenarioError(f"spec: predicate dimension {p.dim} does not match state dimension {n}")

    search = dict(d.get("search", {}))
    k_max = int(search.pop("k_max", 8))
    if k_max < 0:
        raise ScenarioError("search.k_max: must be non-negative")
    max_lassos = search.pop("max_lassos", None)
    if max_lassos is not None and int(max_lassos) < 1:
        raise ScenarioError("search.max_lassos: must be at least 1")
    known = {f.name for f in fields(SearchParams)}
    for key in search:
        if key not in known:
            raise ScenarioError(f"search.{key}: unknown parameter")
    params = SearchParams(**search)
    if params.iterations < 1:
        raise ScenarioError("search.iterations: must be at least 1")
    if not 1 <= params.t_min <= params.t_max:
        raise ScenarioError("search.t_min: need 1 <= t_min <= t_max")

    return Scenario(
        name=str(d.get("name", "scenario")),
        system=sys,
        b0=BeliefState(mu0, S0),
        box=Polytope.box(lower, upper),
        lower=lower,
        upper=upper,
        cov_max=cov_max,
        cov_floor=cov_floor,
        atoms=atoms,
        spec_text=d["spec"],
        spec=spec,
        params=params,
        k_max=k_max,
        seed=int(d.get("seed", 0)),
        max_lassos=None if max_lassos is None else int(max_lassos),
        label_union=label_union,
    )


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file (or a bundled scenario name)."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("beliefprtl") / "scenarios" / f"{path}.json"
        if bundled.is_file():
            return scenario_from_dict(json.loads(bundled.read_text()))
        raise ScenarioError(f"path: no such scenario file {str(path)!r}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"path: invalid JSON ({exc})") from None
    return scenario_from_dict(d)


def bundled_scenarios() -> list[str]:
    root = resources.files("beliefprtl") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".json"))
