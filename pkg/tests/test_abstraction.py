import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefprtl.abstraction import (
    Cell,
    Sign,
    abstract_belief,
    block_lasso,
    build_kripke,
    destutter,
    enclosure,
    enumerate_cells,
    label_of,
)
from beliefprtl.belief import BeliefState
from beliefprtl.bmc import LassoPath
from beliefprtl.logic import Predicate, eval_state, extract_subformulas, parse_formula, pred_holds
from beliefprtl.polytope import Polytope

Q95 = 1.6448536269514722
BOX1 = Polytope.box([-10.0], [10.0])


def interval(P):
    lo, hi = P.bounds
    return lo[0], hi[0]


def test_enclosure_positive_half_line():
    p = Predicate((1.0,), 3.0, 0.05)
    lo, hi = interval(enclosure(Cell((Sign.POS,)), [p], np.array([[4.0]]), BOX1))
    assert lo == pytest.approx(-10.0) and hi == pytest.approx(3.0, abs=1e-8)


def test_enclosure_unknown_slab():
    p = Predicate((1.0,), 3.0, 0.05)
    lo, hi = interval(enclosure(Cell((Sign.UNKNOWN,)), [p], np.array([[4.0]]), BOX1))
    assert lo == pytest.approx(3.0 - 2 * Q95, abs=1e-7)
    assert hi == pytest.approx(3.0 + 2 * Q95, abs=1e-7)


def test_enclosure_with_covariance_floor():
    p = Predicate((1.0,), 3.0, 0.05)
    _, hi = interval(enclosure(Cell((Sign.POS,)), [p], np.array([[4.0]]), BOX1, np.array([[1.0]])))
    assert hi == pytest.approx(3.0 - Q95, abs=1e-7)


def test_enclosure_contradictory_signs_empty():
    p = Predicate((1.0,), 0.0, 0.05)      # x <= 0
    q = Predicate((-1.0,), -1.0, 0.05)    # x >= 1
    assert enclosure(Cell((Sign.POS, Sign.POS)), [p, q], np.array([[1.0]]), BOX1).is_empty()


def one_d_kripke(spec_text, label_union):
    p = parse_formula("p[0.05](x1 <= 0)")
    spec = parse_formula(spec_text, {"p": p})
    af = extract_subformulas(spec)
    b0 = BeliefState([-5.0], [[0.5]])
    return build_kripke(af, [p.pred], b0, np.array([[1.0]]), BOX1, np.array([[0.01]]), label_union)


@pytest.mark.parametrize("label_union", [False, True])
def test_one_dimension_three_cells(label_union):
    k = one_d_kripke("F p & F !p", label_union)
    assert len(k) == 3
    ids = {c.signs[0]: c.id for c in k.cells}
    pos, unk, neg = ids[Sign.POS], ids[Sign.UNKNOWN], ids[Sign.NEG]
    assert k.has_edge(pos, unk) and k.has_edge(unk, neg) and k.has_edge(unk, pos)
    assert not k.has_edge(pos, neg) and not k.has_edge(neg, pos)
    assert all(k.has_edge(i, i) for i in range(3))
    assert k.initial == pos


def test_label_union_merges_cells_with_the_same_label():
    # only "p" is an AP; UNKNOWN and NEG both carry the empty label
    k = one_d_kripke("F p", True)
    ids = {c.signs[0]: c.id for c in k.cells}
    assert k.has_edge(ids[Sign.POS], ids[Sign.NEG])
    k = one_d_kripke("F p", False)
    assert not k.has_edge(ids[Sign.POS], ids[Sign.NEG])


def test_no_predicates_gives_single_cell():
    af = extract_subformulas(parse_formula("G true"))
    k = build_kripke(af, [], BeliefState([0.0], [[1.0]]), np.array([[1.0]]), BOX1)
    assert len(k) == 1 and k.succ == [(0,)] and k.initial == 0


def test_initial_belief_outside_every_cell():
    p = parse_formula("p[0.05](x1 <= 0)")
    q = parse_formula("p[0.05](x1 <= 6)")
    af = extract_subformulas(parse_formula("F p & F q", {"p": p, "q": q}))
    # a spread far above cov_max leaves both signs UNKNOWN, and the two
    # UNKNOWN slabs do not meet, so that sign vector was pruned
    with pytest.raises(ValueError, match="no cell"):
        build_kripke(af, [p.pred, q.pred], BeliefState([3.0], [[100.0]]), np.array([[1.0]]), BOX1)


def test_quadrotor_initial_cell(quad, quad_kripke):
    k = quad_kripke
    ap_index = {}
    for name in ("safe", "pole1", "pole2", "home"):
        phi = quad.atoms[name]
        ap_index[name] = k.aps.index(phi) if phi in k.aps else None
    lab = k.labels[k.initial]
    assert ap_index["safe"] in lab
    assert ap_index["pole1"] not in lab and ap_index["pole2"] not in lab
    # "home" is the negated literal !low; it appears as its own AP
    home = [i for i, a in enumerate(k.aps) if a == parse_formula("!low", quad.atoms)]
    assert home and home[0] in lab


def test_quadrotor_cell_count(quad_kripke):
    k = quad_kripke
    assert len(k) <= 3 ** len(k.preds) == 81
    # frozen from the pruned enumeration
    assert len(k) == 27 and k.pruned == 54
    assert len(k) + k.pruned == 81


def test_enumeration_count_matches_brute_force(quad, quad_kripke):
    preds = quad_kripke.preds
    n_full = 0
    for code in range(3 ** len(preds)):
        signs = []
        for _ in preds:
            signs.append(Sign(code % 3 - 1))
            code //= 3
        P = enclosure(Cell(tuple(signs)), preds, quad.cov_max, quad.box, quad.cov_floor)
        n_full += not P.is_empty()
    assert n_full == len(quad_kripke)


def test_block_lasso():
    lasso = LassoPath((0, 1, 2), 1)
    bl = block_lasso(frozenset(), lasso)
    assert ((0, 1, 2), 1) in bl
    assert ((0, 1, 2), 2) not in bl
    assert block_lasso(bl, lasso) == bl


def test_destutter():
    assert destutter([1, 1, 2, 2, 2, 1, 3, 3]) == [1, 2, 1, 3]
    assert destutter([]) == []


# --- properties ---------------------------------------------------------------------

PREDS2 = [
    Predicate((1.0, 0.0), 2.0, 0.05),
    Predicate((0.0, 1.0), 1.0, 0.1),
    Predicate((1.0, 1.0), 3.0, 0.2),
]
COV_MAX = np.array([[0.5, 0.1], [0.1, 0.4]])
COV_MIN = 0.01 * np.eye(2)
BOX2 = Polytope.box([-5.0, -5.0], [5.0, 5.0])


@pytest.fixture(scope="module")
def cells2():
    cells, polys, _ = enumerate_cells(PREDS2, COV_MAX, BOX2, COV_MIN)
    return {c.signs: P for c, P in zip(cells, polys)}


def between(t1, t2, angle):
    """A covariance with COV_MIN <= cov <= COV_MAX in the PSD order."""
    w, V = np.linalg.eigh(COV_MAX - COV_MIN)
    R = V @ np.diag(np.sqrt(w)) @ V.T
    U = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    M = R @ U @ np.diag([t1, t2]) @ U.T @ R
    return COV_MIN + (M + M.T) / 2


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1), st.floats(0, 1), st.floats(0, np.pi))
def test_enclosure_soundness(cells2, mx, my, t1, t2, angle):
    b = BeliefState([mx, my], between(t1, t2, angle))
    signs = abstract_belief(b, PREDS2).signs
    assert signs in cells2
    assert cells2[signs].contains(b.mean, tol=1e-7)


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1), st.floats(0, 1), st.floats(0, np.pi))
def test_labels_match_direct_evaluation(mx, my, t1, t2, angle):
    spec = parse_formula(
        "F (a & !b) & G (c | b) & F !a",
        {"a": parse_formula("p[0.05](x1 <= 2)", dim=2), "b": parse_formula("p[0.1](x2 <= 1)", dim=2),
         "c": parse_formula("p[0.2](x1 + x2 <= 3)", dim=2)},
    )
    af = extract_subformulas(spec)
    b = BeliefState([mx, my], between(t1, t2, angle))
    signs = abstract_belief(b, PREDS2).signs
    lab = label_of(signs, PREDS2, af.aps)
    for i, phi in enumerate(af.aps):
        assert (i in lab) == eval_state(phi, lambda pr: pred_holds(pr, b))
