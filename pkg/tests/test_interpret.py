from dataclasses import replace
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tfn.interpret import (
    dci,
    dci_from_importance,
    load_ratings,
    participation_ratio,
    perturbation_sensitivity,
    rating_agreement,
    shap_attribution,
    spearman,
    write_ratings,
)


# ------------------------------------------------------------------ DCI


def _entropy_oracle(p, base):
    return -sum(x * np.log(x) / np.log(base) for x in p if x > 0)


def _dci_oracle(R):
    G, K = R.shape
    D = 0.0
    for k in range(K):
        col = R[:, k]
        D += col.sum() / R.sum() * (1 - _entropy_oracle(col / col.sum(), G))
    C = np.mean([1 - _entropy_oracle(R[g] / R[g].sum(), K) for g in range(G)])
    return D, C


def test_dci_importance_examples():
    assert dci_from_importance(np.eye(3)) == (1.0, 1.0)
    D, C = dci_from_importance(np.ones((3, 3)))
    assert abs(D) < 1e-12 and abs(C) < 1e-12
    R = np.array([[2.0, 0.0], [1.0, 1.0]])
    D, C = dci_from_importance(R)
    # column 0: (2/3, 1/3), column 1: (0, 1); row 0: (1, 0), row 1: (1/2, 1/2)
    h = -(2 / 3 * np.log2(2 / 3) + 1 / 3 * np.log2(1 / 3))
    assert D == pytest.approx(0.75 * (1 - h) + 0.25 * 1.0, abs=1e-12)
    assert C == pytest.approx(0.5 * (1.0 + 0.0), abs=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(2, 5)), elements=st.floats(0.01, 10)))
def test_dci_matches_entropy_oracle(R):
    D, C = dci_from_importance(R)
    Do, Co = _dci_oracle(R)
    assert D == pytest.approx(Do, abs=1e-12) and C == pytest.approx(Co, abs=1e-12)
    assert -1e-12 <= D <= 1 + 1e-12 and -1e-12 <= C <= 1 + 1e-12


def test_dci_on_axis_aligned_code():
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((400, 3))
    Z = Y[:, [2, 0, 1]] * [3.0, -1.0, 0.5] + 1.0
    res = dci(Z, Y, alpha=0.01)
    assert res.disentanglement > 0.99 and res.completeness > 0.99 and res.informativeness > 0.99
    Q, _ = np.linalg.qr(np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 0.5], [1.0, 0.3, -1.0]]))
    mixed = dci(Y @ Q, Y, alpha=0.01)
    assert mixed.disentanglement < 0.5


def test_dci_guards():
    Y = np.random.default_rng(0).standard_normal((20, 2))
    Y[:, 1] = 4.0
    with pytest.raises(ValueError, match="factor1"):
        dci(np.random.default_rng(1).standard_normal((20, 2)), Y)
    with pytest.raises(ValueError):
        dci(np.zeros((3, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------- locality


def test_participation_ratio_extremes():
    assert participation_ratio([0, 0, 5, 0]) == 0.25
    assert participation_ratio([2, 2, 2, 2]) == 1.0
    assert np.isnan(participation_ratio([0, 0]))


def test_zero_noise_gives_zero_sensitivity(small_cohort):
    recs = small_cohort.records[:4]

    def encode(rs):
        return [np.column_stack([r.values.sum(1), r.values[:, 0]]) for r in rs]

    res = perturbation_sensitivity(encode, recs, small_cohort.n_features, 0.0, 0)
    assert not res.matrix.any()
    res = perturbation_sensitivity(encode, recs, small_cohort.n_features, 1.0, 0)
    # feature 0 moves both dims, the others only the first
    assert res.locality[1] == 0.5 and res.locality[0] > 0.5
    again = perturbation_sensitivity(encode, recs, small_cohort.n_features, 1.0, 0)
    assert np.array_equal(res.matrix, again.matrix)
    with pytest.raises(ValueError):
        perturbation_sensitivity(encode, recs, 2, -1.0, 0)


# -------------------------------------------------------------- Shapley


def exact_shapley(f, x, background):
    """Enumerate all orderings; absent features take background values, averaged over rows."""
    P = len(x)
    phi = np.zeros(P)
    orders = list(permutations(range(P)))

    def value(S):
        rows = background.copy()
        rows[:, list(S)] = x[list(S)]
        return f(rows).mean()

    for o in orders:
        prev = value(())
        for j in range(P):
            cur = value(o[: j + 1])
            phi[o[j]] += cur - prev
            prev = cur
    return phi / len(orders)


def _model(w, pairs):
    def f(X):
        X = np.atleast_2d(X)
        return np.tanh(X @ w) + sum(c * X[:, a] * X[:, b] for a, b, c in pairs)

    return f


def _shapley_case(seed):
    rng = np.random.default_rng(seed)
    P = 3 + seed % 3
    f = _model(rng.normal(size=P), [(0, 1, 0.5), (1, P - 1, -0.3)])
    return f, rng.normal(size=(8, P)), rng.normal(size=(1, P))


@pytest.mark.parametrize("seed", range(6))
def test_shapley_matches_enumeration_full_background(seed):
    f, bg, x = _shapley_case(seed)
    est = shap_attribution(f, bg, x, n_permutations=2000, seed=seed, full_background=True)
    assert np.max(np.abs(est.phi[0] - exact_shapley(f, x[0], bg))) < 1e-2


@pytest.mark.parametrize("seed", range(6))
def test_shapley_matches_enumeration_sampled_background(seed):
    f, bg, x = _shapley_case(seed)
    est = shap_attribution(f, bg, x, n_permutations=10000, seed=seed)
    assert np.max(np.abs(est.phi[0] - exact_shapley(f, x[0], bg))) < 1e-2


def test_shapley_null_player_and_single_feature():
    rng = np.random.default_rng(0)
    bg, X = rng.normal(size=(10, 4)), rng.normal(size=(3, 4))
    const = shap_attribution(lambda Z: np.full(len(np.atleast_2d(Z)), 2.0), bg, X, 50, 0)
    assert not const.phi.any()
    only2 = shap_attribution(lambda Z: np.sin(np.atleast_2d(Z)[:, 2]), bg, X, 50, 0)
    assert np.all(only2.phi[:, [0, 1, 3]] == 0)
    assert np.all(only2.mean_abs >= 0)
    with pytest.raises(ValueError):
        shap_attribution(lambda Z: Z[:, 0], np.zeros((0, 4)), X, 10, 0)
    with pytest.raises(ValueError):
        shap_attribution(lambda Z: Z[:, 0], bg, X, 0, 0)


@given(st.integers(0, 2**31 - 1))
def test_shapley_efficiency(seed):
    rng = np.random.default_rng(seed)
    f = _model(rng.normal(size=4), [(0, 3, 0.7)])
    bg, X = rng.normal(size=(6, 4)), rng.normal(size=(2, 4))
    res = shap_attribution(f, bg, X, 16, seed)
    full_base = f(bg).mean()
    gap = res.phi.sum(1) - (res.fx - full_base)
    assert np.all(np.abs(gap) <= 3 * res.efficiency_se + 1e-9)
    # against the base actually used it is exact
    assert np.allclose(res.phi.sum(1), res.fx - res.base_value, atol=1e-12)


# ------------------------------------------------------------- Spearman


def test_spearman_examples():
    assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [1])


@given(st.lists(st.integers(-100, 100), min_size=3, max_size=30), st.integers(0, 1000))
def test_spearman_monotone_invariance(a, seed):
    if len(set(a)) < 2:
        return
    b = np.random.default_rng(seed).normal(size=len(a))
    a = np.asarray(a, dtype=np.float64)
    assert spearman(np.exp(a / 50) * 3 + 1, b) == pytest.approx(spearman(a, b), abs=1e-12)
    assert spearman(a, b**3) == pytest.approx(spearman(a, b), abs=1e-12)


def test_ratings_round_trip_and_agreement(tmp_path):
    p = tmp_path / "r.csv"
    write_ratings([("death", "age", 1), ("death", "crp", 3), ("death", "egfr", 5)], p)
    r = load_ratings(p)
    assert r == {"death": {"age": 1, "crp": 3, "egfr": 5}}
    assert rating_agreement({"age": 0.9, "crp": 0.5, "egfr": 0.1, "other": 3.0}, r["death"]) == 1.0
    p.write_text("task,feature,rating\ndeath,age,7\n")
    with pytest.raises(ValueError):
        load_ratings(p)
