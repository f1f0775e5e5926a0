"""Representation analysis: DCI scores, perturbation locality, permutation
Shapley attribution and rank agreement with expert ratings."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.linear_model import Lasso


# ---------------------------------------------------------------- DCI


def _entropy(p: np.ndarray, base: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=0) / np.log(base)


def dci_from_importance(R: np.ndarray) -> tuple[float, float]:
    """Disentanglement and completeness from a G x K importance matrix."""
    R = np.abs(np.asarray(R, dtype=np.float64))
    G, K = R.shape
    total = R.sum()
    if total == 0:
        return 0.0, 0.0
    col = R.sum(axis=0)
    Pc = np.divide(R, col, out=np.zeros_like(R), where=col > 0)
    d_k = 1.0 - _entropy(Pc, G) if G > 1 else np.ones(K)
    rho = col / total
    D = float(np.sum(rho * np.where(col > 0, d_k, 0.0)))
    row = R.sum(axis=1, keepdims=True)
    Pr = np.divide(R, row, out=np.zeros_like(R), where=row > 0)
    c_g = 1.0 - _entropy(Pr.T, K) if K > 1 else np.ones(G)
    C = float(np.mean(np.where(row[:, 0] > 0, c_g, 0.0)))
    return D, C


@dataclass
class DCIResult:
    disentanglement: float
    completeness: float
    informativeness: float
    importance: np.ndarray  # G x K
    r2: np.ndarray  # per factor, held-out

    def to_dict(self) -> dict:
        return {
            "disentanglement": self.disentanglement,
            "completeness": self.completeness,
            "informativeness": self.informativeness,
            "importance": self.importance.tolist(),
            "r2": self.r2.tolist(),
        }


def dci(Z, factors, alpha: float = 0.02, test_frac: float = 0.2, seed: int = 0, factor_names=None) -> DCIResult:
    """Lasso factor predictors from standardized Z; importance = |coefficients|."""
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(factors, dtype=np.float64)
    N, K = Z.shape
    G = Y.shape[1]
    if N <= K + G:
        raise ValueError("dci needs more rows than latent dims plus factors")
    names = factor_names or [f"factor{g}" for g in range(G)]
    perm = np.random.default_rng(seed).permutation(N)
    n_test = max(1, int(round(test_frac * N)))
    te, tr = perm[:n_test], perm[n_test:]
    z_mu, z_sd = Z[tr].mean(0), Z[tr].std(0)
    z_sd = np.where(z_sd > 1e-12, z_sd, 1.0)
    Ztr, Zte = (Z[tr] - z_mu) / z_sd, (Z[te] - z_mu) / z_sd
    R = np.zeros((G, K))
    r2 = np.zeros(G)
    for g in range(G):
        y = Y[:, g]
        sd = y[tr].std()
        if sd < 1e-12:
            raise ValueError(f"factor {names[g]!r} has zero variance")
        ytr = (y[tr] - y[tr].mean()) / sd
        yte = (y[te] - y[tr].mean()) / sd
        model = Lasso(alpha=alpha, max_iter=10000).fit(Ztr, ytr)
        R[g] = np.abs(model.coef_)
        resid = yte - model.predict(Zte)
        r2[g] = 1.0 - resid @ resid / max(((yte - yte.mean()) ** 2).sum(), 1e-12)
    D, C = dci_from_importance(R)
    I = float(np.mean(np.maximum(0.0, r2)))
    return DCIResult(D, C, I, R, r2)


# ------------------------------------------------------- perturbation


def participation_ratio(s: np.ndarray) -> float:
    """(sum s)^2 / (K sum s^2): 1/K when one dimension moves, 1 when all move equally."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    denom = s.size * (s**2).sum()
    return float(s.sum() ** 2 / denom) if denom > 0 else float("nan")


@dataclass
class SensitivityResult:
    matrix: np.ndarray  # F x K mean |delta Z|
    locality: np.ndarray  # F

    @property
    def mean_locality(self) -> float:
        return float(np.nanmean(self.locality))


def perturbation_sensitivity(
    encode: Callable[[list], list[np.ndarray]],
    records: Sequence,
    n_features: int,
    noise_sd: float,
    seed: int,
) -> SensitivityResult:
    """Add Gaussian noise to the observed entries of one feature at a time.

    ``encode`` maps a list of (normalized) records to per-record Z arrays.
    """
    from dataclasses import replace

    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    base = encode(list(records))
    K = base[0].shape[1]
    S = np.zeros((n_features, K))
    rng = np.random.default_rng(seed)
    for f in range(n_features):
        noisy = []
        for r in records:
            v = r.values.copy()
            obs = r.mask[:, f] == 1
            v[obs, f] += noise_sd * rng.standard_normal(int(obs.sum()))
            noisy.append(replace(r, values=v))
        pert = encode(noisy)
        diffs = np.concatenate([np.abs(p - b) for p, b in zip(pert, base)])
        S[f] = diffs.mean(axis=0)
    loc = np.array([participation_ratio(row) for row in S])
    return SensitivityResult(S, loc)


# ------------------------------------------------------------ Shapley


@dataclass
class AttributionVector:
    mean_abs: np.ndarray  # per feature
    stderr: np.ndarray
    phi: np.ndarray  # instances x features
    phi_se: np.ndarray
    fx: np.ndarray
    base_value: np.ndarray  # mean background prediction actually used, per instance
    efficiency_se: np.ndarray


def shap_attribution(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    background,
    instances,
    n_permutations: int,
    seed: int,
    antithetic: bool = True,
    full_background: bool = False,
) -> AttributionVector:
    """Permutation-sampling Shapley values with background marginalization.

    Each sampled ordering switches features from background to instance
    values in that order. By default an ordering starts from one background
    row, cycled in shuffled rounds so every row is used equally often; with
    ``full_background`` each coalition is averaged over all background rows
    instead (exact marginalization, |background| times the evaluations).
    Orderings are paired with their reverse when ``antithetic``, and a pair
    shares its background row.
    """
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    X = np.atleast_2d(np.asarray(instances, dtype=np.float64))
    if bg.shape[0] == 0:
        raise ValueError("empty background set")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    n, P = X.shape
    n_bg = bg.shape[0]
    rng = np.random.default_rng(seed)
    phi = np.zeros((n, P))
    phi_se = np.zeros((n, P))
    fx = np.asarray(predict_fn(X), dtype=np.float64)
    base = np.zeros(n)
    eff_se = np.zeros(n)
    group = 2 if antithetic else 1
    n_groups = -(-n_permutations // group)
    rows = np.arange(n_permutations)
    for i in range(n):
        orders = []
        while len(orders) < n_permutations:
            o = rng.permutation(P)
            orders.append(o)
            if antithetic and len(orders) < n_permutations:
                orders.append(o[::-1])
        orders = np.array(orders)
        # coalition after 0..P switched features, in background-relative form
        switched = np.zeros((n_permutations, P + 1, P), dtype=bool)
        for step in range(1, P + 1):
            switched[:, step] = switched[:, step - 1]
            switched[rows, step, orders[:, step - 1]] = True
        if full_background:
            V = np.where(switched[:, :, None, :], X[i], bg[None, None])
            out = np.asarray(predict_fn(V.reshape(-1, P)), dtype=np.float64)
            out = out.reshape(n_permutations, P + 1, n_bg).mean(axis=2)
        else:
            reps = -(-n_groups // n_bg)
            g_idx = np.concatenate([rng.permutation(n_bg) for _ in range(reps)])[:n_groups]
            bg_idx = np.repeat(g_idx, group)[:n_permutations]
            V = np.where(switched, X[i], bg[bg_idx][:, None, :])
            out = np.asarray(predict_fn(V.reshape(-1, P)), dtype=np.float64).reshape(n_permutations, P + 1)
        contrib = np.zeros((n_permutations, P))
        contrib[rows[:, None], orders] = np.diff(out, axis=1)
        phi[i] = contrib.mean(axis=0)
        # standard errors over independent groups (antithetic pairs share everything random)
        m = n_permutations // group
        if m > 1:
            grouped = contrib[: m * group].reshape(m, group, P).mean(axis=1)
            phi_se[i] = grouped.std(axis=0, ddof=1) / np.sqrt(m)
            b0 = out[: m * group, 0].reshape(m, group).mean(axis=1)
            eff_se[i] = b0.std(ddof=1) / np.sqrt(m)
        base[i] = out[:, 0].mean()
    mean_abs = np.abs(phi).mean(axis=0)
    stderr = np.sqrt((phi_se**2).sum(axis=0)) / n
    return AttributionVector(mean_abs, stderr, phi, phi_se, fx, base, eff_se)


# ----------------------------------------------------------- Spearman


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0:
        raise ValueError("zero rank variance")
    return float(np.clip(ra @ rb / denom, -1.0, 1.0))


def load_ratings(path) -> dict[str, dict[str, int]]:
    """task -> feature -> rating (1 = very relevant ... 5 = not relevant)."""
    out: dict[str, dict[str, int]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            r = int(row["rating"])
            if not 1 <= r <= 5:
                raise ValueError(f"rating out of range: {row}")
            out.setdefault(row["task"], {})[row["feature"]] = r
    return out


def write_ratings(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "feature", "rating"])
        w.writerows(rows)


def rating_agreement(attribution: dict[str, float], ratings: dict[str, int]) -> float:
    """Spearman between mean |SHAP| and inverted ratings over shared features."""
    feats = [f for f in attribution if f in ratings]
    return spearman([attribution[f] for f in feats], [6 - ratings[f] for f in feats])
