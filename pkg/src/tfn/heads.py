"""Window labelling, oversampling, logistic heads, discrimination and
calibration metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .cohort import PatientRecord

TASKS = ("graft_loss", "graft_rejection", "death")
WINDOWS = (30, 90, 180, 360)


class SingleClassError(ValueError):
    pass


@dataclass
class LabeledPoint:
    patient_id: str
    time_index: int
    label: int
    task: str
    window: int
    z: np.ndarray | None = None


def label_windows(record: PatientRecord, task: str, window: float) -> list[LabeledPoint]:
    """Label each time point 1 if an event of ``task`` falls in (t, t + window].

    Points at or after the first such event, and points whose window runs past
    follow-up without an event, are left out.
    """
    ev = np.array(sorted(e.time for e in record.events if e.kind == task))
    first = ev[0] if ev.size else np.inf
    out = []
    for i, t in enumerate(record.times):
        if t >= first:
            continue
        if np.any((ev > t) & (ev <= t + window)):
            out.append(LabeledPoint(record.id, i, 1, task, int(window)))
        elif record.follow_up_end >= t + window:
            out.append(LabeledPoint(record.id, i, 0, task, int(window)))
    return out


def oversample_indices(labels: Sequence[int], seed: int) -> np.ndarray:
    y = np.asarray(labels)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError("oversampling needs both classes")
    idx = np.arange(y.size)
    if pos.size == neg.size:
        return idx
    minority, majority = (pos, neg) if pos.size < neg.size else (neg, pos)
    extra = np.random.default_rng(seed).choice(minority, majority.size - minority.size, replace=True)
    return np.concatenate([idx, extra])


def oversample(points: Sequence[LabeledPoint], seed: int) -> list[LabeledPoint]:
    idx = oversample_indices([p.label for p in points], seed)
    return [points[i] for i in idx]


# ------------------------------------------------------------------ heads


@dataclass
class HeadConfig:
    hidden: int = 0  # 0 = logistic regression
    l2: float = 1e-3
    max_iter: int = 500


@dataclass
class BinaryHead:
    mean: np.ndarray
    scale: np.ndarray
    params: np.ndarray
    hidden: int
    dim: int

    def logits(self, Z: np.ndarray) -> np.ndarray:
        X = (np.atleast_2d(Z) - self.mean) / self.scale
        return _forward(self.params, X, self.hidden, self.dim)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return expit(self.logits(Z))


def _unpack(params, hidden, dim):
    if hidden == 0:
        return params[:dim], params[dim]
    W1 = params[: hidden * dim].reshape(hidden, dim)
    b1 = params[hidden * dim : hidden * dim + hidden]
    w2 = params[hidden * dim + hidden : hidden * dim + 2 * hidden]
    return W1, b1, w2, params[-1]


def _forward(params, X, hidden, dim):
    if hidden == 0:
        w, b = _unpack(params, hidden, dim)
        return X @ w + b
    W1, b1, w2, b2 = _unpack(params, hidden, dim)
    return np.tanh(X @ W1.T + b1) @ w2 + b2


def _loss_grad(params, X, y, hidden, dim, l2):
    n = len(y)
    if hidden == 0:
        w, b = _unpack(params, hidden, dim)
        s = X @ w + b
        loss = -(y * log_expit(s) + (1 - y) * log_expit(-s)).mean() + 0.5 * l2 * w @ w
        r = (expit(s) - y) / n
        return loss, np.concatenate([X.T @ r + l2 * w, [r.sum()]])
    W1, b1, w2, b2 = _unpack(params, hidden, dim)
    A = np.tanh(X @ W1.T + b1)
    s = A @ w2 + b2
    loss = -(y * log_expit(s) + (1 - y) * log_expit(-s)).mean()
    loss += 0.5 * l2 * ((W1**2).sum() + w2 @ w2)
    r = (expit(s) - y) / n
    dA = np.outer(r, w2) * (1 - A**2)
    gW1 = dA.T @ X + l2 * W1
    return loss, np.concatenate([gW1.ravel(), dA.sum(0), A.T @ r + l2 * w2, [r.sum()]])


def train_head(Z: np.ndarray, labels: Sequence[int], config: HeadConfig | None = None, seed: int = 0) -> BinaryHead:
    """Oversample the minority class, then fit by L-BFGS on the L2-penalised log loss."""
    config = config or HeadConfig()
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    idx = oversample_indices(y.astype(int), seed)
    if min((y == 1).sum(), (y == 0).sum()) < 1:
        raise SingleClassError("head needs both classes")
    X, y = Z[idx], y[idx]
    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), 1e-8)
    X = (X - mean) / scale
    dim, hidden = Z.shape[1], config.hidden
    if hidden == 0:
        p0 = np.zeros(dim + 1)
    else:
        rng = np.random.default_rng(seed)
        p0 = np.concatenate(
            [rng.uniform(-1, 1, hidden * dim) / np.sqrt(dim), np.zeros(hidden), rng.uniform(-1, 1, hidden) / np.sqrt(hidden), [0.0]]
        )
    res = minimize(_loss_grad, p0, args=(X, y, hidden, dim, config.l2), jac=True, method="L-BFGS-B",
                   options={"maxiter": config.max_iter})
    if not np.isfinite(res.fun):
        raise FloatingPointError("non-finite head loss")
    return BinaryHead(mean, scale, res.x, hidden, dim)


def predict(head: BinaryHead, Z: np.ndarray) -> np.ndarray:
    return head.predict(Z)


# ---------------------------------------------------------------- metrics


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    if not ((y == 1).any() and (y == 0).any()):
        raise SingleClassError("AUC undefined: both classes are required")
    return y


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + P(tie)/2 via average ranks (Mann-Whitney U)."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sens_spec(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    y = _check_binary(labels)
    pred = np.asarray(scores) >= threshold
    tp = np.sum(pred & (y == 1))
    tn = np.sum(~pred & (y == 0))
    return float(tp / (y == 1).sum()), float(tn / (y == 0).sum())


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.mean((p - np.asarray(labels, dtype=np.float64)) ** 2))


@dataclass
class CalibrationModel:
    a: float
    b: float


def platt_fit(scores, labels, l2: float = 1e-3, max_iter: int = 100, tol: float = 1e-12) -> CalibrationModel:
    """Maximise mean log-likelihood of sigmoid(a * s + b) minus (l2 / 2) a^2 by Newton steps.

    Only the slope is penalised, so a constant score maps to the base rate.
    """
    y = _check_binary(labels).astype(np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n = s.size

    def objective(a, b):
        z = a * s + b
        return -(y * log_expit(z) + (1 - y) * log_expit(-z)).mean() + 0.5 * l2 * a * a

    a, b = 0.0, float(np.log(y.mean() / (1 - y.mean())))
    f = objective(a, b)
    for _ in range(max_iter):
        p = expit(a * s + b)
        r = p - y
        g = np.array([(r * s).mean() + l2 * a, r.mean()])
        w = p * (1 - p)
        Hm = np.array([[(w * s * s).mean() + l2, (w * s).mean()], [(w * s).mean(), w.mean()]])
        Hm += 1e-12 * np.eye(2)
        step = np.linalg.solve(Hm, g)
        t = 1.0
        while True:
            a_new, b_new = a - t * step[0], b - t * step[1]
            f_new = objective(a_new, b_new)
            if f_new <= f + 1e-4 * t * -(g @ step) or t < 1e-10:
                break
            t *= 0.5
        done = abs(f - f_new) < tol and np.max(np.abs(t * step)) < 1e-8
        a, b, f = a_new, b_new, f_new
        if done or np.max(np.abs(g)) < 1e-12:
            break
    else:
        raise RuntimeError("Platt scaling did not converge")
    if not (np.isfinite(a) and np.isfinite(b)):
        raise RuntimeError("Platt scaling diverged")
    return CalibrationModel(float(a), float(b))


def platt_apply(model: CalibrationModel, scores) -> np.ndarray:
    return expit(model.a * np.asarray(scores, dtype=np.float64) + model.b)


def logit(p, eps: float = 1e-12) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


def calibration_curve(probs, labels, bins: int = 20) -> list[tuple[float, float, float, int]]:
    """(bin centre, mean predicted, observed frequency, count) for non-empty equal-width bins."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    k = np.minimum((p * bins).astype(int), bins - 1)
    out = []
    for j in range(bins):
        sel = k == j
        if sel.any():
            out.append(((j + 0.5) / bins, float(p[sel].mean()), float(y[sel].mean()), int(sel.sum())))
    return out
