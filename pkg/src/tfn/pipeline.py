"""Cross-validated experiments built on the encoder, heads and interpretation
tools. Every function here is deterministic given its configs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .cohort import Cohort, PatientRecord, shuffle_timestamps, split_folds
from .heads import (
    TASKS,
    WINDOWS,
    HeadConfig,
    SingleClassError,
    brier,
    calibration_curve,
    label_windows,
    platt_apply,
    platt_fit,
    roc_auc,
    sens_spec,
    train_head,
)
from .interpret import dci, perturbation_sensitivity
from .nexus import EncoderConfig
from .objectives import LossWeights
from .trainer import TFNModel, TrainConfig, cutoff_targets, train_encoder

log = logging.getLogger(__name__)

MODALITIES = {
    "ts": dict(use_static=False, use_notes=False),
    "ts,static": dict(use_static=True, use_notes=False),
    "ts,static,notes": dict(use_static=True, use_notes=True),
}


# settings used for the cohort-level experiments: a larger step and smaller
# batches than the TrainConfig defaults, and a narrower encoder, so a 5-fold
# run fits in a few minutes on one CPU
PRESET_TRAIN = {"epochs": 30, "lr": 1e-2, "batch_size": 16}
PRESET_ENCODER = {"d_h": 32}


def preset_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**PRESET_TRAIN, **overrides})


def parse_modalities(text: str) -> str:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if "ts" not in parts:
        raise ValueError("the ts modality is required")
    key = ",".join(m for m in ("ts", "static", "notes") if m in parts)
    if key not in MODALITIES or len(set(parts)) != len(parts) or set(parts) - {"ts", "static", "notes"}:
        raise ValueError(f"unsupported modality set {text!r}; use ts, ts,static or ts,static,notes")
    return key


@dataclass
class EvalConfig:
    tasks: tuple[str, ...] = TASKS
    windows: tuple[int, ...] = WINDOWS
    calib_frac: float = 0.2
    head: HeadConfig = field(default_factory=HeadConfig)
    platt_l2: float = 1e-3
    bins: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "windows": list(self.windows),
            "calib_frac": self.calib_frac,
            "head": dict(self.head.__dict__),
            "platt_l2": self.platt_l2,
            "bins": self.bins,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", TASKS))
        d["windows"] = tuple(int(w) for w in d.get("windows", WINDOWS))
        d["head"] = HeadConfig(**d.get("head", {}))
        return cls(**d)


def encoder_config_for(cohort: Cohort, modalities: str = "ts,static,notes", **overrides) -> EncoderConfig:
    flags = MODALITIES[parse_modalities(modalities)]
    return EncoderConfig(
        cohort.n_features, cohort.d_text, tuple(cohort.numeric_names), dict(cohort.cardinality), **{**flags, **overrides}
    )


def labeled_set(Zmap: dict, records: Sequence[PatientRecord], task: str, window: int):
    """Stack embeddings and labels of every labelled time point."""
    rows, ys = [], []
    for r in records:
        for p in label_windows(r, task, window):
            rows.append(Zmap[r.id][p.time_index])
            ys.append(p.label)
    if not rows:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.array(rows), np.array(ys, dtype=int)


def calibration_split(train_ids: Sequence[str], frac: float, seed: int) -> tuple[list[str], list[str]]:
    """Patient-level split of the training ids into head-fitting and calibration parts."""
    ids = list(train_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_cal = max(1, int(round(frac * len(ids))))
    return [ids[i] for i in sorted(perm[n_cal:])], [ids[i] for i in sorted(perm[:n_cal])]


@dataclass
class CellResult:
    task: str
    window: int
    fold: int
    auc: float
    sensitivity: float
    specificity: float
    brier_raw: float
    brier_calibrated: float
    auc_calibrated: float
    n_test: int
    n_positive: int
    curve_raw: list = field(default_factory=list)
    curve_calibrated: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {
            "task": self.task,
            "window": self.window,
            "fold": self.fold,
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "brier_raw": self.brier_raw,
            "brier_calibrated": self.brier_calibrated,
            "n_test": self.n_test,
            "n_positive": self.n_positive,
        }


def evaluate_heads(
    Z_train: dict,
    train_records: Sequence[PatientRecord],
    Z_test: dict,
    test_records: Sequence[PatientRecord],
    cfg: EvalConfig,
    fold: int = 0,
) -> list[CellResult]:
    """Fit one head per task and window, Platt-scale it on a held-out part of
    the training patients and score the test patients.

    Cells where any of the three sets lacks a class are skipped.
    """
    fit_ids, cal_ids = calibration_split([r.id for r in train_records], cfg.calib_frac, cfg.seed + fold)
    fit_set, cal_set = set(fit_ids), set(cal_ids)
    fit_recs = [r for r in train_records if r.id in fit_set]
    cal_recs = [r for r in train_records if r.id in cal_set]
    out = []
    for task in cfg.tasks:
        for window in cfg.windows:
            Zf, yf = labeled_set(Z_train, fit_recs, task, window)
            Zc, yc = labeled_set(Z_train, cal_recs, task, window)
            Zt, yt = labeled_set(Z_test, test_records, task, window)
            if any(y.size == 0 or y.min() == y.max() for y in (yf, yc, yt)):
                log.warning("skipping %s/%d fold %d: a split has a single class", task, window, fold)
                continue
            head = train_head(Zf, yf, cfg.head, seed=cfg.seed)
            cal = platt_fit(head.logits(Zc), yc, l2=cfg.platt_l2)
            raw = head.predict(Zt)
            calibrated = platt_apply(cal, head.logits(Zt))
            sens, spec = sens_spec(raw, yt)
            out.append(
                CellResult(
                    task,
                    int(window),
                    fold,
                    roc_auc(raw, yt),
                    sens,
                    spec,
                    brier(raw, yt),
                    brier(calibrated, yt),
                    roc_auc(calibrated, yt),
                    int(yt.size),
                    int(yt.sum()),
                    calibration_curve(raw, yt, cfg.bins),
                    calibration_curve(calibrated, yt, cfg.bins),
                )
            )
    return out


@torch.no_grad()
def reconstruction_mse(model: TFNModel, records: Sequence[PatientRecord], batch_size: int = 64) -> float:
    """Masked MSE of the future decoder over every cutoff, pooled over entries."""
    cfg = model.train_cfg
    sq, n = 0.0, 0
    for i in range(0, len(records), batch_size):
        batch = model.batch(list(records[i : i + batch_size]))
        Z = model.encoder(batch).Z
        b, c, targets, tmask = cutoff_targets(batch, cfg.min_points, cfg.horizon)
        if b.numel() == 0:
            continue
        pred = model.future(Z[b, c])
        m = tmask > 0
        sq += float(((pred - targets)[m] ** 2).sum())
        n += int(m.sum())
    if n == 0:
        raise ValueError("no reconstruction targets in these records")
    return sq / n


# ------------------------------------------------------------ experiments


@dataclass
class FoldRun:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    model: TFNModel
    cells: list[CellResult]


def run_fold(cohort, train_ids, test_ids, fold, train_cfg, enc_cfg, eval_cfg) -> FoldRun:
    model = train_encoder(cohort, train_ids, train_cfg, enc_cfg)
    train_recs, test_recs = cohort.by_id(train_ids), cohort.by_id(test_ids)
    cells = evaluate_heads(model.embed(train_recs), train_recs, model.embed(test_recs), test_recs, eval_cfg, fold)
    return FoldRun(fold, list(train_ids), list(test_ids), model, cells)


def run_cv(
    cohort: Cohort,
    k: int = 5,
    train_cfg: TrainConfig | None = None,
    enc_cfg: EncoderConfig | None = None,
    eval_cfg: EvalConfig | None = None,
    folds: Sequence[int] | None = None,
) -> list[FoldRun]:
    train_cfg = train_cfg or TrainConfig()
    enc_cfg = enc_cfg or encoder_config_for(cohort)
    eval_cfg = eval_cfg or EvalConfig()
    splits = split_folds(cohort, k, train_cfg.seed)
    runs = []
    for f, (tr, te) in enumerate(splits):
        if folds is not None and f not in folds:
            continue
        log.info("fold %d/%d", f + 1, k)
        runs.append(run_fold(cohort, tr, te, f, train_cfg, enc_cfg, eval_cfg))
    return runs


def mean_auc(cells: Sequence[CellResult], tasks=None, windows=None) -> float:
    sel = [c.auc for c in cells if (tasks is None or c.task in tasks) and (windows is None or c.window in windows)]
    return float(np.mean(sel)) if sel else float("nan")


def shuffle_ablation(runs: Sequence[FoldRun], cohort: Cohort, eval_cfg: EvalConfig | None = None, seed: int = 0) -> list[dict]:
    """Re-evaluate each fold's encoder with the test patients' rows shuffled
    along the timeline. Heads see the same unshuffled training embeddings."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for run in runs:
        train_recs = cohort.by_id(run.train_ids)
        test_recs = cohort.by_id(run.test_ids)
        shuffled = [shuffle_timestamps(r, seed + i) for i, r in enumerate(test_recs)]
        Z_train = run.model.embed(train_recs)
        cells = evaluate_heads(Z_train, train_recs, run.model.embed(shuffled), shuffled, eval_cfg, run.fold)
        orig = {(c.task, c.window): c.auc for c in run.cells}
        shuf = {(c.task, c.window): c.auc for c in cells}
        row = {
            "fold": run.fold,
            "mse_original": reconstruction_mse(run.model, test_recs),
            "mse_shuffled": reconstruction_mse(run.model, shuffled),
            "auc": [
                {"task": t, "window": w, "original": orig[(t, w)], "shuffled": shuf[(t, w)]}
                for (t, w) in orig
                if (t, w) in shuf
            ],
        }
        rows.append(row)
    return rows


def modality_ablation(
    cohort: Cohort,
    k: int = 5,
    train_cfg: TrainConfig | None = None,
    eval_cfg: EvalConfig | None = None,
    modalities: Sequence[str] = tuple(MODALITIES),
    enc_overrides: dict | None = None,
) -> dict[str, list[FoldRun]]:
    return {
        m: run_cv(cohort, k, train_cfg, encoder_config_for(cohort, m, **(enc_overrides or {})), eval_cfg)
        for m in modalities
    }


def run_horizon_sweep(
    cohort: Cohort,
    horizons: list[int],
    config: TrainConfig,
    k: int = 5,
    folds: Sequence[int] | None = None,
    enc_cfg: EncoderConfig | None = None,
    eval_cfg: EvalConfig | None = None,
) -> list[dict]:
    """Rows (horizon, task, window, auc), AUC averaged over the evaluated folds."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for H in horizons:
        runs = run_cv(cohort, k, replace(config, horizon=int(H)), enc_cfg, eval_cfg, folds)
        cells = [c for r in runs for c in r.cells]
        for task in eval_cfg.tasks:
            for window in eval_cfg.windows:
                rows.append({"horizon": int(H), "task": task, "window": int(window),
                             "auc": mean_auc(cells, [task], [window])})
    return rows


def factor_rows(Zmap: dict, records: Sequence[PatientRecord]):
    Z, Y = [], []
    for r in records:
        if r.latents is None:
            raise ValueError(f"{r.id}: ground-truth factors are required for DCI")
        Z.append(Zmap[r.id])
        Y.append(r.latents)
    return np.concatenate(Z), np.concatenate(Y)


def disentanglement_report(model: TFNModel, cohort: Cohort, ids: Sequence[str], noise_sd: float = 1.0, seed: int = 0,
                           lasso_alpha: float = 0.02) -> dict:
    recs = cohort.by_id(ids)
    Z, Y = factor_rows(model.embed(recs), recs)
    res = dci(Z, Y, alpha=lasso_alpha, seed=seed, factor_names=list(cohort.factor_names) or None)
    normed = model.normalize(recs)

    def encode(rs):
        zm = model.embed(rs, normalized=True)
        return [zm[r.id] for r in rs]

    sens = perturbation_sensitivity(encode, normed, cohort.n_features, noise_sd, seed)
    return {
        **res.to_dict(),
        "mean_locality": sens.mean_locality,
        "locality": sens.locality.tolist(),
        "sensitivity": sens.matrix.tolist(),
    }


def dci_comparison(
    cohort: Cohort,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    config: TrainConfig | None = None,
    enc_cfg: EncoderConfig | None = None,
    noise_sd: float = 1.0,
) -> dict:
    """Reconstruction-only baseline against the full composite loss."""
    config = config or TrainConfig()
    out = {}
    for name, weights in (
        ("recon_only", LossWeights(decorr=0.0, disent=0.0, alpha=0.0)),
        ("full", config.weights),
    ):
        model = train_encoder(cohort, train_ids, replace(config, weights=weights), enc_cfg)
        out[name] = disentanglement_report(model, cohort, test_ids, noise_sd, config.seed)
    return out


# ------------------------------------------------------------ attribution


def attribution_feature_names(cohort: Cohort) -> list[str]:
    return list(cohort.feature_names) + list(cohort.numeric_names) + list(cohort.cardinality)


def instance_vector(record: PatientRecord, t: int, cohort: Cohort) -> np.ndarray:
    """Row ``t`` of the series (NaN where unobserved) followed by the static features."""
    row = np.where(record.mask[t] == 1, record.values[t], np.nan)
    num = [record.static.numeric[k] for k in cohort.numeric_names]
    cat = [record.static.categorical[k] for k in cohort.cardinality]
    return np.concatenate([row, num, cat]).astype(np.float64)


def _with_vector(record: PatientRecord, t: int, v: np.ndarray, cohort: Cohort) -> PatientRecord:
    from .cohort import StaticFeatures

    F, n_num = cohort.n_features, len(cohort.numeric_names)
    values = record.values[: t + 1].copy()
    mask = record.mask[: t + 1].copy()
    obs = ~np.isnan(v[:F])
    values[t] = np.where(obs, v[:F], 0.0)
    mask[t] = obs
    if not mask[t].any() and t == 0:
        # an empty first row would make the record invalid; keep one feature
        mask[t, 0], values[t, 0] = 1, record.values[0, 0] if record.mask[0, 0] else 0.0
    static = StaticFeatures(
        numeric=dict(zip(cohort.numeric_names, (float(x) for x in v[F : F + n_num]))),
        categorical=dict(zip(cohort.cardinality, (int(round(x)) for x in v[F + n_num :]))),
    )
    return replace(record, times=record.times[: t + 1], values=values, mask=mask.astype(np.int8), static=static,
                   latents=None)


def tfn_predictor(model: TFNModel, head, record: PatientRecord, t: int, cohort: Cohort):
    """predict_fn over instance vectors: substitute row ``t`` and the statics of
    ``record``, re-encode the history up to ``t`` and score Z_t with ``head``."""

    def predict(V: np.ndarray) -> np.ndarray:
        recs = [replace(_with_vector(record, t, v, cohort), id=f"{record.id}#{i}") for i, v in enumerate(V)]
        Zmap = model.embed(recs, batch_size=256)
        return head.predict(np.stack([Zmap[r.id][t] for r in recs]))

    return predict


def _labelled_points(records, task, window):
    return [(r, p.time_index, p.label) for r in records for p in label_windows(r, task, window)]


def explain_task(
    model: TFNModel,
    cohort: Cohort,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    task: str,
    window: int,
    n_instances: int = 20,
    n_background: int = 20,
    n_permutations: int = 64,
    seed: int = 0,
    head_cfg: HeadConfig | None = None,
):
    """Permutation-Shapley attribution of one task head over raw input features.

    The background is drawn from labelled training points, half from each class.
    Returns (feature names, AttributionVector pooled over the explained points).
    """
    from .interpret import AttributionVector, shap_attribution

    train_recs, test_recs = cohort.by_id(train_ids), cohort.by_id(test_ids)
    Zmap = model.embed(train_recs)
    Z, y = labeled_set(Zmap, train_recs, task, window)
    if y.size == 0 or y.min() == y.max():
        raise SingleClassError(f"{task}/{window}: training labels have a single class")
    head = train_head(Z, y, head_cfg or HeadConfig(), seed=seed)
    rng = np.random.default_rng(seed)
    bg_pts = _labelled_points(train_recs, task, window)
    by_class = [[p for p in bg_pts if p[2] == c] for c in (0, 1)]
    bg = []
    for i in range(n_background):
        pool = by_class[i % 2] or by_class[1 - i % 2]
        r, t, _ = pool[rng.integers(len(pool))]
        bg.append(instance_vector(r, t, cohort))
    pts = _labelled_points(test_recs, task, window)
    if not pts:
        raise ValueError(f"{task}/{window}: no labelled test points")
    chosen = [pts[i] for i in sorted(rng.choice(len(pts), min(n_instances, len(pts)), replace=False))]
    parts = []
    for j, (r, t, _) in enumerate(chosen):
        fn = tfn_predictor(model, head, r, t, cohort)
        parts.append(shap_attribution(fn, np.array(bg), instance_vector(r, t, cohort)[None], n_permutations, seed + j))
    phi = np.concatenate([p.phi for p in parts])
    phi_se = np.concatenate([p.phi_se for p in parts])
    n = phi.shape[0]
    pooled = AttributionVector(
        np.abs(phi).mean(axis=0),
        np.sqrt((phi_se**2).sum(axis=0)) / n,
        phi,
        phi_se,
        np.concatenate([p.fx for p in parts]),
        np.concatenate([p.base_value for p in parts]),
        np.concatenate([p.efficiency_se for p in parts]),
    )
    return attribution_feature_names(cohort), pooled
