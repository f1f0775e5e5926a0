"""Command-line entry point. Every command writes CSV/JSON artifacts plus a
manifest.json that is enough to rerun it (``--config manifest.json``)."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .pipeline import PRESET_ENCODER, PRESET_TRAIN

log = logging.getLogger("tfn")

COMMANDS = (
    "gen-data",
    "train",
    "eval",
    "calibrate",
    "ablate-shuffle",
    "horizon-sweep",
    "dci",
    "explain",
    "export-embeddings",
    "export-attention",
    "gradcheck",
)


@dataclass
class RunConfig:
    cohort: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    generator: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: dict(PRESET_TRAIN))
    weights: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=lambda: dict(PRESET_ENCODER))
    tasks: list[str] | None = None
    windows: list[int] | None = None
    modalities: str = "ts,static,notes"
    folds: int = 5
    fold: int | None = None
    horizons: list[int] = field(default_factory=lambda: [1, 5, 10, 15, 20])
    ratings: str | None = None
    patient: str | None = None
    n_instances: int = 20
    n_background: int = 20
    n_permutations: int = 64
    noise_sd: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            # dict groups extend the preset rather than replacing it
            cur = getattr(cfg, k)
            setattr(cfg, k, {**cur, **v} if isinstance(cur, dict) and isinstance(v, dict) else v)
        return cfg


# ---------------------------------------------------------------- helpers


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _versions() -> dict:
    import scipy
    import sklearn
    import torch

    from . import __version__

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
        "tfn": __version__,
    }


def write_manifest(out_dir: Path, command: str, cfg: RunConfig) -> Path:
    config = asdict(cfg)
    canonical = json.dumps({"command": command, "config": config}, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": _versions(),
    }
    path = out_dir / "manifest.json"
    _dump(manifest, path)
    return path


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ValueError("--out is required")
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need(cfg: RunConfig, name: str) -> Path:
    value = getattr(cfg, name)
    if not value:
        raise ValueError(f"--{name} is required")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{name} not found: {path}")
    return path


def _load(cfg: RunConfig, include_notes: bool = True):
    from .cohort import load_cohort

    return load_cohort(_need(cfg, "cohort"), include_notes=include_notes)


def _uses_notes(cfg: RunConfig) -> bool:
    from .pipeline import parse_modalities

    return "notes" in parse_modalities(cfg.modalities)


def _train_config(cfg: RunConfig):
    from .objectives import LossWeights
    from .trainer import TrainConfig

    return TrainConfig(**{**cfg.train, "seed": cfg.seed, "weights": LossWeights(**cfg.weights)})


def _encoder_config(cfg: RunConfig, cohort):
    from .pipeline import encoder_config_for

    return encoder_config_for(cohort, cfg.modalities, **cfg.encoder)


def _eval_config(cfg: RunConfig):
    from .heads import TASKS, WINDOWS
    from .pipeline import EvalConfig

    tasks = tuple(cfg.tasks or TASKS)
    bad = set(tasks) - set(TASKS)
    if bad:
        raise ValueError(f"unknown tasks: {sorted(bad)}")
    return EvalConfig(tasks=tasks, windows=tuple(int(w) for w in (cfg.windows or WINDOWS)), seed=cfg.seed)


def _fold_ids(cfg: RunConfig, cohort):
    from .cohort import split_folds

    splits = split_folds(cohort, cfg.folds, cfg.seed)
    if cfg.fold is None:
        return cohort.ids, []
    if not 0 <= cfg.fold < cfg.folds:
        raise ValueError(f"--fold must lie in [0, {cfg.folds})")
    return splits[cfg.fold]


def _model_and_split(cfg: RunConfig, cohort):
    """Load the checkpoint and recover its held-out patients."""
    from .trainer import TFNModel

    model = TFNModel.load(_need(cfg, "checkpoint"))
    train_ids = model.meta.get("train_ids") or cohort.ids
    seen = set(train_ids)
    test_ids = [i for i in cohort.ids if i not in seen] or list(train_ids)
    return model, list(train_ids), test_ids


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    from .cohort import save_cohort
    from .synthetic import GeneratorConfig, event_prevalence, generate_cohort, reference_ratings
    from .interpret import write_ratings

    if not cfg.cohort:
        raise ValueError("--out (cohort path) is required")
    gen = GeneratorConfig(**{**cfg.generator, "seed": cfg.seed})
    cohort = generate_cohort(gen)
    path = Path(cfg.cohort)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, path)
    ratings = path.with_name(path.stem + "_ratings.csv")
    write_ratings(reference_ratings(cohort, gen.seed), ratings)
    log.info("wrote %d patients to %s; prevalence %s", len(cohort), path, event_prevalence(cohort))
    return [path.parent]


def cmd_train(cfg: RunConfig) -> list[Path]:
    from .trainer import train_encoder, write_history_csv

    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    out = _out_dir(cfg)
    train_ids, _ = _fold_ids(cfg, cohort)
    model = train_encoder(cohort, train_ids, _train_config(cfg), _encoder_config(cfg, cohort))
    model.meta.update({"fold": cfg.fold, "folds": cfg.folds, "modalities": cfg.modalities})
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    write_history_csv(model.history, out / "loss_history.csv")
    return [out]


def _cv_runs(cfg: RunConfig, cohort, eval_cfg):
    from .pipeline import run_cv

    folds = None if cfg.fold is None else [cfg.fold]
    return run_cv(cohort, cfg.folds, _train_config(cfg), _encoder_config(cfg, cohort), eval_cfg, folds)


def _write_cells(root: Path, runs, curves: bool) -> dict:
    summary: dict[str, list] = {}
    for run in runs:
        for c in run.cells:
            _dump(c.metrics(), root / f"{c.task}_{c.window}_fold{c.fold}.json")
            summary.setdefault(f"{c.task}_{c.window}", []).append(c.auc)
            if curves:
                header = ["bin_center", "mean_predicted", "observed_frequency", "count"]
                _write_csv(root / f"curve_raw_{c.task}_{c.window}_fold{c.fold}.csv", header, c.curve_raw)
                _write_csv(root / f"curve_calibrated_{c.task}_{c.window}_fold{c.fold}.csv", header,
                           c.curve_calibrated)
    return {k: float(np.mean(v)) for k, v in sorted(summary.items())}


def cmd_eval(cfg: RunConfig, experiment: str = "eval", curves: bool = False) -> list[Path]:
    from .pipeline import evaluate_heads

    eval_cfg = _eval_config(cfg)
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    out = _out_dir(cfg) / experiment
    if cfg.checkpoint:
        model, train_ids, test_ids = _model_and_split(cfg, cohort)
        train_recs, test_recs = cohort.by_id(train_ids), cohort.by_id(test_ids)
        from .pipeline import FoldRun

        fold = model.meta.get("fold") or 0
        cells = evaluate_heads(model.embed(train_recs), train_recs, model.embed(test_recs), test_recs, eval_cfg, fold)
        runs = [FoldRun(fold, train_ids, test_ids, model, cells)]
    else:
        runs = _cv_runs(cfg, cohort, eval_cfg)
    _dump({"mean_auc": _write_cells(out, runs, curves), "modalities": cfg.modalities}, out / "summary.json")
    return [out]


def cmd_calibrate(cfg: RunConfig) -> list[Path]:
    return cmd_eval(cfg, experiment="calibration", curves=True)


def cmd_ablate_shuffle(cfg: RunConfig) -> list[Path]:
    from .pipeline import shuffle_ablation

    eval_cfg = _eval_config(cfg)
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    out = _out_dir(cfg) / "shuffle"
    rows = shuffle_ablation(_cv_runs(cfg, cohort, eval_cfg), cohort, eval_cfg, cfg.seed)
    for row in rows:
        _dump(row, out / f"fold{row['fold']}.json")
    _dump(
        {
            "mse_original": float(np.mean([r["mse_original"] for r in rows])),
            "mse_shuffled": float(np.mean([r["mse_shuffled"] for r in rows])),
        },
        out / "summary.json",
    )
    return [out]


def cmd_horizon_sweep(cfg: RunConfig) -> list[Path]:
    from .trainer import horizon_sweep

    eval_cfg = _eval_config(cfg)
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    out = _out_dir(cfg) / "horizon"
    folds = None if cfg.fold is None else [cfg.fold]
    rows = horizon_sweep(cohort, cfg.horizons, _train_config(cfg), k=cfg.folds, folds=folds,
                         enc_cfg=_encoder_config(cfg, cohort), eval_cfg=eval_cfg)
    _write_csv(out / "horizon_sweep.csv", ["horizon", "task", "window", "auc"],
               [[r["horizon"], r["task"], r["window"], repr(r["auc"])] for r in rows])
    return [out]


def cmd_dci(cfg: RunConfig) -> list[Path]:
    from .pipeline import dci_comparison

    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    out = _out_dir(cfg) / "dci"
    train_ids, test_ids = _fold_ids(replace(cfg, fold=cfg.fold or 0), cohort)
    res = dci_comparison(cohort, train_ids, test_ids, _train_config(cfg), _encoder_config(cfg, cohort), cfg.noise_sd)
    for name, rep in res.items():
        sens = rep.pop("sensitivity")
        K = len(sens[0])
        _write_csv(out / f"sensitivity_{name}.csv", ["feature", *(f"z{k}" for k in range(K)), "locality"],
                   [[f, *(repr(v) for v in row), repr(loc)]
                    for f, row, loc in zip(cohort.feature_names, sens, rep["locality"])])
    _dump(res, out / "dci.json")
    return [out]


def cmd_explain(cfg: RunConfig) -> list[Path]:
    from .interpret import load_ratings, rating_agreement
    from .pipeline import explain_task

    eval_cfg = _eval_config(cfg)
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    model, train_ids, test_ids = _model_and_split(cfg, cohort)
    ratings = load_ratings(_need(cfg, "ratings")) if cfg.ratings else {}
    out = _out_dir(cfg) / "explain"
    agreement = {}
    for task in eval_cfg.tasks:
        for window in eval_cfg.windows:
            names, att = explain_task(model, cohort, train_ids, test_ids, task, window, cfg.n_instances,
                                      cfg.n_background, cfg.n_permutations, cfg.seed)
            _write_csv(out / f"{task}_{window}_attribution.csv", ["feature", "mean_abs_shap", "stderr"],
                       [[n, repr(float(m)), repr(float(s))] for n, m, s in zip(names, att.mean_abs, att.stderr)])
            if task in ratings:
                agreement[f"{task}_{window}"] = rating_agreement(dict(zip(names, att.mean_abs)), ratings[task])
    _dump({"spearman": agreement}, out / "agreement.json")
    return [out]


def cmd_export_embeddings(cfg: RunConfig) -> list[Path]:
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    model, _, _ = _model_and_split(cfg, cohort)
    out = _out_dir(cfg)
    Zmap = model.embed(cohort.records)
    K = model.enc_cfg.latent_dim
    # static labels for colouring projections
    cats = sorted({k for r in cohort.records for k in r.static.categorical})
    nums = sorted({k for r in cohort.records for k in r.static.numeric})
    rows = []
    for r in cohort.records:
        labels = [r.static.categorical.get(k, "") for k in cats]
        labels += [repr(float(r.static.numeric[k])) if k in r.static.numeric else "" for k in nums]
        for t in range(r.n_steps):
            rows.append([r.id, t, repr(float(r.times[t])), *(repr(float(v)) for v in Zmap[r.id][t]), *labels])
    header = ["patient_id", "time_index", "time", *(f"z{k}" for k in range(K)), *cats, *nums]
    _write_csv(out / "embeddings.csv", header, rows)
    return [out]


def cmd_export_attention(cfg: RunConfig) -> list[Path]:
    cohort = _load(cfg, include_notes=_uses_notes(cfg))
    model, _, test_ids = _model_and_split(cfg, cohort)
    out = _out_dir(cfg)
    pid = cfg.patient or test_ids[0]
    record = cohort.by_id([pid])[0]
    temporal, _ = model.attention(record)
    A = temporal[-1]  # last block, (heads, T, T)
    rows = [
        [pid, q, k, h, repr(float(A[h, q, k]))]
        for h in range(A.shape[0])
        for q in range(A.shape[1])
        for k in range(q + 1)
    ]
    _write_csv(out / "attention.csv", ["patient_id", "query_time_index", "key_time_index", "head", "weight"], rows)
    return [out]


def cmd_gradcheck(cfg: RunConfig) -> list[Path]:
    from .checks import end_to_end_gradcheck

    out = _out_dir(cfg)
    report = end_to_end_gradcheck(seed=cfg.seed)
    _dump({"max_error": report.max_error, "worst": report.worst, "tol": report.tol, "passed": report.passed},
          out / "gradcheck.json")
    if not report.passed:
        raise RuntimeError(f"gradient check failed: {report.worst} relative error {report.max_error:.3g}")
    return [out]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "calibrate": cmd_calibrate,
    "ablate-shuffle": cmd_ablate_shuffle,
    "horizon-sweep": cmd_horizon_sweep,
    "dci": cmd_dci,
    "explain": cmd_explain,
    "export-embeddings": cmd_export_embeddings,
    "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
}


# ----------------------------------------------------------------- parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _modalities(text: str) -> str:
    from .pipeline import parse_modalities

    try:
        return parse_modalities(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfn", description="Multimodal patient trajectory encoder experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config or a manifest.json from an earlier run")
        s.add_argument("--seed", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            s.add_argument("--out", dest="cohort", help="cohort JSONL path")
            s.add_argument("--n", type=int, dest="n_patients")
            s.add_argument("--features", type=int, dest="n_features")
            s.add_argument("--d-text", type=int, dest="d_text")
            continue
        s.add_argument("--out", help="output directory")
        if name == "gradcheck":
            continue
        s.add_argument("--cohort")
        s.add_argument("--checkpoint")
        s.add_argument("--modalities", type=_modalities)
        s.add_argument("--folds", type=int)
        s.add_argument("--fold", type=int)
        s.add_argument("--tasks", type=lambda t: [x for x in t.split(",") if x])
        s.add_argument("--windows", type=_int_list)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--horizon", type=int)
        s.add_argument("--min-points", type=int)
        s.add_argument("--decorr", type=float)
        s.add_argument("--disent", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--d-h", type=int)
        s.add_argument("--latent-dim", type=int)
        if name == "horizon-sweep":
            s.add_argument("--horizons", type=_int_list)
        if name == "dci":
            s.add_argument("--noise-sd", type=float)
        if name in ("explain",):
            s.add_argument("--ratings")
            s.add_argument("--n-instances", type=int)
            s.add_argument("--n-background", type=int)
            s.add_argument("--n-permutations", type=int)
        if name == "export-attention":
            s.add_argument("--patient")
    return p


_NESTED = {
    "n_patients": "generator",
    "n_features": "generator",
    "d_text": "generator",
    "epochs": "train",
    "lr": "train",
    "batch_size": "train",
    "horizon": "train",
    "min_points": "train",
    "decorr": "weights",
    "disent": "weights",
    "alpha": "weights",
    "d_h": "encoder",
    "latent_dim": "encoder",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then explicit flags on top."""
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        data = json.loads(path.read_text())
        base = data["config"] if "config_hash" in data else data
    cfg = RunConfig.from_dict(base)
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "verbose"):
            continue
        if key in _NESTED:
            group = _NESTED[key]
            setattr(cfg, group, {**getattr(cfg, group), key: value})
        else:
            setattr(cfg, key, value)
    return cfg


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    import torch

    torch.set_num_threads(max(1, int(os.environ.get("TFN_THREADS", "1"))))
    try:
        cfg = resolve_config(args)
        dirs = HANDLERS[args.command](cfg)
        for d in dirs:
            write_manifest(Path(d), args.command, cfg)
    except Exception as e:  # runtime failure, reported without a traceback
        if args.verbose:
            log.exception("command failed")
        print(f"tfn {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
