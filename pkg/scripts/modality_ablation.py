"""Mean test AUC for ts, ts+static and ts+static+notes encoders."""
from common import encoder, parser, save, setup

from tfn.pipeline import MODALITIES, mean_auc, run_cv

args = parser(__doc__).parse_args()
cohort, train_cfg, eval_cfg, folds = setup(args)
res = {}
for m in MODALITIES:
    runs = run_cv(cohort, args.folds, train_cfg, encoder(cohort, m), eval_cfg, folds)
    cells = [c for r in runs for c in r.cells]
    res[m] = {"mean_auc": mean_auc(cells), "per_task": {t: mean_auc(cells, [t]) for t in eval_cfg.tasks},
              "cells": [c.metrics() for c in cells]}
    print(f"{m:18s} {res[m]['mean_auc']:.4f}  " + "  ".join(f"{t} {a:.3f}" for t, a in res[m]["per_task"].items()))
save(res, args, "modality.json")
