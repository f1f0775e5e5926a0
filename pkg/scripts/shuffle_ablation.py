"""Shuffle each test patient's rows along the timeline and compare
reconstruction error and head AUC against the intact sequences."""
import numpy as np
from common import encoder, parser, save, setup

from tfn.pipeline import run_cv, shuffle_ablation

args = parser(__doc__).parse_args()
cohort, train_cfg, eval_cfg, folds = setup(args)
runs = run_cv(cohort, args.folds, train_cfg, encoder(cohort), eval_cfg, folds)
rows = shuffle_ablation(runs, cohort, eval_cfg, seed=args.seed)
mo, ms = np.mean([r["mse_original"] for r in rows]), np.mean([r["mse_shuffled"] for r in rows])
print(f"reconstruction MSE {mo:.4f} -> {ms:.4f} ({100 * (ms / mo - 1):+.0f}%)")
for task in eval_cfg.tasks:
    for w in eval_cfg.windows:
        sel = [a for r in rows for a in r["auc"] if a["task"] == task and a["window"] == w]
        if sel:
            o, s = np.mean([a["original"] for a in sel]), np.mean([a["shuffled"] for a in sel])
            print(f"{task:16s} {w:4d}  {o:.3f} -> {s:.3f}")
save(rows, args, "shuffle.json")
