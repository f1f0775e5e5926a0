"""Test AUC as a function of the reconstruction horizon H."""
from common import encoder, parser, save, setup

from tfn.pipeline import run_horizon_sweep

p = parser(__doc__)
p.add_argument("--horizons", default="1,5,10,15")
args = p.parse_args()
cohort, train_cfg, eval_cfg, folds = setup(args)
hs = [int(h) for h in args.horizons.split(",")]
rows = run_horizon_sweep(cohort, hs, train_cfg, args.folds, folds, encoder(cohort), eval_cfg)
for H in hs:
    line = "  ".join(f"{w}d {sum(r['auc'] for r in rows if r['horizon'] == H and r['window'] == w) / len(eval_cfg.tasks):.3f}"
                     for w in eval_cfg.windows)
    print(f"H={H:<3d} {line}")
save(rows, args, "horizon.json")
