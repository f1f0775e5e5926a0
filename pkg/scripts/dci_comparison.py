"""DCI scores and input locality: reconstruction-only loss against the full objective."""
from common import encoder, parser, save, setup

from tfn.cohort import split_folds
from tfn.pipeline import dci_comparison

p = parser(__doc__)
p.add_argument("--fold", type=int, default=0)
p.add_argument("--noise-sd", type=float, default=1.0)
args = p.parse_args()
cohort, train_cfg, _, _ = setup(args)
tr, te = split_folds(cohort, args.folds, train_cfg.seed)[args.fold]
res = dci_comparison(cohort, tr, te, train_cfg, encoder(cohort), args.noise_sd)
for name, r in res.items():
    print(f"{name:10s} D {r['disentanglement']:.3f}  C {r['completeness']:.3f}  "
          f"I {r['informativeness']:.3f}  locality {r['mean_locality']:.3f}")
save(res, args, "dci.json")
