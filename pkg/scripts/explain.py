"""Shapley attribution of each task head over raw features, scored against
the generator's reference ratings."""
from common import encoder, parser, save, setup

from tfn.cohort import split_folds
from tfn.interpret import rating_agreement
from tfn.pipeline import explain_task
from tfn.synthetic import reference_ratings
from tfn.trainer import train_encoder

p = parser(__doc__)
p.add_argument("--fold", type=int, default=0)
p.add_argument("--window", type=int, default=360)
p.add_argument("--instances", type=int, default=20)
p.add_argument("--permutations", type=int, default=64)
args = p.parse_args()
cohort, train_cfg, eval_cfg, _ = setup(args)
tr, te = split_folds(cohort, args.folds, train_cfg.seed)[args.fold]
model = train_encoder(cohort, tr, train_cfg, encoder(cohort))
ratings = {}
for task, feat, score in reference_ratings(cohort):
    ratings.setdefault(task, {})[feat] = score
res = {}
for task in eval_cfg.tasks:
    names, att = explain_task(model, cohort, tr, te, task, args.window, args.instances, 20, args.permutations, args.seed)
    top = sorted(zip(names, att.mean_abs), key=lambda x: -x[1])[:5]
    rho = rating_agreement(dict(zip(names, att.mean_abs)), ratings.get(task, {}))
    res[task] = {"spearman": rho, "mean_abs_shap": dict(zip(names, map(float, att.mean_abs)))}
    print(f"{task:16s} rho {rho:+.3f}  top: " + ", ".join(f"{n} {v:.3f}" for n, v in top))
save(res, args, "explain.json")
