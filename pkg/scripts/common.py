"""Shared setup for the experiment scripts."""
import argparse
import json
import os
from pathlib import Path

import torch

from tfn.pipeline import PRESET_ENCODER, EvalConfig, encoder_config_for, preset_train_config
from tfn.synthetic import GeneratorConfig, generate_cohort


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--n", type=int, default=GeneratorConfig.n_patients, help="synthetic cohort size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--only-folds", default=None, help="comma list, e.g. 0,1")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default="results")
    return p


def setup(args):
    torch.set_num_threads(int(os.environ.get("TFN_THREADS", "1")))
    cohort = generate_cohort(GeneratorConfig(n_patients=args.n, seed=args.seed))
    over = {} if args.epochs is None else {"epochs": args.epochs}
    folds = None if args.only_folds is None else [int(f) for f in args.only_folds.split(",")]
    return cohort, preset_train_config(**over), EvalConfig(), folds


def encoder(cohort, modalities="ts,static,notes"):
    return encoder_config_for(cohort, modalities, **PRESET_ENCODER)


def save(obj, args, name):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(obj, indent=2))
    print(f"wrote {out / name}")
