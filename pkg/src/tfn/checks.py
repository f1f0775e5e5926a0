"""End-to-end gradient check of the training objective on a two-patient cohort."""
from __future__ import annotations

import numpy as np

from .cohort import Cohort, NoteEvent, OutcomeEvent, PatientRecord, StaticFeatures
from .diffmath import GradReport, grad_check
from .nexus import EncoderConfig
from .objectives import LossWeights
from .trainer import TFNModel, TrainConfig


def micro_cohort(seed: int = 0, n_features: int = 3, d_text: int = 4) -> Cohort:
    """Two short irregular patients with partial masks, statics and notes."""
    rng = np.random.default_rng(seed)
    records = []
    for i, T in enumerate((6, 5)):
        times = np.cumsum(rng.uniform(1.0, 20.0, T))
        mask = (rng.random((T, n_features)) < 0.7).astype(np.int8)
        mask[:, 0] = 1
        values = np.where(mask == 1, rng.standard_normal((T, n_features)), 0.0)
        notes = tuple(
            NoteEvent(float(t), rng.standard_normal(d_text)) for t in sorted(rng.uniform(0.0, times[-1], 3))
        )
        records.append(
            PatientRecord(
                id=f"m{i}",
                static=StaticFeatures({"age": float(rng.normal())}, {"sex": int(i % 2)}),
                times=times,
                values=values,
                mask=mask,
                notes=notes,
                events=(OutcomeEvent("graft_rejection", float(times[-1])),),
                follow_up_end=float(times[-1]),
            )
        )
    return Cohort(tuple(records), n_features, d_text, tuple(f"f{j}" for j in range(n_features)), ("age",),
                  {"sex": 2})


def end_to_end_gradcheck(seed: int = 0, eps: float = 1e-4, tol: float = 1e-4) -> GradReport:
    """Gradient of the full composite loss with respect to every parameter of
    the encoder, the future decoder and the feature decoders.

    Attention query/key gradients here are around 1e-7, so a step of 1e-6
    drowns them in round-off; 1e-4 keeps both error sources well below tol.
    """
    cohort = micro_cohort(seed)
    enc = EncoderConfig(cohort.n_features, cohort.d_text, ("age",), {"sex": 2}, d_h=4, n_heads=2, latent_dim=3,
                        cross_heads=2, seed=seed)
    cfg = TrainConfig(min_points=2, horizon=2, weights=LossWeights(decorr=1.0, disent=1.0, alpha=0.01), seed=seed)
    model = TFNModel(enc, cfg, cohort.feature_names)
    batch = model.batch(cohort.records)
    return grad_check(lambda: model.loss(batch).total, model.named_parameters(), eps=eps, tol=tol)
