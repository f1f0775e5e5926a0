"""Self-supervised training: incremental-cutoff samples, a one-shot future
decoder, the composite loss and the optimisation loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .batching import Batch, make_batch
from .cohort import Cohort, NormalizerStats, PatientRecord, apply_normalizer, fit_normalizer
from .nexus import EncoderConfig, NexusEncoder
from .objectives import (
    FeatureDecoders,
    LossWeights,
    decorrelation_loss,
    disentanglement_loss,
    reconstruction_loss,
    total_loss,
)
from .tm_lstm import _init_linear

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tfn-checkpoint-v1"


@dataclass(frozen=True)
class TrainingSample:
    patient_id: str
    cutoff: int  # history length t; input rows are 0..t-1
    inputs: np.ndarray  # (t, F)
    input_mask: np.ndarray
    targets: np.ndarray  # (h, F), h = min(H, T - t)
    target_mask: np.ndarray
    note_times: np.ndarray  # admissible notes, all <= time of row t-1


def make_samples(record: PatientRecord, min_points: int, H: int) -> list[TrainingSample]:
    T = record.n_steps
    out = []
    nt = record.note_times()
    for t in range(min_points, T):
        h = min(H, T - t)
        tm = record.mask[t : t + h]
        if not tm.any():
            continue
        out.append(
            TrainingSample(
                record.id,
                t,
                record.values[:t],
                record.mask[:t],
                record.values[t : t + h],
                tm,
                nt[nt <= record.times[t - 1]],
            )
        )
    return out


@dataclass
class TrainConfig:
    min_points: int = 10
    horizon: int = 10
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 1.0
    # the two regularisers see batch-standardised Z, so shrinking Z cannot satisfy them
    standardize_latents: bool = True
    # L2 on the feature-decoder weights, so mask sparsity cannot be bought back by weight growth
    decoder_weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.min_points < 1 or self.horizon < 1:
            raise ValueError("min_points and horizon must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


class FutureDecoder(nn.Module):
    """Linear map z_t -> (H, F) block predicting the rows after the cutoff."""

    def __init__(self, latent_dim: int, horizon: int, n_features: int):
        super().__init__()
        self.horizon, self.n_features = horizon, n_features
        self.linear = nn.Linear(latent_dim, horizon * n_features)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z).view(*z.shape[:-1], self.horizon, self.n_features)


def decode_future(z: torch.Tensor, decoder: FutureDecoder) -> torch.Tensor:
    return decoder(z)


def disent_feature_names(enc_cfg: EncoderConfig, feature_names: Sequence[str]) -> list[str]:
    names = list(feature_names)
    if enc_cfg.use_static:
        names += list(enc_cfg.numeric_names)
        for cat, card in enc_cfg.cardinality.items():
            names += [f"{cat}={v}" for v in range(card)]
    return names


def cutoff_targets(batch: Batch, min_points: int, H: int):
    """Indices of every admissible cutoff in the batch with its future block.

    Returns (b, c, targets, target_mask) where ``c`` is the last history row.
    """
    B, T, F = batch.values.shape
    lengths = batch.lengths
    c = torch.arange(T)
    ok = (c[None, :] >= min_points - 1) & (c[None, :] <= lengths[:, None] - 2)
    b_idx, c_idx = ok.nonzero(as_tuple=True)
    rows = c_idx[:, None] + 1 + torch.arange(H)[None, :]
    in_range = rows < lengths[b_idx][:, None]
    rows = rows.clamp(max=T - 1)
    targets = batch.values[b_idx[:, None], rows]
    tmask = batch.mask[b_idx[:, None], rows] * in_range[..., None]
    has = tmask.flatten(1).sum(dim=1) > 0
    return b_idx[has], c_idx[has], targets[has], tmask[has]


def disent_targets(batch: Batch, b_idx, c_idx, enc_cfg: EncoderConfig):
    feats = [batch.values[b_idx, c_idx]]
    masks = [batch.mask[b_idx, c_idx]]
    if enc_cfg.use_static:
        n = b_idx.shape[0]
        if enc_cfg.numeric_names:
            feats.append(batch.static_num[b_idx])
            masks.append(torch.ones(n, len(enc_cfg.numeric_names)))
        for j, card in enumerate(enc_cfg.cardinality.values()):
            feats.append(torch.nn.functional.one_hot(batch.static_cat[b_idx, j], card).to(torch.float64))
            masks.append(torch.ones(n, card))
    return torch.cat(feats, dim=1), torch.cat(masks, dim=1)


def standardize_batch(z: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Column-wise z-score over the rows of a batch (population variance)."""
    if z.shape[0] < 2:
        return z - z.mean(dim=0, keepdim=True)
    return (z - z.mean(dim=0, keepdim=True)) / torch.sqrt(z.var(dim=0, unbiased=False, keepdim=True) + eps)


@dataclass
class LossParts:
    recon: torch.Tensor
    decorr: torch.Tensor
    disent: torch.Tensor
    total: torch.Tensor
    n_samples: int


class TFNModel:
    """Encoder + training-only decoders + the normalizer fitted on training patients."""

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        train_cfg: TrainConfig,
        feature_names: Sequence[str],
        normalizer: NormalizerStats | None = None,
    ):
        self.enc_cfg = enc_cfg
        self.train_cfg = train_cfg
        self.feature_names = tuple(feature_names)
        self.normalizer = normalizer
        self.encoder = NexusEncoder(enc_cfg)
        gen = torch.Generator().manual_seed(enc_cfg.seed + 1)
        self.future = FutureDecoder(enc_cfg.latent_dim, train_cfg.horizon, enc_cfg.n_features)
        _init_linear(self.future.linear, gen)
        self.disent_names = disent_feature_names(enc_cfg, self.feature_names)
        self.feature_decoders = FeatureDecoders(len(self.disent_names), enc_cfg.latent_dim, gen)
        self.history: list[dict] = []
        self.meta: dict = {}  # e.g. the patient split the model was trained on

    def modules(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "future": self.future, "feature_decoders": self.feature_decoders}

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {f"{k}.{n}": p for k, m in self.modules().items() for n, p in m.named_parameters()}

    def parameters(self) -> list[torch.Tensor]:
        return list(self.named_parameters().values())

    # -------------------------------------------------------------- data

    def normalize(self, records: Sequence[PatientRecord]) -> list[PatientRecord]:
        if self.normalizer is None:
            return list(records)
        tmp = Cohort(tuple(records), self.enc_cfg.n_features, self.enc_cfg.d_text, self.feature_names)
        return list(apply_normalizer(tmp, self.normalizer).records)

    def batch(self, records: Sequence[PatientRecord], normalized: bool = False) -> Batch:
        recs = list(records) if normalized else self.normalize(records)
        return make_batch(
            recs,
            self.enc_cfg.n_features,
            self.enc_cfg.d_text,
            tuple(self.enc_cfg.numeric_names),
            tuple(self.enc_cfg.cardinality),
            include_notes=self.enc_cfg.use_notes,
        )

    # -------------------------------------------------------------- loss

    def loss(self, batch: Batch, weights: LossWeights | None = None) -> LossParts:
        cfg = self.train_cfg
        weights = weights or cfg.weights
        out = self.encoder(batch)
        b, c, targets, tmask = cutoff_targets(batch, cfg.min_points, cfg.horizon)
        if b.numel() == 0:
            raise ValueError("batch has no training samples")
        z = out.Z[b, c]
        recon = reconstruction_loss(targets, self.future(z), tmask)
        zr = standardize_batch(z) if cfg.standardize_latents else z
        decorr = decorrelation_loss(zr) if z.shape[0] >= 2 else z.new_zeros(())
        feats, fmask = disent_targets(batch, b, c, self.enc_cfg)
        disent = disentanglement_loss(zr, feats, fmask, self.feature_decoders, weights.alpha)
        total = total_loss(recon, decorr, disent, weights)
        if cfg.decoder_weight_decay:
            total = total + cfg.decoder_weight_decay * (self.feature_decoders.weight**2).sum()
        return LossParts(recon, decorr, disent, total, int(b.numel()))

    # ----------------------------------------------------------- inference

    @torch.no_grad()
    def embed(self, records: Sequence[PatientRecord], batch_size: int = 64, normalized: bool = False):
        """Per-patient Z arrays (T, K), keyed by patient id."""
        out = {}
        for i in range(0, len(records), batch_size):
            chunk = list(records[i : i + batch_size])
            batch = self.batch(chunk, normalized=normalized)
            Z = self.encoder(batch).Z
            for j, r in enumerate(chunk):
                out[r.id] = Z[j, : r.n_steps].numpy().copy()
        return out

    @torch.no_grad()
    def attention(self, record: PatientRecord):
        out = self.encoder(self.batch([record]))
        T = record.n_steps
        return [A[0, :, :T, :T].numpy() for A in out.temporal_attention], out.cross_attention[0, :, :T].numpy()

    # ---------------------------------------------------------- persistence

    def state(self) -> dict:
        return {k: v.detach().tolist() for k, v in self.named_parameters().items()}

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "encoder_config": self.enc_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "feature_names": list(self.feature_names),
            "normalizer": None if self.normalizer is None else self.normalizer.to_dict(),
            "history": self.history,
            "meta": self.meta,
            "state": self.state(),
        }
        Path(path).write_text(json.dumps(payload, separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "TFNModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        payload = json.loads(path.read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {payload.get('format')!r}")
        model = cls(
            EncoderConfig.from_dict(payload["encoder_config"]),
            TrainConfig(**payload["train_config"]),
            payload["feature_names"],
            None if payload["normalizer"] is None else NormalizerStats.from_dict(payload["normalizer"]),
        )
        params = model.named_parameters()
        with torch.no_grad():
            for k, v in payload["state"].items():
                params[k].copy_(torch.as_tensor(v, dtype=torch.float64).reshape(params[k].shape))
        model.history = payload["history"]
        model.meta = payload.get("meta", {})
        return model


def train_encoder(
    cohort: Cohort,
    train_ids: Sequence[str],
    config: TrainConfig | None = None,
    enc_cfg: EncoderConfig | None = None,
) -> TFNModel:
    """Fit the encoder on ``train_ids`` by Adam on the composite loss."""
    config = config or TrainConfig()
    enc_cfg = enc_cfg or EncoderConfig(
        cohort.n_features, cohort.d_text, tuple(cohort.numeric_names), dict(cohort.cardinality)
    )
    enc_cfg = replace(enc_cfg, seed=config.seed)
    torch.manual_seed(config.seed)
    normalizer = fit_normalizer(cohort, train_ids)
    model = TFNModel(enc_cfg, config, cohort.feature_names, normalizer)
    records = model.normalize(cohort.by_id(train_ids))
    usable = [r for r in records if make_samples(r, config.min_points, config.horizon)]
    if not usable:
        raise ValueError("no training samples: every patient is shorter than min_points + 1")
    full = model.batch(usable, normalized=True)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        sums = dict(recon=0.0, decorr=0.0, disent=0.0, total=0.0)
        n_batches = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = full.select(order[start : start + config.batch_size])
            parts = model.loss(batch)
            if not torch.isfinite(parts.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            opt.zero_grad()
            parts.total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            for k in sums:
                sums[k] += float(getattr(parts, k).detach())
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        log.info("epoch %d recon %.4f decorr %.4f disent %.4f total %.4f", row["epoch"], row["recon"],
                 row["decorr"], row["disent"], row["total"])
    model.history = history
    model.meta = {"train_ids": list(train_ids)}
    return model


def write_history_csv(history: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "recon", "decorr", "disent", "total"])
        for row in history:
            w.writerow([row["epoch"], *(repr(float(row[k])) for k in ("recon", "decorr", "disent", "total"))])


def horizon_sweep(cohort: Cohort, horizons: Sequence[int], config: TrainConfig | None = None, **kwargs):
    """Train one encoder per horizon and evaluate downstream AUC for every
    task and window; rows are (horizon, task, window, auc)."""
    from .pipeline import run_horizon_sweep

    if not horizons:
        raise ValueError("horizons must be non-empty")
    return run_horizon_sweep(cohort, list(horizons), config or TrainConfig(), **kwargs)
