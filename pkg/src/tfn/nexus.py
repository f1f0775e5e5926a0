"""Note-causal cross-attention fusion producing the Nexus embedding Z."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as Fn

from .batching import Batch
from .diffmath import softmax_stable
from .tm_lstm import TMLSTMEncoder, _heads, _init_linear


def build_note_mask(obs_times, note_times, note_valid=None) -> torch.Tensor:
    """Admissibility of each note (plus a trailing null column) for each query.

    Accepts 1-D sequences (one patient) or batched (B, T) / (B, M) tensors.
    """
    obs = torch.as_tensor(np.asarray(obs_times, dtype=np.float64) if not torch.is_tensor(obs_times) else obs_times)
    notes = torch.as_tensor(
        np.asarray(note_times, dtype=np.float64) if not torch.is_tensor(note_times) else note_times
    )
    single = obs.dim() == 1
    if single:
        obs, notes = obs[None], notes[None]
    if note_valid is None:
        note_valid = torch.ones(notes.shape, dtype=torch.bool)
    elif single and torch.as_tensor(note_valid).dim() == 1:
        note_valid = torch.as_tensor(note_valid)[None]
    if obs.shape[-1] > 1 and bool((obs[..., 1:] < obs[..., :-1]).any()):
        raise ValueError("observation times must be sorted ascending")
    nv = notes.masked_fill(~note_valid, math.inf)
    if notes.shape[-1] > 1 and bool((nv[..., 1:] < nv[..., :-1]).any()):
        raise ValueError("note times must be sorted ascending")
    adm = (notes[:, None, :] <= obs[:, :, None]) & note_valid[:, None, :]
    null = torch.ones(adm.shape[:-1] + (1,), dtype=torch.bool)
    out = torch.cat([adm, null], dim=-1)
    return out[0] if single else out


class CrossAttention(nn.Module):
    def __init__(self, d_h: int, d_text: int, n_heads: int, recency_bias: bool = False):
        super().__init__()
        if d_h % n_heads:
            raise ValueError("d_h must be divisible by the head count")
        self.d_h, self.n_heads = d_h, n_heads
        d_k = d_h // n_heads
        self.W_Q = nn.Linear(d_h, d_h, bias=False)
        self.W_K = nn.Linear(d_text, d_h, bias=False)
        self.W_V = nn.Linear(d_text, d_h, bias=False)
        self.null_k = nn.Parameter(torch.zeros(n_heads, d_k))
        self.null_v = nn.Parameter(torch.zeros(n_heads, d_k))
        self.W_O = nn.Linear(d_h, d_h)
        # per-head slope on log(1 + note age); off by default
        self.recency = nn.Parameter(torch.zeros(n_heads)) if recency_bias else None

    def reset_parameters(self, gen: torch.Generator) -> None:
        for lin in (self.W_Q, self.W_K, self.W_V, self.W_O):
            _init_linear(lin, gen)
        d_k = self.d_h // self.n_heads
        with torch.no_grad():
            self.null_k.copy_(torch.randn(self.null_k.shape, generator=gen) / math.sqrt(d_k))
            self.null_v.copy_(torch.randn(self.null_v.shape, generator=gen) / math.sqrt(d_k))
            if self.recency is not None:
                self.recency.fill_(1.0)


def cross_attend(H_ts, note_emb, mask, ca: CrossAttention, obs_times=None, note_times=None, null_logit=None):
    """Queries from H_ts (B, T, d_h); keys/values from notes (B, M, d_text) plus null.

    ``mask`` is (B, T, M + 1) from :func:`build_note_mask`. Returns X (B, T, d_h)
    and weights (B, heads, T, M + 1). ``null_logit`` overrides the null column's
    logit (e.g. ``-inf`` to switch it off).
    """
    B, T, _ = H_ts.shape
    M = note_emb.shape[1]
    nh = ca.n_heads
    d_k = ca.d_h // nh
    Q = _heads(ca.W_Q(H_ts), nh)  # (B, nh, T, d_k)
    K = _heads(ca.W_K(note_emb), nh) if M else H_ts.new_zeros(B, nh, 0, d_k)
    V = _heads(ca.W_V(note_emb), nh) if M else H_ts.new_zeros(B, nh, 0, d_k)
    K = torch.cat([K, ca.null_k[None, :, None, :].expand(B, nh, 1, d_k)], dim=2)
    V = torch.cat([V, ca.null_v[None, :, None, :].expand(B, nh, 1, d_k)], dim=2)
    logits = Q @ K.transpose(-1, -2) / math.sqrt(d_k)
    if ca.recency is not None and M and obs_times is not None:
        age = (obs_times[:, :, None] - note_times[:, None, :]).clamp(min=0.0)
        bias = -ca.recency[None, :, None, None] * torch.log1p(age)[:, None]
        logits = logits + Fn.pad(bias, (0, 1))
    adm = mask[:, None].expand(B, nh, T, M + 1)
    if null_logit is not None:
        if null_logit == -math.inf:
            adm = adm.clone()
            adm[..., -1] = False
        else:
            logits = logits.clone()
            logits[..., -1] = null_logit
    A = softmax_stable(logits, adm)
    X = (A @ V).transpose(1, 2).reshape(B, T, ca.d_h)
    return ca.W_O(X), A


class Fusion(nn.Module):
    def __init__(self, d_h: int, K: int, d_ff: int | None = None):
        super().__init__()
        self.proj = nn.Linear(d_h, d_h)
        self.norm = nn.LayerNorm(d_h)
        self.ff1 = nn.Linear(d_h, d_ff or 2 * d_h)
        self.ff2 = nn.Linear(d_ff or 2 * d_h, K)
        self.K = K

    def reset_parameters(self, gen: torch.Generator) -> None:
        for lin in (self.proj, self.ff1, self.ff2):
            _init_linear(lin, gen)
        nn.init.ones_(self.norm.weight)
        nn.init.zeros_(self.norm.bias)


def fuse(X, H_ts, fu: Fusion) -> torch.Tensor:
    """Z_t = FFN(LayerNorm(h_t + proj(X_t))) with a K-dimensional output layer."""
    return fu.ff2(Fn.gelu(fu.ff1(fu.norm(H_ts + fu.proj(X)))))


@dataclass
class EncoderConfig:
    n_features: int
    d_text: int
    numeric_names: tuple[str, ...] = ()
    cardinality: dict[str, int] = field(default_factory=dict)
    d_h: int = 64
    n_heads: int = 4
    n_blocks: int = 1
    latent_dim: int = 4
    cross_heads: int = 4
    use_static: bool = True
    use_notes: bool = True
    log_dt: bool = True
    note_recency: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["numeric_names"] = list(self.numeric_names)
        d["cardinality"] = dict(self.cardinality)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["numeric_names"] = tuple(d.get("numeric_names", ()))
        return cls(**d)


@dataclass
class NexusOutput:
    Z: torch.Tensor  # (B, T, K)
    H_ts: torch.Tensor
    X: torch.Tensor
    temporal_attention: list[torch.Tensor]
    cross_attention: torch.Tensor


class NexusEncoder(nn.Module):
    """Full multimodal encoder: TM-LSTM branch, cross-attention to notes, fusion."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.ts = TMLSTMEncoder(
            cfg.n_features,
            cfg.d_h,
            cfg.n_heads,
            len(cfg.numeric_names),
            cfg.cardinality,
            n_blocks=cfg.n_blocks,
            use_static=cfg.use_static,
            log_dt=cfg.log_dt,
        )
        self.cross = CrossAttention(cfg.d_h, cfg.d_text, cfg.cross_heads, recency_bias=cfg.note_recency)
        self.fusion = Fusion(cfg.d_h, cfg.latent_dim)
        self.reset_parameters(torch.Generator().manual_seed(cfg.seed))

    def reset_parameters(self, gen: torch.Generator) -> None:
        self.ts.reset_parameters(gen)
        self.cross.reset_parameters(gen)
        self.fusion.reset_parameters(gen)

    def forward(self, batch: Batch) -> NexusOutput:
        seq = self.ts(batch.times, batch.values, batch.mask, batch.static_num, batch.static_cat)
        if self.cfg.use_notes:
            note_times, note_emb, note_valid = batch.note_times, batch.note_emb, batch.note_valid
        else:
            B = batch.times.shape[0]
            note_times = batch.times.new_zeros(B, 0)
            note_emb = batch.times.new_zeros(B, 0, self.cfg.d_text)
            note_valid = torch.zeros(B, 0, dtype=torch.bool)
        mask = build_note_mask(batch.times, note_times, note_valid)
        X, A = cross_attend(seq.H, note_emb, mask, self.cross, batch.times, note_times)
        Z = fuse(X, seq.H, self.fusion)
        return NexusOutput(Z, seq.H, X, seq.attention, A)
