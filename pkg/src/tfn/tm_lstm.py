"""Time-aware masked LSTM with static gating and causal temporal attention.

Shapes: ``B`` patients, ``T`` time steps, ``F`` features, ``d_h`` hidden units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as Fn

from .diffmath import softmax_stable


class CellState:
    __slots__ = ("h", "C", "last_time")

    def __init__(self, h: torch.Tensor, C: torch.Tensor, last_time: torch.Tensor):
        self.h, self.C, self.last_time = h, C, last_time


def decompose_memory(C_prev: torch.Tensor, W_decomp: torch.Tensor, b_decomp: torch.Tensor):
    """Split memory into a short-term part and the long-term remainder."""
    C_S = torch.tanh(C_prev @ W_decomp.T + b_decomp)
    C_T = C_prev - C_S
    return C_S, C_T


def decay_adjust(C_S, C_T, dt, w_decay: torch.Tensor, b_decay: torch.Tensor) -> torch.Tensor:
    """Discount the short-term memory by elapsed time; ``dt`` is (B,) or scalar."""
    dt = torch.as_tensor(dt, dtype=C_S.dtype)
    if bool((dt < 0).any()):
        raise ValueError("elapsed time must be non-negative (time must be non-decreasing)")
    if dt.dim() == 1:
        dt = dt[:, None]
    return C_T + C_S * torch.exp(-w_decay * dt + b_decay)


class TMLSTMCell(nn.Module):
    def __init__(self, n_features: int, d_h: int):
        super().__init__()
        self.n_features, self.d_h = n_features, d_h
        self.W_decomp = nn.Parameter(torch.empty(d_h, d_h))
        self.b_decomp = nn.Parameter(torch.zeros(d_h))
        self.w_decay = nn.Parameter(torch.empty(d_h))
        self.b_decay = nn.Parameter(torch.zeros(d_h))
        # rows: input, forget, output, candidate
        self.W_x = nn.Parameter(torch.empty(4 * d_h, 2 * n_features))
        self.W_h = nn.Parameter(torch.empty(4 * d_h, d_h))
        self.b = nn.Parameter(torch.zeros(4 * d_h))

    def reset_parameters(self, gen: torch.Generator) -> None:
        d_h = self.d_h
        fan = 2 * self.n_features + d_h
        with torch.no_grad():
            for p, f in ((self.W_decomp, d_h), (self.W_x, fan), (self.W_h, fan)):
                bound = 1.0 / math.sqrt(f)
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
            self.b_decomp.zero_()
            self.w_decay.copy_(torch.rand(d_h, generator=gen) * 0.9 + 0.1)
            self.b_decay.zero_()
            self.b.zero_()
            self.b[d_h : 2 * d_h] = 1.0

    def forward(self, x, m, dt, state: CellState, time: torch.Tensor | None = None) -> CellState:
        return cell_step(x, m, dt, state, self, time)


def cell_step(x, m, dt, state: CellState, cell: TMLSTMCell, time: torch.Tensor | None = None) -> CellState:
    """One masked step. Rows whose mask is all zero keep (h, C) untouched."""
    m_bool = m > 0
    if not bool(torch.isfinite(x[m_bool]).all()):
        raise ValueError("non-finite observed input")
    x_in = torch.where(m_bool, x, torch.zeros_like(x))
    C_S, C_T = decompose_memory(state.C, cell.W_decomp, cell.b_decomp)
    C_star = decay_adjust(C_S, C_T, dt, cell.w_decay, cell.b_decay)
    z = torch.cat([x_in, m], dim=-1) @ cell.W_x.T + state.h @ cell.W_h.T + cell.b
    i, f, o, g = z.chunk(4, dim=-1)
    C_new = torch.sigmoid(f) * C_star + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(C_new)
    seen = m_bool.any(dim=-1, keepdim=True)
    h = torch.where(seen, h_new, state.h)
    C = torch.where(seen, C_new, state.C)
    if time is None:
        time = state.last_time + torch.as_tensor(dt, dtype=state.last_time.dtype)
    return CellState(h, C, time)


class StaticEncoder(nn.Module):
    def __init__(self, n_numeric: int, cardinality: dict[str, int], d_num: int = 8, d_emb: int = 4):
        super().__init__()
        self.n_numeric = n_numeric
        self.cat_names = tuple(cardinality)
        self.numeric = nn.Linear(n_numeric, d_num) if n_numeric else None
        self.tables = nn.ParameterList([nn.Parameter(torch.empty(c, d_emb)) for c in cardinality.values()])
        self.cardinality = dict(cardinality)
        self.out_dim = (d_num if n_numeric else 0) + d_emb * len(cardinality)

    def reset_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            if self.numeric is not None:
                _init_linear(self.numeric, gen)
            for t in self.tables:
                t.copy_(torch.randn(t.shape, generator=gen) * 0.5)

    def forward(self, numeric: torch.Tensor, categorical: torch.Tensor) -> torch.Tensor:
        return encode_static(numeric, categorical, self)


def encode_static(numeric: torch.Tensor, categorical: torch.Tensor, enc: StaticEncoder) -> torch.Tensor:
    parts = []
    if enc.numeric is not None:
        parts.append(enc.numeric(numeric))
    for j, (name, table) in enumerate(zip(enc.cat_names, enc.tables)):
        idx = categorical[..., j]
        if bool((idx < 0).any()) or bool((idx >= table.shape[0]).any()):
            raise IndexError(f"category index out of range for {name!r}")
        parts.append(table[idx])
    return torch.cat(parts, dim=-1)


class StaticGate(nn.Module):
    def __init__(self, d_h: int, d_s: int):
        super().__init__()
        self.gate = nn.Linear(d_h + d_s, d_h)
        self.proj = nn.Linear(d_s, d_h)

    def reset_parameters(self, gen: torch.Generator) -> None:
        _init_linear(self.gate, gen)
        _init_linear(self.proj, gen)

    def forward(self, h: torch.Tensor, s_vec: torch.Tensor) -> torch.Tensor:
        return apply_static_gate(h, s_vec, self)


def apply_static_gate(h: torch.Tensor, s_vec: torch.Tensor, sg: StaticGate) -> torch.Tensor:
    """Residual variable-wise gate: h + sigmoid(W_g [h; s]) * proj(s)."""
    g = torch.sigmoid(sg.gate(torch.cat([h, s_vec], dim=-1)))
    return h + g * sg.proj(s_vec)


def causal_mask(T: int) -> torch.Tensor:
    return torch.ones(T, T, dtype=torch.bool).tril()


class TemporalAttention(nn.Module):
    """Causal multi-head self-attention block with post-norm residual sublayers."""

    def __init__(self, d_h: int, n_heads: int, d_ff: int | None = None):
        super().__init__()
        if d_h % n_heads:
            raise ValueError("d_h must be divisible by the head count")
        self.d_h, self.n_heads = d_h, n_heads
        self.W_Q = nn.Linear(d_h, d_h, bias=False)
        self.W_K = nn.Linear(d_h, d_h, bias=False)
        self.W_V = nn.Linear(d_h, d_h, bias=False)
        self.W_O = nn.Linear(d_h, d_h)
        self.norm1 = nn.LayerNorm(d_h)
        self.ff1 = nn.Linear(d_h, d_ff or 2 * d_h)
        self.ff2 = nn.Linear(d_ff or 2 * d_h, d_h)
        self.norm2 = nn.LayerNorm(d_h)

    def reset_parameters(self, gen: torch.Generator) -> None:
        for lin in (self.W_Q, self.W_K, self.W_V, self.W_O, self.ff1, self.ff2):
            _init_linear(lin, gen)
        for ln in (self.norm1, self.norm2):
            nn.init.ones_(ln.weight)
            nn.init.zeros_(ln.bias)

    def forward(self, H: torch.Tensor):
        return temporal_attention(H, self)


def _heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, T, D = x.shape
    return x.view(B, T, n_heads, D // n_heads).transpose(1, 2)


def temporal_attention(H: torch.Tensor, blk: TemporalAttention):
    """(B, T, d_h) -> (B, T, d_h) plus attention weights (B, heads, T, T)."""
    B, T, _ = H.shape
    nh = blk.n_heads
    d_k = blk.d_h // nh
    Q, K, V = (_heads(lin(H), nh) for lin in (blk.W_Q, blk.W_K, blk.W_V))
    logits = Q @ K.transpose(-1, -2) / math.sqrt(d_k)
    A = softmax_stable(logits, causal_mask(T).expand(B, nh, T, T))
    ctx = (A @ V).transpose(1, 2).reshape(B, T, blk.d_h)
    Y = blk.norm1(H + blk.W_O(ctx))
    out = blk.norm2(Y + blk.ff2(Fn.gelu(blk.ff1(Y))))
    return out, A


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen) * 2 - 1) * bound)
        if lin.bias is not None:
            lin.bias.copy_((torch.rand(lin.bias.shape, generator=gen) * 2 - 1) * bound)


@dataclass
class SequenceOutput:
    H: torch.Tensor  # (B, T, d_h) temporally attended states
    attention: list[torch.Tensor]  # per block (B, heads, T, T)
    raw_hidden: torch.Tensor  # (B, T, d_h) gated recurrent states before attention


class TMLSTMEncoder(nn.Module):
    """Cell + static gate + stacked temporal attention -> H_ts."""

    def __init__(
        self,
        n_features: int,
        d_h: int,
        n_heads: int,
        n_numeric: int,
        cardinality: dict[str, int],
        n_blocks: int = 1,
        use_static: bool = True,
        log_dt: bool = True,
    ):
        super().__init__()
        self.cell = TMLSTMCell(n_features, d_h)
        self.use_static = use_static
        self.log_dt = log_dt
        self.static = StaticEncoder(n_numeric, cardinality) if use_static else None
        self.gate = StaticGate(d_h, self.static.out_dim) if use_static else None
        self.blocks = nn.ModuleList([TemporalAttention(d_h, n_heads) for _ in range(n_blocks)])
        self.d_h = d_h

    def reset_parameters(self, gen: torch.Generator) -> None:
        self.cell.reset_parameters(gen)
        if self.use_static:
            self.static.reset_parameters(gen)
            self.gate.reset_parameters(gen)
        for blk in self.blocks:
            blk.reset_parameters(gen)

    def forward(self, times, values, mask, static_num=None, static_cat=None) -> SequenceOutput:
        return encode_sequence(self, times, values, mask, static_num, static_cat)


def encode_sequence(enc: TMLSTMEncoder, times, values, mask, static_num=None, static_cat=None) -> SequenceOutput:
    B, T, _ = values.shape
    if T == 0:
        raise ValueError("empty time series")
    d_h = enc.d_h
    state = CellState(torch.zeros(B, d_h), torch.zeros(B, d_h), times[:, 0].clone())
    s_vec = enc.static(static_num, static_cat) if enc.use_static else None
    rows = []
    for t in range(T):
        dt = times[:, t] - state.last_time
        if enc.log_dt:
            dt = torch.log1p(dt)
        state = cell_step(values[:, t], mask[:, t], dt, state, enc.cell, time=times[:, t])
        h = state.h
        if s_vec is not None:
            h = apply_static_gate(h, s_vec, enc.gate)
        rows.append(h)
    raw = torch.stack(rows, dim=1)
    H, weights = raw, []
    for blk in enc.blocks:
        H, A = temporal_attention(H, blk)
        weights.append(A)
    return SequenceOutput(H, weights, raw)
