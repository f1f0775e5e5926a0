"""Padding of patient records into dense float64 tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cohort import PatientRecord


@dataclass
class Batch:
    ids: list[str]
    times: torch.Tensor  # (B, T)
    values: torch.Tensor  # (B, T, F), zeros where unobserved or padded
    mask: torch.Tensor  # (B, T, F) float {0, 1}
    valid: torch.Tensor  # (B, T) bool, False on padding rows
    static_num: torch.Tensor  # (B, Pn)
    static_cat: torch.Tensor  # (B, Pc) long
    note_times: torch.Tensor  # (B, M)
    note_emb: torch.Tensor  # (B, M, d_text)
    note_valid: torch.Tensor  # (B, M) bool

    @property
    def lengths(self) -> torch.Tensor:
        return self.valid.sum(dim=1)

    def __len__(self) -> int:
        return len(self.ids)

    def select(self, idx) -> "Batch":
        """Sub-batch of rows ``idx``, trimmed to its own longest sequence and note list."""
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        T = int(self.valid[idx].sum(dim=1).max())
        M = int(self.note_valid[idx].sum(dim=1).max()) if self.note_valid.shape[1] else 0
        return Batch(
            ids=[self.ids[i] for i in idx.tolist()],
            times=self.times[idx, :T],
            values=self.values[idx, :T],
            mask=self.mask[idx, :T],
            valid=self.valid[idx, :T],
            static_num=self.static_num[idx],
            static_cat=self.static_cat[idx],
            note_times=self.note_times[idx, :M],
            note_emb=self.note_emb[idx, :M],
            note_valid=self.note_valid[idx, :M],
        )


def make_batch(
    records: list[PatientRecord],
    n_features: int,
    d_text: int,
    numeric_names: tuple[str, ...],
    categorical_names: tuple[str, ...],
    include_notes: bool = True,
) -> Batch:
    B = len(records)
    if B == 0:
        raise ValueError("empty batch")
    T = max(r.n_steps for r in records)
    if T == 0:
        raise ValueError("empty time series")
    M = max((len(r.notes) for r in records), default=0) if include_notes else 0
    times = np.zeros((B, T))
    values = np.zeros((B, T, n_features))
    mask = np.zeros((B, T, n_features))
    valid = np.zeros((B, T), dtype=bool)
    note_times = np.zeros((B, M))
    note_emb = np.zeros((B, M, d_text))
    note_valid = np.zeros((B, M), dtype=bool)
    static_num = np.zeros((B, len(numeric_names)))
    static_cat = np.zeros((B, len(categorical_names)), dtype=np.int64)
    for b, r in enumerate(records):
        n = r.n_steps
        if n == 0:
            raise ValueError(f"{r.id}: empty time series")
        times[b, :n] = r.times
        # pad rows repeat the last time so elapsed time never goes negative
        times[b, n:] = r.times[-1]
        m = r.mask.astype(bool)
        values[b, :n] = np.where(m, r.values, 0.0)
        mask[b, :n] = m
        valid[b, :n] = True
        static_num[b] = [r.static.numeric[k] for k in numeric_names]
        static_cat[b] = [r.static.categorical[k] for k in categorical_names]
        if include_notes and r.notes:
            k = len(r.notes)
            note_times[b, :k] = r.note_times()
            note_emb[b, :k] = r.note_matrix(d_text)
            note_valid[b, :k] = True
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    return Batch(
        ids=[r.id for r in records],
        times=t(times),
        values=t(values),
        mask=t(mask),
        valid=torch.as_tensor(valid),
        static_num=t(static_num),
        static_cat=torch.as_tensor(static_cat),
        note_times=t(note_times),
        note_emb=t(note_emb),
        note_valid=torch.as_tensor(note_valid),
    )
