"""Patient data model, JSONL persistence, fold splitting, normalization and
the timestamp-shuffle transform."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA = "tfn-cohort-v1"
EVENT_KINDS = ("graft_loss", "graft_rejection", "death")
TERMINAL_KINDS = ("graft_loss", "death")


class CohortFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StaticFeatures:
    numeric: dict[str, float]
    categorical: dict[str, int]


@dataclass(frozen=True)
class NoteEvent:
    time: float
    emb: np.ndarray


@dataclass(frozen=True)
class OutcomeEvent:
    kind: str
    time: float


@dataclass(frozen=True, eq=False)
class PatientRecord:
    id: str
    static: StaticFeatures
    times: np.ndarray  # (T,) days since transplant, strictly increasing
    values: np.ndarray  # (T, F); entries with mask 0 are placeholders
    mask: np.ndarray  # (T, F) in {0, 1}
    notes: tuple[NoteEvent, ...] = ()
    events: tuple[OutcomeEvent, ...] = ()
    follow_up_end: float = 0.0
    latents: np.ndarray | None = None  # (T, G) ground-truth factors, synthetic cohorts only

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def note_times(self) -> np.ndarray:
        return np.array([n.time for n in self.notes], dtype=np.float64)

    def note_matrix(self, d_text: int) -> np.ndarray:
        if not self.notes:
            return np.zeros((0, d_text))
        return np.stack([n.emb for n in self.notes])

    def first_event(self, kind: str) -> float | None:
        ts = [e.time for e in self.events if e.kind == kind]
        return min(ts) if ts else None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "static": {"numeric": dict(self.static.numeric), "categorical": dict(self.static.categorical)},
            "times": [float(t) for t in self.times],
            "values": self.values.tolist(),
            "mask": self.mask.astype(int).tolist(),
            "notes": [{"time": float(n.time), "emb": n.emb.tolist()} for n in self.notes],
            "events": [{"kind": e.kind, "time": float(e.time)} for e in self.events],
            "follow_up_end": float(self.follow_up_end),
        }
        if self.latents is not None:
            d["latents"] = self.latents.tolist()
        return d

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def validate(self, n_features: int, d_text: int, cardinality: dict[str, int] | None = None) -> None:
        T = len(self.times)
        if self.values.shape != (T, n_features) or self.mask.shape != (T, n_features):
            raise CohortFormatError(
                f"{self.id}: values {self.values.shape} / mask {self.mask.shape} do not match ({T}, {n_features})"
            )
        if T and np.any(np.diff(self.times) <= 0):
            raise CohortFormatError(f"{self.id}: times not strictly increasing")
        if not np.isin(self.mask, (0, 1)).all():
            raise CohortFormatError(f"{self.id}: mask entries must be 0 or 1")
        if T and not self.mask.any():
            raise CohortFormatError(f"{self.id}: no observed entries")
        if not np.isfinite(self.values[self.mask == 1]).all():
            raise CohortFormatError(f"{self.id}: non-finite observed value")
        for name, v in self.static.numeric.items():
            if not np.isfinite(v):
                raise CohortFormatError(f"{self.id}: static {name} not finite")
        if cardinality:
            for name, idx in self.static.categorical.items():
                if not 0 <= idx < cardinality.get(name, idx + 1):
                    raise CohortFormatError(f"{self.id}: category {name}={idx} out of range")
        for n in self.notes:
            if n.emb.shape != (d_text,) or not np.isfinite(n.emb).all():
                raise CohortFormatError(f"{self.id}: note embedding must be finite with length {d_text}")
        kinds = [e.kind for e in self.events]
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise CohortFormatError(f"{self.id}: unknown event kind {e.kind!r}")
            if e.time < 0:
                raise CohortFormatError(f"{self.id}: negative event time")
        for k in TERMINAL_KINDS:
            if kinds.count(k) > 1:
                raise CohortFormatError(f"{self.id}: more than one {k} event")
        latest = max(
            [*(self.times[-1:] if T else []), *(n.time for n in self.notes), *(e.time for e in self.events)],
            default=0.0,
        )
        if latest > self.follow_up_end + 1e-9:
            raise CohortFormatError(f"{self.id}: data after follow_up_end")


@dataclass(frozen=True, eq=False)
class Cohort:
    records: tuple[PatientRecord, ...]
    n_features: int
    d_text: int
    feature_names: tuple[str, ...] = ()
    numeric_names: tuple[str, ...] = ()
    cardinality: dict[str, int] = field(default_factory=dict)
    factor_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(self.n_features)))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, ids: Iterable[str]) -> list[PatientRecord]:
        index = {r.id: r for r in self.records}
        return [index[i] for i in ids]

    def with_records(self, records: Sequence[PatientRecord]) -> "Cohort":
        return replace(self, records=tuple(records))

    def header(self) -> dict:
        return {
            "schema": SCHEMA,
            "F": self.n_features,
            "d_text": self.d_text,
            "feature_names": list(self.feature_names),
            "numeric": list(self.numeric_names),
            "categorical": dict(self.cardinality),
            "factor_names": list(self.factor_names),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.header() == other.header() and self.records == other.records


# --------------------------------------------------------------------- I/O


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_cohort(cohort: Cohort, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(_dumps(cohort.header()) + "\n")
        for rec in cohort.records:
            fh.write(_dumps(rec.to_dict()) + "\n")


def _parse_notes(raw: list, d_text: int) -> tuple[NoteEvent, ...]:
    return tuple(NoteEvent(float(n["time"]), np.asarray(n["emb"], dtype=np.float64)) for n in raw)


def _parse_record(obj: dict, F: int, d_text: int, include_notes: bool) -> PatientRecord:
    times = np.asarray(obj["times"], dtype=np.float64)
    values = np.asarray(obj["values"], dtype=np.float64).reshape(len(times), -1) if len(times) else np.zeros((0, F))
    mask = np.asarray(obj["mask"], dtype=np.int8).reshape(len(times), -1) if len(times) else np.zeros((0, F), np.int8)
    latents = obj.get("latents")
    return PatientRecord(
        id=str(obj["id"]),
        static=StaticFeatures(
            numeric={k: float(v) for k, v in obj["static"]["numeric"].items()},
            categorical={k: int(v) for k, v in obj["static"]["categorical"].items()},
        ),
        times=times,
        values=values,
        mask=mask,
        notes=_parse_notes(obj["notes"], d_text) if include_notes else (),
        events=tuple(OutcomeEvent(str(e["kind"]), float(e["time"])) for e in obj["events"]),
        follow_up_end=float(obj["follow_up_end"]),
        latents=None if latents is None else np.asarray(latents, dtype=np.float64),
    )


def load_cohort(path, include_notes: bool = True) -> Cohort:
    """Read a cohort JSONL file.

    With ``include_notes=False`` note embeddings are skipped without being
    materialized; records then carry no notes.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cohort file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CohortFormatError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if header.get("schema") != SCHEMA:
        raise CohortFormatError(f"{path}: line 1: unknown schema version {header.get('schema')!r}")
    F, d_text = int(header["F"]), int(header["d_text"])
    cardinality = {k: int(v) for k, v in header.get("categorical", {}).items()}
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            rec = _parse_record(obj, F, d_text, include_notes)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CohortFormatError(f"{path}: line {lineno}: malformed record ({exc})") from None
        try:
            rec.validate(F, d_text, cardinality)
        except CohortFormatError as exc:
            raise CohortFormatError(f"{path}: line {lineno}: {exc}") from None
        records.append(rec)
    return Cohort(
        records=tuple(records),
        n_features=F,
        d_text=d_text,
        feature_names=tuple(header.get("feature_names", ())),
        numeric_names=tuple(header.get("numeric", ())),
        cardinality=cardinality,
        factor_names=tuple(header.get("factor_names", ())),
    )


# ------------------------------------------------------------------ splits


def split_folds(cohort: Cohort | Sequence[str], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Patient-level k-fold partition; test folds differ in size by at most one."""
    ids = cohort.ids if isinstance(cohort, Cohort) else list(cohort)
    if k < 2:
        raise ValueError("fold count must be >= 2")
    if k > len(ids):
        raise ValueError(f"fold count {k} exceeds number of patients {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(order, k):
        test = {ids[i] for i in chunk}
        folds.append(([i for i in ids if i not in test], [ids[i] for i in sorted(chunk)]))
    return folds


# ----------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizerStats:
    mean: np.ndarray
    std: np.ndarray
    numeric_mean: dict[str, float]
    numeric_std: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "numeric_mean": self.numeric_mean,
            "numeric_std": self.numeric_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizerStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), dict(d["numeric_mean"]), dict(d["numeric_std"]))


STD_FLOOR = 1e-6


def fit_normalizer(cohort: Cohort, train_ids: Iterable[str]) -> NormalizerStats:
    recs = cohort.by_id(train_ids)
    F = cohort.n_features
    vals = np.concatenate([r.values for r in recs]) if recs else np.zeros((0, F))
    mask = np.concatenate([r.mask for r in recs]).astype(bool) if recs else np.zeros((0, F), bool)
    mean, std = np.zeros(F), np.ones(F)
    for j in range(F):
        obs = vals[mask[:, j], j]
        if obs.size < 2:
            raise ValueError(f"feature {cohort.feature_names[j]!r} has fewer than 2 observed training entries")
        mean[j] = obs.mean()
        std[j] = max(obs.std(), STD_FLOOR)
    names = sorted({k for r in recs for k in r.static.numeric})
    num_mean, num_std = {}, {}
    for name in names:
        xs = np.array([r.static.numeric[name] for r in recs])
        num_mean[name] = float(xs.mean())
        num_std[name] = float(max(xs.std(), STD_FLOOR))
    return NormalizerStats(mean, std, num_mean, num_std)


def apply_normalizer(cohort: Cohort, stats: NormalizerStats) -> Cohort:
    out = []
    for r in cohort.records:
        m = r.mask.astype(bool)
        z = np.where(m, (r.values - stats.mean) / stats.std, r.values)
        numeric = {
            k: (v - stats.numeric_mean[k]) / stats.numeric_std[k] if k in stats.numeric_mean else v
            for k, v in r.static.numeric.items()
        }
        out.append(replace(r, values=z, static=StaticFeatures(numeric, dict(r.static.categorical))))
    return cohort.with_records(out)


# ----------------------------------------------------------------- shuffle


def shuffle_timestamps(record: PatientRecord, seed: int) -> PatientRecord:
    """Permute (value-row, mask-row) pairs over the fixed, sorted time grid."""
    T = record.n_steps
    if T <= 1:
        return record
    perm = np.random.default_rng(seed).permutation(T)
    return replace(
        record,
        values=record.values[perm].copy(),
        mask=record.mask[perm].copy(),
        latents=None if record.latents is None else record.latents[perm].copy(),
    )
