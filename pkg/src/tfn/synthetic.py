"""Seeded synthetic transplant cohort with known latent factors.

Each patient is driven by four latent trajectories on a 5-day grid:

* ``organ_function`` - slow patient-specific drift (faster for deceased
  donors and long cold ischemia), eroded by inflammation; graft loss fires
  when it falls below ``graft_loss_threshold``.
* ``inflammation`` - quiet baseline plus rejection episodes that ramp up
  over weeks; a rejection event fires each time an episode crosses
  ``rejection_threshold``.
* ``treatment_level`` - immunosuppression: induction that decays, a
  maintenance level, and a step boost after every rejection. Low levels
  raise the episode hazard, as do a deceased donor, a young recipient and
  HLA mismatch.
* ``frailty`` - set mostly by age at transplant, rising slowly; death fires
  when it crosses ``death_threshold``.

Lab features are noisy readouts of these latents (some nonlinear). Sampling
intensity rises with latent instability, so missingness is informative.
Notes are noisy linear projections of the concurrent latent state, the
short-term inflammation trend and a symptom signal that starts up to two
months before an episode becomes visible in the labs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, NoteEvent, OutcomeEvent, PatientRecord, StaticFeatures

FACTOR_NAMES = ("organ_function", "inflammation", "treatment_level", "frailty")
ORGAN, INFLAM, TREAT, FRAIL = range(4)

FEATURE_NAMES_12 = (
    "creatinine",
    "egfr",
    "proteinuria",
    "urine_volume",
    "crp",
    "leukocytes",
    "temperature",
    "tacrolimus",
    "ciclosporin",
    "albumin",
    "hemoglobin",
    "heart_rate",
)
NUMERIC_NAMES = ("age", "cold_ischemia_h")
CARDINALITY = {"gender": 2, "blood_group": 4, "donor_type": 2, "hla_mismatch": 4}

GRID_DAYS = 5.0


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 200
    n_features: int = 12
    d_text: int = 32
    n_factors: int = 4
    obs_rate_range: tuple[float, float] = (0.35, 0.9)
    missingness_coupling: float = 2.0
    graft_loss_threshold: float = -1.8
    rejection_threshold: float = 1.4
    death_threshold: float = 2.1
    horizon_days: float = 1460.0
    max_steps: int = 60
    base_obs_per_day: float = 1.0 / 50.0
    notes_per_day: float = 1.0 / 90.0
    note_noise: float = 0.15
    seed: int = 0
    prevalence_bands: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "graft_loss": (0.10, 0.45),
            "graft_rejection": (0.20, 0.65),
            "death": (0.05, 0.35),
        }
    )

    def validate(self) -> None:
        for name in ("n_patients", "n_features", "d_text", "max_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_factors != len(FACTOR_NAMES):
            raise ValueError(f"the latent model has exactly {len(FACTOR_NAMES)} factors, got n_factors={self.n_factors}")
        lo, hi = self.obs_rate_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("obs_rate_range must lie in (0, 1]")
        if self.horizon_days <= 0 or self.base_obs_per_day <= 0 or self.notes_per_day < 0:
            raise ValueError("horizon and rates must be positive")
        if self.max_steps < 2:
            raise ValueError("max_steps must be at least 2")


def feature_names(n_features: int) -> tuple[str, ...]:
    if n_features == len(FEATURE_NAMES_12):
        return FEATURE_NAMES_12
    return tuple(f"x{j}" for j in range(n_features))


def readout_design(n_features: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(primary factor, loading matrix F x G, noise sd) for each feature."""
    if n_features == 12:
        primary = np.array([ORGAN] * 4 + [INFLAM] * 3 + [TREAT] * 2 + [FRAIL] * 3)
        load = np.zeros((12, 4))
        load[0, ORGAN] = -0.6  # creatinine, exponentiated below
        load[1, ORGAN] = 1.0
        load[2, [ORGAN, INFLAM]] = [-0.7, 0.3]
        load[3, ORGAN] = 0.8
        load[4, INFLAM] = 1.0
        load[5, [INFLAM, TREAT]] = [0.8, 0.25]
        load[6, INFLAM] = 0.5
        load[7, TREAT] = 1.0
        load[8, TREAT] = 0.8
        load[9, FRAIL] = -1.0
        load[10, [FRAIL, ORGAN]] = [-0.7, 0.25]
        load[11, [FRAIL, INFLAM]] = [0.6, 0.2]
        noise = np.array([0.05, 0.15, 0.18, 0.21, 0.21, 0.24, 0.21, 0.15, 0.18, 0.27, 0.27, 0.3])
        return primary, load, noise
    rng = np.random.default_rng(seed + 9173)
    primary = np.arange(n_features) % 4
    load = np.zeros((n_features, 4))
    load[np.arange(n_features), primary] = rng.choice([-1.0, 1.0], n_features) * rng.uniform(0.6, 1.0, n_features)
    secondary = (primary + 1) % 4
    load[np.arange(n_features), secondary] = rng.uniform(-0.25, 0.25, n_features)
    noise = rng.uniform(0.15, 0.27, n_features)
    return primary, load, noise


def _readout(lat: np.ndarray, load: np.ndarray, n_features: int) -> np.ndarray:
    x = lat @ load.T
    if n_features == 12:
        x[..., 0] = np.exp(x[..., 0])  # creatinine rises steeply as function falls
        x[..., 4] = x[..., 4] + 0.3 * np.maximum(lat[..., INFLAM], 0.0) ** 2
    return x


def _ou(rng, n: int, theta: float, sigma: float) -> np.ndarray:
    out = np.zeros(n)
    for k in range(1, n):
        out[k] = out[k - 1] * (1.0 - theta) + sigma * rng.standard_normal()
    return out


def _simulate_patient(cfg: GeneratorConfig, rng: np.random.Generator, pid: str, note_proj, obs_p, load, noise):
    n_grid = int(cfg.horizon_days // GRID_DAYS) + 1
    t = np.arange(n_grid) * GRID_DAYS
    yrs = t / 365.0

    age = float(np.clip(rng.normal(52.0, 13.0), 18.0, 80.0))
    gender = int(rng.random() < 0.62)
    blood = int(rng.choice(4, p=[0.4, 0.1, 0.05, 0.45]))
    hla = int(rng.choice(4, p=[0.15, 0.35, 0.35, 0.15]))  # grouped mismatch count
    donor = int(rng.random() < 0.65)  # 1 = deceased donor
    cold = float(np.clip(rng.normal(14.0, 5.0), 2.0, 36.0) if donor else np.clip(rng.normal(3.0, 1.0), 0.5, 8.0))
    age_z = (age - 52.0) / 13.0

    # frailty
    a0 = 0.9 * age_z + rng.normal(0.0, 0.35)
    rate_a = max(0.05, 0.25 + 0.2 * max(age_z, 0.0) + rng.normal(0.0, 0.1))
    frail = a0 + rate_a * yrs + _ou(rng, n_grid, 0.05, 0.03)

    # treatment, inflammation and organ function evolve jointly
    u_maint = rng.normal(0.0, 0.5)
    f0 = 0.6 - 0.3 * donor + rng.normal(0.0, 0.35)
    slope_f = min(0.1, -0.1 - 0.35 * donor - 0.025 * (cold - 8.0) + rng.normal(0.0, 0.2))
    inflam_base = _ou(rng, n_grid, 0.15, 0.06)
    treat_noise = _ou(rng, n_grid, 0.1, 0.05)
    organ_noise = _ou(rng, n_grid, 0.08, 0.03)

    treat = np.zeros(n_grid)
    inflam = np.zeros(n_grid)
    organ = np.zeros(n_grid)
    episodes: list[tuple[float, float, float]] = []  # onset day, severity, ramp days
    rejections: list[float] = []
    in_crossing = False
    f = f0
    for k in range(n_grid):
        boost = sum(1.2 * np.exp(-(t[k] - tr) / 120.0) for tr in rejections)
        treat[k] = u_maint + 1.5 * np.exp(-t[k] / 60.0) + boost + treat_noise[k]
        # low immunosuppression, deceased donors, young recipients and HLA mismatch raise the risk
        log_risk = -0.8 * (treat[k] - u_maint) - 0.5 * u_maint + 0.4 * donor - 0.3 * age_z + 1.1 * (hla - 1.5)
        hazard = 0.0006 * np.exp(log_risk)
        if k > 0 and rng.random() < hazard * GRID_DAYS:
            episodes.append((t[k], 0.7 + rng.exponential(0.9), rng.uniform(30.0, 80.0)))
        r = inflam_base[k]
        for onset, sev, ramp in episodes:
            d = t[k] - onset
            if d < 0:
                continue
            r += sev * d / ramp if d <= ramp else sev * np.exp(-(d - ramp) / 35.0)
        inflam[k] = r
        if r >= cfg.rejection_threshold and not in_crossing:
            rejections.append(t[k])
            in_crossing = True
        elif r < cfg.rejection_threshold:
            in_crossing = False
        if k > 0:
            f += slope_f * GRID_DAYS / 365.0 - 0.008 * max(r - 0.4, 0.0) * GRID_DAYS
        organ[k] = f + organ_noise[k]

    lat = np.stack([organ, inflam, treat, frail], axis=1)

    # terminal events and follow-up
    events: list[OutcomeEvent] = []
    loss_idx = np.flatnonzero(organ < cfg.graft_loss_threshold)
    death_idx = np.flatnonzero(frail > cfg.death_threshold)
    end = cfg.horizon_days if rng.random() < 0.7 else rng.uniform(365.0, cfg.horizon_days)
    t_loss = t[loss_idx[0]] if loss_idx.size else np.inf
    t_death = t[death_idx[0]] if death_idx.size else np.inf
    if t_loss <= end and t_loss <= t_death:
        events.append(OutcomeEvent("graft_loss", float(t_loss)))
        end = t_loss
    elif t_death <= end:
        events.append(OutcomeEvent("death", float(t_death)))
        end = t_death
    for tr in rejections:
        if tr <= end:
            events.append(OutcomeEvent("graft_rejection", float(tr)))
    events.sort(key=lambda e: (e.time, e.kind))
    end = float(end)

    # informative sampling: intensity tracks how fast the latents move
    half = 3  # 30-day centred difference
    padded = np.pad(lat, ((half, half), (0, 0)), mode="edge")
    change = np.abs(padded[2 * half :] - padded[: -2 * half])
    speed = change[:, INFLAM] + 0.5 * change[:, TREAT] + 2.0 * change[:, ORGAN]
    instability = np.minimum(speed / 0.6, 4.0)
    intensity = cfg.base_obs_per_day * (1.0 + cfg.missingness_coupling * instability)
    live = t < end
    obs_k = np.flatnonzero(live & (rng.random(n_grid) < np.minimum(intensity * GRID_DAYS, 1.0)))
    obs_k = np.union1d([0], obs_k)
    if obs_k.size > cfg.max_steps:
        keep = np.sort(rng.choice(obs_k.size - 1, cfg.max_steps - 1, replace=False) + 1)
        obs_k = np.concatenate([[0], obs_k[keep]])
    jitter = rng.uniform(0.0, GRID_DAYS * 0.9, obs_k.size)
    times = t[obs_k] + jitter
    times = np.where(times < end, times, 0.5 * (t[obs_k] + end))

    F = cfg.n_features
    row_lat = lat[obs_k]
    clean = _readout(row_lat, load, F)
    values = clean + noise * rng.standard_normal(clean.shape)
    p = np.broadcast_to(obs_p, (obs_k.size, F)).copy()
    p = np.minimum(1.0, p * (1.0 + 0.1 * cfg.missingness_coupling * instability[obs_k, None]))
    mask = (rng.random((obs_k.size, F)) < p).astype(np.int8)
    empty = ~mask.any(axis=1)
    mask[empty, int(np.argmax(obs_p))] = 1
    values = np.where(mask == 1, values, 0.0)

    # notes document the concurrent state plus symptoms that precede a
    # rejection episode by up to two months; symptomatic periods prompt visits
    prodrome = np.zeros(n_grid)
    for onset, _, _ in episodes:
        prodrome += ((t >= onset - 60.0) & (t < onset + 10.0)).astype(float)
    note_rate = cfg.notes_per_day * (
        1.0 + 0.5 * cfg.missingness_coupling * instability + 4.0 * np.minimum(prodrome, 1.0)
    )
    note_k = np.flatnonzero(live & (rng.random(n_grid) < np.minimum(note_rate * GRID_DAYS, 1.0)))
    trend = np.zeros(n_grid)
    trend[6:] = lat[6:, INFLAM] - lat[:-6, INFLAM]
    state = np.column_stack([0.25 * lat, 2.0 * trend, 3.0 * prodrome])
    notes = []
    for k in note_k:
        nt = float(min(t[k] + rng.uniform(0.0, GRID_DAYS * 0.9), end))
        emb = note_proj @ state[k] + cfg.note_noise * rng.standard_normal(cfg.d_text)
        notes.append(NoteEvent(nt, emb))

    static = StaticFeatures(
        numeric={"age": round(age, 1), "cold_ischemia_h": round(cold, 1)},
        categorical={"gender": gender, "blood_group": blood, "donor_type": donor, "hla_mismatch": hla},
    )
    return PatientRecord(
        id=pid,
        static=static,
        times=times,
        values=values,
        mask=mask,
        notes=tuple(notes),
        events=tuple(events),
        follow_up_end=end,
        latents=row_lat,
    )


def generate_cohort(config: GeneratorConfig | None = None) -> Cohort:
    cfg = config or GeneratorConfig()
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    design_rng = np.random.default_rng(root.integers(2**32))
    note_proj = design_rng.standard_normal((cfg.d_text, 6)) / np.sqrt(6.0)
    lo, hi = cfg.obs_rate_range
    obs_p = design_rng.uniform(lo, hi, cfg.n_features)
    _, load, noise = readout_design(cfg.n_features, cfg.seed)
    width = len(str(cfg.n_patients - 1))
    seeds = root.integers(2**32, size=cfg.n_patients)
    records = [
        _simulate_patient(cfg, np.random.default_rng(s), f"p{i:0{width}d}", note_proj, obs_p, load, noise)
        for i, s in enumerate(seeds)
    ]
    for r in records:
        r.validate(cfg.n_features, cfg.d_text, CARDINALITY)
    return Cohort(
        records=tuple(records),
        n_features=cfg.n_features,
        d_text=cfg.d_text,
        feature_names=feature_names(cfg.n_features),
        numeric_names=NUMERIC_NAMES,
        cardinality=dict(CARDINALITY),
        factor_names=FACTOR_NAMES,
    )


def event_prevalence(cohort: Cohort) -> dict[str, float]:
    n = max(len(cohort), 1)
    return {
        kind: sum(any(e.kind == kind for e in r.events) for r in cohort.records) / n
        for kind in ("graft_loss", "graft_rejection", "death")
    }


def reference_ratings(cohort: Cohort, seed: int = 0) -> list[tuple[str, str, int]]:
    """Expert-style 1-5 relevance ratings (1 = very relevant) derived from the
    generator's readout loadings on each task's driving factor."""
    _, load, _ = readout_design(cohort.n_features, seed)
    driver = {"graft_loss": ORGAN, "graft_rejection": INFLAM, "death": FRAIL}
    rows = []
    for task, g in driver.items():
        weight = np.abs(load[:, g]) / (np.abs(load).sum(axis=1) + 1e-12)
        for name, w in zip(cohort.feature_names, weight):
            rows.append((task, name, int(np.clip(5 - np.floor(w * 4.999), 1, 5))))
        static_rating = {
            "graft_loss": {"age": 4, "cold_ischemia_h": 2, "gender": 5, "blood_group": 5, "donor_type": 2, "hla_mismatch": 4},
            "graft_rejection": {"age": 4, "cold_ischemia_h": 4, "gender": 5, "blood_group": 4, "donor_type": 3, "hla_mismatch": 1},
            "death": {"age": 1, "cold_ischemia_h": 5, "gender": 4, "blood_group": 5, "donor_type": 5, "hla_mismatch": 5},
        }[task]
        rows.extend((task, k, v) for k, v in static_rating.items())
    return rows
