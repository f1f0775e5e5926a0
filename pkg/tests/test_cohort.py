import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from tfn.batching import make_batch
from tfn.cohort import (
    Cohort,
    CohortFormatError,
    PatientRecord,
    StaticFeatures,
    apply_normalizer,
    fit_normalizer,
    load_cohort,
    save_cohort,
    shuffle_timestamps,
    split_folds,
)
from tfn.synthetic import GeneratorConfig, event_prevalence, generate_cohort, reference_ratings


@pytest.fixture(scope="module")
def default_cohort():
    return generate_cohort()


def _record(T=4, F=2, seed=0, pid="a"):
    rng = np.random.default_rng(seed)
    mask = (rng.random((T, F)) < 0.6).astype(np.int8)
    mask[:, 0] = 1
    return PatientRecord(
        id=pid,
        static=StaticFeatures({"age": 50.0}, {"sex": 1}),
        times=np.cumsum(rng.uniform(1, 10, T)),
        values=np.where(mask == 1, rng.standard_normal((T, F)), 0.0),
        mask=mask,
        follow_up_end=1000.0,
    )


# ------------------------------------------------------------ generator


def test_generator_deterministic(tmp_path):
    cfg = GeneratorConfig(n_patients=30, seed=5)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_cohort(generate_cohort(cfg), a)
    save_cohort(generate_cohort(cfg), b)
    assert a.read_bytes() == b.read_bytes()


def test_generator_size_and_prevalence(default_cohort):
    assert len(default_cohort) == 200
    cfg = GeneratorConfig()
    prev = event_prevalence(default_cohort)
    counted = {k: sum(any(e.kind == k for e in r.events) for r in default_cohort) / 200 for k in prev}
    assert prev == counted
    for kind, (lo, hi) in cfg.prevalence_bands.items():
        assert lo <= prev[kind] <= hi, (kind, prev[kind])


def test_generator_rejects_bad_config():
    with pytest.raises(ValueError):
        generate_cohort(GeneratorConfig(n_patients=0))
    with pytest.raises(ValueError):
        generate_cohort(GeneratorConfig(n_factors=3))


def test_missingness_is_informative(default_cohort):
    # patients whose inflammation departs further from baseline are sampled more densely
    inst = [r.latents[:, 1].max() - np.median(r.latents[:, 1]) for r in default_cohort]
    rate = [r.n_steps / max(r.follow_up_end, 1.0) for r in default_cohort]
    rho = spearmanr(inst, rate).statistic
    assert rho > 0


def test_reference_ratings_cover_features(default_cohort):
    rows = reference_ratings(default_cohort)
    tasks = Counter(t for t, _, _ in rows)
    assert set(tasks) == {"graft_loss", "graft_rejection", "death"}
    assert all(1 <= r <= 5 for _, _, r in rows)
    feats = {f for t, f, _ in rows if t == "death"}
    assert set(default_cohort.feature_names) <= feats


# ---------------------------------------------------------- persistence


def test_round_trip(tmp_path, small_cohort):
    p = tmp_path / "c.jsonl"
    save_cohort(small_cohort, p)
    assert load_cohort(p) == small_cohort


def test_round_trip_without_notes(tmp_path, small_cohort):
    p = tmp_path / "c.jsonl"
    save_cohort(small_cohort, p)
    c = load_cohort(p, include_notes=False)
    assert all(r.notes == () for r in c)
    assert [r.times.tolist() for r in c] == [r.times.tolist() for r in small_cohort]


def test_truncated_file_names_line(tmp_path, small_cohort):
    p = tmp_path / "c.jsonl"
    save_cohort(small_cohort, p)
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(CohortFormatError, match=r"line \d+"):
        load_cohort(p)


def test_shape_mismatch_rejected(tmp_path, small_cohort):
    p = tmp_path / "c.jsonl"
    save_cohort(small_cohort, p)
    lines = p.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["mask"] = rec["mask"][:-1]
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError, match="line 2"):
        load_cohort(p)


def test_missing_file_and_bad_schema(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cohort(tmp_path / "nope.jsonl")
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"schema": "other"}) + "\n")
    with pytest.raises(CohortFormatError, match="schema"):
        load_cohort(p)


def test_validate_guards():
    r = _record()
    with pytest.raises(CohortFormatError):
        replace(r, times=r.times[::-1].copy()).validate(2, 4)
    with pytest.raises(CohortFormatError):
        replace(r, follow_up_end=1.0).validate(2, 4)
    with pytest.raises(CohortFormatError):
        r.validate(2, 4, {"sex": 1})


# --------------------------------------------------------------- splits


def test_split_folds_examples():
    ids = [f"p{i}" for i in range(100)]
    folds = split_folds(ids, 5, 0)
    tests = [set(t) for _, t in folds]
    assert [len(t) for t in tests] == [20] * 5
    assert set().union(*tests) == set(ids)
    assert sum(len(t) for t in tests) == 100
    for tr, te in folds:
        assert set(tr) | set(te) == set(ids) and not set(tr) & set(te)
    assert sorted(len(t) for _, t in split_folds(["a", "b", "c"], 2, 1)) == [1, 2]
    assert split_folds(ids, 5, 9) == split_folds(ids, 5, 9)
    with pytest.raises(ValueError):
        split_folds(ids, 1, 0)
    with pytest.raises(ValueError):
        split_folds(["a"], 2, 0)


@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 1000))
def test_split_folds_partition(n, k, seed):
    if k > n:
        return
    ids = [str(i) for i in range(n)]
    folds = split_folds(ids, k, seed)
    sizes = [len(t) for _, t in folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(i for _, t in folds for i in t) == sorted(ids)


# -------------------------------------------------------- normalization


def test_normalizer_zscores_training_entries(small_cohort):
    train = small_cohort.ids[:16]
    stats = fit_normalizer(small_cohort, train)
    norm = apply_normalizer(small_cohort, stats)
    recs = norm.by_id(train)
    vals = np.concatenate([r.values for r in recs])
    mask = np.concatenate([r.mask for r in recs]).astype(bool)
    for j in range(small_cohort.n_features):
        obs = vals[mask[:, j], j]
        assert abs(obs.mean()) < 1e-9
        assert obs.std() == pytest.approx(1.0, abs=1e-9)
    for a, b in zip(small_cohort, norm):
        assert np.array_equal(a.values[a.mask == 0], b.values[b.mask == 0])


def test_normalizer_depends_on_fold(small_cohort):
    (tr1, _), (tr2, _) = split_folds(small_cohort, 4, 0)[:2]
    s1, s2 = fit_normalizer(small_cohort, tr1), fit_normalizer(small_cohort, tr2)
    assert not np.allclose(s1.mean, s2.mean)


def test_normalizer_needs_observations():
    r = _record(T=1)
    c = Cohort((r,), 2, 4)
    with pytest.raises(ValueError, match="fewer than 2"):
        fit_normalizer(c, ["a"])


# -------------------------------------------------------------- shuffle


def test_shuffle_single_step_unchanged():
    r = _record(T=1)
    assert shuffle_timestamps(r, 0) is r


@given(st.integers(1, 15), st.integers(0, 2**31 - 1))
def test_shuffle_is_row_permutation(T, seed):
    r = _record(T=T, seed=seed % 1000)
    s = shuffle_timestamps(r, seed)
    assert np.array_equal(s.times, r.times)
    before = Counter(map(tuple, np.hstack([r.values, r.mask]).tolist()))
    after = Counter(map(tuple, np.hstack([s.values, s.mask]).tolist()))
    assert before == after
    assert shuffle_timestamps(r, seed) == s


# -------------------------------------------------------------- batching


def test_make_batch_pads_and_masks(small_cohort):
    recs = small_cohort.records[:3]
    b = make_batch(list(recs), small_cohort.n_features, small_cohort.d_text, ("age", "cold_ischemia_h"),
                   tuple(small_cohort.cardinality))
    T = max(r.n_steps for r in recs)
    assert b.values.shape == (3, T, small_cohort.n_features)
    for i, r in enumerate(recs):
        assert int(b.valid[i].sum()) == r.n_steps
        assert float(b.mask[i, r.n_steps :].sum()) == 0.0
        # times never decrease across the padding
        assert bool((b.times[i, 1:] >= b.times[i, :-1]).all())
    sub = b.select([1])
    assert sub.values.shape[1] == recs[1].n_steps
    with pytest.raises(ValueError):
        make_batch([], 2, 4, (), ())
