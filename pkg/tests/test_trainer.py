import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tfn.checks import end_to_end_gradcheck, micro_cohort
from tfn.cohort import PatientRecord, StaticFeatures
from tfn.nexus import EncoderConfig
from tfn.objectives import LossWeights
from tfn.trainer import (
    FutureDecoder,
    TFNModel,
    TrainConfig,
    cutoff_targets,
    decode_future,
    horizon_sweep,
    make_samples,
    train_encoder,
    write_history_csv,
)


def _rec(T, F=2, seed=0, notes=()):
    rng = np.random.default_rng(seed)
    mask = (rng.random((T, F)) < 0.7).astype(np.int8)
    mask[:, 0] = 1
    return PatientRecord("r", StaticFeatures({}, {}), np.arange(T, dtype=float) * 3 + 1,
                         np.where(mask == 1, rng.standard_normal((T, F)), 0.0), mask, notes=notes,
                         follow_up_end=3.0 * T + 1)


def test_make_samples_examples():
    s = make_samples(_rec(12), 10, 2)
    assert [x.cutoff for x in s] == [10, 11]
    assert s[1].targets.shape == (1, 2)
    assert make_samples(_rec(9), 10, 2) == []
    assert make_samples(_rec(10), 10, 2) == []


@given(st.integers(2, 25), st.integers(1, 8), st.integers(1, 6), st.integers(0, 1000))
def test_samples_never_leak(T, min_points, H, seed):
    from tfn.cohort import NoteEvent

    rng = np.random.default_rng(seed)
    notes = tuple(NoteEvent(float(t), np.zeros(2)) for t in np.sort(rng.uniform(0, 3 * T, 4)))
    r = _rec(T, seed=seed, notes=notes)
    for s in make_samples(r, min_points, H):
        assert s.inputs.shape[0] == s.cutoff
        assert np.array_equal(s.inputs, r.values[: s.cutoff])
        assert np.array_equal(s.targets, r.values[s.cutoff : s.cutoff + len(s.targets)])
        assert np.all(s.note_times <= r.times[s.cutoff - 1])


@given(st.integers(0, 1000), st.integers(1, 6), st.integers(1, 4))
def test_cutoff_targets_match_samples(seed, min_points, H):
    cohort = micro_cohort(seed % 50)
    model = TFNModel(EncoderConfig(3, 4, ("age",), {"sex": 2}, d_h=4, n_heads=2, latent_dim=2, cross_heads=2),
                     TrainConfig(min_points=min_points, horizon=H), cohort.feature_names)
    batch = model.batch(cohort.records)
    b, c, targets, tmask = cutoff_targets(batch, min_points, H)
    expect = [(i, s.cutoff - 1, s.targets, s.target_mask)
              for i, r in enumerate(cohort.records) for s in make_samples(r, min_points, H)]
    assert len(expect) == len(b)
    for (i, cut, tg, tm), bi, ci, T_, M_ in zip(expect, b.tolist(), c.tolist(), targets, tmask):
        h = len(tg)
        assert (bi, ci) == (i, cut)
        assert np.array_equal(T_[:h].numpy()[tm == 1], tg[tm == 1])
        assert M_[h:].sum() == 0


def test_decode_future():
    dec = FutureDecoder(3, 4, 2).double()
    assert decode_future(torch.zeros(3, dtype=torch.float64), dec).shape == (4, 2)
    assert torch.equal(decode_future(torch.zeros(3, dtype=torch.float64), dec).reshape(-1), dec.linear.bias)
    a = decode_future(torch.ones(3, dtype=torch.float64), dec)
    b = decode_future(-torch.ones(3, dtype=torch.float64), dec)
    assert not torch.equal(a, b)


def test_end_to_end_gradient():
    import time

    t0 = time.perf_counter()
    rep = end_to_end_gradcheck()
    assert rep.passed, str(rep)
    assert time.perf_counter() - t0 < 60


def _quick(epochs=3, **kw):
    return TrainConfig(epochs=epochs, lr=1e-2, batch_size=8, min_points=3, horizon=3, **kw)


def _enc(cohort, **kw):
    return EncoderConfig(cohort.n_features, cohort.d_text, tuple(cohort.numeric_names), dict(cohort.cardinality),
                         d_h=8, n_heads=2, cross_heads=2, **kw)


def test_training_deterministic_and_finite(small_cohort):
    ids = small_cohort.ids[:16]
    a = train_encoder(small_cohort, ids, _quick(), _enc(small_cohort))
    b = train_encoder(small_cohort, ids, _quick(), _enc(small_cohort))
    assert a.state() == b.state()
    assert all(math.isfinite(v) for row in a.history for k, v in row.items())
    assert a.meta["train_ids"] == ids


def test_training_loss_decreases():
    from tfn.synthetic import generate_cohort

    c = generate_cohort()
    m = train_encoder(c, c.ids[:160], TrainConfig(epochs=4, lr=1e-2, batch_size=16), _enc(c))
    assert m.history[-1]["total"] < m.history[0]["total"]


def test_recon_only_baseline(small_cohort):
    cfg = _quick(epochs=1, weights=LossWeights(0.0, 0.0, 0.0))
    m = train_encoder(small_cohort, small_cohort.ids, cfg, _enc(small_cohort))
    batch = m.batch(small_cohort.records)
    parts = m.loss(batch)
    wd = cfg.decoder_weight_decay * float((m.feature_decoders.weight.detach()**2).sum())
    assert float(parts.total) == pytest.approx(float(parts.recon) + wd, rel=1e-12)


def test_training_guards(small_cohort):
    with pytest.raises(ValueError):
        TrainConfig(min_points=0)
    with pytest.raises(ValueError, match="no training samples"):
        train_encoder(small_cohort, small_cohort.ids[:2], TrainConfig(min_points=500, epochs=1), _enc(small_cohort))


def test_checkpoint_round_trip(tmp_path, small_cohort):
    m = train_encoder(small_cohort, small_cohort.ids[:12], _quick(epochs=1), _enc(small_cohort))
    m.meta["fold"] = 2
    p = tmp_path / "m.json"
    m.save(p)
    back = TFNModel.load(p)
    assert back.state() == m.state() and back.meta == m.meta and back.history == m.history
    za, zb = m.embed(small_cohort.records[:3]), back.embed(small_cohort.records[:3])
    assert all(np.array_equal(za[k], zb[k]) for k in za)
    write_history_csv(m.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("epoch,recon,decorr,disent,total\n")
    with pytest.raises(FileNotFoundError):
        TFNModel.load(tmp_path / "none.json")


def test_horizon_sweep_shape(small_cohort):
    from tfn.pipeline import EvalConfig

    with pytest.raises(ValueError):
        horizon_sweep(small_cohort, [])
    ev = EvalConfig(tasks=("graft_loss", "death"), windows=(360,))
    rows = horizon_sweep(small_cohort, [1], _quick(epochs=1), k=2, folds=[0], enc_cfg=_enc(small_cohort), eval_cfg=ev)
    assert len(rows) == 1 * 2 * 1
    assert {r["horizon"] for r in rows} == {1}
