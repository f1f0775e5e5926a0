import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as Fn
from hypothesis import given
from hypothesis import strategies as st

from tfn.batching import make_batch
from tfn.cohort import NoteEvent
from tfn.nexus import CrossAttention, EncoderConfig, Fusion, NexusEncoder, build_note_mask, cross_attend, fuse

D = torch.float64


def test_note_mask_examples():
    m = build_note_mask([10.0], [5.0, 20.0])
    assert m.tolist() == [[True, False, True]]
    assert build_note_mask([25.0], [5.0, 20.0]).tolist() == [[True, True, True]]
    assert build_note_mask([1.0, 2.0], []).tolist() == [[True], [True]]
    # a note at exactly the query time is admissible
    assert build_note_mask([5.0], [5.0]).tolist() == [[True, True]]
    with pytest.raises(ValueError):
        build_note_mask([2.0, 1.0], [0.0])


def _ca(seed=0, d_h=4, d_text=3, heads=2):
    ca = CrossAttention(d_h, d_text, heads).double()
    ca.reset_parameters(torch.Generator().manual_seed(seed))
    return ca


def test_singleton_note_gives_its_value():
    ca = _ca()
    H = torch.randn(1, 2, 4, dtype=D)
    notes = torch.randn(1, 1, 3, dtype=D)
    mask = build_note_mask(torch.tensor([[1.0, 2.0]], dtype=D), torch.tensor([[0.5]], dtype=D))
    X, A = cross_attend(H, notes, mask, ca, null_logit=-math.inf)
    assert A[..., 0].eq(1.0).all() and A[..., 1].eq(0.0).all()
    expect = ca.W_O(ca.W_V(notes)).expand(1, 2, 4)
    assert float((X - expect).detach().abs().max()) < 1e-14


@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_cross_attention_rows_sum_to_one(seed, M):
    g = torch.Generator().manual_seed(seed)
    obs = torch.cumsum(torch.rand(2, 4, generator=g, dtype=D) * 10, 1)
    nt = torch.sort(torch.rand(2, M, generator=g, dtype=D) * 40, dim=1).values
    mask = build_note_mask(obs, nt)
    _, A = cross_attend(torch.randn(2, 4, 4, generator=g, dtype=D), torch.randn(2, M, 3, generator=g, dtype=D),
                        mask, _ca(seed % 101))
    assert float((A.sum(-1) - 1).abs().max()) < 1e-12
    assert float(A.masked_select(~mask[:, None].expand_as(A)).abs().sum()) == 0.0


def test_fuse_without_text():
    fu = Fusion(4, 3).double()
    fu.reset_parameters(torch.Generator().manual_seed(0))
    with torch.no_grad():
        fu.proj.bias.zero_()
    H = torch.randn(1, 5, 4, dtype=D)
    Z = fuse(torch.zeros_like(H), H, fu)
    assert Z.shape == (1, 5, 3)
    assert torch.equal(Z, fu.ff2(Fn.gelu(fu.ff1(fu.norm(H)))))


def _encoder(cohort, seed=0, **kw):
    cfg = EncoderConfig(cohort.n_features, cohort.d_text, tuple(cohort.numeric_names), dict(cohort.cardinality),
                        d_h=8, n_heads=2, latent_dim=3, cross_heads=2, seed=seed, **kw)
    return NexusEncoder(cfg), cfg


def _batch(records, cohort, cfg):
    return make_batch(list(records), cohort.n_features, cohort.d_text, cfg.numeric_names, tuple(cfg.cardinality))


@pytest.fixture(scope="module")
def noted(small_cohort):
    recs = [r for r in small_cohort.records if len(r.notes) >= 2 and r.n_steps >= 4]
    assert recs
    return recs[:3]


@given(st.integers(0, 2**31 - 1))
def test_note_causality(small_cohort, noted, seed):
    enc, cfg = _encoder(small_cohort, seed % 53)
    rng = np.random.default_rng(seed)
    rec = noted[seed % len(noted)]
    i = int(rng.integers(0, rec.n_steps))
    cutoff = rec.times[i]
    notes = tuple(
        NoteEvent(n.time, n.emb + 50 * rng.standard_normal(n.emb.shape)) if n.time > cutoff else n for n in rec.notes
    )
    a = enc(_batch([rec], small_cohort, cfg)).Z
    b = enc(_batch([replace(rec, notes=notes)], small_cohort, cfg)).Z
    assert float((a[0, : i + 1] - b[0, : i + 1]).detach().abs().max()) < 1e-12


def test_notes_off_equals_null_pathway(small_cohort, noted):
    enc_on, cfg = _encoder(small_cohort, 4)
    enc_off = NexusEncoder(replace(cfg, use_notes=False))
    enc_off.load_state_dict(enc_on.state_dict())
    stripped = [replace(r, notes=()) for r in noted]
    z_off = enc_off(_batch(noted, small_cohort, cfg)).Z
    z_null = enc_on(_batch(stripped, small_cohort, cfg)).Z
    assert torch.equal(z_off, z_null)
    z_on = enc_on(_batch(noted, small_cohort, cfg)).Z
    assert not torch.equal(z_on, z_null)


def test_encoder_config_round_trip(small_cohort):
    _, cfg = _encoder(small_cohort)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
