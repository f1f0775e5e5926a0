import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tfn.diffmath import grad_check
from tfn.objectives import (
    FeatureDecoders,
    LossWeights,
    decorrelation_loss,
    disentanglement_loss,
    reconstruction_loss,
    total_loss,
)

T = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_reconstruction_examples():
    t = T([[1.0], [2.0]])
    assert reconstruction_loss(t, t, torch.ones(2, 1)).item() == 0.0
    assert reconstruction_loss(t, T([[1.0], [3.0]]), torch.ones(2, 1)).item() == 0.5
    assert reconstruction_loss(t, T([[1.0], [3.0]]), T([[1.0], [0.0]])).item() == 0.0
    with pytest.raises(ValueError):
        reconstruction_loss(t, t, torch.zeros(2, 1))


def test_decorrelation_examples():
    assert decorrelation_loss(T([[1, 1], [-1, -1]])).item() == 2.0
    assert decorrelation_loss(T([[1, 1], [1, -1], [-1, 1], [-1, -1]])).item() == 0.0
    assert decorrelation_loss(T([[1.0], [2.0], [5.0]])).item() == 0.0
    with pytest.raises(ValueError):
        decorrelation_loss(T([[1.0, 2.0]]))


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 5)), elements=finite),
       arrays(np.float64, 5, elements=finite))
def test_decorrelation_shift_invariant(Z, c):
    a = decorrelation_loss(T(Z)).item()
    b = decorrelation_loss(T(Z + c[: Z.shape[1]])).item()
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 5)), elements=finite))
def test_decorrelation_zero_iff_diagonal(Z):
    Zc = Z - Z.mean(0)
    cov = Zc.T @ Zc / len(Z)
    off = cov - np.diag(np.diag(cov))
    assert decorrelation_loss(T(Z)).item() == pytest.approx((off**2).sum(), rel=1e-9, abs=1e-9)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.integers(0, 2**31 - 1))
def test_reconstruction_permutation_invariant(v, seed):
    p = np.random.default_rng(seed).permutation(len(v))
    pred = v[::-1].copy()
    m = torch.ones(len(v), 1)
    a = reconstruction_loss(T(v[:, None]), T(pred[:, None]), m).item()
    b = reconstruction_loss(T(v[p][:, None]), T(pred[p][:, None]), m).item()
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


def _decoders(D, K, seed=0):
    return FeatureDecoders(D, K, torch.Generator().manual_seed(seed))


def test_disentanglement_perfect_decoders_zero():
    dec = _decoders(2, 2)
    Z = T(np.random.default_rng(0).standard_normal((6, 2)))
    with torch.no_grad():
        feats = dec(Z)
    assert disentanglement_loss(Z, feats, torch.ones(6, 2), dec, 0.0).item() == pytest.approx(0.0, abs=1e-24)


def test_disentanglement_degenerate_decoder():
    dec = _decoders(2, 3)
    with torch.no_grad():
        dec.weight.zero_()
        dec.mask_logits.fill_(-1e3)
        dec.bias.copy_(T([0.5, -1.0]))
    rng = np.random.default_rng(1)
    F = rng.standard_normal((8, 2))
    val = disentanglement_loss(T(rng.standard_normal((8, 3))), T(F), torch.ones(8, 2), dec, 0.0).item()
    expect = np.mean([np.mean((F[:, 0] - 0.5) ** 2), np.mean((F[:, 1] + 1.0) ** 2)])
    assert val == pytest.approx(expect, rel=1e-12)


def test_disentanglement_alpha_additive():
    dec = _decoders(3, 2, seed=4)
    with torch.no_grad():
        dec.mask_logits.copy_(torch.randn(3, 2, dtype=torch.float64))
    rng = np.random.default_rng(2)
    Z, F = T(rng.standard_normal((5, 2))), T(rng.standard_normal((5, 3)))
    m = T(rng.random((5, 3)) < 0.8)
    m[0] = 1
    a0 = disentanglement_loss(Z, F, m, dec, 0.0).item()
    a1 = disentanglement_loss(Z, F, m, dec, 0.3).item()
    assert a1 - a0 == pytest.approx(0.3 * torch.sigmoid(dec.mask_logits).sum().item(), rel=1e-12)


def test_total_loss_examples():
    r, d, s = T(1.2), T(0.5), T(0.7)
    assert total_loss(r, d, s, LossWeights(0.0, 0.0, 0.01)).item() == 1.2
    lo = total_loss(r, d, s, LossWeights(0.2, 1.0)).item()
    hi = total_loss(r, d, s, LossWeights(0.4, 1.0)).item()
    assert hi - lo == pytest.approx(0.5 * 0.2, rel=1e-12)
    assert lo >= 0
    with pytest.raises(FloatingPointError):
        total_loss(T(float("nan")), d, s, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(decorr=-1.0)


@given(st.integers(0, 10_000))
def test_losses_pass_grad_check(seed):
    g = torch.Generator().manual_seed(seed)
    Z = torch.randn(6, 3, generator=g, dtype=torch.float64).requires_grad_(True)
    F = torch.randn(6, 2, generator=g, dtype=torch.float64)
    m = (torch.rand(6, 2, generator=g) < 0.8).double()
    m[0] = 1.0
    dec = _decoders(2, 3, seed)
    with torch.no_grad():
        dec.mask_logits.copy_(torch.randn(2, 3, generator=g, dtype=torch.float64))

    def loss():
        return total_loss(reconstruction_loss(F, Z[:, :2], m), decorrelation_loss(Z),
                          disentanglement_loss(Z, F, m, dec, 0.05), LossWeights(0.5, 1.0, 0.05))

    params = {"Z": Z, **{n: p for n, p in dec.named_parameters()}}
    assert grad_check(loss, params).passed
