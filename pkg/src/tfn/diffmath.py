"""Differentiable numeric substrate.

Every model module works on float64 ``torch.Tensor`` values; reverse-mode
gradients come from torch autograd. ``grad_check`` is an independent
central-difference checker that never touches autograd for its reference
values, so it can be used to audit any loss built on top of these tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
EPS_FLOOR = 1e-8

torch.set_default_dtype(DTYPE)


class EmptySupportError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def softmax_stable(v, mask=None, dim: int = -1) -> torch.Tensor:
    """Softmax along ``dim`` restricted to admissible entries.

    Inadmissible entries come out exactly 0. The max logit is subtracted
    before exponentiation, so huge logits do not overflow.
    """
    v = as_tensor(v)
    if mask is None:
        shifted = v - v.amax(dim=dim, keepdim=True).detach()
        e = torch.exp(shifted)
        return e / e.sum(dim=dim, keepdim=True)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=dim).all()):
        raise EmptySupportError("empty attention support")
    filled = v.masked_fill(~mask, -math.inf)
    top = filled.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(filled - top)
    e = torch.where(mask, e, torch.zeros_like(e))
    return e / e.sum(dim=dim, keepdim=True)


def uniform_init(shape, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    w = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound
    return w.requires_grad_(True)


@dataclass
class GradReport:
    """Per-parameter max relative error between autograd and central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    worst: tuple[str, int] | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_error:.3e} (tol {self.tol:g}) worst={self.worst}"


def relative_error(a: np.ndarray, f: np.ndarray, floor: float = EPS_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return np.abs(a - f) / denom


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradReport:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` takes no arguments and reads the tensors in ``params``, which
    are perturbed in place one scalar at a time and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("loss is not finite at the base point")
    analytic = dict(zip(params.keys(), torch.autograd.grad(loss, list(params.values()), allow_unused=True)))

    report = GradReport(tol=tol)
    worst_err = -1.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            numeric = np.empty(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{i}]")
                numeric[i] = (up - down) / (2.0 * eps)
            g = analytic[name]
            a = np.zeros(flat.numel()) if g is None else g.detach().reshape(-1).numpy()
            err = relative_error(a, numeric)
            report.errors[name] = float(err.max()) if err.size else 0.0
            if err.size and err.max() > worst_err:
                worst_err = float(err.max())
                report.worst = (name, int(err.argmax()))
    return report
