"""Gradient verification suite for the differentiable primitives.

Each case is a scalar function of explicit tensor inputs, so the
finite-difference oracle can re-evaluate it on perturbed copies. Checks run
on float64 elements in two tiers: standard (step 1e-4, tolerance 1e-4) and
high (step 1e-5, tolerance 1e-7). Cases that route through argmin or
``stop_gradient`` are flagged; for them a mismatch is the expected result.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from . import tensor as T
from .cgpt import conditional_layer_norm, gpt_nll

STANDARD_TOL = 1e-4
HIGH_TOL = 1e-7


@dataclass
class Case:
    name: str
    fn: Callable[..., torch.Tensor]
    make: Callable[[torch.Generator], list[torch.Tensor]]
    differentiable: bool = True


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _away_from_zero(g, *shape):
    x = _randn(g, *shape)
    return torch.where(x.abs() < 0.1, x.sign() * 0.1 + x, x)


def _weighted(out):
    # fixed non-symmetric projection to a scalar
    w = torch.sin(0.7 * torch.arange(out.numel(), dtype=out.dtype) + 0.3).view(out.shape)
    return (out * w).sum()


def cases() -> list[Case]:
    def conv(x, k, b):
        return _weighted(T.conv3d(x, k, (2, 1, 1), (1, 0, 1), b))

    def convt(x, k, b):
        return _weighted(T.conv_transpose3d(x, k, (2, 1, 2), (1, 1, 0), b))

    def ln(x, gain, bias):
        return _weighted(T.layer_norm(x, -1, gain, bias, 1e-5))

    def attn(q, k, v):
        return _weighted(T.masked_attention(q, k, v, T.causal_mask(q.shape[-2])))

    def xattn(q, k, v):
        return _weighted(T.masked_attention(q, k, v))

    def lin(x, wt, b):
        return _weighted(T.linear(x, wt, b))

    def relu(x):
        return _weighted(T.relu(x))

    def softmax(x):
        return _weighted(T.softmax(x, -1))

    def sigmoid(x):
        return _weighted(T.sigmoid(x))

    def emb(table):
        idx = torch.tensor([[0, 3, 3], [1, 4, 2]])
        return _weighted(T.embedding(idx, table))

    def bn(x, gain, bias):
        return _weighted(F.batch_norm(x, None, None, gain, bias, training=True, eps=1e-5))

    def cln(y, gc, bc, gp, bp):
        return _weighted(conditional_layer_norm(y, gc, bc, gp, bp))

    def nll(logits):
        return gpt_nll(logits, torch.tensor([[1, 0, 3], [2, 2, 0]]))

    def recon(x, logits):
        from .vqvae import vqvae_loss
        z = torch.zeros(1, 1, 1, 1, 1, dtype=x.dtype)
        return vqvae_loss(x, T.sigmoid(logits), z, z, 0.25).reconstruction

    def quant_loss(z_e, cb, x, xh):
        from .vqvae import quantize, straight_through, vqvae_loss
        idx, z_q = quantize(z_e, cb)
        st = straight_through(z_e, z_q)
        return vqvae_loss(x, xh * st.mean(), z_e, z_q, 0.25).total

    return [
        Case("conv3d", conv, lambda g: [_randn(g, 2, 2, 5, 4, 3), _randn(g, 3, 2, 3, 2, 3), _randn(g, 3)]),
        Case("conv_transpose3d", convt, lambda g: [_randn(g, 2, 3, 3, 2, 3), _randn(g, 3, 2, 4, 3, 2), _randn(g, 2)]),
        Case("layer_norm", ln, lambda g: [_randn(g, 3, 4, 6), _randn(g, 6), _randn(g, 6)]),
        Case("masked_attention", attn, lambda g: [_randn(g, 2, 2, 5, 4) for _ in range(3)]),
        Case("cross_attention", xattn, lambda g: [_randn(g, 2, 2, 4, 3), _randn(g, 2, 2, 6, 3), _randn(g, 2, 2, 6, 3)]),
        Case("linear", lin, lambda g: [_randn(g, 3, 5), _randn(g, 4, 5), _randn(g, 4)]),
        Case("relu", relu, lambda g: [_away_from_zero(g, 4, 6)]),
        Case("softmax", softmax, lambda g: [_randn(g, 4, 6)]),
        Case("sigmoid", sigmoid, lambda g: [_randn(g, 4, 5)]),
        Case("embedding", emb, lambda g: [_randn(g, 5, 5)]),
        Case("batch_norm", bn, lambda g: [_randn(g, 4, 3, 2, 2, 2), _randn(g, 3), _randn(g, 3)]),
        Case("conditional_layer_norm", cln, lambda g: [_randn(g, 2, 3, 4)] + [_randn(g, 2, 1, 4) for _ in range(4)]),
        Case("gpt_nll", nll, lambda g: [_randn(g, 2, 3, 5)]),
        Case("vqvae_reconstruction", recon, lambda g: [torch.rand(2, 1, 3, 2, 2, generator=g, dtype=torch.float64),
                                                       _randn(g, 2, 1, 3, 2, 2)]),
        Case("vqvae_loss", quant_loss, lambda g: [_randn(g, 2, 3, 2, 2, 1), _randn(g, 6, 3),
                                                  torch.rand(2, 1, 3, 2, 2, generator=g, dtype=torch.float64),
                                                  torch.rand(2, 1, 3, 2, 2, generator=g, dtype=torch.float64)],
             differentiable=False),
    ]


def adjoint_gap(seed: int = 0) -> float:
    """``|<conv3d(x;K), y> - <x, conv_transpose3d(y;K)>|`` in float64."""
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 2, 3, 3, 3, 3)
    k = _randn(g, 2, 3, 2, 2, 2)
    y = _randn(g, *T.conv3d(x, k, 1, 1).shape)
    lhs = (T.conv3d(x, k, 1, 1) * y).sum()
    rhs = (x * T.conv_transpose3d(y, k, 1, 1)).sum()
    return float((lhs - rhs).abs())


TIERS = (("standard", 1e-4, STANDARD_TOL), ("high", 1e-5, HIGH_TOL))


def run_suite(probes: int = 20, seed: int = 0) -> list[dict]:
    """One record per (case, tier) plus the adjoint identity.

    A flagged case passes when the checker reports its mismatch as expected
    by contract.
    """
    out = []
    for case in cases():
        for tier, delta, tol in TIERS:
            g = torch.Generator().manual_seed(seed)
            inputs = case.make(g)
            t0 = time.perf_counter()
            res = T.grad_check(case.fn, inputs, delta=delta, probes=probes, seed=seed,
                               nondifferentiable=not case.differentiable)
            passed = res.expected_by_contract if not case.differentiable else res.max_rel_error <= tol
            out.append({
                "op": case.name, "precision": tier, "max_rel_error": res.max_rel_error,
                "probes": res.n_probes, "tolerance": tol, "differentiable": case.differentiable,
                "expected_by_contract": res.expected_by_contract, "passed": bool(passed),
                "seconds": time.perf_counter() - t0,
            })
    gap = adjoint_gap(seed)
    out.append({"op": "conv_adjoint_identity", "precision": "high", "max_rel_error": gap, "probes": 1,
                "tolerance": 1e-10, "differentiable": True, "expected_by_contract": False,
                "passed": gap <= 1e-10, "seconds": 0.0})
    return out
