"""Differentiable primitives used by the VQ-VAE and the conditional GPT.

Tensors are ``torch.Tensor`` objects and the autograd tape is torch's. This
module adds the contract layer on top: shape and geometry validation, the
stop-gradient operator, masked attention with a hard error on fully masked
rows, a standalone Adam update that can be serialized, and a finite-difference
gradient checker that evaluates its oracle in float64.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ConfigurationError,
    DefinitionError,
    DimensionError,
    GeometryError,
    NonFiniteError,
)

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise DimensionError(f"expected a triple, got {v}")
    return v  # type: ignore[return-value]


# --------------------------------------------------------------------------
# execution mode
# --------------------------------------------------------------------------

def set_deterministic(enabled: bool = True, threads: int | None = None) -> None:
    """Pin reductions to a fixed order and optionally fix the thread count.

    ``threads`` defaults to ``$ROCKGPT_THREADS`` when set.
    """
    if threads is None and os.environ.get("ROCKGPT_THREADS"):
        threads = int(os.environ["ROCKGPT_THREADS"])
    if threads is not None:
        if threads < 1:
            raise ConfigurationError("threads must be >= 1")
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(enabled)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@contextlib.contextmanager
def high_precision():
    """Make float64 the default dtype inside the block."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv3d(x: torch.Tensor, kernel: torch.Tensor, stride=1, padding=0,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """3D cross-correlation with symmetric zero padding.

    ``x`` is ``(n, c_in, D, H, W)`` and ``kernel`` is ``(c_out, c_in, kd, kh, kw)``.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.dim() != 5 or kernel.dim() != 5:
        raise DimensionError(f"conv3d needs 5-d input and kernel, got {tuple(x.shape)}, {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and tuple(bias.shape) != (kernel.shape[0],):
        raise DimensionError(f"bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    if min(stride) < 1:
        raise GeometryError("stride must be positive")
    for size, k, s, p in zip(x.shape[2:], kernel.shape[2:], stride, padding):
        if conv_output_extent(size, k, s, p) < 1:
            raise GeometryError(f"non-positive output extent for size={size} k={k} s={s} p={p}")
    return F.conv3d(x, kernel, bias, stride, padding)


def conv_transpose3d(x: torch.Tensor, kernel: torch.Tensor, stride=1, padding=0,
                     bias: torch.Tensor | None = None) -> torch.Tensor:
    """Adjoint of :func:`conv3d` for the same kernel, stride and padding.

    ``kernel`` uses the conv3d layout ``(c_out, c_in, ...)``, so ``x`` carries
    ``c_out`` channels and the result carries ``c_in``.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.dim() != 5 or kernel.dim() != 5:
        raise DimensionError("conv_transpose3d needs 5-d input and kernel")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel emits {kernel.shape[0]}")
    if bias is not None and tuple(bias.shape) != (kernel.shape[1],):
        raise DimensionError(f"bias shape {tuple(bias.shape)} != ({kernel.shape[1]},)")
    if min(stride) < 1:
        raise GeometryError("stride must be positive")
    for size, k, s, p in zip(x.shape[2:], kernel.shape[2:], stride, padding):
        if (size - 1) * s - 2 * p + k < 1:
            raise GeometryError(f"non-positive output extent for size={size} k={k} s={s} p={p}")
    return F.conv_transpose3d(x, kernel, bias, stride, padding)


def same_padding(k: int, s: int) -> tuple[int, int]:
    """Front/back zero padding so that a stride-``s`` conv divides the extent by ``s``.

    The total ``k - s`` is split with the extra voxel in front; for ``k=4, s=2``
    this is ``(1, 1)``.
    """
    p = k - s
    return (p // 2 + p % 2, p // 2)


# --------------------------------------------------------------------------
# elementwise / normalization / attention
# --------------------------------------------------------------------------

def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity forward, zero derivative backward."""
    return x.detach()


relu = F.relu
sigmoid = torch.sigmoid


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def embedding(indices: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if indices.numel() and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError("embedding index out of range")
    return table[indices]


def layer_norm(x: torch.Tensor, normalized_axes: Sequence[int] | int = -1,
               gain: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    """Normalize to zero mean and unit (biased) variance over ``normalized_axes``."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be > 0")
    axes = (normalized_axes,) if isinstance(normalized_axes, int) else tuple(normalized_axes)
    mean = x.mean(dim=axes, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axes, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def causal_mask(t: int, device=None) -> torch.Tensor:
    """Boolean ``(t, t)`` mask, True where attention is allowed."""
    return torch.ones(t, t, dtype=torch.bool, device=device).tril()


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: torch.Tensor | None = None,
                     return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_h) + mask) v`` for ``(..., T, d_h)`` operands.

    ``mask`` is boolean and broadcastable to ``(T_q, T_kv)``; False entries get
    a logit of -inf so their weight is exactly zero.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        mask = mask.to(torch.bool)
        try:
            full = torch.broadcast_to(mask, logits.shape)
        except RuntimeError as exc:
            raise DimensionError(f"mask {tuple(mask.shape)} not broadcastable to {tuple(logits.shape)}") from exc
        if not full.any(dim=-1).all():
            raise DefinitionError("an attention row has every position masked")
        logits = logits.masked_fill(~full, float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = w @ v
    return (out, w) if return_weights else out


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def init_moments(self, params: Sequence[torch.Tensor]) -> None:
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
              state: AdamState) -> tuple[Sequence[torch.Tensor], AdamState]:
    """Bias-corrected Adam update applied in place.

    A ``None`` gradient is treated as zero. Every gradient is checked before
    any parameter is touched, so a non-finite gradient leaves the parameters
    and the state unchanged.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.init_moments(params)
    if len(state.m) != len(params):
        raise DimensionError("Adam state does not match the parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.shape:
            raise DimensionError(f"moment {i} shape {tuple(state.m[i].shape)} != param {tuple(p.shape)}")
        if g is not None:
            if g.shape != p.shape:
                raise DimensionError(f"grad {i} shape {tuple(g.shape)} != param {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteError(f"gradient {i} is not finite; update rejected")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-state.lr)
    return params, state


class Adam:
    """Thin stateful wrapper pairing a parameter list with an :class:`AdamState`."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.init_moments(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    expected_by_contract: bool = False

    @property
    def n_probes(self) -> int:
        return len(self.analytic)


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               delta: float = 1e-4, probes: int | None = 20, seed: int = 0,
               wrt: Sequence[int] | None = None, nondifferentiable: bool = False) -> GradCheckResult:
    """Compare tape gradients of a scalar ``fn(*inputs)`` with central differences.

    The analytic gradient is taken at the inputs' own dtype; the
    finite-difference oracle re-evaluates ``fn`` on float64 copies. ``probes``
    random coordinates are drawn across the inputs listed in ``wrt`` (all
    floating inputs by default); ``None`` probes every coordinate.

    The relative error of a probe is ``|a - n| / max(|a|, |n|, s)`` with the
    floor ``s`` equal to 1e-3 of the largest numeric magnitude seen, so that
    near-zero components are judged on an absolute scale.

    With ``nondifferentiable=True`` a mismatch is the expected outcome (the
    function routes through :func:`stop_gradient`) and is reported via
    ``expected_by_contract``.
    """
    if delta <= 0:
        raise ConfigurationError("delta must be > 0")
    if wrt is None:
        wrt = [i for i, t in enumerate(inputs) if t.is_floating_point()]

    leaves = [t.detach().clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    out = fn(*leaves)
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    check_finite(out, "function value")
    if out.requires_grad:
        grads = torch.autograd.grad(out, [leaves[i] for i in wrt], allow_unused=True)
    else:  # every path went through stop_gradient
        grads = [None] * len(wrt)
    grads = [torch.zeros_like(leaves[i]) if g is None else g for i, g in zip(wrt, grads)]

    coords = [(j, c) for j in range(len(wrt)) for c in range(inputs[wrt[j]].numel())]
    rng = np.random.default_rng(seed)
    if probes is not None and probes < len(coords):
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    base = [t.detach().to(torch.float64).clone() if t.is_floating_point() else t.detach().clone()
            for t in inputs]
    analytic, numeric = [], []
    with torch.no_grad():
        for j, c in coords:
            idx = wrt[j]
            flat = base[idx].view(-1)
            orig = flat[c].item()
            flat[c] = orig + delta
            fp = fn(*base).item()
            flat[c] = orig - delta
            fm = fn(*base).item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite probe at input {idx} coordinate {c}")
            numeric.append((fp - fm) / (2 * delta))
            analytic.append(grads[j].reshape(-1)[c].item())

    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * float(np.abs(n).max(initial=0.0)), 1e-12)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = float(rel.max(initial=0.0))
    return GradCheckResult(err, a, n, expected_by_contract=nondifferentiable and err > 0)
