"""VQ-VAE over slice sequences.

The encoder maps ``(n, 1, l, H, W)`` slice sequences to continuous latents
``z_e`` of shape ``(n, D, l', H', W')``; each latent site is snapped to its
nearest codebook vector, and the decoder maps the quantized grid back to voxel
probabilities in ``[0, 1]``.

Loss reductions: every term is a squared Euclidean norm over the channel axis
averaged over sites, so a single-site, two-dimensional example reproduces the
hand-computed values (``0.13`` and ``0.0325`` for ``z_e = (0.2, 0.3)``
against the zero code with beta 0.25).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .errors import ConfigurationError, DimensionError, GeometryError, NonFiniteError


@dataclass
class VqVaeConfig:
    in_channels: int = 1
    channels: int = 32
    res_channels: int = 16
    n_res_blocks: int = 2
    attn_heads: int = 2
    downsample: tuple[int, int, int] = (4, 2, 2)
    K: int = 32
    D: int = 16
    beta: float = 0.25

    def __post_init__(self):
        self.downsample = tuple(int(f) for f in self.downsample)
        for f in self.downsample:
            if f < 1 or f & (f - 1):
                raise ConfigurationError(f"downsample factors must be powers of two, got {self.downsample}")
        if self.beta <= 0:
            raise ConfigurationError("beta must be > 0")
        if self.K < 2 or self.D < 1:
            raise ConfigurationError("codebook needs K >= 2 and D >= 1")
        if self.channels % self.attn_heads:
            raise ConfigurationError("channels must be divisible by attn_heads")

    @classmethod
    def full_scale(cls) -> "VqVaeConfig":
        return cls(channels=240, res_channels=128, n_res_blocks=4, K=1024, D=256)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downsample"] = list(self.downsample)
        return d


def _uniform_(t: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class SamePadConv3d(nn.Module):
    """Conv3d whose stride divides the extent exactly (front-heavy zero padding)."""

    def __init__(self, c_in, c_out, k, stride=1, bias=True):
        super().__init__()
        self.k = T._triple(k)
        self.stride = T._triple(stride)
        fan_in = c_in * math.prod(self.k)
        self.weight = nn.Parameter(_uniform_(torch.empty(c_out, c_in, *self.k), fan_in))
        self.bias = nn.Parameter(_uniform_(torch.empty(c_out), fan_in)) if bias else None
        pads = [T.same_padding(k_, s) for k_, s in zip(self.k, self.stride)]
        # F.pad wants (w_front, w_back, h_front, h_back, d_front, d_back)
        self._pad = tuple(p for pair in reversed(pads) for p in pair)

    def forward(self, x):
        return T.conv3d(F.pad(x, self._pad), self.weight, self.stride, 0, self.bias)


class SamePadConvTranspose3d(nn.Module):
    """Adjoint geometry of :class:`SamePadConv3d`: multiplies each extent by its stride."""

    def __init__(self, c_in, c_out, k, stride=1, bias=True):
        super().__init__()
        self.k = T._triple(k)
        self.stride = T._triple(stride)
        fan_in = c_in * math.prod(self.k)
        # conv3d layout: (channels of the input here, channels of the output)
        self.weight = nn.Parameter(_uniform_(torch.empty(c_in, c_out, *self.k), fan_in))
        self.bias = nn.Parameter(_uniform_(torch.empty(c_out), fan_in)) if bias else None
        self._crop = [T.same_padding(k_, s) for k_, s in zip(self.k, self.stride)]

    def forward(self, x):
        y = T.conv_transpose3d(x, self.weight, self.stride, 0, self.bias)
        (d0, d1), (h0, h1), (w0, w1) = self._crop
        return y[:, :, d0:y.shape[2] - d1, h0:y.shape[3] - h1, w0:y.shape[4] - w1]


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim)

    def forward(self, x):
        b, L, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, L, h, d // h).transpose(1, 2)

        out = T.masked_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)))
        return self.o(out.transpose(1, 2).reshape(b, L, d))


class AxialAttention(nn.Module):
    """Self-attention along t, then h, then w, each axis with its own projections."""

    def __init__(self, channels, heads):
        super().__init__()
        self.attn = nn.ModuleList(SelfAttention(channels, heads) for _ in range(3))

    def forward(self, x):
        # x: (n, c, t, h, w)
        for axis, attn in zip((2, 3, 4), self.attn):
            y = x.movedim(1, -1).movedim(axis - 1, -2)  # (..., L, c)
            shp = y.shape
            y = attn(y.reshape(-1, shp[-2], shp[-1])).reshape(shp)
            x = y.movedim(-2, axis - 1).movedim(-1, 1)
        return x


class AttentionResidualBlock(nn.Module):
    def __init__(self, channels, res_channels, heads):
        super().__init__()
        self.block = nn.Sequential(
            nn.BatchNorm3d(channels, momentum=0.1),
            nn.ReLU(),
            SamePadConv3d(channels, res_channels, 3, bias=False),
            nn.BatchNorm3d(res_channels, momentum=0.1),
            nn.ReLU(),
            SamePadConv3d(res_channels, channels, 1, bias=False),
            nn.BatchNorm3d(channels, momentum=0.1),
            nn.ReLU(),
            AxialAttention(channels, heads),
        )

    def forward(self, x):
        return x + self.block(x)


def _n_steps(factors):
    return [int(math.log2(f)) for f in factors]


class Encoder(nn.Module):
    def __init__(self, cfg: VqVaeConfig):
        super().__init__()
        steps = _n_steps(cfg.downsample)
        layers = []
        c_in = cfg.in_channels
        for i in range(max(steps, default=0)):
            stride = tuple(2 if i < s else 1 for s in steps)
            layers += [SamePadConv3d(c_in, cfg.channels, 4, stride), nn.ReLU()]
            c_in = cfg.channels
        self.down = nn.Sequential(*layers)
        self.conv_last = SamePadConv3d(c_in, cfg.channels, 3)
        self.res = nn.Sequential(
            *[AttentionResidualBlock(cfg.channels, cfg.res_channels, cfg.attn_heads) for _ in range(cfg.n_res_blocks)],
            nn.BatchNorm3d(cfg.channels, momentum=0.1),
            nn.ReLU(),
        )
        self.to_latent = SamePadConv3d(cfg.channels, cfg.D, 1)

    def forward(self, x):
        return self.to_latent(self.res(self.conv_last(self.down(x))))


class Decoder(nn.Module):
    def __init__(self, cfg: VqVaeConfig):
        super().__init__()
        steps = _n_steps(cfg.downsample)
        self.from_latent = SamePadConv3d(cfg.D, cfg.channels, 3)
        self.res = nn.Sequential(
            *[AttentionResidualBlock(cfg.channels, cfg.res_channels, cfg.attn_heads) for _ in range(cfg.n_res_blocks)],
            nn.BatchNorm3d(cfg.channels, momentum=0.1),
            nn.ReLU(),
        )
        n_up = max(steps, default=0)
        layers = []
        for i in range(n_up):
            stride = tuple(2 if i < s else 1 for s in steps)
            last = i == n_up - 1
            layers.append(SamePadConvTranspose3d(cfg.channels, cfg.in_channels if last else cfg.channels, 4, stride))
            if not last:
                layers.append(nn.ReLU())
        if n_up == 0:
            layers.append(SamePadConv3d(cfg.channels, cfg.in_channels, 3))
        self.up = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.up(self.res(self.from_latent(z))))


# --------------------------------------------------------------------------
# quantization and loss
# --------------------------------------------------------------------------

def nearest_codes(flat: torch.Tensor, codebook: torch.Tensor, chunk_elems: int = 1 << 22) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``flat``; ties go to the lowest index.

    Distances are summed squared differences (not the expanded
    ``|a|^2 - 2ab + |b|^2`` form) so exact ties stay exact.
    """
    if codebook.shape[0] == 0:
        raise ConfigurationError("empty codebook")
    if flat.shape[-1] != codebook.shape[1]:
        raise DimensionError(f"latent width {flat.shape[-1]} != codebook D {codebook.shape[1]}")
    K, D = codebook.shape
    step = max(1, chunk_elems // (K * D))
    out = []
    with torch.no_grad():
        for s in range(0, flat.shape[0], step):
            d2 = ((flat[s:s + step, None, :] - codebook[None]) ** 2).sum(-1)
            out.append(d2.argmin(dim=1))  # first minimum on ties
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(indices, z_q)`` for latents ``(n, D, t, h, w)``.

    ``z_q`` is a differentiable gather from ``codebook`` (gradient reaches the
    codebook only); use :func:`straight_through` to route decoder gradients
    onto ``z_e``.
    """
    if z_e.shape[1] != codebook.shape[1]:
        raise DimensionError(f"z_e has {z_e.shape[1]} channels, codebook D is {codebook.shape[1]}")
    flat = z_e.movedim(1, -1)
    idx = nearest_codes(flat.reshape(-1, flat.shape[-1]), codebook).view(flat.shape[:-1])
    z_q = codebook[idx].movedim(-1, 1)
    return idx, z_q


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward copies the incoming gradient onto ``z_e``."""
    return z_e + T.stop_gradient(z_q - z_e)


class VqLoss(NamedTuple):
    total: torch.Tensor
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor


def _site_sq(a: torch.Tensor) -> torch.Tensor:
    # squared norm over channels, mean over batch and sites
    return (a ** 2).sum(dim=1).mean()


def vqvae_loss(x, x_hat, z_e, z_q, beta: float = 0.25) -> VqLoss:
    """Reconstruction + codebook + beta * commitment.

    ``z_q`` must be the raw codebook gather (not the straight-through value),
    and ``x_hat`` must be decoded from the straight-through value.
    """
    if beta <= 0:
        raise ConfigurationError("beta must be > 0")
    if x.shape != x_hat.shape or z_e.shape != z_q.shape:
        raise DimensionError("vqvae_loss operand shapes disagree")
    rec = _site_sq(x - x_hat)
    cb = _site_sq(T.stop_gradient(z_e) - z_q)
    com = beta * _site_sq(T.stop_gradient(z_q) - z_e)
    return VqLoss(rec + cb + com, rec, cb, com)


class VqOutput(NamedTuple):
    x_hat: torch.Tensor
    z_e: torch.Tensor
    z_q: torch.Tensor
    indices: torch.Tensor
    loss: VqLoss


class VQVAE(nn.Module):
    def __init__(self, cfg: VqVaeConfig | None = None):
        super().__init__()
        self.cfg = cfg or VqVaeConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        K = self.cfg.K
        self.codebook = nn.Parameter(torch.empty(K, self.cfg.D).uniform_(-1.0 / K, 1.0 / K))

    def latent_shape(self, l: int, h: int, w: int) -> tuple[int, int, int]:
        out = []
        for size, f in zip((l, h, w), self.cfg.downsample):
            if size % f:
                raise GeometryError(f"extent {size} not divisible by downsample factor {f}")
            out.append(size // f)
        return tuple(out)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected (n, {self.cfg.in_channels}, l, H, W), got {tuple(x.shape)}")
        self.latent_shape(*x.shape[2:])
        return self.encoder(x)

    def quantize(self, z_e: torch.Tensor):
        return quantize(z_e, self.codebook)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.dim() != 5 or z_q.shape[1] != self.cfg.D:
            raise GeometryError(f"decoder expects (n, {self.cfg.D}, t, h, w), got {tuple(z_q.shape)}")
        return self.decoder(z_q)

    def embed_codes(self, indices: torch.Tensor) -> torch.Tensor:
        """``(n, t, h, w)`` code indices -> ``(n, D, t, h, w)`` codebook vectors."""
        return self.codebook[indices].movedim(-1, 1)

    def decode_codes(self, indices: torch.Tensor) -> torch.Tensor:
        return self.decode(self.embed_codes(indices))

    @torch.no_grad()
    def codes(self, x: torch.Tensor) -> torch.Tensor:
        return self.quantize(self.encode(x))[0]

    def forward(self, x: torch.Tensor) -> VqOutput:
        z_e = self.encode(x)
        idx, z_q = self.quantize(z_e)
        x_hat = self.decode(straight_through(z_e, z_q))
        return VqOutput(x_hat, z_e, z_q, idx, vqvae_loss(x, x_hat, z_e, z_q, self.cfg.beta))


def vqvae_train_step(model: VQVAE, batch: torch.Tensor, opt: T.Adam) -> dict:
    """One Adam step on encoder, decoder and codebook. Returns the loss record."""
    model.train()
    opt.zero_grad()
    out = model(batch)
    rec = {
        "loss": out.loss.total.item(),
        "reconstruction": out.loss.reconstruction.item(),
        "codebook": out.loss.codebook.item(),
        "commitment": out.loss.commitment.item(),
    }
    if not all(math.isfinite(v) for v in rec.values()):
        raise NonFiniteError(f"non-finite VQ-VAE loss, step aborted: {rec}")
    out.loss.total.backward()
    opt.step()
    used = torch.unique(out.indices).numel()
    rec["dead_codes"] = model.cfg.K - used
    rec["accuracy"] = ((out.x_hat.detach() >= 0.5).float() == batch).float().mean().item()
    return rec


@torch.no_grad()
def reconstruction_accuracy(model: VQVAE, x: torch.Tensor) -> float:
    """Voxelwise agreement between ``x`` and the thresholded eval-mode reconstruction."""
    was = model.training
    model.eval()
    x_hat = model(x).x_hat
    model.train(was)
    return ((x_hat >= 0.5).to(x.dtype) == x).float().mean().item()
