"""Conditional autoregressive transformer over VQ-VAE code sequences.

Conditioning enters two ways:

* the conditioning slice is encoded by a small residual network into a grid
  of feature tokens that every block attends to (cross-attention, the second
  sub-module of each block);
* rock class (one-hot) and porosity (scalar) modulate every layer norm: the
  normalized activations are scaled and shifted first by the class gain/bias
  and then by the porosity gain/bias.

Conditioner gains start at exactly 1, biases and the cross-attention output
projection at exactly 0, so a freshly built model reproduces its
unconditional forward pass bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .errors import ConfigurationError, DefinitionError, DimensionError, GeometryError, NonFiniteError, VocabularyError
from .vqvae import SamePadConv3d


@dataclass
class GptConfig:
    n_blocks: int = 4
    d_model: int = 128
    n_heads: int = 4
    K: int = 32
    D: int = 16
    max_len: int = 128
    n_classes: int = 2
    slice_shape: tuple[int, int] = (16, 16)
    resnet_widths: tuple[int, ...] = (16, 32, 64, 128)
    resnet_strides: tuple[tuple[int, int, int], ...] = ((1, 1, 1), (1, 2, 2), (1, 2, 2), (1, 1, 1))
    dropout: float = 0.1

    def __post_init__(self):
        self.slice_shape = tuple(self.slice_shape)
        self.resnet_widths = tuple(self.resnet_widths)
        self.resnet_strides = tuple(tuple(s) for s in self.resnet_strides)
        if self.n_blocks < 1:
            raise ConfigurationError("need at least one attention block")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if len(self.resnet_widths) != len(self.resnet_strides):
            raise ConfigurationError("one stride triple per ResNet group")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @classmethod
    def full_scale(cls, n_classes: int = 3) -> "GptConfig":
        return cls(K=1024, D=256, max_len=2048, n_classes=n_classes, slice_shape=(64, 64),
                   resnet_widths=(64, 128, 256, 576))

    @property
    def cond_dim(self) -> int:
        return self.resnet_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slice_shape"] = list(self.slice_shape)
        d["resnet_widths"] = list(self.resnet_widths)
        d["resnet_strides"] = [list(s) for s in self.resnet_strides]
        return d


def sinusoidal_encoding(n_pos: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(n_pos, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(torch.get_default_dtype())


# --------------------------------------------------------------------------
# conditioning batch
# --------------------------------------------------------------------------

class Condition(NamedTuple):
    """Batched conditioning: slices ``(n, H, W)``, one-hot ``(n, C)``, porosity ``(n,)``."""

    slices: torch.Tensor
    onehot: torch.Tensor
    porosity: torch.Tensor

    @classmethod
    def make(cls, slices, labels, porosity, n_classes: int) -> "Condition":
        slices = torch.as_tensor(slices, dtype=torch.get_default_dtype())
        if slices.dim() == 2:
            slices = slices[None]
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        por = torch.as_tensor(porosity, dtype=torch.get_default_dtype()).reshape(-1)
        n = slices.shape[0]
        if labels.numel() == 1 and n > 1:
            labels = labels.expand(n)
        if por.numel() == 1 and n > 1:
            por = por.expand(n)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ConfigurationError(f"class label out of range [0, {n_classes})")
        if (por < 0).any() or (por > 1).any():
            raise ConfigurationError("porosity must lie in [0, 1]")
        return cls(slices, F.one_hot(labels, n_classes).to(slices.dtype), por.clone())

    def validate(self, n_classes: int) -> None:
        oh = self.onehot
        if oh.shape[-1] != n_classes:
            raise DimensionError(f"one-hot width {oh.shape[-1]} != {n_classes} classes")
        if not (((oh == 0) | (oh == 1)).all() and (oh.sum(-1) == 1).all()):
            raise DefinitionError("class vector is not one-hot")
        if (self.porosity < 0).any() or (self.porosity > 1).any():
            raise DefinitionError("porosity must lie in [0, 1]")

    def index(self, idx) -> "Condition":
        return Condition(self.slices[idx], self.onehot[idx], self.porosity[idx])


# --------------------------------------------------------------------------
# slice ResNet
# --------------------------------------------------------------------------

class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of ``(n, c, d, h, w)`` features."""

    def __init__(self, c):
        super().__init__()
        self.ln = nn.LayerNorm(c)

    def forward(self, x):
        return self.ln(x.movedim(1, -1)).movedim(-1, 1)


class _DownBlock(nn.Module):
    # main: conv3 -> LN -> ReLU ; shortcut: conv1 -> LN
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv = SamePadConv3d(c_in, c_out, 3, stride, bias=False)
        self.norm = ChannelNorm(c_out)
        self.short = SamePadConv3d(c_in, c_out, 1, stride, bias=False)
        self.short_norm = ChannelNorm(c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x))) + self.short_norm(self.short(x))


class _PlainBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = SamePadConv3d(c, c, 3, bias=False)
        self.norm1 = ChannelNorm(c)
        self.conv2 = SamePadConv3d(c, c, 3, bias=False)
        self.norm2 = ChannelNorm(c)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return x + F.relu(self.norm2(self.conv2(y)))


class SliceResNet(nn.Module):
    """Conditioning-slice encoder: ``(n, H, W)`` -> feature tokens ``(n, T_c, d_c)``."""

    def __init__(self, cfg: GptConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.resnet_widths[0]
        self.stem = SamePadConv3d(1, w0, 3, bias=False)
        self.stem_norm = ChannelNorm(w0)
        groups = []
        c = w0
        for w, s in zip(cfg.resnet_widths, cfg.resnet_strides):
            groups.append(nn.Sequential(_DownBlock(c, w, s), _PlainBlock(w)))
            c = w
        self.groups = nn.Sequential(*groups)
        h, w = self.grid_shape
        self.register_buffer("pos", sinusoidal_encoding(h * w, cfg.cond_dim), persistent=False)

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w = self.cfg.slice_shape
        for s in self.cfg.resnet_strides:
            h, w = -(-h // s[1]), -(-w // s[2])
        return h, w

    def padded_input_shape(self) -> tuple[int, int, int]:
        """Extent of the zero-padded slice seen by the first kernel-3 convolution."""
        pads = [sum(T.same_padding(3, 1))] * 3
        h, w = self.cfg.slice_shape
        return (1 + pads[0], h + pads[1], w + pads[2])

    def feature_map(self, slices: torch.Tensor) -> torch.Tensor:
        if slices.dim() != 3 or tuple(slices.shape[1:]) != self.cfg.slice_shape:
            raise GeometryError(f"slices must be (n, {self.cfg.slice_shape[0]}, {self.cfg.slice_shape[1]}), "
                                f"got {tuple(slices.shape)}")
        x = slices[:, None, None]  # (n, 1, 1, H, W)
        x = F.relu(self.stem_norm(self.stem(x)))
        return self.groups(x)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        f = self.feature_map(slices)  # (n, d_c, 1, h, w)
        tokens = f.flatten(2).transpose(1, 2)
        return tokens + self.pos


# --------------------------------------------------------------------------
# conditional layer norm and attention block
# --------------------------------------------------------------------------

def conditional_layer_norm(y_ini, g_class, b_class, g_prop, b_prop):
    """Class modulation followed by porosity modulation of a normalized activation."""
    return (y_ini * g_class + b_class) * g_prop + b_prop


class ConditionalLayerNorm(nn.Module):
    def __init__(self, d, n_classes):
        super().__init__()
        self.d = d
        self.class_gain = nn.Linear(n_classes, d)
        self.class_bias = nn.Linear(n_classes, d)
        self.prop_gain = nn.Linear(1, d)
        self.prop_bias = nn.Linear(1, d)
        self.reset_conditioning()

    def reset_conditioning(self):
        with torch.no_grad():
            for lin, b in ((self.class_gain, 1.0), (self.class_bias, 0.0),
                           (self.prop_gain, 1.0), (self.prop_bias, 0.0)):
                lin.weight.zero_()
                lin.bias.fill_(b)

    def modulation(self, onehot, porosity):
        p = porosity[:, None]
        return (self.class_gain(onehot)[:, None], self.class_bias(onehot)[:, None],
                self.prop_gain(p)[:, None], self.prop_bias(p)[:, None])

    def forward(self, x, cond: Condition | None):
        y = F.layer_norm(x, (self.d,))
        if cond is None:
            return y
        return conditional_layer_norm(y, *self.modulation(cond.onehot, cond.porosity))


class Attention(nn.Module):
    def __init__(self, d, heads, d_kv=None, zero_out=False):
        super().__init__()
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d_kv, d)
        self.v = nn.Linear(d_kv, d)
        self.o = nn.Linear(d, d)
        if zero_out:
            with torch.no_grad():
                self.o.weight.zero_()
                self.o.bias.zero_()

    def forward(self, x, ctx=None, mask=None):
        ctx = x if ctx is None else ctx
        n, t, d = x.shape
        h = self.heads

        def split(z):
            return z.view(n, z.shape[1], h, d // h).transpose(1, 2)

        y = T.masked_attention(split(self.q(x)), split(self.k(ctx)), split(self.v(ctx)), mask)
        return self.o(y.transpose(1, 2).reshape(n, t, d))


class Block(nn.Module):
    def __init__(self, cfg: GptConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = ConditionalLayerNorm(d, cfg.n_classes)
        self.self_attn = Attention(d, cfg.n_heads)
        self.norm2 = ConditionalLayerNorm(d, cfg.n_classes)
        self.cross_attn = Attention(d, cfg.n_heads, d_kv=cfg.cond_dim, zero_out=True)
        self.norm3 = ConditionalLayerNorm(d, cfg.n_classes)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, cond, ctx, mask):
        x = x + self.drop(self.self_attn(self.norm1(x, cond), mask=mask))
        if ctx is not None:
            x = x + self.drop(self.cross_attn(self.norm2(x, cond), ctx))
        return x + self.drop(self.mlp(self.norm3(x, cond)))


class ConditionalGPT(nn.Module):
    def __init__(self, cfg: GptConfig | None = None, codebook: torch.Tensor | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GptConfig()
        if codebook is None:
            codebook = torch.zeros(cfg.K, cfg.D)
        if tuple(codebook.shape) != (cfg.K, cfg.D):
            raise DimensionError(f"codebook shape {tuple(codebook.shape)} != ({cfg.K}, {cfg.D})")
        self.register_buffer("codebook", codebook.detach().clone())
        self.embed = nn.Linear(cfg.D, cfg.d_model)
        self.sos = nn.Parameter(0.02 * torch.randn(cfg.d_model))
        self.register_buffer("pos", sinusoidal_encoding(cfg.max_len, cfg.d_model), persistent=False)
        self.resnet = SliceResNet(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.K)
        self.drop = nn.Dropout(cfg.dropout)

    def context(self, cond: Condition | None) -> torch.Tensor | None:
        if cond is None:
            return None
        cond.validate(self.cfg.n_classes)
        return self.resnet(cond.slices)

    def forward(self, tokens: torch.Tensor, cond: Condition | None = None,
                ctx: torch.Tensor | None = None) -> torch.Tensor:
        """Logits ``(n, T, K)``; position ``i`` sees tokens ``< i`` and the condition.

        ``cond=None`` runs the unconditional model (plain layer norms, no
        cross-attention).
        """
        if tokens.dim() != 2:
            raise DimensionError("tokens must be (n, T)")
        n, t = tokens.shape
        if t > self.cfg.max_len:
            raise DimensionError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.K):
            raise VocabularyError(f"token outside [0, {self.cfg.K})")
        if cond is not None and ctx is None:
            ctx = self.context(cond)
        emb = self.embed(self.codebook[tokens[:, :-1]])
        x = torch.cat([self.sos.expand(n, 1, -1), emb], dim=1) + self.pos[:t]
        x = self.drop(x)
        mask = T.causal_mask(t, x.device)
        for blk in self.blocks:
            x = blk(x, cond, ctx, mask)
        return self.head(self.norm(x))


def gpt_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets[..., None].long()).mean()


@torch.no_grad()
def sample_tokens(model: ConditionalGPT, cond: Condition | None, length: int | None = None,
                  temperature: float = 1.0, greedy: bool = False, top_k: int | None = None,
                  seed: int = 0, n: int | None = None) -> torch.Tensor:
    """Ancestral sampling of ``(n, length)`` tokens in eval mode."""
    if not greedy and not temperature > 0:
        raise ConfigurationError("temperature must be > 0 (or use greedy)")
    length = length or model.cfg.max_len
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    if n is None:
        n = 1 if cond is None else cond.slices.shape[0]
    ctx = model.context(cond)
    seq = torch.zeros(n, length, dtype=torch.long)
    for i in range(length):
        logits = model(seq[:, : i + 1], cond, ctx)[:, i]
        if greedy:
            nxt = logits.argmax(dim=-1)
        else:
            logits = logits / temperature
            if top_k is not None:
                kth = torch.topk(logits, top_k, dim=-1).values[:, -1:]
                logits = logits.masked_fill(logits < kth, float("-inf"))
            probs = torch.softmax(logits.double(), dim=-1)
            nxt = torch.multinomial(probs, 1, generator=gen)[:, 0]
        seq[:, i] = nxt
    model.train(was)
    return seq


def gpt_train_step(model: ConditionalGPT, tokens: torch.Tensor, cond: Condition | None,
                   opt: T.Adam) -> dict:
    model.train()
    opt.zero_grad()
    loss = gpt_nll(model(tokens, cond), tokens)
    val = loss.item()
    if not math.isfinite(val):
        raise NonFiniteError(f"non-finite GPT loss {val}, step aborted")
    loss.backward()
    opt.step()
    return {"nll": val}
