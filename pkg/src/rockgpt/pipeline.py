"""Dataset extraction, two-stage training, generation by slice stacking, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor as T
from .cgpt import Condition, ConditionalGPT, GptConfig, gpt_nll, gpt_train_step, sample_tokens
from .errors import ConfigurationError, DependencyError, ExtractionError, FormatError, NonFiniteError
from .io import VoxelVolume, file_sha256, read_checkpoint, read_rvox, write_checkpoint
from .vqvae import VQVAE, VqVaeConfig, vqvae_train_step

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# extraction and datasets
# --------------------------------------------------------------------------

def extract_sequences(volume, l: int = 8, stride: int = 4) -> list[np.ndarray]:
    """Windows of ``l`` consecutive slices along the first axis, starting every ``stride``."""
    data = volume.data if isinstance(volume, VoxelVolume) else np.asarray(volume)
    if stride < 1 or l < 1:
        raise ExtractionError("l and stride must be >= 1")
    d = data.shape[0]
    if d < l:
        raise ExtractionError(f"first-axis extent {d} < sequence length {l}")
    return [data[s:s + l] for s in range(0, d - l + 1, stride)]


def load_manifest(path) -> dict:
    path = Path(path)
    man = json.loads(path.read_text())
    n_cls = len(man["classes"])
    for e in man["volumes"]:
        if not 0 <= e["label"] < n_cls:
            raise ConfigurationError(f"label {e['label']} of {e['path']} outside declared classes")
        if not (path.parent / e["path"]).exists():
            raise ConfigurationError(f"volume {e['path']} not found next to the manifest")
    if man["extraction"]["l"] < 2:
        raise ConfigurationError("sequence length l must be >= 2")
    man["_root"] = str(path.parent.resolve())
    return man


@dataclass
class SequenceSet:
    """Extracted slice sequences with per-sequence class label and porosity."""

    x: np.ndarray          # (N, l, H, W) uint8
    labels: np.ndarray     # (N,)
    porosity: np.ndarray   # (N,) porosity of each whole sequence
    volume_index: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "SequenceSet":
        return SequenceSet(self.x[idx], self.labels[idx], self.porosity[idx], self.volume_index[idx], self.n_classes)

    def batch(self, idx):
        x = torch.from_numpy(self.x[idx].astype(np.float32))[:, None]
        cond = Condition.make(x[:, 0, 0], self.labels[idx], self.porosity[idx], self.n_classes)
        return x, cond


def build_sequences(manifest: dict, split: str = "train") -> SequenceSet:
    """Extract every window of every volume; ``split`` selects held-out volumes by the manifest's split seed."""
    ex = manifest["extraction"]
    vols = manifest["volumes"]
    frac = float(manifest.get("test_fraction", 0.0))
    rng = np.random.Generator(np.random.PCG64(manifest.get("split_seed", 0)))
    order = rng.permutation(len(vols))
    n_test = int(round(frac * len(vols)))
    test = set(order[:n_test].tolist())
    keep = [i for i in range(len(vols)) if (i in test) == (split == "test")] if split != "all" else range(len(vols))
    xs, labels, por, vidx = [], [], [], []
    root = Path(manifest["_root"])
    for i in keep:
        e = vols[i]
        vol = read_rvox(root / e["path"])
        for seq in extract_sequences(vol, ex["l"], ex["stride"]):
            xs.append(seq)
            labels.append(e["label"])
            por.append(float(seq.mean()))
            vidx.append(i)
    if not xs:
        return SequenceSet(np.zeros((0, ex["l"], 1, 1), np.uint8), np.zeros(0, int), np.zeros(0), np.zeros(0, int),
                           len(manifest["classes"]))
    return SequenceSet(np.stack(xs), np.array(labels), np.array(por), np.array(vidx), len(manifest["classes"]))


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch drawn at ``step``; a pure function of (seed, step) so resumed runs continue identically."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, step])))
    return rng.choice(n, size=min(batch_size, n), replace=False)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    sha256: str | None = None
    path: Path | None = None

    def module_state(self, prefix: str = "model.") -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def adam_state(self) -> T.AdamState | None:
        a = self.meta.get("adam")
        if a is None:
            return None
        st = T.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        n = a["n_params"]
        st.m = [self.tensors[f"adam.m.{i}"].clone() for i in range(n)]
        st.v = [self.tensors[f"adam.v.{i}"].clone() for i in range(n)]
        return st


def _pack(stage, config, model: torch.nn.Module, adam: T.AdamState | None, meta: dict) -> tuple[dict, dict]:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta, stage=stage, config=config, format="RGPT0001")
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                        "step": adam.step, "n_params": len(adam.m)}
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            tensors[f"adam.m.{i}"] = m
            tensors[f"adam.v.{i}"] = v
    tensors["rng.torch"] = torch.get_rng_state().to(torch.float32)
    return meta, tensors


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    meta = dict(ckpt.meta, stage=ckpt.stage, config=ckpt.config)
    ckpt.sha256 = write_checkpoint(path, meta, ckpt.tensors)
    ckpt.path = Path(path)
    return ckpt.sha256


def load_checkpoint(path, stage1_path=None) -> Checkpoint:
    """Read and verify a checkpoint.

    Stage-2 checkpoints must find their stage-1 parent (``stage1_path`` or the
    recorded path, resolved next to the file) with a matching SHA-256.
    """
    path = Path(path)
    meta, tensors, digest = read_checkpoint(path)
    stage = meta.get("stage")
    if stage not in ("vqvae", "cgpt"):
        raise FormatError(f"unknown checkpoint stage {stage!r}")
    ck = Checkpoint(stage, meta["config"], tensors, meta, digest, path)
    if stage == "cgpt":
        ref = meta.get("stage1")
        if not ref:
            raise DependencyError("stage-2 checkpoint lacks a stage-1 reference")
        cand = [Path(stage1_path)] if stage1_path else [path.parent / ref["path"], Path(ref["path"])]
        found = next((c for c in cand if c.exists()), None)
        if found is None:
            raise DependencyError(f"stage-1 checkpoint {ref['path']} not found")
        if file_sha256(found) != ref["sha256"]:
            raise DependencyError(f"stage-1 checkpoint {found} does not match recorded hash")
        ck.meta["_stage1_resolved"] = str(found)
    return ck


def _rel(target: Path, base_dir: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(base_dir).resolve())


def vqvae_from_checkpoint(ck: Checkpoint) -> VQVAE:
    model = VQVAE(VqVaeConfig(**ck.config))
    model.load_state_dict(_cast_state(model, ck.module_state()))
    model.eval()
    return model


def gpt_from_checkpoint(ck: Checkpoint) -> ConditionalGPT:
    model = ConditionalGPT(GptConfig(**ck.config))
    model.load_state_dict(_cast_state(model, ck.module_state()))
    model.eval()
    return model


def _cast_state(model, state):
    ref = model.state_dict()
    return {k: v.to(ref[k].dtype) for k, v in state.items()}


def _restore_rng(ck: Checkpoint) -> None:
    if "rng.torch" in ck.tensors:
        torch.set_rng_state(ck.tensors["rng.torch"].to(torch.uint8))


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def train_stage1(manifest_path, cfg: VqVaeConfig | None = None, iterations: int = 2000,
                 batch_size: int = 8, lr: float = 3e-4, seed: int = 0, out_path=None,
                 resume: Checkpoint | str | None = None, log_every: int = 100,
                 data: SequenceSet | None = None) -> Checkpoint:
    """Train the VQ-VAE; ``iterations`` is the total step count (resumed steps included)."""
    manifest = load_manifest(manifest_path)
    data = data if data is not None else build_sequences(manifest, "train")
    if len(data) == 0:
        raise ConfigurationError("no training sequences")
    T.set_deterministic(True)
    if resume is not None:
        ck = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        model = VQVAE(VqVaeConfig(**ck.config))
        model.load_state_dict(_cast_state(model, ck.module_state()))
        opt = T.Adam(model.parameters(), lr=lr)
        opt.state = ck.adam_state()
        history = list(ck.meta.get("history", []))
        seed = ck.meta["seed"]
        _restore_rng(ck)
    else:
        torch.manual_seed(seed)
        model = VQVAE(cfg or VqVaeConfig())
        opt = T.Adam(model.parameters(), lr=lr)
        history = []

    def snapshot():
        meta, tensors = _pack("vqvae", model.cfg.to_dict(), model, opt.state, {
            "seed": seed, "history": list(history), "manifest": str(Path(manifest_path).resolve()),
            "sequence_shape": list(data.x.shape[1:]), "batch_size": batch_size,
        })
        return Checkpoint("vqvae", model.cfg.to_dict(), tensors, meta)

    last_good = snapshot()
    start = opt.state.step
    for step in range(start, iterations):
        idx = batch_indices(seed, step, len(data), batch_size)
        x, _ = data.batch(idx)
        try:
            rec = vqvae_train_step(model, x, opt)
        except NonFiniteError:
            if out_path is not None:
                save_checkpoint(out_path, last_good)
            raise
        history.append(rec["loss"])
        if log_every and (step + 1) % log_every == 0:
            log.info("vqvae step %d %s", step + 1, rec)
            last_good = snapshot()
    ck = snapshot()
    model.eval()
    if out_path is not None:
        save_checkpoint(out_path, ck)
    return ck


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

@torch.no_grad()
def encode_dataset(vq: VQVAE, data: SequenceSet, batch_size: int = 32) -> torch.Tensor:
    """Raster-flattened code sequences ``(N, t*h*w)`` from the frozen VQ-VAE."""
    vq.eval()
    out = []
    for s in range(0, len(data), batch_size):
        x, _ = data.batch(np.arange(s, min(s + batch_size, len(data))))
        out.append(vq.codes(x).flatten(1))
    return torch.cat(out)


def train_stage2(manifest_path, stage1_path, cfg: GptConfig | None = None, iterations: int = 2000,
                 batch_size: int = 8, lr: float = 3e-4, seed: int = 0, out_path=None,
                 resume: Checkpoint | str | None = None, log_every: int = 100,
                 data: SequenceSet | None = None) -> Checkpoint:
    """Train the conditional GPT on codes of the frozen stage-1 model."""
    stage1 = load_checkpoint(stage1_path)
    if stage1.stage != "vqvae":
        raise ConfigurationError("stage1_path is not a VQ-VAE checkpoint")
    vq = vqvae_from_checkpoint(stage1)
    manifest = load_manifest(manifest_path)
    data = data if data is not None else build_sequences(manifest, "train")
    l, h, w = data.x.shape[1:]
    n_tok = math.prod(vq.latent_shape(l, h, w))
    T.set_deterministic(True)

    if resume is not None:
        ck = load_checkpoint(resume, stage1_path) if not isinstance(resume, Checkpoint) else resume
        cfg = GptConfig(**ck.config)
    cfg = cfg or GptConfig(K=vq.cfg.K, D=vq.cfg.D, max_len=n_tok, n_classes=data.n_classes, slice_shape=(h, w))
    if cfg.K != vq.cfg.K or cfg.D != vq.cfg.D:
        raise ConfigurationError(f"GPT vocabulary (K={cfg.K}, D={cfg.D}) does not match "
                                 f"VQ-VAE codebook (K={vq.cfg.K}, D={vq.cfg.D})")
    if n_tok > cfg.max_len:
        raise ConfigurationError(f"{n_tok} tokens per sequence exceed max_len {cfg.max_len}")
    if tuple(cfg.slice_shape) != (h, w):
        raise ConfigurationError(f"slice shape {cfg.slice_shape} != data slices {(h, w)}")

    codes = encode_dataset(vq, data)
    if resume is not None:
        model = ConditionalGPT(cfg)
        model.load_state_dict(_cast_state(model, ck.module_state()))
        opt = T.Adam(model.parameters(), lr=lr)
        opt.state = ck.adam_state()
        history = list(ck.meta.get("history", []))
        seed = ck.meta["seed"]
        _restore_rng(ck)
    else:
        torch.manual_seed(seed)
        model = ConditionalGPT(cfg, vq.codebook.detach())
        opt = T.Adam(model.parameters(), lr=lr)
        history = []

    out_dir = Path(out_path).parent if out_path is not None else Path(stage1.path).parent

    def snapshot():
        meta, tensors = _pack("cgpt", cfg.to_dict(), model, opt.state, {
            "seed": seed, "history": list(history), "manifest": str(Path(manifest_path).resolve()),
            "sequence_shape": [int(l), int(h), int(w)], "batch_size": batch_size,
            "stage1": {"path": _rel(stage1.path, out_dir), "sha256": stage1.sha256},
        })
        return Checkpoint("cgpt", cfg.to_dict(), tensors, meta)

    last_good = snapshot()
    for step in range(opt.state.step, iterations):
        idx = batch_indices(seed, step, len(data), batch_size)
        _, cond = data.batch(idx)
        try:
            rec = gpt_train_step(model, codes[idx], cond, opt)
        except NonFiniteError:
            if out_path is not None:
                save_checkpoint(out_path, last_good)
            raise
        history.append(rec["nll"])
        if log_every and (step + 1) % log_every == 0:
            log.info("gpt step %d nll %.4f", step + 1, rec["nll"])
            last_good = snapshot()
    ck = snapshot()
    model.eval()
    if out_path is not None:
        save_checkpoint(out_path, ck)
    return ck


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

@dataclass
class RockGPT:
    """A frozen stage-1/stage-2 pair ready for sampling."""

    vq: VQVAE
    gpt: ConditionalGPT
    sequence_shape: tuple[int, int, int]
    voxel_size: float = 1.0

    @classmethod
    def load(cls, stage2_path, stage1_path=None) -> "RockGPT":
        ck2 = load_checkpoint(stage2_path, stage1_path)
        ck1 = load_checkpoint(ck2.meta["_stage1_resolved"])
        return cls(vqvae_from_checkpoint(ck1), gpt_from_checkpoint(ck2), tuple(ck2.meta["sequence_shape"]))

    @classmethod
    def from_checkpoints(cls, ck1: Checkpoint, ck2: Checkpoint) -> "RockGPT":
        return cls(vqvae_from_checkpoint(ck1), gpt_from_checkpoint(ck2), tuple(ck2.meta["sequence_shape"]))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.vq.latent_shape(*self.sequence_shape)

    def condition(self, slices, label, porosity) -> Condition:
        return Condition.make(torch.as_tensor(np.asarray(slices), dtype=torch.float32), label, porosity,
                              self.gpt.cfg.n_classes)

    @torch.no_grad()
    def generate_chunk(self, cond: Condition, seed: int = 0, temperature: float = 1.0,
                       greedy: bool = False, top_k: int | None = None) -> np.ndarray:
        """One ``(n, l, H, W)`` binary chunk; slice 0 is the conditioning slice itself."""
        self.vq.eval()
        t, h, w = self.latent_shape
        tok = sample_tokens(self.gpt, cond, t * h * w, temperature, greedy, top_k, seed)
        probs = self.vq.decode_codes(tok.view(-1, t, h, w))[:, 0]
        chunk = (probs >= 0.5).to(torch.uint8).numpy()
        chunk[:, 0] = cond.slices.round().to(torch.uint8).numpy()
        return chunk

    def stack_volume(self, initial_slices, n_iters: int, label, porosity, seed: int = 0,
                     temperature: float = 1.0, greedy: bool = False, top_k: int | None = None) -> np.ndarray:
        """Chain ``n_iters`` chunks, each conditioned on the previous chunk's last slice.

        Returns ``(n, l + (n_iters - 1) * (l - 1), H, W)``; class and porosity
        labels stay fixed across iterations.
        """
        if n_iters < 1:
            raise ConfigurationError("n_iters must be >= 1")
        slices = np.asarray(initial_slices, dtype=np.uint8)
        single = slices.ndim == 2
        if single:
            slices = slices[None]
        parts = []
        for it in range(n_iters):
            cond = self.condition(slices, label, porosity)
            sub_seed = int(np.random.SeedSequence([seed, it]).generate_state(1)[0])
            chunk = self.generate_chunk(cond, sub_seed, temperature, greedy, top_k)
            parts.append(chunk if it == 0 else chunk[:, 1:])
            slices = chunk[:, -1]
        vol = np.concatenate(parts, axis=1)
        return vol[0] if single else vol


def stacked_length(l: int, n_iters: int) -> int:
    return l + (n_iters - 1) * (l - 1)
