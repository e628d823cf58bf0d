"""Synthetic porous media from thresholded, smoothed Gaussian noise.

Random numbers come from NumPy's ``PCG64`` bit generator
(``numpy.random.Generator(PCG64(seed)).standard_normal``). Smoothing is a
separable Gaussian kernel truncated at 4 sigma and renormalized, applied with
periodic wrap-around, so generated volumes tile seamlessly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ConfigurationError, GeometryError
from .io import VoxelVolume, write_rvox

RNG_NAME = "PCG64"


@dataclass
class SynthSpec:
    shape: tuple[int, int, int] = (32, 16, 16)
    sigma: tuple[float, float, float] = (1.0, 1.0, 1.0)
    porosity: float = 0.3
    seed: int = 0
    label: int = 0
    voxel_size: float = 1.0

    def __post_init__(self):
        if np.isscalar(self.sigma):
            self.sigma = (float(self.sigma),) * 3
        self.sigma = tuple(float(s) for s in self.sigma)
        self.shape = tuple(int(s) for s in self.shape)
        if min(self.sigma) <= 0:
            raise ConfigurationError("sigma must be > 0 on every axis")
        if not 0 < self.porosity < 1:
            raise ConfigurationError("target porosity must lie in (0, 1)")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(4 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_field(spec: SynthSpec) -> np.ndarray:
    """Standardized (zero mean, unit variance) smoothed white noise."""
    for n, s in zip(spec.shape, spec.sigma):
        if n < 4 * s:
            raise GeometryError(f"extent {n} < 4*sigma = {4 * s}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    f = rng.standard_normal(spec.shape)
    for axis, s in enumerate(spec.sigma):
        f = convolve1d(f, gaussian_kernel(s), axis=axis, mode="wrap")
    return (f - f.mean()) / f.std()


def threshold_to_porosity(field: np.ndarray, porosity: float) -> np.ndarray:
    """Mark the ``round(porosity * N)`` largest values as pore.

    Ties are broken in raster order (earlier voxel wins), so the achieved
    porosity is exactly ``round(porosity * N) / N``.
    """
    if not 0 < porosity < 1:
        raise ConfigurationError("target porosity must lie in (0, 1)")
    flat = np.asarray(field, dtype=np.float64).ravel()
    n_pore = int(math.floor(porosity * flat.size + 0.5))
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size, dtype=np.uint8)
    out[order[:n_pore]] = 1
    return out.reshape(np.shape(field))


def make_volume(spec: SynthSpec) -> VoxelVolume:
    return VoxelVolume(threshold_to_porosity(gaussian_field(spec), spec.porosity), spec.voxel_size)


@dataclass
class ClassSpec:
    """One rock class of a synthetic dataset."""

    name: str
    sigma: float | tuple[float, float, float]
    count: int
    porosity_range: tuple[float, float] = (0.15, 0.40)
    shape: tuple[int, int, int] = (32, 16, 16)
    voxel_size: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        d = dict(d)
        for key in ("porosity_range", "shape"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("sigma"), list):
            d["sigma"] = tuple(d["sigma"])
        return cls(**d)


def volume_seed(seed: int, class_index: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, class_index, item]).generate_state(1, np.uint64)[0])


def make_dataset(classes: list[ClassSpec], seed: int, out_dir, l: int = 8, stride: int = 4,
                 split_seed: int | None = None, test_fraction: float = 0.0) -> dict:
    """Write one ``.rvox`` per volume plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, cls in enumerate(classes):
        rng = np.random.Generator(np.random.PCG64(volume_seed(seed, ci, 1 << 30)))
        lo, hi = cls.porosity_range
        for j in range(cls.count):
            phi = float(rng.uniform(lo, hi))
            spec = SynthSpec(cls.shape, cls.sigma, phi, volume_seed(seed, ci, j), ci, cls.voxel_size)
            vol = make_volume(spec)
            name = f"{cls.name}_{j:04d}.rvox"
            write_rvox(out / name, vol)
            entries.append({
                "path": name,
                "label": ci,
                "porosity": float(vol.data.mean()),
                "target_porosity": phi,
                "sigma": list(spec.sigma),
            })
    manifest = {
        "version": 1,
        "rng": RNG_NAME,
        "seed": seed,
        "classes": [c.name for c in classes],
        "volumes": entries,
        "split_seed": seed if split_seed is None else split_seed,
        "test_fraction": test_fraction,
        "extraction": {"l": l, "stride": stride},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
