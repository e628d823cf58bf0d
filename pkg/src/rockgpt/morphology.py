"""Geostatistical and topological descriptors of binary voxel volumes.

All functions take a :class:`~rockgpt.io.VoxelVolume` or a plain 0/1 array
(voxel edge length 1 in the latter case). Lengths are in voxels unless a
physical voxel size is attached.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DefinitionError, GeometryError
from .io import VoxelVolume

AXES = ("x", "y", "z")


def _unpack(v) -> tuple[np.ndarray, float]:
    if isinstance(v, VoxelVolume):
        return v.data, v.voxel_size
    arr = np.asarray(v)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise DefinitionError("volume values must be strictly binary")
    return arr.astype(np.uint8, copy=False), 1.0


def porosity(v) -> float:
    data, _ = _unpack(v)
    return float(data.mean())


@dataclass
class TwoPointCurve:
    axis: int
    lags: np.ndarray
    values: np.ndarray

    @property
    def label(self) -> str:
        return AXES[self.axis] if self.axis < 3 else str(self.axis)


def two_point_correlation(v, axis: int = 0, r_max: int | None = None) -> TwoPointCurve:
    """Normalized two-point correlation along one axis, non-periodic pairs only.

    ``R(r) = mean_pairs[(phi - F(x)) (phi - F(x + r e_axis))] / (phi - phi^2)``,
    accumulated for every lag at once through a zero-padded FFT
    autocorrelation of each line.
    """
    data, _ = _unpack(v)
    n = data.shape[axis]
    if r_max is None:
        r_max = n // 2
    if not 0 <= r_max < n:
        raise GeometryError(f"r_max={r_max} must be < axis extent {n}")
    phi = float(data.mean())
    var = phi - phi * phi
    if var <= 0:
        raise DefinitionError("two-point correlation undefined for porosity 0 or 1")
    g = np.moveaxis(phi - data.astype(np.float64), axis, -1)
    spec = np.fft.rfft(g, n=2 * n, axis=-1)
    ac = np.fft.irfft(spec * spec.conj(), n=2 * n, axis=-1)[..., : r_max + 1]
    sums = ac.reshape(-1, r_max + 1).sum(axis=0)
    lags = np.arange(r_max + 1)
    n_lines = data.size // n
    pairs = (n - lags) * n_lines
    vals = sums / pairs / var
    vals[0] = 1.0  # exact algebraic identity; FFT roundoff would leave ~1e-16
    return TwoPointCurve(axis, lags, vals)


@dataclass
class LengthFit:
    length: float
    sse: float
    at_lower_bound: bool


def _sse(lags, vals, lam):
    return float(np.sum((vals - np.exp(-lags / lam)) ** 2))


def fit_correlation_length(curve, lo: float = 0.05, tol: float = 1e-4, grid: int = 400) -> LengthFit:
    """Least-squares fit of ``exp(-r / lam)`` over ``lam`` in ``[lo, 10 * r_max]``.

    A fixed geometric grid locates the best bracket, then golden-section search
    narrows it to ``tol`` with an iteration count fixed by the bracket width.
    """
    if isinstance(curve, TwoPointCurve):
        lags, vals = curve.lags, curve.values
    else:
        lags, vals = curve
    lags = np.asarray(lags, dtype=np.float64)
    vals = np.asarray(vals, dtype=np.float64)
    if lags.size < 3 or lags[0] != 0:
        raise DefinitionError("need at least three lags starting at r = 0")
    hi = 10.0 * float(lags.max())
    cand = np.geomspace(lo, hi, grid)
    errs = np.array([_sse(lags, vals, c) for c in cand])
    i = int(np.argmin(errs))
    a, b = cand[max(i - 1, 0)], cand[min(i + 1, grid - 1)]
    invphi = (math.sqrt(5) - 1) / 2
    n_iter = max(0, math.ceil(math.log(tol / (b - a)) / math.log(invphi))) if b - a > tol else 0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = _sse(lags, vals, c), _sse(lags, vals, d)
    for _ in range(n_iter):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _sse(lags, vals, c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _sse(lags, vals, d)
    lam = 0.5 * (a + b)
    best = min((errs[i], cand[i]), (_sse(lags, vals, lam), lam))
    lam = float(best[1])
    return LengthFit(lam, float(best[0]), at_lower_bound=lam <= lo * (1 + 1e-9) or i == 0)


def specific_surface_area(v) -> float:
    """Pore/solid interface area per bulk volume, from internal voxel faces."""
    data, a = _unpack(v)
    if data.size == 0:
        return 0.0
    faces = sum(int(np.count_nonzero(np.diff(data.astype(np.int8), axis=ax))) for ax in range(3))
    return faces * a * a / (data.size * a ** 3)


def _any_window(P: np.ndarray, sizes) -> np.ndarray:
    out_shape = tuple(n - s + 1 for n, s in zip(P.shape, sizes))
    acc = np.zeros(out_shape, dtype=bool)
    for o0 in range(sizes[0]):
        for o1 in range(sizes[1]):
            for o2 in range(sizes[2]):
                acc |= P[o0:o0 + out_shape[0], o1:o1 + out_shape[1], o2:o2 + out_shape[2]]
    return acc


def cell_counts(v) -> tuple[int, int, int, int]:
    """Vertices, edges, faces and cubes of the closed cubical complex of pore voxels."""
    data, _ = _unpack(v)
    P = np.pad(data.astype(bool), 1)
    inner = (slice(1, -1),)
    n_v = int(_any_window(P, (2, 2, 2)).sum())
    n_e = 0
    n_f = 0
    for ax in range(3):
        # edges along ax: one voxel layer on ax, 2x2 neighbourhood transverse
        sl = [slice(None)] * 3
        sl[ax] = inner[0]
        sizes = [2, 2, 2]
        sizes[ax] = 1
        n_e += int(_any_window(P[tuple(sl)], sizes).sum())
        # faces normal to ax: two voxels across, one voxel layer transverse
        sl = [inner[0]] * 3
        sl[ax] = slice(None)
        sizes = [1, 1, 1]
        sizes[ax] = 2
        n_f += int(_any_window(P[tuple(sl)], sizes).sum())
    n_c = int(data.sum())
    return n_v, n_e, n_f, n_c


def euler_characteristic(v) -> int:
    """``V - E + F - C`` of the pore complex.

    Closed unit cubes share their boundary cells, so pore voxels touching at
    an edge or corner are joined; the solid phase is correspondingly
    6-connected.
    """
    n_v, n_e, n_f, n_c = cell_counts(v)
    return n_v - n_e + n_f - n_c


def euler_characteristic_density(v) -> float:
    data, a = _unpack(v)
    return euler_characteristic(data) / (data.size * a ** 3)


@dataclass
class MorphReport:
    id: str
    porosity: float
    curves: list[TwoPointCurve]
    lengths: list[float]
    specific_surface: float
    euler_density: float
    permeability_darcy: float | None = None
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("id", "phi", "lambda_x", "lambda_y", "lambda_z", "S_a", "chi_V", "k_darcy")

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "phi": self.porosity,
            "lambda": dict(zip(AXES, self.lengths)),
            "lambda_mean": self.mean_length,
            "S_a": self.specific_surface,
            "chi_V": self.euler_density,
            "k_darcy": self.permeability_darcy,
            "two_point": {c.label: {"r": c.lags.tolist(), "R": c.values.tolist()} for c in self.curves},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> list:
        k = "" if self.permeability_darcy is None else repr(self.permeability_darcy)
        return [self.id, repr(self.porosity), *map(repr, self.lengths),
                repr(self.specific_surface), repr(self.euler_density), k]


def reports_to_csv(reports: list[MorphReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MorphReport.CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def morph_report(v, id: str = "volume", r_max: int | None = None,
                 permeability_darcy: float | None = None) -> MorphReport:
    data, a = _unpack(v)
    curves = [two_point_correlation(data, ax, r_max if r_max is not None else data.shape[ax] // 2)
              for ax in range(3)]
    fits = [fit_correlation_length(c) for c in curves]
    meta = {
        "voxel_size_um": a,
        "lambda_mean": "arithmetic mean of the three per-axis fits",
        "euler": "closed cubical complex of pore voxels; chi_V = chi / bulk volume. "
                 "For a closed interface, the integrated Gaussian curvature equals 2*pi*chi(surface) "
                 "= 4*pi*chi(pore body).",
        "lambda_at_lower_bound": [f.at_lower_bound for f in fits],
    }
    return MorphReport(id, float(data.mean()), curves, [f.length for f in fits],
                       specific_surface_area(v), euler_characteristic_density(v),
                       permeability_darcy, meta)
