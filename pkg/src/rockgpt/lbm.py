"""Single-phase D3Q19 BGK lattice Boltzmann solver for absolute permeability.

Scheme:

* BGK collision with relaxation time ``tau`` (kinematic viscosity ``(tau - 1/2) / 3``).
* Constant body acceleration ``g`` applied by shifting the equilibrium
  velocity, ``u_eq = u + tau * g``; the reported fluid velocity is
  ``u + g / 2``.
* Half-way bounce-back on every fluid-solid link; solid nodes hold no mass.
* Periodic wrap-around on all domain faces, including the flow axis.

Permeability follows Darcy's law with the superficial velocity (average over
all nodes, solids counted as zero): ``k = nu * <u_axis> / g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConvergenceError, DivergenceError, StabilityError
from .io import VoxelVolume

DARCY_M2 = 9.869233e-13

C = np.array(
    [(0, 0, 0),
     (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
     (1, 1, 0), (-1, -1, 0), (1, -1, 0), (-1, 1, 0),
     (1, 0, 1), (-1, 0, -1), (1, 0, -1), (-1, 0, 1),
     (0, 1, 1), (0, -1, -1), (0, 1, -1), (0, -1, 1)],
    dtype=np.int64,
)
W = np.array([1 / 3] + [1 / 18] * 6 + [1 / 36] * 12)
OPP = np.array([int(np.flatnonzero((C == -c).all(axis=1))[0]) for c in C])


def equilibrium(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``rho`` is ``(X, Y, Z)``, ``u`` is ``(3, X, Y, Z)``; returns ``(19, X, Y, Z)``."""
    cu = np.tensordot(C.astype(rho.dtype), u, axes=(1, 0))
    usq = (u * u).sum(axis=0)
    return W[:, None, None, None] * rho * (1 + 3 * cu + 4.5 * cu * cu - 1.5 * usq)


class Lattice:
    """Mutable lattice state; :meth:`step` advances one collide-stream cycle."""

    def __init__(self, solid: np.ndarray, tau: float = 1.0, g=(1e-5, 0.0, 0.0),
                 perturbation: float = 0.0, seed: int = 0, dtype=np.float64):
        if not tau > 0.5:
            raise StabilityError(f"BGK requires tau > 0.5, got {tau}")
        self.solid = np.asarray(solid, dtype=bool)
        self.fluid = ~self.solid
        self.tau = float(tau)
        self.g = np.asarray(g, dtype=dtype).reshape(3)
        self.steps = 0
        rho = np.ones(self.solid.shape, dtype=dtype)
        if perturbation:
            rng = np.random.default_rng(seed)
            rho = rho + perturbation * rng.standard_normal(rho.shape)
        f = equilibrium(rho, np.zeros((3, *rho.shape), dtype=dtype))
        f[:, self.solid] = 0.0
        self.f = f
        # incoming direction i at x is blocked when x - c_i is solid
        self._blocked = [np.roll(self.solid, tuple(C[i]), axis=(0, 1, 2)) & self.fluid for i in range(19)]

    @property
    def nu(self) -> float:
        return (self.tau - 0.5) / 3.0

    def density(self) -> np.ndarray:
        return self.f.sum(axis=0)

    def mass(self) -> float:
        return float(self.f[:, self.fluid].sum())

    def velocity(self) -> np.ndarray:
        """Fluid velocity ``(3, X, Y, Z)``; zero at solid nodes."""
        rho = self.density()
        mom = np.tensordot(C.T.astype(self.f.dtype), self.f, axes=(1, 0))
        u = np.zeros_like(mom)
        fl = self.fluid
        u[:, fl] = mom[:, fl] / rho[fl] + 0.5 * self.g[:, None]
        return u

    def step(self) -> None:
        f = self.f
        rho = f.sum(axis=0)
        safe = np.where(self.fluid, rho, 1.0)
        mom = np.tensordot(C.T.astype(f.dtype), f, axes=(1, 0))
        u_eq = mom / safe + self.tau * self.g[:, None, None, None]
        post = f - (f - equilibrium(rho, u_eq)) / self.tau
        post[:, self.solid] = 0.0
        new = np.empty_like(post)
        for i in range(19):
            new[i] = np.roll(post[i], tuple(C[i]), axis=(0, 1, 2))
            b = self._blocked[i]
            new[i][b] = post[OPP[i]][b]
        new[:, self.solid] = 0.0
        self.f = new
        self.steps += 1


@dataclass
class LbmState:
    lattice: Lattice
    velocity: np.ndarray
    converged: bool
    status: str
    history: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.lattice.steps


def winding_axes(fluid: np.ndarray) -> tuple[bool, bool, bool]:
    """Whether some fluid cluster wraps all the way around each periodic axis.

    Clusters are joined along the 18 lattice links. Components are first
    labelled without wrap-around; links that cross a domain face then join
    components with an integer cell offset. A cluster winds along an axis when
    two routes reach the same component with different offsets along it.
    """
    fluid = np.asarray(fluid, dtype=bool)
    labels, n = ndimage.label(fluid, structure=ndimage.generate_binary_structure(3, 2))
    if n == 0:
        return (False, False, False)
    shape = np.array(fluid.shape)
    adj: dict[int, list[tuple[int, tuple[int, int, int]]]] = {}
    idx = np.indices(fluid.shape).reshape(3, -1)
    src_lab = labels.reshape(-1)
    for c in C[1:]:
        tgt = idx + c[:, None]
        wrap = np.floor_divide(tgt, shape[:, None])
        cross = wrap.any(axis=0) & (src_lab > 0)
        if not cross.any():
            continue
        t = np.mod(tgt[:, cross], shape[:, None])
        dst = labels[t[0], t[1], t[2]]
        ok = dst > 0
        for a, b, w in zip(src_lab[cross][ok], dst[ok], wrap[:, cross][:, ok].T):
            adj.setdefault(int(a), []).append((int(b), tuple(int(x) for x in w)))
    winds = [False, False, False]
    offset: dict[int, np.ndarray] = {}
    for start in range(1, n + 1):
        if start in offset:
            continue
        offset[start] = np.zeros(3, dtype=np.int64)
        stack = [start]
        while stack:
            a = stack.pop()
            for b, w in adj.get(a, ()):
                want = offset[a] + w
                if b not in offset:
                    offset[b] = want
                    stack.append(b)
                else:
                    for ax in np.flatnonzero(offset[b] != want):
                        winds[ax] = True
    return tuple(winds)


def _has_walls(solid: np.ndarray) -> bool:
    fluid = ~solid
    return any((np.roll(solid, tuple(C[i]), axis=(0, 1, 2)) & fluid).any() for i in range(1, 19))


def lbm_run(v, tau: float = 1.0, g: float = 1e-5, axis: int = 0, tol: float = 1e-6,
            max_steps: int = 50_000, window: int = 100, perturbation: float = 0.0,
            seed: int = 0) -> LbmState:
    """Drive flow along ``axis`` until the mean axial velocity settles.

    Converged when the relative change of the domain-mean axial velocity over
    ``window`` steps drops below ``tol``. A domain without any fluid-solid link
    has no momentum sink; it is returned immediately with status
    ``"unbounded"`` and ``converged=False``. When no fluid cluster winds around
    the flow axis the steady flux is zero; the run is skipped with status
    ``"no percolation"`` and a zero velocity field.
    """
    data = v.data if isinstance(v, VoxelVolume) else np.asarray(v)
    solid = data == 0
    gvec = np.zeros(3)
    gvec[axis] = g
    lat = Lattice(solid, tau, gvec, perturbation, seed)
    if not lat.fluid.any():
        return LbmState(lat, np.zeros((3, *solid.shape)), True, "no fluid")
    if g != 0 and not _has_walls(solid):
        return LbmState(lat, lat.velocity(), False, "unbounded")
    if not winding_axes(lat.fluid)[axis]:
        return LbmState(lat, np.zeros((3, *solid.shape)), True, "no percolation")

    history: list[float] = []
    prev = None
    while lat.steps < max_steps:
        for _ in range(window):
            lat.step()
        u = lat.velocity()
        mean = float(u[axis].mean())
        if not np.isfinite(mean):
            raise DivergenceError(f"non-finite velocity after {lat.steps} steps")
        history.append(mean)
        if prev is not None:
            if mean == prev or (mean != 0 and abs(mean - prev) / abs(mean) < tol):
                return LbmState(lat, u, True, "converged", history)
        prev = mean
    return LbmState(lat, lat.velocity(), False, "max_steps", history)


@dataclass
class PermeabilityResult:
    mean_velocity: float
    k_lattice: float
    k_darcy: float
    converged: bool
    steps: int
    history: list[float]

    def to_dict(self) -> dict:
        return {
            "mean_velocity": self.mean_velocity,
            "k_lattice": self.k_lattice,
            "k_darcy": self.k_darcy,
            "converged": self.converged,
            "steps": self.steps,
            "history": self.history,
        }


def permeability(state: LbmState, voxel_size_um: float = 1.0, axis: int = 0,
                 override: bool = False) -> PermeabilityResult:
    """Darcy permeability from a finished run, in lattice units and in Darcy."""
    if not state.converged and not override:
        raise ConvergenceError(
            f"run not converged (status={state.status}, steps={state.steps}, "
            f"last velocities={state.history[-3:]})")
    lat = state.lattice
    g = float(lat.g[axis])
    u_mean = float(state.velocity[axis].mean())
    k_lat = lat.nu * u_mean / g if g else 0.0
    if not lat.fluid.any():
        k_lat = 0.0
    dx = voxel_size_um * 1e-6
    return PermeabilityResult(u_mean, k_lat, k_lat * dx * dx / DARCY_M2, state.converged,
                              state.steps, list(state.history))
