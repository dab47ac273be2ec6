"""Charge density, free-space Newtonian potential and electric field on a node grid.

The potential is ``psi(x) = int rho(y) / |x - y| dy`` (so ``-lap psi = 4 pi rho``
and ``psi -> 0`` at infinity). It is discretized as a node-to-node sum with
kernel ``1/|r|``; the self term uses the mean of ``1/|r|`` over one grid cell.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import _kernels as _k
from .phase_space import ParticleEnsemble

# Mean of 1/|r| over the unit cube centred at the origin:
#   8 * (1/2)^2 * int_{[0,1]^3} dV/|r|,  int_{[0,1]^3} dV/|r| = 3 ln(1+sqrt3) - (3/2) ln 2 - pi/4.
# Cross-checked against adaptive cubature in tests/test_poisson.py.
CUBE_MEAN_INV_DIST = 2.0 * (3.0 * np.log(1.0 + np.sqrt(3.0)) - 1.5 * np.log(2.0) - np.pi / 4.0)


class ParticleEscapeError(RuntimeError):
    """A marker or query point left the grid box."""

    def __init__(self, index, position, spec):
        self.index = index
        self.position = np.asarray(position)
        super().__init__(
            f"point {index} at {np.array2string(self.position, precision=4)} is "
            f"outside the grid box of half extent {spec.L} around {spec.center}"
        )


@dataclass(frozen=True)
class GridSpec:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    L: float = 1.0
    n: int = 32

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid needs at least 8 points per axis")
        if not self.L > 0:
            raise ValueError("half extent must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def spacing(self) -> float:
        return 2.0 * self.L / (self.n - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - self.L

    def axis(self, i: int) -> np.ndarray:
        return self.center[i] + np.linspace(-self.L, self.L, self.n)

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n, n, n, 3)``."""
        return np.stack(np.meshgrid(*(self.axis(i) for i in range(3)), indexing="ij"), axis=-1)

    def covers(self, radius: float, margin: float = 0.2) -> bool:
        """Whether the box contains the ball ``B_radius(0)`` with relative margin."""
        c = np.abs(np.asarray(self.center))
        return bool(np.all(c + radius * (1 + margin) <= self.L))


@dataclass
class GridField:
    spec: GridSpec
    data: np.ndarray
    name: str = ""

    @property
    def is_vector(self) -> bool:
        return self.data.ndim == 4


def _cell_coords(spec: GridSpec, x: np.ndarray, check=True):
    """Lower cell corner and fractional offset of every point."""
    x = np.ascontiguousarray(x, dtype=float)
    idx, frac, bad = _k.cell_index(x, spec.lower, spec.spacing, spec.n)
    if check and bad >= 0:
        raise ParticleEscapeError(bad, x[bad], spec)
    return idx, frac


def deposit_charge(ens: ParticleEnsemble, spec: GridSpec) -> GridField:
    """Cloud-in-cell deposition of ``values * weight`` divided by the cell volume."""
    return deposit_points(ens.x, ens.values * ens.weight, spec)


def deposit_points(x: np.ndarray, q: np.ndarray, spec: GridSpec) -> GridField:
    """CIC deposition of point charges ``q`` at positions ``x`` (shape ``(N, 3)``)."""
    n = spec.n
    if len(q) == 0:
        return GridField(spec, np.zeros((n, n, n)), "rho")
    idx, frac = _cell_coords(spec, x)
    rho = _k.cic_deposit(idx, frac, np.asarray(q, dtype=float), n)
    return GridField(spec, rho.reshape(n, n, n) / spec.cell_volume, "rho")


@functools.lru_cache(maxsize=4)
def _kernel(n: int, h: float) -> np.ndarray:
    """``G`` at node offsets ``-(n-1)..(n-1)`` per axis, already scaled by ``h^3``."""
    k = np.arange(-(n - 1), n)
    r = h * np.sqrt(k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2)
    with np.errstate(divide="ignore"):
        g = 1.0 / r
    g[n - 1, n - 1, n - 1] = CUBE_MEAN_INV_DIST / h
    g *= h**3
    g.flags.writeable = False
    return g


@functools.lru_cache(maxsize=4)
def _kernel_hat(n: int, h: float) -> np.ndarray:
    m = 2 * n
    g = _kernel(n, h)
    pad = np.zeros((m, m, m))
    # circular layout: offset d sits at index d mod m
    idx = np.arange(-(n - 1), n) % m
    pad[np.ix_(idx, idx, idx)] = g
    out = sfft.rfftn(pad)
    out.flags.writeable = False
    return out


def _potential_direct(rho: np.ndarray, h: float, chunk: int = 256) -> np.ndarray:
    n = rho.shape[0]
    idx = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    src = np.flatnonzero(rho.ravel())
    q = rho.ravel()[src]
    out = np.zeros(n**3)
    if len(src) == 0:
        return out.reshape(rho.shape)
    s_idx = idx[src]
    for a in range(0, n**3, chunk):
        d = idx[a:a + chunk, None, :] - s_idx[None, :, :]
        r = h * np.sqrt(np.einsum("ijk,ijk->ij", d, d).astype(float))
        with np.errstate(divide="ignore"):
            g = 1.0 / r
        g[r == 0] = CUBE_MEAN_INV_DIST / h
        out[a:a + chunk] = g @ q
    return out.reshape(rho.shape) * h**3


def _potential_fft(rho: np.ndarray, h: float) -> np.ndarray:
    # axis-by-axis transforms skip the all-zero padding half
    n = rho.shape[0]
    m = 2 * n
    a = sfft.rfft(rho, n=m, axis=2)
    a = sfft.fft(a, n=m, axis=1)
    a = sfft.fft(a, n=m, axis=0)
    a *= _kernel_hat(n, h)
    a = sfft.ifft(a, axis=0)[:n]
    a = sfft.ifft(a, axis=1)[:, :n]
    return np.ascontiguousarray(sfft.irfft(a, n=m, axis=2)[:, :, :n])


def solve_potential(rho: GridField, method: str = "fft") -> GridField:
    """Free-space potential ``psi = sum_j G(x_i - x_j) rho_j h^3``.

    ``method="direct"`` sums node pairs explicitly (reference path, O(n^6));
    ``method="fft"`` evaluates the same discrete convolution through a
    zero-padded FFT.
    """
    data = np.asarray(rho.data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("charge density contains non-finite values")
    h = rho.spec.spacing
    if method == "direct":
        psi = _potential_direct(data, h)
    elif method == "fft":
        psi = _potential_fft(data, h)
    else:
        raise ValueError(f"unknown Poisson method {method!r}")
    return GridField(rho.spec, psi, "psi")


def electric_field(psi: GridField) -> GridField:
    """``E = -grad psi``: central differences inside, one-sided on the faces."""
    h = psi.spec.spacing
    grads = np.gradient(psi.data, h, h, h, edge_order=1)
    return GridField(psi.spec, -np.stack(grads, axis=-1), "E")


def interpolate_field(grid: GridField, x, check: bool = True) -> np.ndarray:
    """Trilinear interpolation at points ``x`` of shape ``(N, 3)`` or ``(3,)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    idx, frac = _cell_coords(grid.spec, x, check=check)
    n = grid.spec.n
    data = np.ascontiguousarray(grid.data, dtype=float).reshape(n**3, -1)
    out = _k.cic_gather(idx, frac, data, n)
    if not grid.is_vector:
        out = out[:, 0]
    return out[0] if single else out


def field_energy_from_potential(rho: GridField, psi: GridField) -> float:
    """``(1/2) int rho psi dx``; equals ``(1/8pi) int |grad psi|^2`` over all space."""
    return 0.5 * float(np.sum(rho.data * psi.data)) * rho.spec.cell_volume


def field_energy_from_field(E: GridField) -> float:
    """``(1/8pi) int |E|^2 dx`` over the grid box only."""
    return float(np.sum(E.data**2)) * E.spec.cell_volume / (8.0 * np.pi)


def save_grid(path, grid: GridField, time: float | None = None) -> Path:
    """Raw float64 array ``<path>.npy`` plus JSON sidecar ``<path>.json``."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), grid.data)
    side = {"center": list(grid.spec.center), "L": grid.spec.L, "n": grid.spec.n,
            "name": grid.name, "time": time, "shape": list(grid.data.shape)}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2))
    return path.with_suffix(".npy")


def load_grid(path) -> tuple[GridField, float | None]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    spec = GridSpec(tuple(side["center"]), side["L"], side["n"])
    return GridField(spec, np.load(path.with_suffix(".npy")), side["name"]), side["time"]


def uniform_ball_charge(spec: GridSpec, a: float, Q: float = 1.0, sub: int = 6) -> GridField:
    """Node density of a uniform ball (radius ``a``, charge ``Q``) centred at the origin.

    Each node gets the ball's density times the fraction of its cell inside
    the ball (``sub**3`` sub-samples), then the total is rescaled to ``Q``.
    """
    h = spec.spacing
    off = (np.arange(sub) + 0.5) / sub - 0.5
    o = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3) * h
    nodes = spec.nodes()
    frac = np.zeros(nodes.shape[:3])
    for d in o:
        frac += np.sum((nodes + d) ** 2, axis=-1) < a * a
    frac /= len(o)
    rho = frac * (Q / (np.sum(frac) * spec.cell_volume))
    return GridField(spec, rho, "rho")


def laplacian_residual(rho: GridField, psi: GridField, border: int = 2) -> float:
    """Relative L2 residual of ``-lap_h psi = 4 pi rho`` on interior nodes (7-point stencil)."""
    p = psi.data
    h = psi.spec.spacing
    lap = (-6.0 * p[1:-1, 1:-1, 1:-1]
           + p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1]
           + p[1:-1, 2:, 1:-1] + p[1:-1, :-2, 1:-1]
           + p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2]) / h**2
    b = border - 1
    sl = (slice(b, lap.shape[0] - b),) * 3
    res = -lap[sl] - 4.0 * np.pi * rho.data[1:-1, 1:-1, 1:-1][sl]
    ref = 4.0 * np.pi * rho.data[1:-1, 1:-1, 1:-1][sl]
    return float(np.linalg.norm(res) / np.linalg.norm(ref))
