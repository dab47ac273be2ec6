"""Initial datum, lattice sampling of phase space, discrete norms and support radii.

Phase-space points are stored as rows ``(x1, x2, x3, v1, v2, v3)`` of float64
arrays of shape ``(N, 6)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as _k


@dataclass(frozen=True)
class PhasePoint:
    """A single phase-space point ``z = (x, v)``."""

    x: tuple[float, float, float]
    v: tuple[float, float, float]

    def __post_init__(self):
        z = np.concatenate([np.asarray(self.x, float), np.asarray(self.v, float)])
        if z.shape != (6,) or not np.all(np.isfinite(z)):
            raise ValueError(f"phase point needs six finite components, got {z}")

    def as_array(self) -> np.ndarray:
        return np.array([*self.x, *self.v], dtype=float)

    @classmethod
    def from_array(cls, z) -> "PhasePoint":
        z = np.asarray(z, dtype=float)
        return cls(tuple(z[:3]), tuple(z[3:]))


@dataclass(frozen=True)
class InitialDatum:
    """Quartic bump ``A (1 - |x|^2/r_x^2)_+^4 (1 - |v|^2/r_v^2)_+^4``.

    The fourth power makes the bump C^2 across the support boundary.
    ``amplitude = 0`` is accepted and gives the vacuum datum.
    """

    amplitude: float = 1.0
    r_x: float = 1.0
    r_v: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.r_x <= 0 or self.r_v <= 0:
            raise ValueError("support radii must be positive")

    def __call__(self, z) -> np.ndarray:
        return eval_initial_datum(self, z)


def _bump(r2: np.ndarray) -> np.ndarray:
    return np.maximum(1.0 - r2, 0.0) ** 4


def eval_initial_datum(datum: InitialDatum, z) -> np.ndarray | float:
    """Evaluate the initial datum at one point or at rows of an ``(N, 6)`` array."""
    if isinstance(z, PhasePoint):
        z = z.as_array()
    z = np.asarray(z, dtype=float)
    x, v = z[..., :3], z[..., 3:]
    sx = np.einsum("...i,...i->...", x, x) / datum.r_x**2
    sv = np.einsum("...i,...i->...", v, v) / datum.r_v**2
    out = datum.amplitude * _bump(sx) * _bump(sv)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SupportRadii:
    """Running maxima of ``|v|`` (P), ``|x|`` (Q) and ``|(x, v)|`` (S)."""

    P: float = 0.0
    Q: float = 0.0
    S: float = 0.0


@dataclass
class ParticleEnsemble:
    """Lattice markers carrying initial-datum values.

    ``values`` and ``origins`` are frozen (read-only arrays); only ``points``
    moves during a simulation.
    """

    points: np.ndarray
    origins: np.ndarray
    values: np.ndarray
    weight: float
    h: float = float("nan")
    datum: InitialDatum | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float, copy=True).reshape(-1, 6)
        self.origins = np.array(self.origins, dtype=float, copy=True).reshape(-1, 6)
        self.values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if not (len(self.points) == len(self.origins) == len(self.values)):
            raise ValueError("points, origins and values must have equal length")
        self.origins.flags.writeable = False
        self.values.flags.writeable = False

    def __len__(self) -> int:
        return len(self.values)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def v(self) -> np.ndarray:
        return self.points[:, 3:]

    def moved(self, points: np.ndarray) -> "ParticleEnsemble":
        """Same markers at new positions (values and origins shared)."""
        out = object.__new__(ParticleEnsemble)
        out.points = np.array(points, dtype=float, copy=True).reshape(-1, 6)
        if len(out.points) != len(self.values):
            raise ValueError("position array does not match ensemble size")
        out.origins = self.origins
        out.values = self.values
        out.weight = self.weight
        out.h = self.h
        out.datum = self.datum
        out.meta = dict(self.meta)
        return out

    def total_charge(self) -> float:
        return float(np.sum(self.values) * self.weight)


def _axis_lattice(r: float, h: float) -> np.ndarray:
    m = int(np.ceil(r / h))
    k = np.arange(-m, m + 1)
    pts = k * h
    return pts[np.abs(pts) < r]


def _ball_lattice(r: float, h: float) -> np.ndarray:
    a = _axis_lattice(r, h)
    g = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[np.einsum("ij,ij->i", g, g) < r * r]


def sample_ensemble(datum: InitialDatum, h: float) -> ParticleEnsemble:
    """Regular 6D lattice ``h Z^6`` restricted to the open support of the datum.

    Each marker has quadrature weight ``h**6``. The lattice always contains
    the origin.
    """
    if not h > 0:
        raise ValueError("lattice spacing must be positive")
    for r in (datum.r_x, datum.r_v):
        if len(_axis_lattice(r, h)) < 2:
            raise ValueError(
                f"lattice spacing h={h} leaves fewer than 2 points per axis "
                f"inside a support radius {r}"
            )
    xs = _ball_lattice(datum.r_x, h)
    vs = _ball_lattice(datum.r_v, h)
    origins = np.concatenate(
        [np.repeat(xs, len(vs), axis=0), np.tile(vs, (len(xs), 1))], axis=1
    )
    values = eval_initial_datum(datum, origins)
    return ParticleEnsemble(
        points=origins, origins=origins, values=values, weight=h**6, h=h, datum=datum
    )


def lp_norm(ens: ParticleEnsemble, p: float) -> float:
    """Discrete ``L^p`` norm of the marker values; ``p = inf`` gives the max."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if len(ens) == 0:
        return 0.0
    vals = np.abs(ens.values)
    if np.isinf(p):
        return float(vals.max())
    return float(np.sum(vals**p) * ens.weight) ** (1.0 / p)


def support_radii(
    ens: ParticleEnsemble, history: SupportRadii | None = None
) -> SupportRadii:
    """Update running support radii with the current marker positions.

    Only markers carrying a positive value count as being in the support.
    """
    return update_radii(history, ens.x, ens.v, ens.values > 0)


def update_radii(history: SupportRadii | None, x, v, mask) -> SupportRadii:
    history = history or SupportRadii()
    if not np.any(mask):
        return history
    p, q, s = _k.max_norms(np.ascontiguousarray(x), np.ascontiguousarray(v), mask)
    return SupportRadii(P=max(history.P, p), Q=max(history.Q, q), S=max(history.S, s))


# -- checkpoint format ------------------------------------------------------

CHECKPOINT_COLUMNS = (
    "origin_x1 origin_x2 origin_x3 origin_v1 origin_v2 origin_v3 "
    "pos_x1 pos_x2 pos_x3 pos_v1 pos_v2 pos_v3 value"
).split()


def save_ensemble(path, ens: ParticleEnsemble, **extra) -> Path:
    """Write an ``.npz`` checkpoint: a 13-column table plus a JSON header."""
    path = Path(path)
    datum = ens.datum or InitialDatum(float("nan"), float("nan"), float("nan"))
    header = {
        "h": ens.h,
        "A": datum.amplitude,
        "r_x": datum.r_x,
        "r_v": datum.r_v,
        "weight": ens.weight,
        "columns": CHECKPOINT_COLUMNS,
        **ens.meta,
        **extra,
    }
    table = np.concatenate([ens.origins, ens.points, ens.values[:, None]], axis=1)
    with open(path, "wb") as fh:
        np.savez(fh, table=table, header=np.array(json.dumps(header)))
    return path


def load_ensemble(path) -> ParticleEnsemble:
    with np.load(path) as data:
        table = data["table"]
        header = json.loads(str(data["header"]))
    datum = None
    if np.isfinite(header["A"]):
        datum = InitialDatum(header["A"], header["r_x"], header["r_v"])
    meta = {k: v for k, v in header.items()
            if k not in ("h", "A", "r_x", "r_v", "weight", "columns")}
    return ParticleEnsemble(
        points=table[:, 6:12],
        origins=table[:, :6],
        values=table[:, 12],
        weight=header["weight"],
        h=header["h"],
        datum=datum,
        meta=meta,
    )
