"""Characteristic flow of ``x' = v, v' = F(s, x) + v x G(s, x)``.

One step of length ``dt`` (either sign) is the symmetric splitting

    drift dt/2 -> half kick F -> Boris rotation about G -> half kick F -> drift dt/2

with both fields sampled at the step midpoint ``s + dt/2`` and at the
midpoint position. Each sub-map has unit Jacobian determinant and the
rotation preserves ``|v|``; stepping with ``-dt`` undoes a ``+dt`` step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels as _k
from .fields import FieldParams, eval_field
from .phase_space import PhasePoint
from .poisson import GridField, GridSpec, ParticleEscapeError, interpolate_field

ElectricProvider = Callable[[float, np.ndarray], np.ndarray]


class ElectricHistory:
    """Stored electric grids ``E(s_k)`` with linear interpolation in time.

    Times closer than ``snap`` to a stored sample use that sample exactly,
    which keeps a backward sweep over the same step grid bit-compatible with
    the forward sweep that produced it.
    """

    def __init__(self, spec: GridSpec, times=(), grids=(), snap: float = 1e-9):
        self.spec = spec
        self.times = list(times)
        self.grids = list(grids)
        self.snap = snap

    def append(self, t: float, data: np.ndarray):
        if self.times and t <= self.times[-1]:
            raise ValueError("electric snapshots must be added in increasing time")
        self.times.append(float(t))
        self.grids.append(data)

    def __len__(self):
        return len(self.times)

    def inside(self, x: np.ndarray) -> np.ndarray:
        u = (x - self.spec.lower) / self.spec.spacing
        return np.all((u >= 0) & (u <= self.spec.n - 1), axis=1)

    def grid_at(self, s: float) -> np.ndarray:
        times = self.times
        if not times:
            raise ValueError("empty electric history")
        scale = self.snap * max(1.0, abs(times[-1] - times[0]))
        j = int(np.searchsorted(times, s))
        for k in (j - 1, j):
            if 0 <= k < len(times) and abs(times[k] - s) <= scale:
                return self.grids[k]
        if j == 0:
            return self.grids[0]
        if j == len(times):
            return self.grids[-1]
        w = (s - times[j - 1]) / (times[j] - times[j - 1])
        return (1.0 - w) * self.grids[j - 1] + w * self.grids[j]

    def __call__(self, s: float, x: np.ndarray) -> np.ndarray:
        return interpolate_field(GridField(self.spec, self.grid_at(s)), x)


def uniform_electric(F) -> ElectricProvider:
    F = np.asarray(F, dtype=float)

    def provider(s, x):
        return np.broadcast_to(F, np.shape(x)).copy()

    return provider


@dataclass
class ForceContext:
    """Force fields for the characteristic system.

    ``electric`` is ``F`` (``None`` means zero), ``magnetic`` is ``G``: either
    a ``FieldParams`` or a callable ``(s, x) -> (N, 3)`` (``None`` means zero).
    """

    electric: ElectricProvider | None = None
    magnetic: FieldParams | Callable | None = None
    dt: float = 1e-2
    scheme: str = "strang-boris"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme != "strang-boris":
            raise ValueError(f"unknown splitting scheme {self.scheme!r}")

    def F(self, s: float, x: np.ndarray) -> np.ndarray | None:
        return None if self.electric is None else self.electric(s, x)

    def G(self, s: float, x: np.ndarray) -> np.ndarray | None:
        if self.magnetic is None:
            return None
        if isinstance(self.magnetic, FieldParams):
            return eval_field(self.magnetic, s, x)
        return self.magnetic(s, x)


def drift(z: np.ndarray, tau: float) -> np.ndarray:
    out = z.copy()
    out[:, :3] += tau * z[:, 3:]
    return out


def drift_inplace(z: np.ndarray, tau: float) -> np.ndarray:
    z[:, :3] += tau * z[:, 3:]
    return z


def boris_rotate(v: np.ndarray, G: np.ndarray, dt: float) -> np.ndarray:
    """Rotate ``v`` about ``G`` by the angle ``2 arctan(|G| dt / 2)``."""
    t = 0.5 * dt * G
    s = 2.0 * t / (1.0 + np.einsum("ij,ij->i", t, t))[:, None]
    vp = v + np.cross(v, t)
    return v + np.cross(vp, s)


def kick_rotate_kick(v: np.ndarray, F, G, dt: float) -> np.ndarray:
    """Half kick with ``F``, Boris rotation about ``G``, half kick with ``F``."""
    if F is None and G is None:
        return v.copy()
    dummy = np.zeros((1, 3))
    return _k.boris_krk(
        np.ascontiguousarray(v),
        dummy if F is None else np.ascontiguousarray(F, dtype=float),
        dummy if G is None else np.ascontiguousarray(G, dtype=float),
        float(dt), F is not None, G is not None,
    )


def _as_rows(z):
    if isinstance(z, PhasePoint):
        return z.as_array()[None, :], "point"
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z[None, :].copy(), "row"
    return z.copy(), "rows"


def _restore(z, kind):
    if kind == "point":
        return PhasePoint.from_array(z[0])
    if kind == "row":
        return z[0]
    return z


def push_step(z, ctx: ForceContext, s: float, dt: float | None = None):
    """Advance ``z`` (PhasePoint or ``(N, 6)`` rows) from time ``s`` to ``s + dt``."""
    dt = ctx.dt if dt is None else dt
    rows, kind = _as_rows(z)
    half = drift(rows, 0.5 * dt)
    sm = s + 0.5 * dt
    x = half[:, :3]
    half[:, 3:] = kick_rotate_kick(half[:, 3:], ctx.F(sm, x), ctx.G(sm, x), dt)
    return _restore(drift(half, 0.5 * dt), kind)


def step_grid(s: float, t: float, dt: float) -> tuple[int, float]:
    """Number of steps and signed step length to go from ``t`` to ``s``."""
    span = s - t
    if span == 0:
        return 0, 0.0
    n = max(1, int(np.ceil(abs(span) / dt - 1e-9)))
    return n, span / n


def integrate_flow(z, s: float, t: float, ctx: ForceContext, *, on_escape: str = "raise",
                   bounds: GridSpec | None = None, trace: list | None = None,
                   tagged=None):
    """``Z(s, t, z)``: start at time ``t`` in state ``z``, return the state at ``s``.

    Runs ``push_step`` with signed step ``(s - t) / n``. With
    ``on_escape="flag"`` points leaving ``bounds`` are frozen where they left
    and a boolean mask is returned alongside the states. ``trace`` collects
    ``(time, index, x1, x2, x3, v1, v2, v3)`` rows for the ``tagged`` indices.
    """
    if on_escape not in ("raise", "flag"):
        raise ValueError("on_escape must be 'raise' or 'flag'")
    rows, kind = _as_rows(z)
    if bounds is None and isinstance(ctx.electric, ElectricHistory):
        bounds = ctx.electric.spec
    escaped = np.zeros(len(rows), dtype=bool)
    nsteps, h = step_grid(s, t, ctx.dt)
    tagged = np.arange(len(rows)) if tagged is None else np.asarray(tagged)
    if trace is not None:
        _record(trace, t, rows, tagged)
    X = np.ascontiguousarray(rows[:, :3])
    V = np.ascontiguousarray(rows[:, 3:])
    for j in range(nsteps):
        sm = t + (j + 0.5) * h
        if escaped.any():
            active = np.flatnonzero(~escaped)
            x, v = X[active], V[active]
        else:
            active = None
            x, v = X, V
        xh = x + 0.5 * h * v
        if bounds is not None:
            _, _, bad = _k.cell_index(xh, bounds.lower, bounds.spacing, bounds.n)
            if bad >= 0:
                u = (xh - bounds.lower) / bounds.spacing
                ok = np.all((u >= 0) & (u <= bounds.n - 1), axis=1)
                idx = np.arange(len(xh)) if active is None else active
                if on_escape == "raise":
                    raise ParticleEscapeError(int(idx[bad]), xh[bad], bounds)
                escaped[idx[~ok]] = True
                active = idx[ok]
                xh, v = xh[ok], v[ok]
        v = kick_rotate_kick(v, ctx.F(sm, xh), ctx.G(sm, xh), h)
        xh += 0.5 * h * v
        if active is None:
            X, V = xh, v
        else:
            X[active] = xh
            V[active] = v
        if trace is not None:
            _record(trace, t + (j + 1) * h, np.hstack([X, V]), tagged)
    out = _restore(np.hstack([X, V]), kind)
    return (out, escaped) if on_escape == "flag" else out


def _record(trace, time, rows, tagged):
    for i in tagged:
        trace.append((float(time), int(i), *map(float, rows[i])))


def flow_jacobian(z, s: float, t: float, ctx: ForceContext, delta: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian ``dZ(s, t, z)/dz``; shape ``(M, 6, 6)`` for ``M`` points."""
    rows, kind = _as_rows(z)
    m = len(rows)
    eye = np.eye(6) * delta
    pert = np.concatenate([rows[:, None, :] + eye[None], rows[:, None, :] - eye[None]], axis=1)
    out = integrate_flow(pert.reshape(-1, 6), s, t, ctx).reshape(m, 12, 6)
    jac = (out[:, :6, :] - out[:, 6:, :]) / (2.0 * delta)  # [point, column j, row i]
    jac = np.swapaxes(jac, 1, 2)
    return jac[0] if kind != "rows" else jac


def flow_jacobian_det(z, s: float, t: float, ctx: ForceContext, delta: float = 1e-4):
    """Determinant of the finite-difference flow Jacobian (scalar or per-point array)."""
    jac = flow_jacobian(z, s, t, ctx, delta)
    return np.linalg.det(jac) if jac.ndim == 3 else float(np.linalg.det(jac))


TRACE_COLUMNS = ("s", "index", "x1", "x2", "x3", "v1", "v2", "v3")


def write_trace(path, trace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([repr(row[0]), row[1], *(repr(c) for c in row[2:])])
    return path
