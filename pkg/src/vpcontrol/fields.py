"""External magnetic control fields ``B(t, x) = sum_j c_j(t) Phi_j(x)``.

Each spatial mode is ``Phi_j(x) = exp(-|x|^2 / (2 sigma^2)) cos(k.x + phase) e_j``
and each coefficient ``c_j`` is piecewise linear on uniform time knots. The
coefficient matrix ``theta`` has shape ``(n_modes, n_knots)``.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# multi-indices with |alpha| <= 2, grouped by order
MULTI_INDICES = (
    (0, 0, 0),
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2),
)
_ORDER = np.array([sum(a) for a in MULTI_INDICES])
# (a, b) index pairs of the second-order multi-indices above
_HESS_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))

ENVELOPE_CUTOFF = 6.0


@dataclass(frozen=True)
class Mode:
    """Spatial mode: wave vector ``k``, unit direction, envelope width, phase."""

    k: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    sigma: float = 2.0
    phase: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        nrm = np.linalg.norm(d)
        if d.shape != (3,) or nrm == 0:
            raise ValueError("mode direction must be a nonzero 3-vector")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if abs(nrm - 1.0) > 1e-12:
            d = d / nrm
        object.__setattr__(self, "direction", tuple(float(c) for c in d))
        object.__setattr__(self, "k", tuple(float(c) for c in self.k))

    @property
    def kmag(self) -> float:
        return float(np.linalg.norm(self.k))


@dataclass(frozen=True, eq=False)
class FieldParams:
    theta: np.ndarray
    modes: tuple[Mode, ...]
    T: float = 1.0
    beta: float = 6.0
    K: float = 5.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float, copy=True)
        modes = tuple(self.modes)
        if theta.ndim != 2 or theta.shape[0] != len(modes):
            raise ValueError(
                f"theta must have shape (n_modes, n_knots); got {theta.shape} "
                f"for {len(modes)} modes"
            )
        if theta.shape[1] < 2:
            raise ValueError("need at least two time knots")
        if not self.beta > 3:
            raise ValueError("beta must exceed 3")
        if not self.K > 0:
            raise ValueError("K must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "modes", modes)

    @property
    def n_time_knots(self) -> int:
        return self.theta.shape[1]

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_time_knots)

    @property
    def gamma(self) -> float:
        """Hoelder exponent of the embedding ``W^{1,beta} -> C^{0,gamma}``."""
        return 1.0 - 3.0 / self.beta

    def with_theta(self, theta) -> "FieldParams":
        return replace(self, theta=np.asarray(theta, dtype=float).reshape(self.theta.shape))

    def coefficients(self, t: float) -> np.ndarray:
        """Mode coefficients ``c_j(t)`` by linear interpolation on the knots."""
        _check_time(self, t)
        knots = self.knots
        return np.array([np.interp(t, knots, row) for row in self.theta])

    def __eq__(self, other):
        if not isinstance(other, FieldParams):
            return NotImplemented
        return (self.modes == other.modes and self.T == other.T
                and self.beta == other.beta and self.K == other.K
                and np.array_equal(self.theta, other.theta))

    __hash__ = None


def zero_like(params: FieldParams) -> FieldParams:
    return params.with_theta(np.zeros_like(params.theta))


def single_mode(
    b: float = 1.0,
    *,
    sigma: float = 2.0,
    direction=(0.0, 0.0, 1.0),
    k=(0.0, 0.0, 0.0),
    phase: float = 0.0,
    n_knots: int = 2,
    T: float = 1.0,
    beta: float = 6.0,
    K: float = 5.0,
) -> FieldParams:
    """One mode with constant coefficient ``b``."""
    mode = Mode(k=k, direction=direction, sigma=sigma, phase=phase)
    return FieldParams(np.full((1, n_knots), float(b)), (mode,), T=T, beta=beta, K=K)


def random_modes(rng: np.random.Generator, n_modes: int, sigma: float = 2.0,
                 kmax: float = 1.0) -> tuple[Mode, ...]:
    modes = []
    for _ in range(n_modes):
        d = rng.normal(size=3)
        k = rng.uniform(-kmax, kmax, size=3) / np.sqrt(3)
        modes.append(Mode(k=tuple(k), direction=tuple(d), sigma=sigma,
                          phase=float(rng.uniform(0, 2 * np.pi))))
    return tuple(modes)


def random_field(rng: np.random.Generator, n_modes: int = 3, n_knots: int = 3, *,
                 modes=None, T: float = 1.0, beta: float = 6.0, K: float = 5.0,
                 sigma: float = 2.0) -> FieldParams:
    """Field with standard-normal coefficients (not projected)."""
    modes = modes if modes is not None else random_modes(rng, n_modes, sigma=sigma)
    theta = rng.normal(size=(len(modes), n_knots))
    return FieldParams(theta, modes, T=T, beta=beta, K=K)


def _check_time(params: FieldParams, t: float):
    # allow round-off at the ends of [0, T]
    tol = 1e-12 * params.T
    if not (-tol <= t <= params.T + tol):
        raise ValueError(f"time {t} outside [0, {params.T}]")


def _mode_arrays(modes):
    k = np.array([m.k for m in modes]).reshape(-1, 3)
    e = np.array([m.direction for m in modes]).reshape(-1, 3)
    sig = np.array([m.sigma for m in modes])
    ph = np.array([m.phase for m in modes])
    return k, e, sig, ph


def _scalar_parts(modes, x):
    """Envelope, cos and sin factors for every mode: arrays ``(..., n_modes)``."""
    k, _, sig, ph = _mode_arrays(modes)
    r2 = np.einsum("...i,...i->...", x, x)[..., None]
    g = np.exp(-0.5 * r2 / sig**2)
    arg = x @ k.T + ph
    return g, np.cos(arg), np.sin(arg), k, sig


def eval_field(params: FieldParams, t: float, x) -> np.ndarray:
    """``B(t, x)`` for ``x`` of shape ``(..., 3)``."""
    x = np.asarray(x, dtype=float)
    c = params.coefficients(t)
    g, cs, _, _, _ = _scalar_parts(params.modes, x)
    e = np.array([m.direction for m in params.modes])
    return (g * cs * c) @ e


def eval_field_jacobian(params: FieldParams, t: float, x):
    """Analytic ``D_x B`` (shape ``(..., 3, 3)``, ``[i, a] = d_a B_i``) and
    ``D_x^2 B`` (shape ``(..., 3, 3, 3)``, ``[i, a, b] = d_a d_b B_i``)."""
    x = np.asarray(x, dtype=float)
    c = params.coefficients(t)
    e = np.array([m.direction for m in params.modes])
    grad, hess = _scalar_derivatives(params.modes, x)
    # grad: (..., n_modes, 3); hess: (..., n_modes, 3, 3)
    cw = c[:, None] * e  # (n_modes, 3)
    jac = np.einsum("...ma,mi->...ia", grad, cw)
    jac2 = np.einsum("...mab,mi->...iab", hess, cw)
    return jac, jac2


def _scalar_derivatives(modes, x):
    g, cs, sn, k, sig = _scalar_parts(modes, x)
    s2 = sig**2
    xs = x[..., None, :] / s2[:, None]  # (..., m, 3): x_a / sigma^2
    grad = g[..., None] * (-xs * cs[..., None] - k * sn[..., None])
    eye = np.eye(3)
    hess = (
        (np.einsum("...ma,...mb->...mab", xs, xs) - eye / s2[:, None, None]) * cs[..., None, None]
        + (np.einsum("...ma,mb->...mab", xs, k) + np.einsum("ma,...mb->...mab", k, xs))
        * sn[..., None, None]
        - np.einsum("ma,mb->mab", k, k) * cs[..., None, None]
    ) * g[..., None, None]
    return grad, hess


# -- quadrature ---------------------------------------------------------------

@dataclass(frozen=True)
class Quadrature:
    """Uniform tensor grid in space, Gauss-Legendre panels in time.

    ``half_width=None`` uses the envelope cutoff ``6 * max(sigma)``.
    """

    n: int = 48
    gauss: int = 4
    half_width: float | None = None


DEFAULT_QUADRATURE = Quadrature()


@dataclass(frozen=True)
class NormReport:
    w_norm: float
    h_norm: float
    v_norm: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "v_norm", self.w_norm + self.h_norm)


def _half_width(modes, quad: Quadrature) -> float:
    if quad.half_width is not None:
        return float(quad.half_width)
    return ENVELOPE_CUTOFF * max(m.sigma for m in modes)


def _check_resolution(modes, quad: Quadrature, half: float):
    dx = 2 * half / (quad.n - 1)
    kmax = max((m.kmag for m in modes), default=0.0)
    if kmax > 0 and dx > np.pi / kmax:
        raise ValueError(
            f"quadrature spacing {dx:.4g} gives fewer than 2 points per "
            f"wavelength {2 * np.pi / kmax:.4g}"
        )


@functools.lru_cache(maxsize=8)
def _basis_on_grid(modes: tuple[Mode, ...], n: int, half: float):
    """Derivatives ``D^alpha s_j`` of the scalar mode shapes on the grid.

    Returns ``(cell_volume, S)`` with ``S`` of shape ``(10, n**3, n_modes)``
    ordered as ``MULTI_INDICES``.
    """
    ax = np.linspace(-half, half, n)
    dx = ax[1] - ax[0]
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    g, cs, _, _, _ = _scalar_parts(modes, pts)
    grad, hess = _scalar_derivatives(modes, pts)
    S = np.empty((10, len(pts), len(modes)))
    S[0] = g * cs
    S[1:4] = np.moveaxis(grad, -1, 0)
    for i, (a, b) in enumerate(_HESS_PAIRS):
        S[4 + i] = hess[..., a, b]
    S.flags.writeable = False
    return dx**3, S


def _time_nodes(params: FieldParams, gauss: int):
    """Gauss-Legendre nodes and weights on every knot panel of ``[0, T]``."""
    xi, wi = np.polynomial.legendre.leggauss(gauss)
    knots = params.knots
    ts, ws = [], []
    for a, b in zip(knots[:-1], knots[1:]):
        ts.append(0.5 * (b - a) * xi + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * wi)
    return np.concatenate(ts), np.concatenate(ws)


def _spatial_integrals(params: FieldParams, quad: Quadrature, t: float, p: float,
                       orders) -> float:
    """``sum_{|alpha| in orders} int |D^alpha B(t)|^p dx`` on the grid."""
    half = _half_width(params.modes, quad)
    dv, S = _basis_on_grid(params.modes, quad.n, half)
    c = params.coefficients(t)
    e = np.array([m.direction for m in params.modes])
    cw = c[:, None] * e
    total = 0.0
    for i, order in enumerate(_ORDER):
        if order not in orders:
            continue
        vec = S[i] @ cw
        sq = np.einsum("ij,ij->i", vec, vec)
        total += np.sum(sq if p == 2 else sq ** (0.5 * p))
    return float(total * dv)


def vnorm(params: FieldParams, quad: Quadrature = DEFAULT_QUADRATURE) -> NormReport:
    """``||B||_W`` (``L^2(0,T; W^{2,beta})``), ``||B||_H`` (``L^2(0,T; H^1)``) and their sum."""
    half = _half_width(params.modes, quad)
    _check_resolution(params.modes, quad, half)
    if not np.any(params.theta):
        return NormReport(0.0, 0.0)
    ts, ws = _time_nodes(params, quad.gauss)
    beta = params.beta
    w2 = h2 = 0.0
    for t, w in zip(ts, ws):
        iw = _spatial_integrals(params, quad, t, beta, (0, 1, 2))
        ih = _spatial_integrals(params, quad, t, 2.0, (0, 1))
        w2 += w * iw ** (2.0 / beta)
        h2 += w * ih
    return NormReport(float(np.sqrt(w2)), float(np.sqrt(h2)))


def w_norm(params: FieldParams, quad: Quadrature = DEFAULT_QUADRATURE) -> float:
    return vnorm(params, quad).w_norm


def dx_b_l2_sq(params: FieldParams, quad: Quadrature = DEFAULT_QUADRATURE) -> float:
    """``int_0^T int |D_x B|_F^2 dx dt`` with the same quadrature as ``vnorm``."""
    half = _half_width(params.modes, quad)
    _check_resolution(params.modes, quad, half)
    if not np.any(params.theta):
        return 0.0
    ts, ws = _time_nodes(params, quad.gauss)
    return float(sum(w * _spatial_integrals(params, quad, t, 2.0, (1,))
                     for t, w in zip(ts, ws)))


def project_to_ball(params: FieldParams, quad: Quadrature = DEFAULT_QUADRATURE,
                    rtol: float = 1e-12) -> FieldParams:
    """Radial scaling onto ``{||B||_V <= K}``; interior fields are returned as is."""
    v = vnorm(params, quad).v_norm
    if v <= params.K * (1.0 + rtol):
        return params
    return params.with_theta(params.theta * (params.K / v))


def is_admissible(params: FieldParams, quad: Quadrature = DEFAULT_QUADRATURE,
                  tol: float = 1e-6) -> bool:
    return vnorm(params, quad).v_norm <= params.K + tol


def embedding_ratio(params: FieldParams, quad: Quadrature = Quadrature(n=24),
                    shifts=(1, 2, 4, 8)) -> float:
    """Empirical ``sup_t ||B(t)||_{C^{0,gamma}} / ||B(t)||_{W^{1,beta}}``.

    The Hoelder seminorm is sampled over grid offsets along the axes and the
    main diagonals, so the numerator is a lower bound of the true norm.
    """
    half = _half_width(params.modes, quad)
    _check_resolution(params.modes, quad, half)
    n = quad.n
    dv, S = _basis_on_grid(params.modes, n, half)
    dx = dv ** (1 / 3)
    gamma = params.gamma
    e = np.array([m.direction for m in params.modes])
    dirs = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1), (1, -1, 0), (1, 1, -1)]
    ts, _ = _time_nodes(params, quad.gauss)
    best = 0.0
    for t in ts:
        w1 = _spatial_integrals(params, quad, t, params.beta, (0, 1)) ** (1 / params.beta)
        if w1 == 0:
            continue
        B = (S[0] @ (params.coefficients(t)[:, None] * e)).reshape(n, n, n, 3)
        holder = 0.0
        for d in dirs:
            for s in shifts:
                off = np.array(d) * s
                sl_a = tuple(slice(max(0, -o), n - max(0, o)) for o in off)
                sl_b = tuple(slice(max(0, o), n - max(0, -o)) for o in off)
                diff = B[sl_b] - B[sl_a]
                dist = dx * np.linalg.norm(off)
                q = np.sqrt(np.einsum("...i,...i->...", diff, diff)).max() / dist**gamma
                holder = max(holder, float(q))
        sup = float(np.sqrt(np.einsum("...i,...i->...", B, B)).max())
        best = max(best, max(sup, holder) / w1)
    return best


# -- field description files ----------------------------------------------------

def field_to_dict(params: FieldParams) -> dict:
    return {
        "beta": params.beta,
        "K": params.K,
        "T": params.T,
        "time_knots": params.knots.tolist(),
        "modes": [
            {
                "k": list(m.k),
                "direction": list(m.direction),
                "sigma": m.sigma,
                "phase": m.phase,
                "coefficients": params.theta[j].tolist(),
            }
            for j, m in enumerate(params.modes)
        ],
    }


def field_from_dict(d: dict) -> FieldParams:
    default_sigma = d.get("sigma", 2.0)
    modes, rows = [], []
    for md in d["modes"]:
        modes.append(Mode(k=tuple(md.get("k", (0.0, 0.0, 0.0))),
                          direction=tuple(md["direction"]),
                          sigma=md.get("sigma", default_sigma),
                          phase=md.get("phase", 0.0)))
        rows.append(md["coefficients"])
    params = FieldParams(np.array(rows, dtype=float), tuple(modes),
                         T=d["T"], beta=d.get("beta", 6.0), K=d.get("K", 5.0))
    if "time_knots" in d and not np.allclose(d["time_knots"], params.knots, rtol=0, atol=1e-12):
        raise ValueError("time_knots must be uniform on [0, T]")
    return params


def save_field(path, params: FieldParams) -> Path:
    path = Path(path)
    path.write_text(json.dumps(field_to_dict(params), indent=2))
    return path


def load_field(path) -> FieldParams:
    return field_from_dict(json.loads(Path(path).read_text()))
