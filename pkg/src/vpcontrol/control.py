"""Tracking-type optimal control of the magnetic field.

The cost of a field ``B`` is

    J(B) = 1/2 ||f_B(T) - f_d||_{L^2}^2 + lambda/2 ||D_x B||_{L^2}^2

with the target ``f_d`` manufactured by simulating a known field ``B_star``.
``f_d`` is represented by its end-state markers ``(y_i, f0(z_i))``; the
tracking term is the marker quadrature ``1/2 sum_i (f_B(T, y_i) - f0(z_i))^2 h^6``
with ``f_B(T, y_i)`` from backward characteristics (``eval_f``). Since
``||f_B(T)||_2 = ||f_d||_2`` the term vanishes exactly when ``f_B(T) = f_d``.

Gradients are finite differences in the coefficient vector ``theta``; the
optimizer is projected descent onto ``{||B||_V <= K}`` with Armijo
backtracking.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard

from .fields import DEFAULT_QUADRATURE, FieldParams, Quadrature, dx_b_l2_sq, project_to_ball, save_field, vnorm
from .phase_space import InitialDatum, ParticleEnsemble
from .poisson import GridSpec
from .vlasov import Numerics, eval_f, simulate

log = logging.getLogger(__name__)


@dataclass
class Target:
    """End state of a manufactured run: markers, grid and the run's inputs."""

    ensemble: ParticleEnsemble
    grid: GridSpec
    datum: InitialDatum
    numerics: Numerics
    field_params: FieldParams

    @property
    def T(self) -> float:
        return self.field_params.T


@dataclass(frozen=True)
class CostReport:
    tracking: float
    regularization: float
    total: float
    lam: float


def make_target(B_star: FieldParams, datum: InitialDatum, numerics: Numerics = Numerics()) -> Target:
    """Simulate ``B_star`` and keep the end-state ensemble as ``f_d``."""
    rec = simulate(datum, B_star, numerics)
    return Target(rec.final, rec.grid, datum, numerics, B_star)


def _check_lattice(target: Target, datum, numerics):
    if datum is not None and datum != target.datum:
        raise ValueError("datum differs from the one that produced the target")
    if numerics is not None and numerics.h != target.numerics.h:
        raise ValueError(
            f"lattice spacing {numerics.h} does not match the target lattice {target.numerics.h}")


def tracking_term(B: FieldParams, target: Target, numerics: Numerics | None = None) -> float:
    numerics = numerics or target.numerics
    _check_lattice(target, None, numerics)
    if B.T != target.T:
        raise ValueError(f"field horizon {B.T} differs from target horizon {target.T}")
    ens = target.ensemble
    rec = simulate(target.datum, B, _end_state_only(numerics), grid=target.grid)
    fb = eval_f(rec, rec.T, ens.points)
    return 0.5 * float(np.sum((fb - ens.values) ** 2)) * ens.weight


def _end_state_only(numerics: Numerics) -> Numerics:
    # cost runs only need the end state and the stored fields
    return replace(numerics, keep_ensembles=False, snapshot_stride=10**9)


def cost(B: FieldParams, target: Target, lam: float = 1e-3, datum: InitialDatum | None = None,
         numerics: Numerics | None = None, quad: Quadrature = DEFAULT_QUADRATURE) -> CostReport:
    """Tracking plus ``lam/2 * dx_b_l2_sq(B)``."""
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    _check_lattice(target, datum, numerics)
    tr = tracking_term(B, target, numerics)
    reg = 0.5 * lam * dx_b_l2_sq(B, quad) if lam > 0 else 0.0
    return CostReport(tr, reg, tr + reg, lam)


class CostProblem:
    """``theta -> J`` for a fixed mode basis, with an evaluation counter and cache.

    Repeated evaluations at a bit-identical ``theta`` reuse the cached report
    and are not counted.
    """

    def __init__(self, template: FieldParams, target: Target, lam: float = 1e-3,
                 numerics: Numerics | None = None, quad: Quadrature = DEFAULT_QUADRATURE):
        self.template = template
        self.target = target
        self.lam = lam
        self.numerics = numerics or target.numerics
        self.quad = quad
        self.n_evals = 0
        self._cache: dict[bytes, CostReport] = {}

    @property
    def shape(self):
        return self.template.theta.shape

    def field(self, theta) -> FieldParams:
        return self.template.with_theta(np.asarray(theta, dtype=float).reshape(self.shape))

    def report(self, theta) -> CostReport:
        theta = np.ascontiguousarray(theta, dtype=float).reshape(self.shape)
        key = theta.tobytes()
        if key not in self._cache:
            self.n_evals += 1
            self._cache[key] = cost(self.field(theta), self.target, self.lam,
                                    numerics=self.numerics, quad=self.quad)
        return self._cache[key]

    def __call__(self, theta) -> float:
        return self.report(theta).total


def _check_finite(val, what):
    if not np.isfinite(val):
        raise FloatingPointError(f"non-finite cost while probing {what}")
    return val


def spsa_directions(dim: int, n_directions: int = 64, seed: int = 0) -> np.ndarray:
    """``(m, dim)`` array of +-1 perturbation directions.

    When ``dim <= m`` and ``m`` is a power of two the directions are ``dim``
    columns of a Hadamard matrix (seeded choice, random column signs), so
    ``D.T @ D = m I`` and the averaged estimate is exact for quadratics.
    Otherwise they are independent Rademacher vectors.
    """
    rng = np.random.default_rng(seed)
    m = n_directions
    if dim <= m and m & (m - 1) == 0:
        H = hadamard(m).astype(float)
        cols = rng.choice(m, size=dim, replace=False)
        signs = rng.choice([-1.0, 1.0], size=dim)
        return H[:, cols] * signs
    return rng.choice([-1.0, 1.0], size=(m, dim))


def grad_estimate(objective, theta, scheme: str = "central", step: float = 1e-3,
                  n_directions: int = 64, seed: int = 0) -> np.ndarray:
    """Finite-difference gradient of ``objective`` at ``theta`` (same shape as ``theta``).

    ``scheme="central"``: ``(J(theta + d e_j) - J(theta - d e_j)) / 2d`` per coordinate.
    ``scheme="spsa"``: mean over ``n_directions`` two-point estimates along
    the directions of ``spsa_directions``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    flat = theta.ravel()
    dim = flat.size
    g = np.zeros(dim)
    if scheme == "central":
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = step
            jp = _check_finite(objective((flat + e).reshape(theta.shape)), f"coordinate {j}")
            jm = _check_finite(objective((flat - e).reshape(theta.shape)), f"coordinate {j}")
            g[j] = (jp - jm) / (2.0 * step)
    elif scheme == "spsa":
        D = spsa_directions(dim, n_directions, seed)
        for k, d in enumerate(D):
            jp = _check_finite(objective((flat + step * d).reshape(theta.shape)), f"direction {k}")
            jm = _check_finite(objective((flat - step * d).reshape(theta.shape)), f"direction {k}")
            g += d * (jp - jm) / (2.0 * step)
        g /= len(D)
    else:
        raise ValueError(f"unknown gradient scheme {scheme!r}")
    return g.reshape(theta.shape)


TRACE_COLUMNS = ("iter", "J", "tracking", "regularization", "v_norm", "alpha", "accepted")


@dataclass
class OptTrace:
    """Every evaluated iterate; ``accepted`` rows form the descent sequence."""

    rows: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    status: str = "running"
    n_evals: int = 0
    grad_info: dict = field(default_factory=dict)
    armijo: dict = field(default_factory=dict)

    def add(self, it, theta, rep: CostReport, v, alpha, accepted):
        self.rows.append((it, rep.total, rep.tracking, rep.regularization, v, alpha, accepted))
        self.thetas.append(np.array(theta, dtype=float))

    @property
    def accepted(self) -> list:
        return [i for i, r in enumerate(self.rows) if r[6]]

    @property
    def accepted_J(self) -> np.ndarray:
        return np.array([self.rows[i][1] for i in self.accepted])

    @property
    def best_theta(self) -> np.ndarray:
        return self.thetas[self.accepted[-1]]

    @property
    def initial(self) -> tuple:
        return self.rows[0]

    @property
    def final(self) -> tuple:
        return self.rows[self.accepted[-1]]


def write_trace(path, trace: OptTrace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for it, J, tr, reg, v, alpha, acc in trace.rows:
            w.writerow([it, repr(J), repr(tr), repr(reg), repr(v), repr(alpha), int(acc)])
    return path


def optimize(problem: CostProblem, theta0=None, budget: int = 200, *, scheme: str = "auto",
             step: float = 1e-3, n_directions: int = 64, seed: int = 0, gtol: float = 1e-8,
             alpha0: float = 1.0, shrink: float = 0.5, c1: float = 1e-4,
             alpha_min: float = 1e-12, spectral: bool = True,
             checkpoint_dir=None) -> OptTrace:
    """Projected descent ``theta <- P(theta - alpha g)`` with Armijo backtracking.

    ``budget`` bounds the number of cost evaluations after the initial one
    (gradient probes included). The first trial step is ``alpha0``; with
    ``spectral=True`` later iterations start from the Barzilai-Borwein length
    ``s.s / s.y`` of the previous accepted step. Backtracking halves ``alpha``
    until ``J(new) <= J + c1 g.(new - theta)``.

    Stops on the budget, on ``||P(theta - g) - theta|| <= gtol``, or when
    ``alpha`` underflows ``alpha_min``. A run without any accepted step
    after the start is flagged ``"stalled"``.
    """
    tmpl = problem.template
    quad = problem.quad
    theta0 = np.zeros(problem.shape) if theta0 is None else np.asarray(theta0, float)
    theta = project_to_ball(tmpl.with_theta(theta0.reshape(problem.shape)), quad).theta
    dim = theta.size
    if scheme == "auto":
        scheme = "central" if dim <= 20 else "spsa"
    n_grad = 2 * dim if scheme == "central" else 2 * n_directions
    trace = OptTrace(grad_info={"scheme": scheme, "step": step, "n_directions": n_directions,
                                "seed": seed},
                     armijo={"alpha0": alpha0, "shrink": shrink, "c1": c1, "spectral": spectral})
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def checkpoint(it, th):
        if ckpt is not None:
            ckpt.mkdir(parents=True, exist_ok=True)
            save_field(ckpt / f"field_{it:04d}.json", tmpl.with_theta(th))

    start = problem.n_evals
    rep = problem.report(theta)
    base = problem.n_evals

    def budget_left():
        return budget - (problem.n_evals - base)

    trace.add(0, theta, rep, vnorm(tmpl.with_theta(theta), quad).v_norm, 0.0, True)
    checkpoint(0, theta)
    J = rep.total
    g = None
    alpha_bb = None
    n_acc = it = 0
    while True:
        if g is None:
            if budget_left() < n_grad + 1:
                trace.status = "budget"
                break
            g = grad_estimate(problem, theta, scheme, step, n_directions, seed + it)
        pg = project_to_ball(tmpl.with_theta(theta - g), quad).theta - theta
        if np.linalg.norm(pg) <= gtol:
            trace.status = "converged"
            break
        it += 1
        alpha = alpha0 if (alpha_bb is None or not spectral) else alpha_bb
        accepted = False
        while alpha >= alpha_min and budget_left() > 0:
            cand = project_to_ball(tmpl.with_theta(theta - alpha * g), quad).theta
            rep_c = problem.report(cand)
            ok = (rep_c.total <= J + c1 * float(np.sum(g * (cand - theta)))
                  and rep_c.total <= J)
            trace.add(it, cand, rep_c, vnorm(tmpl.with_theta(cand), quad).v_norm, alpha, ok)
            if ok:
                accepted = True
                break
            alpha *= shrink
        if not accepted:
            trace.status = "underflow" if alpha < alpha_min else "budget"
            break
        n_acc += 1
        checkpoint(it, cand)
        s = (cand - theta).ravel()
        theta, J = cand, rep_c.total
        if budget_left() < n_grad + 1:
            trace.status = "budget"
            break
        g_new = grad_estimate(problem, theta, scheme, step, n_directions, seed + it)
        # Barzilai-Borwein length from the secant pair of the accepted move
        sy = float(s @ (g_new - g).ravel())
        alpha_bb = float(np.clip(s @ s / sy, alpha_min, 1e8)) if sy > 0 else alpha0
        g = g_new
    trace.n_evals = problem.n_evals - start
    if n_acc == 0 and trace.status in ("budget", "underflow"):
        trace.status = "stalled"
    log.info("optimize: %s after %d evaluations, J %.3e -> %.3e", trace.status,
             trace.n_evals, trace.initial[1], trace.final[1])
    return trace
