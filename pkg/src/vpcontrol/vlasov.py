"""Particle-mesh solver for the Vlasov-Poisson system with an external magnetic field.

Markers are transported forward along characteristics; each carries the
initial-datum value of its lattice origin, so ``f(t, Z(t, 0, z_i)) = f0(z_i)``.
Point values ``f(t, z)`` are recovered by integrating the characteristic
back to ``t = 0`` through the stored electric grids (``eval_f``).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .characteristics import (
    ElectricHistory,
    ForceContext,
    drift,
    flow_jacobian,
    integrate_flow,
    kick_rotate_kick,
    step_grid,
)
from .fields import FieldParams, eval_field, save_field, w_norm, Quadrature, DEFAULT_QUADRATURE
from .phase_space import (
    InitialDatum,
    ParticleEnsemble,
    SupportRadii,
    lp_norm,
    sample_ensemble,
    save_ensemble,
    support_radii,
    update_radii,
)
from .poisson import (
    GridField,
    GridSpec,
    deposit_charge,
    deposit_points,
    electric_field,
    field_energy_from_field,
    field_energy_from_potential,
    interpolate_field,
    solve_potential,
)

log = logging.getLogger(__name__)

NORM_PS = (1.0, 2.0, np.inf)


@dataclass(frozen=True)
class Numerics:
    """Discretization parameters.

    ``snapshot_stride``: steps between recorded diagnostics/ensembles.
    ``field_stride``: steps between stored electric grids (others are
    interpolated linearly in time by ``eval_f``).
    """

    h: float = 0.25
    dt: float = 1e-2
    n: int = 32
    snapshot_stride: int = 25
    field_stride: int = 1
    grid_margin: float = 1.5
    poisson: str = "fft"
    electric: bool = True
    keep_ensembles: bool = True

    def __post_init__(self):
        if not self.h > 0 or not self.dt > 0:
            raise ValueError("h and dt must be positive")
        if self.n < 8:
            raise ValueError("grid needs n >= 8")
        if self.snapshot_stride < 1 or self.field_stride < 1:
            raise ValueError("strides must be >= 1")
        if not self.grid_margin >= 1.2:
            raise ValueError("grid margin must be at least 1.2")


@dataclass
class SolutionRecord:
    times: np.ndarray
    ensembles: list
    energy_series: np.ndarray
    kinetic_series: np.ndarray
    field_series: np.ndarray
    norm_series: dict
    radii_series: list
    field_params: FieldParams
    datum: InitialDatum
    numerics: Numerics
    grid: GridSpec
    electric: ElectricHistory | None
    dt: float
    final: ParticleEnsemble

    @property
    def T(self) -> float:
        return float(self.times[-1])


def _kinetic(ens: ParticleEnsemble) -> float:
    v = ens.v
    return 0.5 * float(np.sum(np.einsum("ij,ij->i", v, v) * ens.values)) * ens.weight


def total_energy(ens: ParticleEnsemble, psi_or_E: GridField, parts: bool = False):
    """Kinetic energy by marker quadrature plus the electrostatic field energy.

    Given the potential, the field energy is ``(1/2) int rho psi``, which
    equals ``(1/8pi) int |grad psi|^2`` over all of space. Given ``E`` the
    ``|E|^2 / 8pi`` quadrature only covers the grid box.
    """
    kin = _kinetic(ens)
    if psi_or_E.is_vector:
        fld = field_energy_from_field(psi_or_E)
    else:
        fld = field_energy_from_potential(deposit_charge(ens, psi_or_E.spec), psi_or_E)
    return (kin, fld) if parts else kin + fld


def auto_grid(ens: ParticleEnsemble, T: float, numerics: Numerics) -> GridSpec:
    """Grid box sized to contain the support for the whole run.

    Each marker is bounded by its escape speed ``sqrt(|v_i|^2 + 2 psi0(x_i))``
    (the repulsive potential only pushes outward and ``B`` never changes
    speeds), so ``|x_i(t)| <= |x_i| + t sqrt(|v_i|^2 + 2 psi0(x_i))``. The box
    half extent is ``grid_margin`` times the largest such bound.
    """
    live = ens.values > 0
    if not np.any(live):
        return GridSpec(L=numerics.grid_margin, n=numerics.n)
    x, v = ens.x[live], ens.v[live]
    v2 = np.einsum("ij,ij->i", v, v)
    r0 = support_radii(ens)
    if numerics.electric:
        spec0 = GridSpec(L=numerics.grid_margin * r0.Q, n=numerics.n)
        psi0 = solve_potential(deposit_charge(ens, spec0), numerics.poisson)
        v2 = v2 + 2.0 * np.maximum(interpolate_field(psi0, x), 0.0)
    reach = np.sqrt(np.einsum("ij,ij->i", x, x)) + T * np.sqrt(v2)
    return GridSpec(L=numerics.grid_margin * float(reach.max()), n=numerics.n)


def _field_solve(ens, spec, method):
    psi = solve_potential(deposit_charge(ens, spec), method)
    return psi, electric_field(psi)


def simulate(datum: InitialDatum, B: FieldParams, numerics: Numerics = Numerics(),
             ensemble: ParticleEnsemble | None = None,
             grid: GridSpec | None = None) -> SolutionRecord:
    """Run the controlled Vlasov-Poisson system from ``t = 0`` to ``B.T``."""
    ens = ensemble if ensemble is not None else sample_ensemble(datum, numerics.h)
    T = B.T
    nsteps, dt = step_grid(T, 0.0, numerics.dt)
    spec = grid if grid is not None else auto_grid(ens, T, numerics)
    history = ElectricHistory(spec) if numerics.electric else None

    times, ensembles, kin, fld, radii_series = [], [], [], [], []
    norms = {p: [] for p in NORM_PS}
    radii = SupportRadii()

    def record(t, cur):
        if numerics.electric:
            psi, _ = _field_solve(cur, spec, numerics.poisson)
            k, f = total_energy(cur, psi, parts=True)
        else:
            deposit_charge(cur, spec)  # escape check only
            k, f = _kinetic(cur), 0.0
        times.append(t)
        kin.append(k)
        fld.append(f)
        for p in NORM_PS:
            norms[p].append(lp_norm(cur, p))
        radii_series.append(radii)
        if numerics.keep_ensembles:
            ensembles.append(cur)

    radii = support_radii(ens, radii)
    record(0.0, ens)
    X = np.ascontiguousarray(ens.points[:, :3])
    V = np.ascontiguousarray(ens.points[:, 3:])
    q = ens.values * ens.weight
    live = ens.values > 0
    magnetic = bool(np.any(B.theta))
    for k in range(nsteps):
        sm = (k + 0.5) * dt
        X += 0.5 * dt * V
        F = G = None
        if numerics.electric:
            psi = solve_potential(deposit_points(X, q, spec), numerics.poisson)
            E = electric_field(psi)
            if not np.all(np.isfinite(E.data)):
                raise FloatingPointError(f"non-finite electric field at t={sm}")
            if k % numerics.field_stride == 0 or k == nsteps - 1:
                history.append(sm, E.data)
            F = interpolate_field(E, X)
        if magnetic:
            G = eval_field(B, sm, X)
        V = kick_rotate_kick(V, F, G, dt)
        X += 0.5 * dt * V
        radii = update_radii(radii, X, V, live)
        if (k + 1) % numerics.snapshot_stride == 0 or k == nsteps - 1:
            record(T if k == nsteps - 1 else (k + 1) * dt, ens.moved(np.hstack([X, V])))
    points = np.hstack([X, V])
    final = ens.moved(points)
    if not numerics.keep_ensembles:
        ensembles = [final]
    return SolutionRecord(
        times=np.array(times),
        ensembles=ensembles,
        energy_series=np.array(kin) + np.array(fld),
        kinetic_series=np.array(kin),
        field_series=np.array(fld),
        norm_series={p: np.array(v) for p, v in norms.items()},
        radii_series=radii_series,
        field_params=B,
        datum=datum,
        numerics=numerics,
        grid=spec,
        electric=history,
        dt=dt,
        final=final,
    )


def record_context(record: SolutionRecord) -> ForceContext:
    """Force context that replays the run's stored fields."""
    mag = record.field_params if np.any(record.field_params.theta) else None
    return ForceContext(electric=record.electric, magnetic=mag, dt=record.dt)


def eval_f(record: SolutionRecord, t: float, z, return_flags: bool = False):
    """``f(t, z) = f0(Z(0, t, z))`` by backward characteristic integration.

    Points whose backward characteristic leaves the grid box are outside the
    support at that time (the box contains every marker for the whole run
    with margin) and evaluate to 0; ``return_flags`` exposes that mask.
    """
    if not (0.0 <= t <= record.T * (1 + 1e-12)):
        raise ValueError(f"t={t} outside [0, {record.T}]")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    ctx = record_context(record)
    foot, outside = integrate_flow(z, 0.0, t, ctx, on_escape="flag", bounds=record.grid)
    vals = record.datum(foot)
    vals = np.where(outside, 0.0, vals)
    return (vals, outside) if return_flags else vals


def flow_determinants(record: SolutionRecord, z, s: float = 0.0, t: float | None = None,
                      delta: float | None = None) -> np.ndarray:
    """Finite-difference ``det dZ(t, s, z)/dz`` along the run's fields."""
    t = record.T if t is None else t
    if delta is None:
        delta = 1e-4 * max(record.datum.r_x, record.datum.r_v)
    return np.linalg.det(flow_jacobian(np.atleast_2d(z), t, s, record_context(record), delta))


def energy_drift(record: SolutionRecord) -> float:
    e = record.energy_series
    if e[0] == 0:
        return float(np.max(np.abs(e - e[0])))
    return float(np.max(np.abs(e - e[0])) / abs(e[0]))


# -- export -------------------------------------------------------------------

DIAGNOSTIC_COLUMNS = ("t", "energy", "kinetic", "field", "L1", "L2", "Linf", "P", "Q", "S")


def write_diagnostics(path, record: SolutionRecord) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for i, t in enumerate(record.times):
            r = record.radii_series[i]
            row = (t, record.energy_series[i], record.kinetic_series[i], record.field_series[i],
                   record.norm_series[1.0][i], record.norm_series[2.0][i],
                   record.norm_series[np.inf][i], r.P, r.Q, r.S)
            w.writerow([repr(float(c)) for c in row])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_record(record: SolutionRecord, outdir, field_file: str | None = None) -> Path:
    """Write ``diagnostics.csv``, per-snapshot ensemble checkpoints and ``manifest.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = [write_diagnostics(outdir / "diagnostics.csv", record)]
    if field_file is None:
        field_file = str(save_field(outdir / "field.json", record.field_params).name)
        files.append(outdir / field_file)
    snap_times = record.times if len(record.ensembles) == len(record.times) else record.times[-1:]
    for i, (t, ens) in enumerate(zip(snap_times, record.ensembles)):
        files.append(save_ensemble(outdir / f"ensemble_{i:04d}.npz", ens, time=float(t)))
    manifest = {
        "status": "ok",
        "numerics": {k: (v if not isinstance(v, float) or np.isfinite(v) else str(v))
                     for k, v in asdict(record.numerics).items()},
        "datum": asdict(record.datum),
        "grid": {"center": list(record.grid.center), "L": record.grid.L, "n": record.grid.n},
        "T": record.T,
        "dt": record.dt,
        "field_file": field_file,
        "checksums": {p.name: _sha256(p) for p in files},
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# -- Lipschitz probe -------------------------------------------------------------

@dataclass
class ProbeReport:
    pairs: list
    sup_diff_f: np.ndarray
    w_dist: np.ndarray
    ratio: np.ndarray
    slope: float = float("nan")
    sup_diff_dz: np.ndarray | None = None
    hoelder_fit: float = float("nan")
    skipped: list = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratio)) if len(self.ratio) else float("nan")


def _loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def lipschitz_probe(pairs, datum: InitialDatum, numerics: Numerics = Numerics(), *,
                    quad: Quadrature = DEFAULT_QUADRATURE, probe_times=None,
                    derivative_points: int = 0, fd_step: float = 1e-3,
                    seed: int = 0) -> ProbeReport:
    """Empirical Lipschitz constants of the field-to-state map.

    For every pair ``(B, H)`` the sup over probe times and lattice points of
    ``|f_B - f_H|`` is divided by ``||B - H||_W``. The log-log slope over all
    pairs is meaningful when the pairs form a geometric family
    ``H = B + eps dB``. With ``derivative_points > 0`` the same is done for
    central-difference ``d_z f`` at ``t = T`` on a random lattice subset.
    """
    ens = sample_ensemble(datum, numerics.h)
    lattice = ens.origins
    grid = None
    cache = {}
    rng = np.random.default_rng(seed)
    sub = None
    if derivative_points:
        sub = lattice[rng.choice(len(lattice), size=min(derivative_points, len(lattice)),
                                 replace=False)]

    def state(B):
        key = id(B)
        if key not in cache:
            nonlocal grid
            rec = simulate(datum, B, replace(numerics, keep_ensembles=False), ensemble=ens,
                           grid=grid)
            grid = rec.grid
            times = probe_times if probe_times is not None else rec.times[1:]
            vals = np.stack([eval_f(rec, t, lattice) for t in times])
            dz = _dz_f(rec, sub, fd_step) if sub is not None else None
            cache[key] = (B, vals, dz)
        return cache[key]

    descr, sups, dists, dsups, skipped = [], [], [], [], []
    for i, (B, H) in enumerate(pairs):
        dist = w_norm(B.with_theta(B.theta - H.theta), quad)
        if dist == 0:
            warnings.warn(f"pair {i}: identical fields skipped", stacklevel=2)
            skipped.append(i)
            continue
        _, fb, db = state(B)
        _, fh, dh = state(H)
        sups.append(float(np.max(np.abs(fb - fh))))
        dists.append(dist)
        if db is not None:
            dsups.append(float(np.max(np.abs(db - dh))))
        descr.append({"index": i, "w_dist": dist})
        log.info("probe pair %d: sup|f_B - f_H| = %.3e, ||B - H||_W = %.3e", i, sups[-1], dist)
    sups, dists = np.array(sups), np.array(dists)
    report = ProbeReport(descr, sups, dists, sups / dists, _loglog_slope(dists, sups),
                         skipped=skipped)
    if dsups:
        report.sup_diff_dz = np.array(dsups)
        report.hoelder_fit = _loglog_slope(dists, dsups)
    return report


def _dz_f(rec: SolutionRecord, pts: np.ndarray, step: float) -> np.ndarray:
    eye = np.eye(6) * step
    pert = np.concatenate([pts[:, None, :] + eye, pts[:, None, :] - eye], axis=1)
    vals = eval_f(rec, rec.T, pert.reshape(-1, 6)).reshape(len(pts), 12)
    return (vals[:, :6] - vals[:, 6:]) / (2 * step)


def epsilon_family(B: FieldParams, dB: np.ndarray, eps0: float, halvings: int = 4):
    """Pairs ``(B, B + eps dB)`` with ``eps = eps0 / 2^k``, ``k = 0..halvings``."""
    dB = np.asarray(dB, dtype=float).reshape(B.theta.shape)
    return [(B, B.with_theta(B.theta + eps0 * 0.5**k * dB)) for k in range(halvings + 1)]
