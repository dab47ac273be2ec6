"""Batch front end: ``vpcontrol {simulate,optimize,verify} CONFIG [--out DIR] [--suite S]``.

The config is an INI file. Relative paths are resolved against the config
file's directory. Exit codes: 0 success, 2 config error, 3 runtime error,
4 verification failure. Every run that knows its output directory writes
``manifest.json`` there, also on failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import control, vlasov
from .characteristics import integrate_flow
from .fields import FieldParams, project_to_ball, random_field, single_mode, load_field, save_field, vnorm
from .phase_space import InitialDatum, load_ensemble, sample_ensemble
from .poisson import GridSpec, interpolate_field, laplacian_residual, solve_potential, uniform_ball_charge

log = logging.getLogger("vpcontrol")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4
SUITES = ("flow", "conservation", "poisson", "lipschitz", "speed", "recovery")
# the recovery suite runs a full optimization, so it is opt-in
DEFAULT_SUITES = SUITES[:-1]
LOCK_NAME = ".vpcontrol.lock"


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int, extra: dict | None = None):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code
        self.extra = extra or {}


def config_error(code, message):
    return CliError(code, message, EXIT_CONFIG)


TOLERANCE_DEFAULTS = {
    "det": 1e-3,
    "inverse": 1e-4,
    "energy": 1e-2,
    "roundtrip": 1e-2,
    "poisson": 1e-2,
    "speed": 1e-12,
    "slope_min": 0.8,
    "slope_max": 1.2,
    "recovery": 0.5,
}


@dataclass
class RunConfig:
    datum: InitialDatum = InitialDatum()
    field_file: Path | None = None
    numerics: vlasov.Numerics = vlasov.Numerics()
    lam: float = 1e-3
    K: float = 5.0
    beta: float = 6.0
    T: float = 1.0
    out: Path = Path("out")
    target: Path | None = None
    budget: int = 200
    scheme: str = "auto"
    step: float = 1e-3
    gtol: float = 1e-8
    seed: int = 0
    suites: tuple = DEFAULT_SUITES
    tolerances: dict = field(default_factory=lambda: dict(TOLERANCE_DEFAULTS))
    points: int = 50
    source: Path | None = None


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError:
        raise config_error("config-value", f"[{section}] {key} = {raw!r} is not a valid value")


def _bool(raw):
    s = raw.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _path(base: Path, raw: str) -> Path:
    p = Path(raw.strip()).expanduser()
    return p if p.is_absolute() else base / p


def _suite_list(raw: str) -> tuple:
    items = tuple(s.strip() for s in raw.replace(",", " ").split() if s.strip())
    if items == ("all",):
        return SUITES
    for s in items:
        if s not in SUITES:
            raise config_error("config-value", f"unknown verify suite {s!r}")
    return items


def load_config(path, out=None, suites=None) -> RunConfig:
    """Parse and validate an INI config; referenced files must exist."""
    path = Path(path)
    if not path.is_file():
        raise config_error("config-missing", f"config file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise config_error("config-syntax", str(exc).replace("\n", " "))
    base = path.resolve().parent
    try:
        datum = InitialDatum(
            amplitude=_get(cp, "datum", "amplitude", float, 1.0),
            r_x=_get(cp, "datum", "r_x", float, 1.0),
            r_v=_get(cp, "datum", "r_v", float, 1.0),
        )
        num = vlasov.Numerics(
            h=_get(cp, "numerics", "h", float, 0.25),
            dt=_get(cp, "numerics", "dt", float, 1e-2),
            n=_get(cp, "numerics", "n", int, 32),
            snapshot_stride=_get(cp, "numerics", "snapshot_stride", int, 25),
            field_stride=_get(cp, "numerics", "field_stride", int, 1),
            grid_margin=_get(cp, "numerics", "grid_margin", float, 1.5),
            poisson=_get(cp, "numerics", "poisson", str, "fft"),
            electric=_get(cp, "numerics", "electric", _bool, True),
            keep_ensembles=_get(cp, "numerics", "keep_ensembles", _bool, True),
        )
    except ValueError as exc:
        raise config_error("config-value", str(exc))
    if num.poisson not in ("fft", "direct"):
        raise config_error("config-value", f"unknown Poisson method {num.poisson!r}")
    cfg = RunConfig(datum=datum, numerics=num, source=path)
    cfg.lam = _get(cp, "cost", "lambda", float, 1e-3)
    cfg.K = _get(cp, "cost", "K", float, 5.0)
    cfg.beta = _get(cp, "cost", "beta", float, 6.0)
    cfg.T = _get(cp, "cost", "T", float, 1.0)
    if not cfg.lam >= 0:
        raise config_error("config-value", "lambda must be >= 0")
    if not cfg.K > 0:
        raise config_error("config-value", "K must be > 0")
    if not cfg.beta > 3:
        raise config_error("config-value", "beta must be > 3")
    if not cfg.T > 0:
        raise config_error("config-value", "T must be > 0")
    if cp.has_option("field", "file"):
        cfg.field_file = _path(base, cp.get("field", "file"))
    if cp.has_option("optimize", "target"):
        cfg.target = _path(base, cp.get("optimize", "target"))
    cfg.budget = _get(cp, "optimize", "budget", int, 200)
    cfg.scheme = _get(cp, "optimize", "scheme", str, "auto")
    cfg.step = _get(cp, "optimize", "step", float, 1e-3)
    cfg.gtol = _get(cp, "optimize", "gtol", float, 1e-8)
    cfg.seed = _get(cp, "optimize", "seed", int, 0)
    if cfg.budget < 0 or not cfg.step > 0 or cfg.scheme not in ("auto", "central", "spsa"):
        raise config_error("config-value", "invalid [optimize] budget, step or scheme")
    if cp.has_option("verify", "suites"):
        cfg.suites = _suite_list(cp.get("verify", "suites"))
    for key in TOLERANCE_DEFAULTS:
        cfg.tolerances[key] = _get(cp, "verify", f"tol_{key}", float, TOLERANCE_DEFAULTS[key])
    cfg.points = _get(cp, "verify", "points", int, 50)
    if cp.has_option("output", "dir"):
        cfg.out = _path(base, cp.get("output", "dir"))
    if out is not None:
        cfg.out = Path(out)
    if suites:
        cfg.suites = _suite_list(",".join(suites))
    for ref in (cfg.field_file, cfg.target):
        if ref is not None and not ref.exists():
            raise config_error("config-reference", f"referenced file {ref} does not exist")
    return cfg


def _field_from_config(cfg: RunConfig) -> FieldParams:
    if cfg.field_file is None:
        return single_mode(0.0, T=cfg.T, beta=cfg.beta, K=cfg.K)
    try:
        B = load_field(cfg.field_file)
    except (OSError, ValueError, KeyError) as exc:
        raise config_error("config-reference", f"cannot read field file {cfg.field_file}: {exc}")
    return FieldParams(B.theta, B.modes, T=cfg.T, beta=cfg.beta, K=cfg.K)


def _write_manifest(out: Path, payload: dict, merge: bool = True):
    """Write ``manifest.json``; ``merge`` keeps keys written earlier by this run."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    old = {}
    if merge and path.exists():
        try:
            old = json.loads(path.read_text())
        except ValueError:
            old = {}
    old.update(payload)
    path.write_text(json.dumps(old, indent=2, sort_keys=True, default=str))
    return path


class _Lock:
    def __init__(self, out: Path):
        self.path = out / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError("locked", f"output directory {self.path.parent} is in use "
                           f"(remove {self.path} if no other run is active)", EXIT_RUNTIME)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# -- simulate -------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> dict:
    B = _field_from_config(cfg)
    rec = vlasov.simulate(cfg.datum, B, cfg.numerics)
    vlasov.export_record(rec, cfg.out)
    return {"energy_drift": vlasov.energy_drift(rec), "n_markers": len(rec.final)}


# -- optimize -----------------------------------------------------------------

def _load_target(cfg: RunConfig, template: FieldParams) -> control.Target:
    ref = cfg.target
    if ref is None:
        raise config_error("config-reference", "[optimize] target is required")
    num = cfg.numerics
    try:
        if ref.suffix == ".npz":
            ens = load_ensemble(ref)
            if ens.h != num.h or (ens.datum is not None and ens.datum != cfg.datum):
                raise config_error("config-value", "target lattice does not match datum/numerics")
            start = sample_ensemble(cfg.datum, num.h)
            grid = vlasov.auto_grid(start, cfg.T, num)
            return control.Target(ens, grid, cfg.datum, num, template)
        B_star = load_field(ref)
    except (OSError, ValueError, KeyError) as exc:
        raise config_error("config-reference", f"cannot read target {ref}: {exc}")
    B_star = FieldParams(B_star.theta, B_star.modes, T=cfg.T, beta=cfg.beta, K=cfg.K)
    return control.make_target(B_star, cfg.datum, num)


def cmd_optimize(cfg: RunConfig) -> dict:
    if cfg.target is not None and cfg.target.suffix != ".npz":
        star = load_field(cfg.target)
        template = FieldParams(np.zeros_like(star.theta), star.modes, T=cfg.T,
                               beta=cfg.beta, K=cfg.K)
    else:
        template = None
    initial = _field_from_config(cfg) if cfg.field_file is not None else None
    if initial is not None:
        template = initial
    if template is None:
        raise config_error("config-reference", "optimize needs [field] file or a field target")
    target = _load_target(cfg, template)
    problem = control.CostProblem(template, target, cfg.lam)
    trace = control.optimize(problem, template.theta, cfg.budget, scheme=cfg.scheme,
                             step=cfg.step, gtol=cfg.gtol, seed=cfg.seed,
                             checkpoint_dir=cfg.out / "fields")
    control.write_trace(cfg.out / "trace.csv", trace)
    save_field(cfg.out / "best_field.json", template.with_theta(trace.best_theta))
    init, fin = trace.initial, trace.final
    return {
        "optimizer_status": trace.status,
        "n_evals": trace.n_evals,
        "initial": {"J": init[1], "tracking": init[2], "regularization": init[3]},
        "final": {"J": fin[1], "tracking": fin[2], "regularization": fin[3], "v_norm": fin[4]},
        "grad": trace.grad_info,
        "armijo": trace.armijo,
        "lambda": cfg.lam,
    }


# -- verify -------------------------------------------------------------------

def _support_points(rng, m, datum: InitialDatum, frac=0.9):
    def ball(r):
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        return u * (rng.random((m, 1)) ** (1 / 3) * r * frac)
    return np.hstack([ball(datum.r_x), ball(datum.r_v)])


def _admissible_field(cfg: RunConfig, rng, scale=0.5) -> FieldParams:
    if cfg.field_file is not None:
        return project_to_ball(_field_from_config(cfg))
    B = random_field(rng, T=cfg.T, beta=cfg.beta, K=cfg.K)
    return B.with_theta(B.theta * (scale * cfg.K / vnorm(B).v_norm))


def _suite_flow(cfg, tol):
    rng = np.random.default_rng(cfg.seed)
    B = _admissible_field(cfg, rng)
    rec = vlasov.simulate(cfg.datum, B, replace(cfg.numerics, keep_ensembles=False))
    z = _support_points(rng, cfg.points, cfg.datum)
    det = vlasov.flow_determinants(rec, z)
    ctx = vlasov.record_context(rec)
    back = integrate_flow(integrate_flow(z, rec.T, 0.0, ctx), 0.0, rec.T, ctx)
    radius = rec.radii_series[0].S
    inv = float(np.max(np.linalg.norm(back - z, axis=1)))
    return [("det", float(np.max(np.abs(det - 1))), tol["det"]),
            ("inverse", inv, tol["inverse"] * radius)]


def _suite_conservation(cfg, tol):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for name, B in (("B=0", single_mode(0.0, T=cfg.T, beta=cfg.beta, K=cfg.K)),
                    ("B", _admissible_field(cfg, rng))):
        rec = vlasov.simulate(cfg.datum, B, cfg.numerics)
        rows.append((f"energy[{name}]", vlasov.energy_drift(rec), tol["energy"]))
        jumps = max(float(np.max(np.abs(v - v[0]))) for v in rec.norm_series.values())
        rows.append((f"norms[{name}]", jumps, 0.0))
        fin = rec.final
        got = vlasov.eval_f(rec, rec.T, fin.points)
        scale = max(float(np.max(fin.values)), 1e-300)
        rows.append((f"roundtrip[{name}]", float(np.max(np.abs(got - fin.values))) / scale,
                     tol["roundtrip"]))
        S = np.array([r.S for r in rec.radii_series])
        rows.append((f"S monotone[{name}]", float(max(0.0, np.max(-np.diff(S), initial=0.0))), 0.0))
        r0, rT = rec.radii_series[0], rec.radii_series[-1]
        rows.append((f"Q bound[{name}]", max(0.0, rT.Q - (r0.Q + rec.T * rT.P)), 1e-6))
    return rows


def _suite_poisson(cfg, tol):
    a, Q, n = 1.0, 1.0, cfg.numerics.n
    L = 2.5 * a
    h = 2 * L / (n - 1)
    spec = GridSpec(center=(h / 2,) * 3, L=L, n=n)  # puts a node on the ball centre
    rho = uniform_ball_charge(spec, a, Q)
    psi = solve_potential(rho, cfg.numerics.poisson)
    c = float(interpolate_field(psi, np.zeros(3)))
    o = float(interpolate_field(psi, np.array([2 * a, 0.0, 0.0])))
    res = []
    for m in (n // 2, n):
        hm = 2 * L / (m - 1)
        sp = GridSpec(center=(hm / 2,) * 3, L=L, n=m)
        r = uniform_ball_charge(sp, a, Q)
        res.append(laplacian_residual(r, solve_potential(r, cfg.numerics.poisson)))
    return [("psi(0)", abs(c / (1.5 * Q / a) - 1), tol["poisson"]),
            ("psi(2a)", abs(o / (Q / (2 * a)) - 1), tol["poisson"]),
            ("residual ratio", res[1] / res[0], 1.0)]


def _suite_lipschitz(cfg, tol):
    rng = np.random.default_rng(cfg.seed)
    B = _admissible_field(cfg, rng, scale=0.4)
    dB = rng.normal(size=B.theta.shape)
    dB *= 0.1 * cfg.K / vnorm(B.with_theta(dB)).v_norm
    rep = vlasov.lipschitz_probe(vlasov.epsilon_family(B, dB, 1.0, 4), cfg.datum, cfg.numerics)
    return [("slope-1", abs(rep.slope - 1.0),
             max(tol["slope_max"] - 1.0, 1.0 - tol["slope_min"])),
            ("max ratio", rep.max_ratio, np.inf)]


def _suite_speed(cfg, tol):
    rng = np.random.default_rng(cfg.seed)
    B = _admissible_field(cfg, rng)
    rec = vlasov.simulate(cfg.datum, B, replace(cfg.numerics, electric=False, keep_ensembles=False))
    v0 = np.linalg.norm(sample_ensemble(cfg.datum, cfg.numerics.h).v, axis=1)
    v1 = np.linalg.norm(rec.final.v, axis=1)
    ok = v0 > 0
    return [("|v| drift", float(np.max(np.abs(v1[ok] / v0[ok] - 1))), tol["speed"])]


def _suite_recovery(cfg, tol):
    # manufactured target from a single mode, lambda = 0, start at zero
    if cfg.target is not None and cfg.target.suffix == ".json":
        star = load_field(cfg.target)
        B_star = FieldParams(star.theta, star.modes, T=cfg.T, beta=cfg.beta, K=cfg.K)
    else:
        B_star = single_mode(0.3, T=cfg.T, beta=cfg.beta, K=cfg.K)
    target = control.make_target(B_star, cfg.datum, cfg.numerics)
    template = B_star.with_theta(np.zeros_like(B_star.theta))
    problem = control.CostProblem(template, target, lam=0.0)
    trace = control.optimize(problem, None, cfg.budget, scheme=cfg.scheme, step=cfg.step,
                             gtol=cfg.gtol, seed=cfg.seed)
    J = trace.accepted_J
    v_max = max(r[4] for r in trace.rows)
    return [("tracking ratio", trace.final[2] / trace.initial[2], tol["recovery"]),
            ("J increase", float(max(0.0, np.max(np.diff(J), initial=0.0))), 0.0),
            ("V-norm excess", max(0.0, v_max - cfg.K), 1e-6)]


SUITE_FUNCS = {"flow": _suite_flow, "conservation": _suite_conservation,
               "poisson": _suite_poisson, "lipschitz": _suite_lipschitz, "speed": _suite_speed,
               "recovery": _suite_recovery}


def cmd_verify(cfg: RunConfig) -> dict:
    results = []
    for suite in cfg.suites:
        t0 = time.perf_counter()
        for name, value, tol in SUITE_FUNCS[suite](cfg, cfg.tolerances):
            passed = bool(value <= tol) if np.isfinite(value) else False
            results.append({"suite": suite, "check": name, "value": value, "tolerance": tol,
                            "pass": passed})
        log.info("suite %s took %.1fs", suite, time.perf_counter() - t0)
    print(f"{'suite':<13}{'check':<22}{'measured':>13}{'tolerance':>13}  result")
    for r in results:
        print(f"{r['suite']:<13}{r['check']:<22}{r['value']:>13.4e}{r['tolerance']:>13.4e}  "
              f"{'PASS' if r['pass'] else 'FAIL'}")
    failed = [f"{r['suite']}:{r['check']}" for r in results if not r["pass"]]
    if failed:
        raise CliError("verify-failed", "failed checks: " + ", ".join(failed), EXIT_VERIFY,
                       {"checks": results})
    return {"checks": results}


COMMANDS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpcontrol", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="INI config file")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--suite", action="append", help="verify suite (repeatable, or 'all')")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    payload = {"command": args.command, "config": str(Path(args.config).resolve())}
    started = False
    try:
        cfg = load_config(args.config, out=args.out, suites=args.suite)
        out = cfg.out
        with _Lock(cfg.out):
            (cfg.out / "manifest.json").unlink(missing_ok=True)
            started = True
            payload.update(COMMANDS[args.command](cfg))
        payload.update(status="ok", exit_code=EXIT_OK)
        _write_manifest(out, payload)
        return EXIT_OK
    except CliError as exc:
        err = exc
    except (ValueError, FloatingPointError, RuntimeError, OSError) as exc:
        err = CliError(type(exc).__name__, str(exc), EXIT_RUNTIME)
    print(f"error code={err.code} exit={err.exit_code} message={json.dumps(str(err))}",
          file=sys.stderr)
    payload.update(err.extra)
    payload.update(status="error", exit_code=err.exit_code, error_code=err.code,
                   message=str(err))
    # never touch a directory owned by another run
    if out is not None and err.code != "locked":
        _write_manifest(out, payload, merge=started)
    return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
