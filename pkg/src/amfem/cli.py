"""Command line front end: adaptive runs, comparative studies, self-checks.

Two subcommands:

``amfem run``
    Drives one solve-estimate-mark-refine run (adaptive, uniform, or the
    two-step data-approximation variant) and writes plot-ready artifacts
    into the output directory: ``trace.csv`` with a ``trace.meta.json``
    sidecar, the final mesh, per-element solution and indicator tables,
    and ``summary.json`` with the final estimator value, errors and the
    fitted convergence rate.

``amfem verify``
    Runs the built-in verification suites (mesh, dorfler, pythagoras,
    reduction, oscillation, upper_bound, or all) and prints one line per
    check with the measured constant and its frozen bound.

Configuration is flag-driven; ``--config FILE`` reads the same keys from
a flat ``key = value`` text file (flags win over file values).  Custom
problems use ``problem = custom`` together with per-macro-element
coefficients on the chosen initial mesh:

    a.R       constant diffusion a on initial element R (A = a * I there)
    f.I.J     global source term coefficient of x^I * y^J
    f.R.I.J   source polynomial coefficient on initial element R only

Exit codes: 0 success, 2 configuration error, 3 solver or mesh failure,
4 verification failure.  Failures print a single machine-parsable line
``amfem: error=<kind> detail="..."`` on stderr.

All runs are deterministic for a fixed config and seed; trace CSV bytes
are reproducible except for the wall-clock ``secs`` column.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .adapt import (DEFAULT_GAMMA_GRID, amfem, contraction_scan, fit_rate,
                    two_step)
from .estimate import dump_indicators_csv
from .fem import AssemblyError, SolverError, dump_solution_csv
from .mesh import INITIAL_DOMAINS, MeshError
from .problems import BUILTIN_PROBLEMS, ProblemSpec, builtin
from .verify import SUITE_NAMES, run_many

__all__ = ["main", "RunConfig", "ConfigError", "load_config",
           "make_custom_problem"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4

MODES = ("adaptive", "uniform", "two_step")
ESTIMATORS = ("stress", "full")


class ConfigError(Exception):
    """Raised for malformed or out-of-range run configuration."""


def _fail(code, kind, detail):
    detail = " ".join(str(detail).split())
    print("amfem: error=%s detail=%s" % (kind, json.dumps(detail)),
          file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Validated inputs of one ``run`` invocation."""

    problem: str = "square_sine"
    domain: str = "unit_square"
    theta: float = 0.5
    kappa: float = 1.0
    b: int = 1
    eps: float = 0.0
    max_dofs: int = 100_000
    mode: str = "adaptive"
    estimator: str = "stress"
    gamma: float = 1.0
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    out: str = "amfem-out"
    seed: int = 0
    coeffs: dict = field(default_factory=dict)

    def validate(self):
        if self.problem != "custom" and self.problem not in BUILTIN_PROBLEMS:
            raise ConfigError(
                "unknown problem %r; builtins: %s (or 'custom')"
                % (self.problem, ", ".join(sorted(BUILTIN_PROBLEMS))))
        if self.domain not in INITIAL_DOMAINS:
            raise ConfigError("unknown domain %r; choose from %s"
                              % (self.domain, ", ".join(INITIAL_DOMAINS)))
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError("theta must lie in (0, 1], got %r" % self.theta)
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1], got %r" % self.kappa)
        if self.b < 1:
            raise ConfigError("b must be a positive integer, got %r" % self.b)
        if self.eps < 0.0:
            raise ConfigError("eps must be nonnegative, got %r" % self.eps)
        if self.max_dofs < 1:
            raise ConfigError("max_dofs must be positive, got %r"
                              % self.max_dofs)
        if self.eps == 0.0 and self.mode == "two_step":
            raise ConfigError("two_step mode needs a positive eps")
        if self.mode not in MODES:
            raise ConfigError("mode must be one of %s, got %r"
                              % ("/".join(MODES), self.mode))
        if self.estimator not in ESTIMATORS:
            raise ConfigError("estimator must be one of %s, got %r"
                              % ("/".join(ESTIMATORS), self.estimator))
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive, got %r" % self.gamma)
        if len(self.gamma_grid) == 0 or min(self.gamma_grid) <= 0.0:
            raise ConfigError("gamma_grid needs positive entries")
        if self.coeffs and self.problem != "custom":
            raise ConfigError(
                "coefficient keys (a.*, f.*) require problem = custom")
        return self


def _parse_kv_lines(lines, source):
    out = {}
    for ln, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("%s:%d: expected 'key = value', got %r"
                              % (source, ln, raw.rstrip()))
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise ConfigError("%s:%d: empty key or value" % (source, ln))
        if key in out:
            raise ConfigError("%s:%d: duplicate key %r" % (source, ln, key))
        out[key] = val
    return out


def _as_float(key, val):
    try:
        return float(val)
    except ValueError:
        raise ConfigError("key %r needs a number, got %r" % (key, val))


def _as_int(key, val):
    try:
        return int(val)
    except ValueError:
        raise ConfigError("key %r needs an integer, got %r" % (key, val))


_FLOAT_KEYS = ("theta", "kappa", "eps", "gamma")
_INT_KEYS = ("b", "max_dofs", "seed")
_STR_KEYS = ("problem", "domain", "mode", "estimator", "out")


def _apply_kv(cfg, kv):
    for key, val in kv.items():
        if key in _FLOAT_KEYS:
            setattr(cfg, key, _as_float(key, val))
        elif key in _INT_KEYS:
            setattr(cfg, key, _as_int(key, val))
        elif key in _STR_KEYS:
            setattr(cfg, key, val)
        elif key == "gamma_grid":
            cfg.gamma_grid = _parse_gamma_grid(val)
        elif key.split(".", 1)[0] in ("a", "f"):
            cfg.coeffs[key] = _as_float(key, val)
        else:
            raise ConfigError("unknown config key %r" % key)
    return cfg


def _parse_gamma_grid(text):
    try:
        grid = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError("gamma_grid must be comma-separated numbers, got %r"
                          % text)
    if not grid:
        raise ConfigError("gamma_grid must not be empty")
    return grid


def load_config(path=None, overrides=None):
    """Build a validated RunConfig from a key=value file plus overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                kv = _parse_kv_lines(fh, source=os.path.basename(path))
        except OSError as exc:
            raise ConfigError("cannot read config file: %s" % exc)
        _apply_kv(cfg, kv)
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg.validate()


# ---------------------------------------------------------------------------
# custom problems


def _locator(mesh0):
    """Map points to the initial element containing them.

    Ties on shared edges go to the lowest element id; points pushed
    marginally outside by roundoff go to the nearest element.
    """
    verts = mesh0.vertices[mesh0.triangles]

    def locate(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        owner = np.full(n, -1, dtype=np.int64)
        best = np.full(n, -np.inf)
        nearest = np.zeros(n, dtype=np.int64)
        for t in range(verts.shape[0]):
            a, b, c = verts[t]
            m = np.column_stack((b - a, c - a))
            lam = np.linalg.solve(m, (x - a).T).T
            bary = np.column_stack((1.0 - lam.sum(axis=1), lam))
            low = bary.min(axis=1)
            hit = (low >= -1e-10) & (owner < 0)
            owner[hit] = t
            upd = low > best
            best[upd] = low[upd]
            nearest[upd] = t
        owner[owner < 0] = nearest[owner < 0]
        return owner

    return locate


def _poly_table(coeffs, n_regions):
    """Split f.* keys into per-region {(i, j): c} tables."""
    table = [dict() for _ in range(n_regions)]
    for key, c in coeffs.items():
        parts = key.split(".")
        if parts[0] != "f":
            continue
        if len(parts) == 3:
            regions = range(n_regions)
            i, j = parts[1], parts[2]
        elif len(parts) == 4:
            r = _as_int(key, parts[1])
            if not 0 <= r < n_regions:
                raise ConfigError("key %r: region out of range [0, %d)"
                                  % (key, n_regions))
            regions = (r,)
            i, j = parts[2], parts[3]
        else:
            raise ConfigError("bad source key %r; use f.I.J or f.R.I.J" % key)
        i, j = _as_int(key, i), _as_int(key, j)
        if i < 0 or j < 0:
            raise ConfigError("key %r: powers must be nonnegative" % key)
        for r in regions:
            table[r][(i, j)] = table[r].get((i, j), 0.0) + c
    return table


def _region_values(coeffs, n_regions):
    vals = np.ones(n_regions)
    for key, c in coeffs.items():
        parts = key.split(".")
        if parts[0] != "a":
            continue
        if len(parts) != 2:
            raise ConfigError("bad coefficient key %r; use a.R" % key)
        r = _as_int(key, parts[1])
        if not 0 <= r < n_regions:
            raise ConfigError("key %r: region out of range [0, %d)"
                              % (key, n_regions))
        if c <= 0.0:
            raise ConfigError("key %r: diffusion constant must be positive"
                              % key)
        vals[r] = c
    return vals


def make_custom_problem(coeffs, domain="unit_square"):
    """Problem with per-initial-element constant A = a*I and polynomial f.

    ``coeffs`` maps flat config keys (``a.R``, ``f.I.J``, ``f.R.I.J``) to
    numbers; unspecified regions default to a = 1 and f = 0.  Boundary
    data is homogeneous.
    """
    from .mesh import create_initial

    mesh0 = create_initial(domain)
    nr = mesh0.n_elements
    a_vals = _region_values(coeffs, nr)
    f_tab = _poly_table(coeffs, nr)
    locate = _locator(mesh0)

    def A(x):
        x = np.atleast_2d(x)
        a = a_vals[locate(x)]
        return a[:, None, None] * np.eye(2)[None]

    def A_inv(x):
        x = np.atleast_2d(x)
        a = a_vals[locate(x)]
        return (1.0 / a)[:, None, None] * np.eye(2)[None]

    def f(x):
        x = np.atleast_2d(x)
        region = locate(x)
        out = np.zeros(x.shape[0])
        for r in range(nr):
            sel = region == r
            if not sel.any() or not f_tab[r]:
                continue
            xr, yr = x[sel, 0], x[sel, 1]
            acc = np.zeros(xr.shape[0])
            for (i, j), c in sorted(f_tab[r].items()):
                acc += c * xr ** i * yr ** j
            out[sel] = acc
        return out

    return ProblemSpec(name="custom", domain=domain, A=A, A_inv=A_inv, f=f)


# ---------------------------------------------------------------------------
# run


def _run_trace(cfg, problem):
    if cfg.mode == "two_step":
        return two_step(problem, eps=cfg.eps, theta=cfg.theta, b=cfg.b,
                        max_dofs=cfg.max_dofs, gamma=cfg.gamma, keep=True)
    return amfem(problem, eps=cfg.eps, theta=cfg.theta, b=cfg.b,
                 max_dofs=cfg.max_dofs, mode=cfg.mode,
                 estimator=cfg.estimator, kappa=cfg.kappa, gamma=cfg.gamma,
                 keep=True, seed=cfg.seed)


def _summarize(cfg, trace):
    last = trace.rows[-1]
    final = {
        "k": last["k"], "n_elem": last["n_elem"],
        "n_flux_dofs": last["n_flux_dofs"],
        "eta": float(np.sqrt(last["eta2"])) if last["eta2"] is not None
        else None,
        "eta2": last["eta2"], "osc2": last["osc2"], "osc_f2": last["osc_f2"],
        "E2": last["E2"], "quasi_err": last["quasi_err"],
    }
    summary = {
        "version": __version__,
        "problem": cfg.problem, "domain": cfg.domain, "mode": cfg.mode,
        "estimator": cfg.estimator, "theta": cfg.theta, "kappa": cfg.kappa,
        "b": cfg.b, "eps": cfg.eps, "max_dofs": cfg.max_dofs,
        "gamma": cfg.gamma, "seed": cfg.seed,
        "iterations": len(trace.rows), "final": final,
        "rate": None, "rate_quantity": None, "contraction": None,
    }
    for quantity in ("flux_err", "eta"):
        try:
            fit = fit_rate(trace, quantity)
        except ValueError:
            continue
        summary["rate"] = {"value": fit.rate, "stderr": fit.stderr,
                           "n_points": fit.n_points}
        summary["rate_quantity"] = quantity
        break
    try:
        best, ratio, _ = contraction_scan(trace, cfg.gamma_grid)
        summary["contraction"] = {"best_gamma": best, "max_ratio": ratio}
    except ValueError:
        pass
    return summary


def cmd_run(args):
    overrides = {
        "problem": args.problem, "theta": args.theta, "kappa": args.kappa,
        "b": args.b, "eps": args.eps, "max_dofs": args.max_dofs,
        "mode": args.mode, "estimator": args.estimator, "out": args.out,
        "seed": args.seed,
        "gamma_grid": (_parse_gamma_grid(args.gamma_grid)
                       if args.gamma_grid is not None else None),
    }
    cfg = load_config(args.config, overrides)
    if cfg.problem == "custom":
        problem = make_custom_problem(cfg.coeffs, cfg.domain)
    else:
        problem = builtin(cfg.problem)
        cfg.domain = problem.domain

    trace = _run_trace(cfg, problem)

    os.makedirs(cfg.out, exist_ok=True)
    trace.to_csv(os.path.join(cfg.out, "trace.csv"))
    state = trace.states[-1]
    state.mesh.save(os.path.join(cfg.out, "final_mesh.txt"))
    dump_solution_csv(state.sol, os.path.join(cfg.out, "solution"))
    dump_indicators_csv(state.report, state.osc,
                        os.path.join(cfg.out, "indicators.csv"))
    summary = _summarize(cfg, trace)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    final = summary["final"]
    line = "%s %s: %d iterations, %d elements, %d flux dofs" % (
        cfg.problem, cfg.mode, summary["iterations"], final["n_elem"],
        final["n_flux_dofs"])
    if final["eta"] is not None:
        line += ", eta=%.6g" % final["eta"]
    if summary["rate"] is not None:
        line += ", rate(%s)=%.3f" % (summary["rate_quantity"],
                                     summary["rate"]["value"])
    print(line)
    print("artifacts in %s" % cfg.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args):
    names = tuple(args.suite) or ("all",)
    for n in names:
        if n not in SUITE_NAMES + ("all",):
            raise ConfigError("unknown suite %r; choose from %s"
                              % (n, ", ".join(SUITE_NAMES + ("all",))))
    results = run_many(names, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print("%d checks, %d failed" % (len(results), len(failed)))
    if failed:
        return _fail(EXIT_VERIFY, "verification",
                     "failed: " + ", ".join("%s.%s" % (r.suite, r.name)
                                            for r in failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    p = _Parser(prog="amfem", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version="amfem %s" % __version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one adaptive / uniform / two_step "
                                   "study and write artifacts")
    r.add_argument("--problem", help="builtin problem name or 'custom'")
    r.add_argument("--config", help="flat key=value configuration file")
    r.add_argument("--theta", type=float, help="bulk marking fraction in (0,1]")
    r.add_argument("--kappa", type=float,
                   help="data weight exponent for the full estimator")
    r.add_argument("--b", type=int, help="bisections per marked element")
    r.add_argument("--eps", type=float, help="stop once eta < eps")
    r.add_argument("--max-dofs", type=int, dest="max_dofs",
                   help="flux dof budget")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--estimator", choices=ESTIMATORS)
    r.add_argument("--gamma-grid", dest="gamma_grid",
                   help="comma-separated gammas for the contraction scan")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the built-in verification suites")
    v.add_argument("suite", nargs="*",
                   help="suite names (default: all); choose from %s"
                   % ", ".join(SUITE_NAMES + ("all",)))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (SolverError, AssemblyError, MeshError) as exc:
        return _fail(EXIT_SOLVER, "solver", exc)


if __name__ == "__main__":
    sys.exit(main())
