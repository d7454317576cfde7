"""The adaptive loop: solve, estimate, mark, refine.

Marking uses bulk (Doerfler) criterion at the square-root level,

    eta(M) >= theta * eta(T)   <=>   sum_{T in M} eta_T^2 >= theta^2 * sum_T eta_T^2,

realized greedily: indicators are ranked by decreasing squared value (ties
broken by ascending element id) and the shortest prefix reaching the
threshold is taken.  The greedy prefix has minimal cardinality among all
qualifying sets.

``amfem`` iterates until the global estimator drops strictly below the
target or the flux-dof budget is hit.  ``two_step`` first coarsens the
data: a greedy Doerfler loop on the per-element data oscillation
``h_T^2 ||f - f_h||_T^2`` refines the initial mesh until
``osc(f, T_H) <= eps/2``, then the adaptive loop runs with the projected,
now oscillation-free, right-hand side and target ``eps/2``.
"""

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__ as _pkg_version
from .estimate import indicators_full, indicators_stress, oscillations
from .fem import (PwConstData, assemble, build_dofmap, eval_f_on_elements,
                  project_f, solve)
from .mesh import create_initial, refine, uniform_refine
from .problems import exact_errors
from .quadrature import TRI_6, tri_points
from .util import ordered_sum

__all__ = [
    "MarkSet", "AdaptTrace", "RateFit", "dorfler_mark", "amfem",
    "approx_data", "two_step", "fit_rate", "contraction_scan",
    "make_reference", "DEFAULT_GAMMA_GRID",
]

DEFAULT_GAMMA_GRID = tuple(np.logspace(-3.0, 1.0, 13))

TRACE_COLUMNS = ("k", "n_elem", "n_flux_dofs", "eta2", "osc2", "osc_f2",
                 "n_marked", "E2", "quasi_err", "secs")


@dataclass(frozen=True)
class MarkSet:
    """Result of one marking step.

    ``ids`` is ascending; ``ranked`` repeats them in selection order.
    ``marked_sum`` and ``total_sum`` come from one cumulative sum over the
    ranked indicators, so ``marked_sum >= theta^2 * total_sum`` holds
    exactly, and dropping the last ranked member would break it.
    """
    ids: np.ndarray
    ranked: np.ndarray
    marked_sum: float
    total_sum: float
    theta: float
    all_zero: bool = False


def dorfler_mark(report, theta):
    """Greedy bulk marking on the squared indicators of ``report``."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    eta2 = np.asarray(report.eta2_elem, dtype=np.float64)
    n = eta2.shape[0]
    order = np.lexsort((np.arange(n), -eta2))
    csum = np.cumsum(eta2[order])
    total = float(csum[-1])
    if total <= 0.0:
        return MarkSet(ids=np.empty(0, dtype=np.int64),
                       ranked=np.empty(0, dtype=np.int64),
                       marked_sum=0.0, total_sum=0.0,
                       theta=theta, all_zero=True)
    thr = theta * theta * total
    k = int(np.searchsorted(csum, thr, side="left")) + 1
    k = min(k, n)
    ranked = order[:k]
    return MarkSet(ids=np.sort(ranked), ranked=ranked,
                   marked_sum=float(csum[k - 1]), total_sum=total,
                   theta=theta)


@dataclass
class IterationState:
    """Everything produced at one adaptive iteration (kept on request)."""
    k: int
    mesh: object
    sol: object
    report: object
    osc: object
    markset: object = None
    refined: np.ndarray = None


class AdaptTrace:
    """Per-iteration records of an adaptive run plus run metadata.

    ``rows`` are dicts keyed by the trace CSV columns; rows of runs without
    a usable error carry ``None`` in ``E2``/``quasi_err`` until they are
    backfilled against a reference solution.
    """

    def __init__(self, meta):
        self.meta = dict(meta)
        self.rows = []
        self.states = []

    def append(self, row, state=None):
        self.rows.append(row)
        if state is not None:
            self.states.append(state)

    def column(self, name):
        return np.array([np.nan if r.get(name) is None else r[name]
                         for r in self.rows], dtype=np.float64)

    def complexity_ratios(self):
        """(n_elem_k - n_elem_0) / sum_{j<k} n_marked_j for k >= 1."""
        n0 = self.rows[0]["n_elem"]
        out = []
        cum = 0
        for k in range(1, len(self.rows)):
            cum += self.rows[k - 1]["n_marked"]
            out.append((self.rows[k]["n_elem"] - n0) / cum if cum else np.nan)
        return np.array(out)

    def to_csv(self, path):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, (int, np.integer)):
                return str(int(v))
            return repr(float(v))

        with open(path, "w") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join(fmt(r.get(c)) for c in TRACE_COLUMNS) + "\n")
        side = str(path)
        side = side[:-4] if side.endswith(".csv") else side
        with open(side + ".meta.json", "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _measure(sol, problem, errors_vs):
    prob = errors_vs if errors_vs is not None else problem
    if prob.has_exact:
        return exact_errors(sol, prob)
    return None


def amfem(problem, eps=0.0, theta=0.5, b=1, max_dofs=100_000, max_iter=100,
          mode="adaptive", estimator="stress", kappa=1.0, gamma=1.0,
          mesh0=None, errors="auto", reference_levels=2, keep=False,
          solver="direct", errors_vs=None, seed=None):
    """Run the adaptive (or uniform) loop and return its trace.

    Parameters
    ----------
    eps : stopping tolerance on the global estimator; the loop runs while
        ``eta_k >= eps`` and stops at the first iterate with ``eta_k < eps``.
    b : bisections per marked element.
    mode : "adaptive" (bulk marking) or "uniform" (every element marked).
    errors : "auto" measures against the closed-form solution when one
        exists; "reference" solves once on ``reference_levels`` extra
        uniform refinements of the final mesh and backfills every row;
        "none" skips error measurement.
    errors_vs : measure errors against this problem spec instead (used by
        :func:`two_step`, whose solve data differ from the original f).
    keep : retain per-iteration meshes/solutions/reports in ``trace.states``.
    """
    if mode not in ("adaptive", "uniform"):
        raise ValueError(f"unknown mode {mode!r}")
    if estimator not in ("stress", "full"):
        raise ValueError(f"unknown estimator {estimator!r}")
    mesh = mesh0 if mesh0 is not None else create_initial(problem.domain)
    keep_states = keep or errors == "reference"

    meta = {
        "problem": problem.name, "domain": problem.domain, "mode": mode,
        "estimator": estimator, "theta": theta, "kappa": kappa, "b": b,
        "eps": eps, "max_dofs": max_dofs, "gamma": gamma, "solver": solver,
        "errors": errors, "seed": seed, "version": _pkg_version,
        "columns": list(TRACE_COLUMNS),
    }
    trace = AdaptTrace(meta)

    k = 0
    while True:
        t0 = time.perf_counter()
        dofmap = build_dofmap(mesh)
        f_elem = project_f(problem.f, mesh)
        sol = solve(assemble(mesh, dofmap, problem, f_elem), f_elem,
                    method=solver)
        if estimator == "stress":
            report = indicators_stress(mesh, sol, problem, f_elem)
        else:
            report = indicators_full(mesh, sol, problem, kappa, f_elem)
        osc = oscillations(mesh, sol, problem, f_elem)

        et = _measure(sol, problem, errors_vs) if errors == "auto" else None
        row = {
            "k": k, "n_elem": mesh.n_elements, "n_flux_dofs": mesh.n_edges,
            "eta2": report.eta2, "osc2": osc.osc2, "osc_f2": osc.osc_f2,
            "n_marked": 0,
            "E2": None if et is None else et.E2,
            "quasi_err": None if et is None else et.E2 + gamma * report.eta2,
            "secs": None,
            "phase": "amfem",
        }
        if et is not None:
            row["flux_err2"] = et.flux2
            row["div_err2"] = et.div2
            row["disp_err2"] = et.disp2
        state = IterationState(k=k, mesh=mesh, sol=sol, report=report, osc=osc)

        stop = (eps > 0.0 and report.eta < eps) \
            or mesh.n_edges >= max_dofs or k >= max_iter
        if not stop:
            if mode == "uniform":
                marked = np.arange(mesh.n_elements)
                ms = None
            else:
                ms = dorfler_mark(report, theta)
                marked = ms.ids
                if marked.size == 0:
                    stop = True
            if not stop:
                rr = refine(mesh, marked, b=b)
                if rr.mesh.n_edges > max_dofs:
                    # budget respected strictly: drop the refinement and stop
                    stop = True
                else:
                    row["n_marked"] = int(marked.size)
                    state.markset = ms
                    state.refined = rr.refined
                    mesh = rr.mesh

        row["secs"] = time.perf_counter() - t0
        trace.append(row, state if keep_states else None)
        if stop:
            break
        k += 1

    if errors == "reference":
        _backfill_reference(trace, problem, gamma, reference_levels, solver,
                            errors_vs)
    if not keep and errors == "reference":
        trace.states = []
    return trace


def _backfill_reference(trace, problem, gamma, levels, solver, errors_vs):
    final = trace.states[-1].mesh
    ref_mesh = uniform_refine(final, levels)
    f_ref = project_f(problem.f, ref_mesh)
    ref_sol = solve(assemble(ref_mesh, build_dofmap(ref_mesh), problem, f_ref),
                    f_ref, method=solver)
    prob = errors_vs if errors_vs is not None else problem
    for row, st in zip(trace.rows, trace.states):
        et = exact_errors(st.sol, prob, reference=ref_sol)
        row["E2"] = et.E2
        row["quasi_err"] = et.E2 + gamma * row["eta2"]
        row["flux_err2"] = et.flux2
        row["div_err2"] = et.div2
        row["disp_err2"] = et.disp2
        row["surrogate"] = True
    trace.meta["reference_levels"] = levels
    trace.meta["reference_n_elem"] = ref_mesh.n_elements


def data_osc_elem(f, mesh):
    """Per-element squared data oscillation h_T^2 ||f - f_h||_T^2."""
    if isinstance(f, PwConstData):
        return np.zeros(mesh.n_elements)
    f_elem = project_f(f, mesh)
    pts = tri_points(TRI_6, mesh.vertices[mesh.triangles])
    fv = eval_f_on_elements(f, mesh, pts)
    _, w = TRI_6
    return ((fv - f_elem[:, None]) ** 2 @ w) * mesh.areas ** 2


class _OscSurface:
    """Adapter so dorfler_mark can rank plain per-element values."""

    def __init__(self, values):
        self.eta2_elem = values


def _approx_rows(f, mesh0, eps, theta_data, b, max_iter):
    mesh = mesh0
    rows = []
    for k in range(max_iter + 1):
        t0 = time.perf_counter()
        osc2_elem = data_osc_elem(f, mesh)
        osc2 = ordered_sum(osc2_elem)
        row = {"k": k, "n_elem": mesh.n_elements, "n_flux_dofs": mesh.n_edges,
               "eta2": None, "osc2": osc2, "osc_f2": osc2, "n_marked": 0,
               "E2": None, "quasi_err": None, "secs": None, "phase": "approx"}
        if np.sqrt(osc2) <= eps:
            row["secs"] = time.perf_counter() - t0
            rows.append(row)
            return mesh, rows
        ms = dorfler_mark(_OscSurface(osc2_elem), theta_data)
        if ms.ids.size == 0:
            row["secs"] = time.perf_counter() - t0
            rows.append(row)
            return mesh, rows
        rr = refine(mesh, ms.ids, b=b)
        row["n_marked"] = int(ms.ids.size)
        row["secs"] = time.perf_counter() - t0
        rows.append(row)
        mesh = rr.mesh
    raise RuntimeError(
        f"data approximation did not reach osc <= {eps} in {max_iter} steps")


def approx_data(f, mesh0, tol, theta_data=0.6, b=1, max_iter=200):
    """Refine ``mesh0`` until the data oscillation of f drops below ``tol``.

    Greedy bulk marking on the per-element oscillation contributions with
    parameter ``theta_data``.
    """
    mesh, _ = _approx_rows(f, mesh0, tol, theta_data, b, max_iter)
    return mesh


def two_step(problem, eps, theta=0.5, b=1, theta_data=0.6, max_dofs=100_000,
             max_iter=100, gamma=1.0, solver="direct", keep=False):
    """Data approximation followed by the adaptive loop, each with eps/2.

    The second phase solves with the projected data, whose oscillation
    vanishes on every refinement; errors are still measured against the
    original problem when it has a closed-form solution.
    """
    mesh0 = create_initial(problem.domain)
    mesh_h, rows1 = _approx_rows(problem.f, mesh0, 0.5 * eps, theta_data, b,
                                 max_iter)
    if isinstance(problem.f, PwConstData):
        f_data = problem.f
    else:
        f_data = PwConstData(mesh_h, project_f(problem.f, mesh_h))
    mod = replace(problem, f=f_data)
    # the adaptive phase continues on the data-approximation mesh, where
    # the projected source is resolved exactly
    trace = amfem(mod, eps=0.5 * eps, theta=theta, b=b, max_dofs=max_dofs,
                  max_iter=max_iter, gamma=gamma, solver=solver, keep=keep,
                  mesh0=mesh_h, errors_vs=problem)
    trace.meta.update({
        "problem": problem.name, "mode": "two_step", "eps": eps,
        "approx_rows": len(rows1), "theta_data": theta_data,
    })
    offset = len(rows1)
    for r in trace.rows:
        r["k"] = r["k"] + offset
    trace.rows = rows1 + trace.rows
    return trace


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(error) against log(n_elem - n_elem_0)."""
    rate: float
    stderr: float
    n_points: int

    @property
    def band(self):
        return (self.rate - 2.0 * self.stderr, self.rate + 2.0 * self.stderr)


def fit_rate(trace, quantity="flux_err", burn_in=2):
    """Fit error ~ C (n_elem - n_elem_0)^(-s); returns s with its stderr.

    ``quantity`` selects a squared trace column ("flux_err", "E", "eta",
    "osc_f" map to their ``*2`` columns and are square-rooted first).
    """
    key = {"flux_err": "flux_err2", "E": "E2", "eta": "eta2",
           "osc_f": "osc_f2", "osc": "osc2"}.get(quantity)
    if key is None:
        raise ValueError(f"unknown quantity {quantity!r}")
    n0 = trace.rows[0]["n_elem"]
    xs, ys = [], []
    for r in trace.rows[burn_in:]:
        v = r.get(key)
        n = r["n_elem"] - n0
        if v is not None and np.isfinite(v) and v > 0.0 and n > 0:
            xs.append(np.log(float(n)))
            ys.append(0.5 * np.log(float(v)))
    if len(xs) < 3:
        raise ValueError("need at least three usable trace rows to fit a rate")
    coef, cov = np.polyfit(xs, ys, 1, cov=True)
    return RateFit(rate=float(-coef[0]), stderr=float(np.sqrt(cov[0, 0])),
                   n_points=len(xs))


def contraction_scan(trace, gammas=DEFAULT_GAMMA_GRID, start=0):
    """Scan gamma for the best uniform quasi-error contraction factor.

    For each gamma the quasi-error is E2_k + gamma * eta2_k; returns the
    gamma minimizing the maximal consecutive ratio, that ratio and the
    per-gamma table.
    """
    E2 = trace.column("E2")[start:]
    eta2 = trace.column("eta2")[start:]
    ok = np.isfinite(E2) & np.isfinite(eta2)
    E2, eta2 = E2[ok], eta2[ok]
    if E2.size < 2:
        raise ValueError("trace has fewer than two rows with errors")
    table = {}
    for g in gammas:
        q = E2 + g * eta2
        table[float(g)] = float(np.max(q[1:] / q[:-1]))
    best = min(table, key=table.get)
    return best, table[best], table


def make_reference(problem, mesh, levels=2, solver="direct"):
    """Solve once on ``levels`` uniform refinements of ``mesh``."""
    ref_mesh = uniform_refine(mesh, levels)
    f_ref = project_f(problem.f, ref_mesh)
    return solve(assemble(ref_mesh, build_dofmap(ref_mesh), problem, f_ref),
                 f_ref, method=solver)
