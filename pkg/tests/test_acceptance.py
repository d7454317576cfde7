"""Acceptance suite: one frozen end-to-end contract per test.

Every run stays below 1e5 flux dofs.  The shared benchmark runs live in
module-scoped fixtures; tolerances and seeds were fixed ahead of time.
The adaptive L-shape budget is capped at 3e4 dofs so the corner grading
(generation <= 31) keeps the divergence-exactness check above the float64
representation floor ulp(p_e)/|T|.
"""

import itertools

import numpy as np
import pytest

from amfem.adapt import (amfem, approx_data, contraction_scan, data_osc_elem,
                         dorfler_mark, fit_rate)
from amfem.estimate import indicators_stress
from amfem.fem import assemble, build_dofmap, project_f, solve
from amfem.mesh import (ancestor_map, create_initial, overlay, refine,
                        uniform_refine)
from amfem.problems import builtin
from amfem.quadrature import TRI_7, tri_points
from amfem.util import ordered_sum


class Report:
    """Indicator stand-in: dorfler_mark only reads eta2_elem."""

    def __init__(self, eta2_elem):
        self.eta2_elem = np.asarray(eta2_elem, dtype=np.float64)


def solve_on(problem, mesh):
    f_elem = project_f(problem.f, mesh)
    return solve(assemble(mesh, build_dofmap(mesh), problem, f_elem), f_elem)


def flux_dist2(problem, mesh, field_a, field_b):
    """|| A^(-1/2)(a - b) ||^2 with both fields living on ``mesh``."""
    pts = tri_points(TRI_7, mesh.vertices[mesh.triangles])
    elems = np.arange(mesh.n_elements)
    d = field_a.eval(elems, pts) - field_b.eval(elems, pts)
    ainv = problem.A_inv(pts.reshape(-1, 2)).reshape(
        pts.shape[0], pts.shape[1], 2, 2)
    quad = np.einsum("tqi,tqij,tqj->tq", d, ainv, d)
    return float(np.sum((quad @ TRI_7[1]) * mesh.areas))


# ---------------------------------------------------------------------------
# shared benchmark runs


@pytest.fixture(scope="module")
def sine_adaptive():
    return amfem(builtin("square_sine"), theta=0.5, max_dofs=20_000,
                 keep=True)


@pytest.fixture(scope="module")
def sine_uniform():
    return amfem(builtin("square_sine"), mode="uniform", max_dofs=100_000,
                 keep=True)


@pytest.fixture(scope="module")
def lshape_adaptive():
    return amfem(builtin("lshape_singular"), theta=0.5, max_dofs=30_000,
                 keep=True)


@pytest.fixture(scope="module")
def lshape_uniform():
    return amfem(builtin("lshape_singular"), mode="uniform", max_dofs=100_000,
                 keep=True)


@pytest.fixture(scope="module")
def pwconst_reference():
    return amfem(builtin("square_pwconst"), theta=0.5, max_dofs=8_000,
                 errors="reference", keep=True)


@pytest.fixture(scope="module")
def checkerboard_adaptive():
    return amfem(builtin("checkerboard"), theta=0.5, max_dofs=4_000,
                 errors="none", keep=True)


@pytest.fixture(scope="module")
def all_traces(sine_adaptive, sine_uniform, lshape_adaptive, lshape_uniform,
               pwconst_reference, checkerboard_adaptive):
    return {
        "sine_adaptive": sine_adaptive,
        "sine_uniform": sine_uniform,
        "lshape_adaptive": lshape_adaptive,
        "lshape_uniform": lshape_uniform,
        "pwconst_reference": pwconst_reference,
        "checkerboard_adaptive": checkerboard_adaptive,
    }


@pytest.fixture(scope="module")
def pythagoras_triple():
    # coarse mesh, one adaptive step, two extra uniform levels as reference
    problem = builtin("square_pwconst")
    coarse = uniform_refine(create_initial(problem.domain), 2)
    s_coarse = solve_on(problem, coarse)
    ms = dorfler_mark(indicators_stress(coarse, s_coarse, problem), 0.5)
    mid = refine(coarse, ms.ids, b=1).mesh
    s_mid = solve_on(problem, mid)
    ref = uniform_refine(mid, 2)
    s_ref = solve_on(problem, ref)
    return problem, ref, (s_coarse, s_mid, s_ref)


# ---------------------------------------------------------------------------
# the contracts


def test_divergence_exactness_on_every_solve(all_traces, pythagoras_triple):
    sols = [st.sol for tr in all_traces.values() for st in tr.states]
    sols.extend(pythagoras_triple[2])
    assert len(sols) >= 150
    for sol in sols:
        bound = 1e-9 * (1.0 + np.abs(sol.f_elem).max())
        assert sol.div_defect <= bound


def test_discrete_pythagoras_with_resolved_data(pythagoras_triple):
    problem, ref, (s_coarse, s_mid, s_ref) = pythagoras_triple
    pc = s_coarse.field.restrict_to(ref)
    pm = s_mid.field.restrict_to(ref)
    lhs = flux_dist2(problem, ref, s_ref.field, pc)
    rhs = (flux_dist2(problem, ref, s_ref.field, pm)
           + flux_dist2(problem, ref, pm, pc))
    assert lhs > 0.0
    assert abs(lhs - rhs) / lhs <= 1e-8


def test_efficiency_index_stays_in_narrow_band(sine_adaptive):
    rows = [r for r in sine_adaptive.rows if r["n_flux_dofs"] >= 1000]
    assert len(rows) >= 8
    eff = np.array([np.sqrt(r["eta2"] / (r["E2"] + r["osc2"]))
                    for r in rows])
    assert eff.max() / eff.min() <= 3.0


def test_fixed_field_estimator_reduction_each_step(sine_adaptive,
                                                   lshape_adaptive,
                                                   pwconst_reference):
    lam = 1.0 - 2.0 ** -0.5  # b = 1 bisection per marked element
    for trace in (sine_adaptive, lshape_adaptive, pwconst_reference):
        problem = builtin(trace.meta["problem"])
        steps = 0
        for a, b in zip(trace.states[:-1], trace.states[1:]):
            if a.markset is None:
                continue
            frozen = a.sol.field.restrict_to(b.mesh)
            fine = indicators_stress(b.mesh, frozen, problem)
            rhs = a.report.eta2 - lam * a.report.subset_sum(a.markset.ids)
            assert fine.eta2 <= rhs + 1e-10
            steps += 1
        assert steps >= 10


def test_quasi_error_contraction_on_resolved_data(pwconst_reference):
    assert len(pwconst_reference.rows) >= 10
    best, ratio, _ = contraction_scan(pwconst_reference)
    assert ratio <= 0.95


def test_convergence_rates_uniform_vs_adaptive(sine_uniform, sine_adaptive,
                                               lshape_uniform,
                                               lshape_adaptive):
    bands = [
        (sine_uniform, 0.50, 0.10),
        (sine_adaptive, 0.50, 0.10),
        (lshape_uniform, 0.33, 0.07),
        (lshape_adaptive, 0.50, 0.08),
    ]
    for trace, target, tol in bands:
        fit = fit_rate(trace, "flux_err")
        assert abs(fit.rate - target) <= tol, \
            (trace.meta["problem"], trace.meta["mode"], fit.rate)


def test_bulk_marking_minimal_cardinality():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(2, 13))
        vals = rng.random(n) ** 2
        if rng.random() < 0.3:
            vals[int(rng.integers(n))] = 0.0
        if n >= 4 and rng.random() < 0.3:
            vals[1] = vals[0]  # force ties
        theta = float(rng.uniform(0.15, 0.95))
        ms = dorfler_mark(Report(vals), theta)
        target = theta * theta * vals.sum()
        best = min(m for m in range(1, n + 1)
                   if any(vals[list(c)].sum() >= target - 1e-12
                          for c in itertools.combinations(range(n), m)))
        assert ms.ids.size == best
        assert ms.marked_sum >= target - 1e-12


def test_overlay_size_bound():
    rng = np.random.default_rng(7)
    domains = ("unit_square", "lshape", "checkerboard")
    for trial in range(200):
        root = create_initial(domains[trial % 3])
        pair = []
        for _ in range(2):
            mesh = root
            for _ in range(int(rng.integers(1, 5))):
                marked = np.flatnonzero(rng.random(mesh.n_elements) < 0.4)
                if marked.size == 0:
                    marked = np.array([int(rng.integers(mesh.n_elements))])
                mesh = refine(mesh, marked, b=int(rng.integers(1, 3))).mesh
            pair.append(mesh)
        ov = overlay(pair[0], pair[1])
        assert ov.n_elements <= (pair[0].n_elements + pair[1].n_elements
                                 - root.n_elements)


def test_refinement_complexity_bounded(sine_adaptive, lshape_adaptive,
                                       pwconst_reference,
                                       checkerboard_adaptive):
    for trace in (sine_adaptive, lshape_adaptive, pwconst_reference,
                  checkerboard_adaptive):
        ratios = trace.complexity_ratios()
        ratios = ratios[np.isfinite(ratios)]
        assert ratios.size >= 10
        assert ratios.max() <= 8.0


def test_projected_data_oscillation_monotone(sine_adaptive,
                                             checkerboard_adaptive):
    def projected_osc2(problem, fine, coarse):
        # oscillation of the fine-mesh projection f_h, seen on the coarse
        # mesh; exact for piecewise constants
        f_fine = project_f(problem.f, fine)
        amap = ancestor_map(fine, coarse)
        mass = np.zeros(coarse.n_elements)
        np.add.at(mass, amap, fine.areas * f_fine)
        mean = mass / coarse.areas
        dev2 = np.zeros(coarse.n_elements)
        np.add.at(dev2, amap, fine.areas * (f_fine - mean[amap]) ** 2)
        return coarse.areas * dev2

    pairs = 0
    for trace in (sine_adaptive, checkerboard_adaptive):
        problem = builtin(trace.meta["problem"])
        states = trace.states
        idx = [(i, i + 1) for i in range(len(states) - 1)]
        idx.append((0, len(states) - 1))
        for i, j in idx:
            coarse, fine = states[i].mesh, states[j].mesh
            osc_proj = np.sqrt(projected_osc2(problem, fine, coarse).sum())
            osc_data = np.sqrt(data_osc_elem(problem.f, coarse).sum())
            assert osc_proj <= osc_data + 1e-12
            pairs += 1
    assert pairs >= 30


def test_data_approximation_tolerance_and_growth():
    def f(x):
        return x[:, 0]

    root = create_initial("unit_square")
    osc0 = float(np.sqrt(ordered_sum(data_osc_elem(f, root))))
    assert osc0 == pytest.approx(1.0 / 6.0, rel=1e-12)
    sizes, epss = [], []
    for k in range(1, 7):
        eps = osc0 * 2.0 ** -k
        mesh = approx_data(f, root, eps)
        osc = float(np.sqrt(ordered_sum(data_osc_elem(f, mesh))))
        assert osc <= eps
        assert mesh.n_elements * eps <= 1.0
        sizes.append(mesh.n_elements)
        epss.append(eps)
    slope = np.polyfit(np.log(1.0 / np.array(epss)), np.log(sizes), 1)[0]
    assert 0.5 <= slope <= 1.2
