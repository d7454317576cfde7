"""Mixed RT0/P0 assembly and solve: dof bookkeeping, exactness, symmetry."""

import numpy as np
import pytest

import amfem.quadrature as quad
from amfem.fem import (FluxField, MixedSolution, PwConstData, SolverError,
                       assemble, build_dofmap, project_f, rt0_interpolate,
                       solve)
from amfem.mesh import create_initial, refine, uniform_refine
from amfem.problems import ProblemSpec, builtin, exact_errors


def identity_A(x):
    x = np.atleast_2d(x)
    return np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy()


def const_problem(fval=1.0, name="const"):
    return ProblemSpec(name=name, domain="unit_square", A=identity_A,
                       A_inv=identity_A,
                       f=lambda x: np.full(np.atleast_2d(x).shape[0], fval))


def solve_on(problem, mesh, method="direct"):
    dm = build_dofmap(mesh)
    fe = project_f(problem.f, mesh)
    return solve(assemble(mesh, dm, problem, fe), fe, method=method)


def edge_id(mesh, va, vb):
    """Edge index joining the vertices at coordinates va, vb."""
    ia = int(np.flatnonzero(np.all(mesh.vertices == np.asarray(va), axis=1))[0])
    ib = int(np.flatnonzero(np.all(mesh.vertices == np.asarray(vb), axis=1))[0])
    lo, hi = min(ia, ib), max(ia, ib)
    hits = np.flatnonzero((mesh.edges[:, 0] == lo) & (mesh.edges[:, 1] == hi))
    assert hits.size == 1
    return int(hits[0])


# ---------------------------------------------------------------------------
# dof bookkeeping


def test_dof_counts_initial_and_refined():
    m = create_initial("unit_square")
    dm = build_dofmap(m)
    assert dm.n_flux == 5
    assert dm.n_disp == 2
    m1 = uniform_refine(m)
    dm1 = build_dofmap(m1)
    # criss-cross square: 5 vertices, 4 triangles, 8 edges by Euler
    assert dm1.n_flux == 8
    assert dm1.n_disp == 4


def test_project_f_linear_is_centroid_value():
    m = create_initial("unit_square")
    fe = project_f(lambda x: np.atleast_2d(x)[:, 0], m)
    assert np.allclose(fe, m.centroids[:, 0], atol=1e-15)
    m2 = uniform_refine(m, 3)
    fe2 = project_f(lambda x: np.atleast_2d(x)[:, 0], m2)
    assert np.allclose(fe2, m2.centroids[:, 0], atol=1e-14)


def test_pwconst_data_values_on_descendants():
    m = create_initial("unit_square")
    data = PwConstData(m, np.array([3.0, -1.0]))
    fine = uniform_refine(m, 2)
    vals = data.values_on(fine)
    # children inherit their root element's constant
    assert np.allclose(vals, np.where(fine.root_elem == 0, 3.0, -1.0))
    fe = project_f(data, fine)
    assert np.allclose(fe, vals)


# ---------------------------------------------------------------------------
# assembly structure


def test_divergence_matrix_entries():
    m = uniform_refine(create_initial("unit_square"))
    dm = build_dofmap(m)
    sys = assemble(m, dm, const_problem(), project_f(lambda x: np.ones(
        np.atleast_2d(x).shape[0]), m))
    B = sys.B.toarray()
    vals = np.unique(B)
    assert set(vals.tolist()) <= {-1.0, 0.0, 1.0}
    # each interior edge couples its two elements with opposite signs,
    # boundary edges touch exactly one element
    col_nnz = (B != 0.0).sum(axis=0)
    col_sum = B.sum(axis=0)
    for e in range(dm.n_flux):
        if m.boundary_edge[e]:
            assert col_nnz[e] == 1
        else:
            assert col_nnz[e] == 2
            assert col_sum[e] == 0.0


def test_mass_matrix_spd():
    m = uniform_refine(create_initial("unit_square"), 2)
    dm = build_dofmap(m)
    sys = assemble(m, dm, const_problem(),
                   project_f(lambda x: np.zeros(np.atleast_2d(x).shape[0]), m))
    M = sys.M.toarray()
    assert np.allclose(M, M.T, atol=0.0)
    w = np.linalg.eigvalsh(M)
    assert w.min() > 0.0


# ---------------------------------------------------------------------------
# solve exactness


def test_div_exactness_and_flux_balance():
    sol = solve_on(const_problem(), uniform_refine(
        create_initial("unit_square"), 3))
    fh = sol.f_elem
    assert sol.div_defect <= 1e-9 * (1.0 + np.abs(fh).max())
    # discrete divergence theorem: total divergence balances the source
    total = float(np.sum(sol.div * sol.mesh.areas))
    assert total == pytest.approx(-1.0, abs=1e-12)


def test_residual_contract():
    m = uniform_refine(create_initial("lshape"), 2)
    p = builtin("lshape_singular")
    dm = build_dofmap(m)
    fe = project_f(p.f, m)
    sys = assemble(m, dm, p, fe)
    sol = solve(sys, fe)
    x = np.concatenate([sol.p, sol.u])
    r = sys.full_matrix() @ x - sys.full_rhs()
    bound = 1e-10 * (1.0 + np.abs(sys.full_rhs()).max())
    assert np.abs(r).max() <= bound
    assert sol.residual_inf <= bound


def test_schur_matches_direct():
    p = builtin("square_sine")
    m = uniform_refine(create_initial("unit_square"), 3)
    a = solve_on(p, m, method="direct")
    b = solve_on(p, m, method="schur")
    assert np.allclose(b.p, a.p, atol=1e-10 * (1 + np.abs(a.p).max()))
    assert np.allclose(b.u, a.u, atol=1e-10 * (1 + np.abs(a.u).max()))


def test_unknown_solver_method():
    p = builtin("square_sine")
    m = create_initial("unit_square")
    dm = build_dofmap(m)
    fe = project_f(p.f, m)
    sys = assemble(m, dm, p, fe)
    with pytest.raises(SolverError):
        solve(sys, fe, method="cholesky")


# ---------------------------------------------------------------------------
# invariances


def test_coefficient_scaling():
    # scaling A by c>0 keeps the flux (div constraint pins it) and
    # divides the displacement by c, for homogeneous boundary data
    base = builtin("square_sine")
    c = 7.0

    def A_scaled(x):
        return c * base.A(x)

    def A_inv_scaled(x):
        return base.A_inv(x) / c

    scaled = ProblemSpec(name="scaled", domain=base.domain, A=A_scaled,
                         A_inv=A_inv_scaled, f=base.f)
    m = uniform_refine(create_initial("unit_square"), 2)
    s0 = solve_on(base, m)
    s1 = solve_on(scaled, m)
    tol = 1e-10 * (1.0 + np.abs(s0.p).max())
    assert np.allclose(s1.p, s0.p, atol=tol)
    assert np.allclose(s1.u, s0.u / c, atol=tol)


def test_mirror_symmetry_on_initial_mesh():
    # square_sine is invariant under (x, y) -> (y, x); on the two-triangle
    # mesh this swaps the elements and pairs up the boundary fluxes (with
    # signs fixed by the lex edge orientation), and the reflection maps the
    # diagonal dof to its own negative, so it must vanish
    m = create_initial("unit_square")
    sol = solve_on(builtin("square_sine"), m)
    scale = np.abs(sol.p).max()
    assert sol.u[0] == pytest.approx(sol.u[1], rel=1e-12)
    e_bottom = edge_id(m, (0, 0), (1, 0))
    e_left = edge_id(m, (0, 0), (0, 1))
    e_right = edge_id(m, (1, 0), (1, 1))
    e_top = edge_id(m, (0, 1), (1, 1))
    e_diag = edge_id(m, (0, 0), (1, 1))
    assert sol.p[e_bottom] == pytest.approx(-sol.p[e_left], rel=1e-12)
    assert sol.p[e_right] == pytest.approx(sol.p[e_top], rel=1e-12)
    assert abs(sol.p[e_diag]) <= 1e-12 * scale


def test_flux_error_halves_per_two_levels():
    p = builtin("square_sine")
    errs = {}
    for lvl in (4, 6):
        m = uniform_refine(create_initial("unit_square"), lvl)
        errs[lvl] = np.sqrt(exact_errors(solve_on(p, m), p).flux2)
    assert errs[4] / errs[6] == pytest.approx(2.0, rel=0.1)


# ---------------------------------------------------------------------------
# flux fields


def test_rt0_interpolate_reproduces_member_field():
    m = uniform_refine(create_initial("unit_square"), 2)

    def member(x):
        x = np.atleast_2d(x)
        return np.stack([1.0 + 0.5 * x[:, 0], -2.0 + 0.5 * x[:, 1]], axis=-1)

    fld = FluxField.from_coeffs(m, rt0_interpolate(m, member))
    pts = quad.tri_points(quad.TRI_6, m.vertices[m.triangles])
    el = np.arange(m.n_elements)
    got = fld.eval(el, pts)
    want = member(pts.reshape(-1, 2)).reshape(pts.shape)
    assert np.allclose(got, want, atol=1e-13)
    assert np.allclose(fld.div, 1.0, atol=1e-13)


def test_flux_field_restriction_preserves_values():
    p = builtin("square_sine")
    coarse = uniform_refine(create_initial("unit_square"), 2)
    sol = solve_on(p, coarse)
    fine = uniform_refine(coarse, 2)
    rest = sol.field.restrict_to(fine)
    pts = quad.tri_points(quad.TRI_6, fine.vertices[fine.triangles])
    el = np.arange(fine.n_elements)
    got = rest.eval(el, pts)
    # evaluate the coarse field at the same physical points
    from amfem.mesh import ancestor_map
    amap = ancestor_map(fine, coarse)
    want = sol.field.eval(amap, pts)
    assert np.allclose(got, want, atol=1e-13)


def test_solution_csv_dump(tmp_path):
    from amfem.fem import dump_solution_csv
    sol = solve_on(const_problem(), uniform_refine(
        create_initial("unit_square")))
    base = tmp_path / "sol"
    dump_solution_csv(sol, str(base))
    lines = (tmp_path / "sol_elements.csv").read_text().splitlines()
    assert lines[0] == "element,u,div_p,f_h"
    assert len(lines) == 1 + sol.mesh.n_elements
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[3]) == pytest.approx(1.0)
    flines = (tmp_path / "sol_flux.csv").read_text().splitlines()
    assert flines[0] == "edge,flux,boundary"
    assert len(flines) == 1 + sol.mesh.n_edges
