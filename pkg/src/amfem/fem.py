"""Lowest-order mixed discretization of -div(A grad u) = f in flux form.

The flux space is spanned by one Raviart-Thomas basis function per edge,
normalized so the total flux across the edge equals one:

    phi_E|_T(x) = s_{T,E} / (2|T|) * (x - P),

where P is the vertex of T opposite E and ``s_{T,E}`` is +1 when the global
edge normal points out of T.  With this normalization the divergence
coupling matrix B has entries in {-1, 0, +1} exactly, and the discrete
divergence constraint B p = -|T| f_T enforces ``div p_h + f_h = 0``
elementwise up to solver roundoff.

Displacements are elementwise constant; the Dirichlet datum g enters the
flux equations naturally through boundary edge averages of g.

The saddle-point system

    [ M   B^T ] [ p ]   [ rhs_flux ]
    [ B    0  ] [ u ] = [ rhs_div  ]

is solved by a sparse direct factorization of the full indefinite matrix;
an iterative Schur-complement solver is available behind the same
interface and residual contract.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ancestor_map
from .quadrature import TRI_6, EDGE_3, tri_points, edge_points

__all__ = [
    "AssemblyError", "SolverError", "DofMap", "SaddleSystem", "MixedSolution",
    "FluxField", "PwConstData", "build_dofmap", "project_f", "assemble",
    "solve", "rt0_interpolate", "dump_solution_csv",
]

RESIDUAL_TOL = 1e-10


class AssemblyError(ValueError):
    """Raised when coefficient data is unusable (e.g. A not SPD)."""


class SolverError(RuntimeError):
    """Raised when the linear solver misses its residual contract."""


class DofMap:
    """Degrees of freedom of the mixed pair on one mesh.

    Flux dof ids coincide with edge ids and displacement dof ids with
    element ids; the map is kept explicit so downstream code never relies
    on that accidentally.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.n_flux = mesh.n_edges
        self.n_disp = mesh.n_elements
        self.flux_of_edge = np.arange(mesh.n_edges, dtype=np.int64)
        self.disp_of_elem = np.arange(mesh.n_elements, dtype=np.int64)


def build_dofmap(mesh):
    return DofMap(mesh)


class PwConstData:
    """A piecewise-constant function attached to the elements of a mesh.

    Used as right-hand side data after projecting f onto a coarse mesh:
    on any refinement of the carrier the values are recovered exactly by
    ancestor lookup, so the data oscillation vanishes identically.
    """

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.shape != (mesh.n_elements,):
            raise ValueError("one value per carrier element required")
        self._amap_cache = {}

    def values_on(self, mesh):
        """Per-element values on ``mesh``, which must refine the carrier."""
        if mesh is self.mesh:
            return self.values
        key = id(mesh)
        hit = self._amap_cache.get(key)
        if hit is None or hit[0] is not mesh:
            hit = (mesh, ancestor_map(mesh, self.mesh))
            self._amap_cache[key] = hit
        return self.values[hit[1]]


def eval_f_on_elements(f, mesh, pts):
    """Evaluate source data at per-element quadrature points ``pts`` (nt, q, 2)."""
    if isinstance(f, PwConstData):
        vals = f.values_on(mesh)
        return np.broadcast_to(vals[:, None], pts.shape[:2]).copy()
    flat = f(pts.reshape(-1, 2))
    return np.asarray(flat, dtype=np.float64).reshape(pts.shape[:2])


def project_f(f, mesh):
    """L2 projection of f onto elementwise constants: the cellwise means."""
    if isinstance(f, PwConstData):
        return f.values_on(mesh).copy()
    pts = tri_points(TRI_6, mesh.vertices[mesh.triangles])
    vals = eval_f_on_elements(f, mesh, pts)
    _, w = TRI_6
    return vals @ w


class FluxField:
    """An elementwise-affine vector field q|_T(x) = alpha_T + beta_T * x.

    Every RT0 function has this form; ``beta`` is scalar per element and
    the divergence equals ``2 beta``.  A field can be restricted to any
    refinement of its mesh, where it keeps the ancestor's polynomial on
    each fine element.  Instances are read-only once built.
    """

    def __init__(self, mesh, alpha, beta):
        self.mesh = mesh
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)

    @classmethod
    def from_coeffs(cls, mesh, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        s = mesh.tri_edge_sign.astype(np.float64)
        c = coeffs[mesh.tri_edges] * s            # (nt, 3)
        inv2a = 1.0 / (2.0 * mesh.areas)
        beta = c.sum(axis=1) * inv2a
        P = mesh.vertices[mesh.triangles]         # (nt, 3, 2)
        alpha = -np.einsum("ti,tid->td", c, P) * inv2a[:, None]
        return cls(mesh, alpha, beta)

    def eval(self, elems, pts):
        """Values at ``pts`` of shape (k, q, 2) lying inside elements ``elems``."""
        return self.alpha[elems][:, None, :] + self.beta[elems][:, None, None] * pts

    @property
    def div(self):
        return 2.0 * self.beta

    def restrict_to(self, fine_mesh):
        if fine_mesh is self.mesh:
            return self
        amap = ancestor_map(fine_mesh, self.mesh)
        return FluxField(fine_mesh, self.alpha[amap], self.beta[amap])


class SaddleSystem:
    def __init__(self, M, B, rhs_flux, rhs_div, dofmap):
        self.M = M
        self.B = B
        self.rhs_flux = rhs_flux
        self.rhs_div = rhs_div
        self.dofmap = dofmap

    def full_matrix(self):
        return sp.bmat([[self.M, self.B.T], [self.B, None]], format="csc")

    def full_rhs(self):
        return np.concatenate([self.rhs_flux, self.rhs_div])


def _check_spd(ainv, pts):
    sym_defect = np.abs(ainv[:, 0, 1] - ainv[:, 1, 0])
    scale = np.abs(ainv).max(axis=(1, 2))
    bad = sym_defect > 1e-12 * np.maximum(scale, 1.0)
    det = ainv[:, 0, 0] * ainv[:, 1, 1] - ainv[:, 0, 1] * ainv[:, 1, 0]
    bad |= (ainv[:, 0, 0] <= 0.0) | (det <= 0.0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise AssemblyError(
            f"A^-1 not symmetric positive definite at point {pts[i]}")


def assemble(mesh, dofmap, problem, f_elem):
    """Build the saddle-point system for the given cellwise source means."""
    if dofmap.mesh is not mesh:
        raise AssemblyError("dofmap was built for a different mesh")
    f_elem = np.asarray(f_elem, dtype=np.float64)
    if f_elem.shape != (mesh.n_elements,):
        raise AssemblyError("f_elem must hold one value per element")

    bary, w = TRI_6
    verts = mesh.vertices[mesh.triangles]                 # (nt, 3, 2)
    pts = tri_points(TRI_6, verts)                        # (nt, q, 2)
    flat = pts.reshape(-1, 2)
    ainv = np.asarray(problem.A_inv(flat), dtype=np.float64)
    _check_spd(ainv, flat)
    ainv = ainv.reshape(pts.shape[0], pts.shape[1], 2, 2)

    s = mesh.tri_edge_sign.astype(np.float64)
    inv2a = 1.0 / (2.0 * mesh.areas)
    # basis_i at quadrature point q: s_i/(2|T|) (x_q - P_i)
    basis = (pts[:, :, None, :] - verts[:, None, :, :]) \
        * (s * inv2a[:, None])[:, None, :, None]          # (nt, q, 3, 2)
    ainv_basis = np.einsum("tqab,tqjb->tqja", ainv, basis)
    loc = np.einsum("tqia,tqja,q->tij", basis, ainv_basis, w) \
        * mesh.areas[:, None, None]
    loc = 0.5 * (loc + loc.transpose(0, 2, 1))            # exact symmetry

    nt, ne = mesh.n_elements, mesh.n_edges
    rows = np.repeat(mesh.tri_edges[:, :, None], 3, axis=2).ravel()
    cols = np.repeat(mesh.tri_edges[:, None, :], 3, axis=1).ravel()
    M = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(ne, ne)).tocsr()

    B = sp.coo_matrix(
        (mesh.tri_edge_sign.ravel().astype(np.float64),
         (np.repeat(np.arange(nt), 3), mesh.tri_edges.ravel())),
        shape=(nt, ne)).tocsr()

    rhs_flux = np.zeros(ne)
    g = getattr(problem, "g", None)
    if g is not None:
        bed = np.flatnonzero(mesh.boundary_edge)
        if bed.size:
            a = mesh.vertices[mesh.edges[bed, 0]]
            bpt = mesh.vertices[mesh.edges[bed, 1]]
            epts = edge_points(EDGE_3, a, bpt)
            _, ew = EDGE_3
            gv = np.asarray(g(epts.reshape(-1, 2))).reshape(epts.shape[:2])
            sign = np.where(mesh.edge_tris[bed, 0] >= 0, 1.0, -1.0)
            rhs_flux[bed] = sign * (gv @ ew)

    rhs_div = -mesh.areas * f_elem
    return SaddleSystem(M, B, rhs_flux, rhs_div, dofmap)


class MixedSolution:
    """Solution pair of one mixed solve.

    Attributes
    ----------
    p : flux coefficients, one per edge
    u : displacement values, one per element
    f_elem : the cellwise source means the solve used
    residual_inf : inf-norm of the algebraic residual
    div_defect : max_T |div p_h + f_h|, the divergence-exactness defect
    """

    def __init__(self, mesh, dofmap, p, u, f_elem, residual_inf):
        self.mesh = mesh
        self.dofmap = dofmap
        self.p = p
        self.u = u
        self.f_elem = f_elem
        self.residual_inf = residual_inf
        self._field = None

    @property
    def field(self):
        if self._field is None:
            self._field = FluxField.from_coeffs(self.mesh, self.p)
        return self._field

    @property
    def div(self):
        return self.field.div

    @property
    def div_defect(self):
        return float(np.abs(self.div + self.f_elem).max())


def solve(system, f_elem, method="direct"):
    """Solve the saddle-point system.

    The residual contract ``||K x - rhs||_inf <= 1e-10 (1 + ||rhs||_inf)``
    is enforced for every method; a violation raises :class:`SolverError`.
    """
    K = system.full_matrix()
    rhs = system.full_rhs()
    ne = system.M.shape[0]

    if method == "direct":
        # scale the balance rows to unit element area before factorizing;
        # otherwise the residual of those rows, divided by tiny areas on
        # graded meshes, surfaces as a divergence defect
        scale = np.ones(K.shape[0])
        scale[ne:] = 1.0 / system.dofmap.mesh.areas
        Ks = K.multiply(scale[:, None]).tocsc()
        rhs_s = rhs * scale
        try:
            lu = spla.splu(Ks)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        x = lu.solve(rhs_s)
        # up to two rounds of iterative refinement
        for _ in range(2):
            r = rhs_s - Ks @ x
            if np.abs(r).max() <= 1e-16 * (1.0 + np.abs(rhs_s).max()):
                break
            x = x + lu.solve(r)
    elif method == "schur":
        x = _solve_schur(system, rhs)
    else:
        raise SolverError(f"unknown solver method {method!r}")

    residual = float(np.abs(K @ x - rhs).max())
    if not np.isfinite(residual) or residual > RESIDUAL_TOL * (1.0 + np.abs(rhs).max()):
        raise SolverError(
            f"solver residual {residual:.3e} violates the contract "
            f"(method={method})")

    mesh = system.dofmap.mesh
    return MixedSolution(mesh, system.dofmap, x[:ne], x[ne:],
                         np.asarray(f_elem, dtype=np.float64), residual)


def _solve_schur(system, rhs):
    """Schur-complement fallback: CG on B M^-1 B^T with a factorized M."""
    ne = system.M.shape[0]
    nt = system.B.shape[0]
    Minv = spla.factorized(system.M.tocsc())
    B = system.B.tocsr()
    BT = B.T.tocsr()

    def schur_mv(u):
        return B @ Minv(BT @ u)

    S = spla.LinearOperator((nt, nt), matvec=schur_mv)
    srhs = B @ Minv(rhs[:ne]) - rhs[ne:]
    u, info = spla.cg(S, srhs, rtol=1e-14, atol=0.0, maxiter=20 * nt)
    if info != 0:
        raise SolverError(f"Schur-complement CG did not converge (info={info})")
    p = Minv(rhs[:ne] - BT @ u)
    return np.concatenate([p, u])


def rt0_interpolate(mesh, p_exact):
    """Canonical flux interpolant: edge integrals of the exact normal flux."""
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    pts = edge_points(EDGE_3, a, b)
    _, w = EDGE_3
    vals = np.asarray(p_exact(pts.reshape(-1, 2))).reshape(pts.shape)
    flux = np.einsum("eqd,ed,q->e", vals, mesh.edge_normals, w)
    return flux * mesh.edge_lengths


def dump_solution_csv(sol, base_path):
    """Write per-element and per-edge records next to each other.

    ``<base>_elements.csv``: element id, u_h, div p_h, f_h.
    ``<base>_flux.csv``: edge id, flux coefficient, boundary flag.
    """
    div = sol.div
    with open(f"{base_path}_elements.csv", "w") as fh:
        fh.write("element,u,div_p,f_h\n")
        for t in range(sol.mesh.n_elements):
            fh.write(f"{t},{float(sol.u[t])!r},{float(div[t])!r},"
                     f"{float(sol.f_elem[t])!r}\n")
    with open(f"{base_path}_flux.csv", "w") as fh:
        fh.write("edge,flux,boundary\n")
        for e in range(sol.mesh.n_edges):
            fh.write(f"{e},{float(sol.p[e])!r},"
                     f"{int(sol.mesh.boundary_edge[e])}\n")
