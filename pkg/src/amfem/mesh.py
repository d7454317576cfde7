"""Conforming triangle meshes refined by newest-vertex bisection.

A mesh stores, besides coordinates and connectivity,

    triangles : (nt, 3) int array
        Vertex indices per element.  The ordering is significant: the edge
        opposite the first vertex (the "peak") is the element's refinement
        edge.  Bisecting an element splits that edge at its midpoint ``m``
        and produces the children ``(m, v0, v1)`` and ``(m, v2, v0)``, both
        again peak-first and with the same orientation as the parent.
    root_elem, paths
        Genealogy relative to the initial mesh: every element knows its
        ancestor in the root mesh and the sequence of child slots (0/1)
        taken to reach it.  Two meshes refined from the same root can be
        compared element-by-element through these identifiers, which is
        what the overlay and the coarse-to-fine field transfers rely on.

Conformity is maintained by edge marking: the refinement edges of all
marked elements are collected, then any element that sees a marked edge
gets its own refinement edge marked too, until a fixed point is reached.
Each element is then split across its marked edges (into 2, 3 or 4
children).  This produces the same meshes as the classical recursive
bisection and terminates for any initial labeling.

Edges carry a global orientation fixed by the lexicographic order of their
endpoint indices: the tangent points from the lower to the higher index,
and the normal is the tangent rotated by -90 degrees.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mesh", "MeshError", "RefineResult", "ElementGeometry",
    "create_initial", "refine", "uniform_refine", "overlay", "ancestor_map",
    "INITIAL_DOMAINS",
]


class MeshError(ValueError):
    """Raised for non-conforming input, degenerate elements or genealogy mismatches."""


@dataclass(frozen=True)
class ElementGeometry:
    """Per-element geometry bundle returned by :meth:`Mesh.element_geometry`."""
    area: float
    h: float                # mesh weight |T|^(1/2) used by the error estimator
    diam: float
    edge_ids: np.ndarray    # the three edges, local edge i opposite vertex i
    edge_lengths: np.ndarray
    edge_tangents: np.ndarray
    edge_normals: np.ndarray
    patch: np.ndarray       # ids of elements sharing an edge with T, T included


@dataclass(frozen=True)
class RefineResult:
    mesh: "Mesh"
    refined: np.ndarray     # ids (in the source mesh) of elements that were bisected
    marked: np.ndarray


class Mesh:
    def __init__(self, vertices, triangles, generation=None, root=None,
                 root_elem=None, paths=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (nt, 3)")
        nt = self.triangles.shape[0]
        if generation is None:
            generation = np.zeros(nt, dtype=np.int64)
        self.generation = np.asarray(generation, dtype=np.int64)
        if root_elem is None:
            root_elem = np.arange(nt, dtype=np.int64)
        self.root_elem = np.asarray(root_elem, dtype=np.int64)
        self.paths = list(paths) if paths is not None else [()] * nt
        if root is not None:
            self.root = root
        elif all(len(p) == 0 for p in self.paths):
            self.root = self
        else:
            # e.g. deserialized without its root mesh: genealogy labels are
            # kept but overlay/ancestor queries are unavailable
            self.root = None
        if len(self.paths) != nt or self.root_elem.shape[0] != nt:
            raise MeshError("genealogy arrays do not match the element count")

        self._build_edges()
        self._areas = None
        if validate:
            self._audit()
        for a in (self.vertices, self.triangles, self.generation, self.root_elem):
            a.flags.writeable = False

    # -- basic counts ------------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    # -- connectivity ------------------------------------------------------

    def _build_edges(self):
        tri = self.triangles
        nv = self.n_vertices
        # local edge i is the edge opposite vertex i; local edge 0 is the
        # refinement edge
        pairs = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)
        lo = pairs.min(axis=2)
        hi = pairs.max(axis=2)
        keys = lo.astype(np.int64) * nv + hi
        uniq, inv = np.unique(keys, return_inverse=True)
        self.edges = np.column_stack([uniq // nv, uniq % nv])
        self.tri_edges = inv.reshape(tri.shape[0], 3).astype(np.int64)

        # orientation: tangent from low to high vertex index, normal = tangent
        # rotated by -90 degrees
        a = self.vertices[self.edges[:, 0]]
        b = self.vertices[self.edges[:, 1]]
        d = b - a
        self.edge_lengths = np.hypot(d[:, 0], d[:, 1])
        if np.any(self.edge_lengths <= 0.0):
            raise MeshError("degenerate edge of zero length")
        self.edge_tangents = d / self.edge_lengths[:, None]
        self.edge_normals = np.column_stack(
            [self.edge_tangents[:, 1], -self.edge_tangents[:, 0]])

        # sign +1 where the global edge normal points out of the element
        opp = self.vertices[tri]                      # (nt, 3, 2), vertex i
        amid = a[self.tri_edges]                      # (nt, 3, 2)
        nrm = self.edge_normals[self.tri_edges]       # (nt, 3, 2)
        dot = np.einsum("tid,tid->ti", nrm, amid - opp)
        self.tri_edge_sign = np.where(dot > 0.0, 1, -1).astype(np.int64)

        # incident elements per edge: slot 0 sees the normal as outward
        ne = self.edges.shape[0]
        self.edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        counts = np.zeros(ne, dtype=np.int64)
        for t in range(tri.shape[0]):
            for i in range(3):
                e = self.tri_edges[t, i]
                slot = 0 if self.tri_edge_sign[t, i] > 0 else 1
                if self.edge_tris[e, slot] != -1:
                    raise MeshError(f"edge {e} claimed twice from the same side")
                self.edge_tris[e, slot] = t
                counts[e] += 1
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two elements")
        self.boundary_edge = counts == 1

    def _audit(self):
        if np.any(self.signed_areas() <= 0.0):
            raise MeshError("element with non-positive area (check vertex order)")
        # Hanging nodes: bisection only ever inserts edge midpoints, so a
        # hanging node on edge (a, b) is the vertex at their midpoint with
        # both half-edges present.
        vert_index = {}
        for i, (x, y) in enumerate(self.vertices):
            vert_index[(float(x), float(y))] = i
        nv = self.n_vertices
        edge_keys = set(int(a) * nv + int(b) for a, b in self.edges)
        for e in np.flatnonzero(self.boundary_edge):
            a, b = self.edges[e]
            mx, my = 0.5 * (self.vertices[a] + self.vertices[b])
            m = vert_index.get((float(mx), float(my)))
            if m is None:
                continue
            lo1, hi1 = sorted((int(a), m))
            lo2, hi2 = sorted((m, int(b)))
            if lo1 * nv + hi1 in edge_keys and lo2 * nv + hi2 in edge_keys:
                raise MeshError(f"hanging node {m} on edge {e}")

    # -- geometry ----------------------------------------------------------

    def signed_areas(self):
        p = self.vertices[self.triangles]
        u = p[:, 1] - p[:, 0]
        v = p[:, 2] - p[:, 0]
        return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])

    @property
    def areas(self):
        if self._areas is None:
            self._areas = np.abs(self.signed_areas())
            self._areas.flags.writeable = False
        return self._areas

    @property
    def h(self):
        """Estimator mesh weight per element, h_T = |T|^(1/2)."""
        return np.sqrt(self.areas)

    @property
    def diameters(self):
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def shape_regularity(self):
        """max_T diam(T)^2 / |T|, the constant audited along refinements."""
        return float((self.diameters ** 2 / self.areas).max())

    def patch(self, elem):
        """Elements sharing an edge with ``elem``, including ``elem`` itself."""
        ids = set()
        for e in self.tri_edges[elem]:
            for t in self.edge_tris[e]:
                if t >= 0:
                    ids.add(int(t))
        ids.add(int(elem))
        return np.array(sorted(ids), dtype=np.int64)

    def element_geometry(self, elem):
        eids = self.tri_edges[elem]
        return ElementGeometry(
            area=float(self.areas[elem]),
            h=float(np.sqrt(self.areas[elem])),
            diam=float(self.edge_lengths[eids].max()),
            edge_ids=eids.copy(),
            edge_lengths=self.edge_lengths[eids].copy(),
            edge_tangents=self.edge_tangents[eids].copy(),
            edge_normals=self.edge_normals[eids].copy(),
            patch=self.patch(elem),
        )

    # -- genealogy ---------------------------------------------------------

    def identities(self):
        """Per-element (root element, bisection path) pairs."""
        return [(int(r), p) for r, p in zip(self.root_elem, self.paths)]

    def same_root_as(self, other):
        if self.root is None or other.root is None:
            return False
        if self.root is other.root:
            return True
        return (np.array_equal(self.root.vertices, other.root.vertices)
                and np.array_equal(self.root.triangles, other.root.triangles))

    # -- serialization -----------------------------------------------------

    def dumps(self):
        """Serialize to text; ``loads`` restores an identical mesh bit for bit."""
        lines = ["amfem-mesh v1", str(self.n_vertices)]
        for x, y in self.vertices:
            lines.append(f"{float(x)!r} {float(y)!r}")
        lines.append(str(self.n_elements))
        for t in range(self.n_elements):
            v0, v1, v2 = self.triangles[t]
            bits = "".join(str(s) for s in self.paths[t])
            label = f"r{self.root_elem[t]}p{bits}"
            lines.append(f"{v0} {v1} {v2} {label} {self.generation[t]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, root=None):
        lines = text.strip().split("\n")
        if not lines or lines[0].strip() != "amfem-mesh v1":
            raise MeshError("not an amfem-mesh v1 file")
        pos = 1
        nv = int(lines[pos]); pos += 1
        verts = np.empty((nv, 2))
        for i in range(nv):
            xs, ys = lines[pos].split(); pos += 1
            verts[i] = (float(xs), float(ys))
        nt = int(lines[pos]); pos += 1
        tris = np.empty((nt, 3), dtype=np.int64)
        gens = np.empty(nt, dtype=np.int64)
        roote = np.empty(nt, dtype=np.int64)
        paths = []
        for t in range(nt):
            f = lines[pos].split(); pos += 1
            tris[t] = (int(f[0]), int(f[1]), int(f[2]))
            label = f[3]
            if not label.startswith("r") or "p" not in label:
                raise MeshError(f"bad genealogy label {label!r}")
            rpart, bits = label[1:].split("p", 1)
            roote[t] = int(rpart)
            paths.append(tuple(int(c) for c in bits))
            gens[t] = int(f[4])
        return cls(verts, tris, generation=gens, root=root,
                   root_elem=roote, paths=paths)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path, root=None):
        with open(path) as fh:
            return cls.loads(fh.read(), root=root)


# -- initial meshes --------------------------------------------------------

def _unit_square():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    # peaks off the diagonal so the shared diagonal is both refinement edges
    tris = np.array([[1, 2, 0], [3, 0, 2]])
    return verts, tris


def _lshape():
    # (-1,1)^2 without the closed quadrant x>=0, y<=0; all quadrant diagonals
    # end at the reentrant corner
    verts = np.array([
        [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0],
        [-1.0, 1.0], [-1.0, 0.0], [-1.0, -1.0], [0.0, -1.0],
    ])
    tris = np.array([
        [1, 2, 0], [3, 0, 2],
        [5, 0, 4], [3, 4, 0],
        [7, 0, 6], [5, 6, 0],
    ])
    return verts, tris


def _checkerboard():
    # 3x3 vertex grid, diagonals of the four quarter-cells through the center
    verts = np.array([
        [0.0, 0.0], [0.5, 0.0], [1.0, 0.0],
        [0.0, 0.5], [0.5, 0.5], [1.0, 0.5],
        [0.0, 1.0], [0.5, 1.0], [1.0, 1.0],
    ])
    tris = np.array([
        [1, 4, 0], [3, 0, 4],
        [1, 2, 4], [5, 4, 2],
        [3, 4, 6], [7, 6, 4],
        [5, 8, 4], [7, 4, 8],
    ])
    return verts, tris


INITIAL_DOMAINS = {
    "unit_square": _unit_square,
    "lshape": _lshape,
    "checkerboard": _checkerboard,
}


def create_initial(domain):
    """Build one of the hard-coded initial meshes.

    The labeling (choice of refinement edges) is part of the mesh data; it
    is checked here by bisecting every element twice and auditing the
    result, so an incompatible labeling fails immediately.
    """
    try:
        verts, tris = INITIAL_DOMAINS[domain]()
    except KeyError:
        raise MeshError(f"unknown domain {domain!r}; "
                        f"choose from {sorted(INITIAL_DOMAINS)}") from None
    mesh = Mesh(verts, tris)
    # labeling sanity: two full bisection levels must stay conforming
    refine(mesh, np.arange(mesh.n_elements), b=2)
    return mesh


# -- refinement ------------------------------------------------------------

def _bisect_level(mesh, marked_ids):
    """One conforming bisection pass: every listed element is split at least once."""
    tri = mesh.triangles
    nt = tri.shape[0]
    ref_edge = mesh.tri_edges[:, 0]

    marked_edges = np.zeros(mesh.n_edges, dtype=bool)
    stack = []
    for t in marked_ids:
        e = ref_edge[t]
        if not marked_edges[e]:
            marked_edges[e] = True
            stack.append(e)
    # closure: an element with any marked edge gets its refinement edge marked
    while stack:
        e = stack.pop()
        for t in mesh.edge_tris[e]:
            if t < 0:
                continue
            re = ref_edge[t]
            if not marked_edges[re]:
                marked_edges[re] = True
                stack.append(re)

    marked_list = np.flatnonzero(marked_edges)
    mid_id = {}
    new_verts = [mesh.vertices]
    mids = 0.5 * (mesh.vertices[mesh.edges[marked_list, 0]]
                  + mesh.vertices[mesh.edges[marked_list, 1]])
    for k, e in enumerate(marked_list):
        mid_id[int(e)] = mesh.n_vertices + k
    new_verts.append(mids)
    verts = np.vstack(new_verts) if len(marked_list) else mesh.vertices.copy()

    out_tris, out_gen, out_root, out_paths = [], [], [], []
    refined = []
    tri_edges = mesh.tri_edges
    gens = mesh.generation
    roote = mesh.root_elem
    paths = mesh.paths
    for t in range(nt):
        e0, e1, e2 = tri_edges[t]
        if not marked_edges[e0]:
            if marked_edges[e1] or marked_edges[e2]:
                raise MeshError("closure invariant violated")
            out_tris.append(tri[t])
            out_gen.append(gens[t])
            out_root.append(roote[t])
            out_paths.append(paths[t])
            continue
        refined.append(t)
        v0, v1, v2 = tri[t]
        m0 = mid_id[int(e0)]
        g, r, p = gens[t], roote[t], paths[t]
        # child 0 = (m0, v0, v1) owns parent edge (v0, v1) = local edge 2
        if marked_edges[e2]:
            m2 = mid_id[int(e2)]
            out_tris.extend([(m2, m0, v0), (m2, v1, m0)])
            out_gen.extend([g + 2, g + 2])
            out_root.extend([r, r])
            out_paths.extend([p + (0, 0), p + (0, 1)])
        else:
            out_tris.append((m0, v0, v1))
            out_gen.append(g + 1)
            out_root.append(r)
            out_paths.append(p + (0,))
        # child 1 = (m0, v2, v0) owns parent edge (v2, v0) = local edge 1
        if marked_edges[e1]:
            m1 = mid_id[int(e1)]
            out_tris.extend([(m1, m0, v2), (m1, v0, m0)])
            out_gen.extend([g + 2, g + 2])
            out_root.extend([r, r])
            out_paths.extend([p + (1, 0), p + (1, 1)])
        else:
            out_tris.append((m0, v2, v0))
            out_gen.append(g + 1)
            out_root.append(r)
            out_paths.append(p + (1,))

    new_mesh = Mesh(verts, np.array(out_tris, dtype=np.int64),
                    generation=np.array(out_gen, dtype=np.int64),
                    root=mesh.root,
                    root_elem=np.array(out_root, dtype=np.int64),
                    paths=out_paths, validate=False)
    return new_mesh, refined


def refine(mesh, marked, b=1):
    """Conforming refinement: every marked element is bisected at least ``b`` times.

    Returns a :class:`RefineResult`; ``result.refined`` lists the elements of
    the input mesh that no longer exist in the output.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_elements):
        raise MeshError("marked element id out of range")
    if b < 1:
        raise MeshError("bisection count b must be >= 1")
    if marked.size == 0:
        return RefineResult(mesh=mesh, refined=np.empty(0, dtype=np.int64),
                            marked=marked)

    counts = {int(t): b for t in marked}
    current = mesh
    while counts:
        level_ids = sorted(counts)
        new_mesh, _ = _bisect_level(current, level_ids)
        old_index = {(int(r), p): i
                     for i, (r, p) in enumerate(zip(current.root_elem, current.paths))}
        new_counts = {}
        for i, (r, p) in enumerate(zip(new_mesh.root_elem, new_mesh.paths)):
            key = (int(r), p)
            if key in old_index:
                continue  # carried over unchanged
            parent = old_index.get((key[0], p[:-1]), old_index.get((key[0], p[:-2])))
            c = counts.get(parent, 0) - 1
            if c > 0:
                new_counts[i] = c
        counts = new_counts
        current = new_mesh

    final_ids = set((int(r), p) for r, p in zip(current.root_elem, current.paths))
    refined = np.array(
        [i for i, (r, p) in enumerate(zip(mesh.root_elem, mesh.paths))
         if (int(r), p) not in final_ids],
        dtype=np.int64)
    return RefineResult(mesh=current, refined=refined, marked=marked)


def uniform_refine(mesh, levels=1):
    """Bisect every element once per level."""
    for _ in range(levels):
        mesh = refine(mesh, np.arange(mesh.n_elements), b=1).mesh
    return mesh


# -- overlay ---------------------------------------------------------------

def _replay(root, internal):
    """Rebuild the mesh whose bisection forest has the given internal nodes."""
    verts = [tuple(v) for v in root.vertices]
    mid_of = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        m = mid_of.get(key)
        if m is None:
            xa, ya = verts[a]
            xb, yb = verts[b]
            m = len(verts)
            verts.append((0.5 * (xa + xb), 0.5 * (ya + yb)))
            mid_of[key] = m
        return m

    out_tris, out_gen, out_root, out_paths = [], [], [], []
    queue = deque()
    for r in range(root.n_elements):
        v0, v1, v2 = (int(v) for v in root.triangles[r])
        queue.append((v0, v1, v2, r, (), int(root.generation[r])))
    while queue:
        v0, v1, v2, r, path, gen = queue.popleft()
        if (r, path) in internal:
            m = midpoint(v1, v2)
            queue.append((m, v0, v1, r, path + (0,), gen + 1))
            queue.append((m, v2, v0, r, path + (1,), gen + 1))
        else:
            out_tris.append((v0, v1, v2))
            out_gen.append(gen)
            out_root.append(r)
            out_paths.append(path)

    return Mesh(np.array(verts), np.array(out_tris, dtype=np.int64),
                generation=np.array(out_gen, dtype=np.int64),
                root=root,
                root_elem=np.array(out_root, dtype=np.int64),
                paths=out_paths)


def overlay(m1, m2):
    """Smallest common conforming refinement of two meshes with the same root.

    The element count satisfies ``n(overlay) <= n(m1) + n(m2) - n(root)``.
    """
    if not m1.same_root_as(m2):
        raise MeshError("overlay requires meshes refined from the same root")
    internal = set()
    for m in (m1, m2):
        for r, p in zip(m.root_elem, m.paths):
            for k in range(len(p)):
                internal.add((int(r), p[:k]))
    return _replay(m1.root, internal)


def ancestor_map(fine, coarse):
    """Map each element of ``fine`` to its ancestor (or itself) in ``coarse``.

    Raises :class:`MeshError` unless ``fine`` is a refinement of ``coarse``.
    """
    if not fine.same_root_as(coarse):
        raise MeshError("meshes do not share a genealogy root")
    index = {(int(r), p): i
             for i, (r, p) in enumerate(zip(coarse.root_elem, coarse.paths))}
    out = np.empty(fine.n_elements, dtype=np.int64)
    for i, (r, p) in enumerate(zip(fine.root_elem, fine.paths)):
        key = (int(r), p)
        while key not in index:
            if not key[1]:
                raise MeshError("mesh is not a refinement of the given coarse mesh")
            key = (key[0], key[1][:-1])
        out[i] = index[key]
    if np.unique(out).size != coarse.n_elements:
        raise MeshError("mesh is not a refinement of the given coarse mesh")
    return out
