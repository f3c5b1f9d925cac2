"""Conforming triangulations of a polygon and the induced boundary mesh.

The generator lays out boundary points side by side (uniform for grading
exponent q = 1, marched by the local size rule h * max(r, h**q)**(1 - 1/q)
toward each corner for q > 1), Delaunay-triangulates boundary plus interior
seed points, enforces every boundary sub-segment as a mesh edge by midpoint
splitting, culls triangles outside the polygon, and then inserts circumcenters
(Ruppert style) until a 20-degree minimum-angle floor and the local size rule
hold.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import MeshError, MeshQualityWarning
from .geometry import Polygon, dist_to_vertices
from .quadrature import gauss01

__all__ = [
    "Mesh",
    "BoundaryMesh",
    "triangulate",
    "extract_boundary",
    "refine",
    "write_mesh",
    "read_mesh",
    "write_field",
    "check_mesh",
]


@dataclass(eq=False)
class Mesh:
    """Conforming triangulation of a polygon. Treated as immutable once built.

    nodes     : (N, 2) coordinates; boundary layout nodes come first
    triangles : (T, 3) node indices, counterclockwise
    boundary_node_flags : (N,) bool
    h_target  : mesh-size parameter the mesh was generated for
    grading_exponent : q >= 1
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_node_flags: np.ndarray
    h_target: float
    grading_exponent: float
    polygon: Polygon
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def tri_verts(self) -> np.ndarray:
        """(T, 3, 2) vertex coordinates per triangle."""
        return self.nodes[self.triangles]

    @cached_property
    def areas(self) -> np.ndarray:
        v = self.tri_verts
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def boundary(self) -> "BoundaryMesh":
        return extract_boundary(self)

    def min_angle_deg(self) -> float:
        return float(np.degrees(_min_angles(self.tri_verts).min()))

    def diameters(self) -> np.ndarray:
        v = self.tri_verts
        l0 = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        l1 = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
        l2 = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
        return np.max(np.column_stack([l0, l1, l2]), axis=1)


@dataclass(eq=False)
class BoundaryMesh:
    """Ordered cyclic boundary partition induced by a Mesh.

    boundary_nodes[k] is the start node (global index) of segment k; segment k
    runs to boundary_nodes[(k+1) % S]. arclength_coords[k] is the cumulative
    arc length at boundary_nodes[k], zero at the polygon's first vertex.
    """

    mesh: Mesh
    node_pairs: np.ndarray  # (S, 2) global node indices
    lengths: np.ndarray  # (S,)
    side_ids: np.ndarray  # (S,)
    normals: np.ndarray  # (S, 2) outward unit normals, constant per side
    boundary_nodes: np.ndarray  # (S,) global node indices, cyclic order
    arclength_coords: np.ndarray  # (S,)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_segments(self) -> int:
        return len(self.node_pairs)

    @property
    def n_nodes(self) -> int:
        return len(self.boundary_nodes)

    @property
    def perimeter(self) -> float:
        return float(self.lengths.sum())

    @cached_property
    def points(self) -> np.ndarray:
        """(S, 2) coordinates of boundary nodes in cyclic order."""
        return self.mesh.nodes[self.boundary_nodes]

    @cached_property
    def global_to_local(self) -> np.ndarray:
        m = np.full(self.mesh.n_nodes, -1, dtype=int)
        m[self.boundary_nodes] = np.arange(self.n_nodes)
        return m

    @cached_property
    def segment_starts(self) -> np.ndarray:
        return self.mesh.nodes[self.node_pairs[:, 0]]

    @cached_property
    def segment_ends(self) -> np.ndarray:
        return self.mesh.nodes[self.node_pairs[:, 1]]

    @cached_property
    def tangents(self) -> np.ndarray:
        return (self.segment_ends - self.segment_starts) / self.lengths[:, None]

    def local_pairs(self) -> np.ndarray:
        """Segment endpoint indices in boundary-local numbering: (k, k+1 mod S)."""
        k = np.arange(self.n_segments)
        return np.column_stack([k, (k + 1) % self.n_segments])

    def gauss_points(self, order: int):
        """Per-segment Gauss data: points (S, n, 2), weights (S, n), hats (n, 2)."""
        key = ("gauss", order)
        if key not in self._cache:
            x, w = gauss01(order)
            pts = self.segment_starts[:, None, :] + x[None, :, None] * (
                self.segment_ends - self.segment_starts
            )[:, None, :]
            wts = self.lengths[:, None] * w[None, :]
            hats = np.column_stack([1.0 - x, x])
            self._cache[key] = (pts, wts, hats)
        return self._cache[key]

    def trace(self, values: np.ndarray) -> np.ndarray:
        """Restrict a nodal vector over the mesh to boundary nodes (cyclic order)."""
        return np.asarray(values)[self.boundary_nodes]


# --- size function and layouts ----------------------------------------------


def _local_size(polygon: Polygon, h: float, q: float, pts: np.ndarray) -> np.ndarray:
    if q == 1.0:
        return np.full(len(np.atleast_2d(pts)), h)
    r = dist_to_vertices(polygon, pts)
    r = np.atleast_1d(r)
    return h * np.maximum(r, h**q) ** (1.0 - 1.0 / q)


def _side_offsets(L: float, h: float, q: float) -> np.ndarray:
    """Boundary point offsets on one side of length L (both endpoints included)."""
    if q == 1.0:
        n = max(1, math.ceil(L / h - 1e-12))
        return np.linspace(0.0, L, n + 1)
    half = 0.5 * L
    # march from the corner by the local size rule; first step is exactly h**q,
    # and the final step lands on the side midpoint (never a sliver interval)
    out = [0.0]
    r = 0.0
    while True:
        step = h * max(r, h**q) ** (1.0 - 1.0 / q)
        if r + step >= half - 0.25 * step:
            out.append(half)
            break
        r += step
        out.append(r)
    left = np.array(out)
    offs = np.unique(np.concatenate([left, L - left]))
    offs[0], offs[-1] = 0.0, L
    return offs


def _min_angles(verts: np.ndarray) -> np.ndarray:
    """Smallest interior angle (radians) of each triangle in a (T, 3, 2) batch."""
    a = np.linalg.norm(verts[:, 2] - verts[:, 1], axis=1)
    b = np.linalg.norm(verts[:, 0] - verts[:, 2], axis=1)
    c = np.linalg.norm(verts[:, 1] - verts[:, 0], axis=1)
    angs = []
    for opp, e1, e2 in ((a, b, c), (b, c, a), (c, a, b)):
        cosv = np.clip((e1**2 + e2**2 - opp**2) / (2 * e1 * e2), -1.0, 1.0)
        angs.append(np.arccos(cosv))
    return np.min(np.column_stack(angs), axis=1)


def _circumcenters(verts: np.ndarray):
    ax, ay = verts[:, 0, 0], verts[:, 0, 1]
    bx, by = verts[:, 1, 0], verts[:, 1, 1]
    cx, cy = verts[:, 2, 0], verts[:, 2, 1]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
        uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    return np.column_stack([ux, uy])


def _hex_seeds(polygon: Polygon, h: float, q: float) -> np.ndarray:
    (xmin, ymin), (xmax, ymax) = polygon.vertices.min(0), polygon.vertices.max(0)
    dy = h * math.sqrt(3.0) / 2.0
    rows = np.arange(ymin + 0.5 * dy, ymax, dy)
    pts = []
    for k, y in enumerate(rows):
        off = 0.25 * h if k % 2 else -0.25 * h
        xs = np.arange(xmin + 0.5 * h + off, xmax, h)
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    if not pts:
        return np.zeros((0, 2))
    pts = np.vstack(pts)
    keep = polygon.contains_points(pts)
    pts = pts[keep]
    if len(pts):
        margin = 0.55 * _local_size(polygon, h, q, pts)
        pts = pts[polygon.distance_to_boundary(pts) >= margin]
    return pts


def triangulate(
    polygon: Polygon,
    h: float,
    q: float = 1.0,
    *,
    min_angle_deg: float = 20.0,
    size_factor: float = 2.0,
    max_iter: int = 40,
) -> Mesh:
    """Generate a conforming triangulation with mesh size h and grading q.

    q = 1 gives a quasi-uniform mesh (max element diameter <= size_factor * h);
    q > 1 grades element sizes toward the polygon corners following
    h * max(r, h**q)**(1 - 1/q), down to h**q at the corners.
    """
    if h <= 0:
        raise MeshError("mesh size h must be positive")
    if q < 1.0:
        raise MeshError("grading exponent q must be >= 1")
    if h > polygon.side_lengths.min() + 1e-12:
        raise MeshError(
            f"h={h} larger than the shortest polygon side ({polygon.side_lengths.min():.6g})"
        )

    side_offsets = [_side_offsets(L, h, q) for L in polygon.side_lengths]
    interior = _hex_seeds(polygon, h, q)
    scale = max(1.0, float(np.abs(polygon.vertices).max()))

    mesh = None
    clean = False
    for _ in range(max_iter):
        # boundary points in cyclic order (corner shared between sides appears once)
        bpts = []
        for s in range(polygon.n_sides):
            offs = side_offsets[s][:-1]
            bpts.append(polygon.boundary_point(s, offs))
        bpts = np.vstack(bpts)
        B = len(bpts)
        pts = np.vstack([bpts, interior]) if len(interior) else bpts
        N = len(pts)

        tri = Delaunay(pts)
        simp = tri.simplices
        edges = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        codes = np.unique(edges[:, 0].astype(np.int64) * N + edges[:, 1])
        req = np.column_stack([np.arange(B), (np.arange(B) + 1) % B])
        req = np.sort(req, axis=1)
        req_codes = req[:, 0].astype(np.int64) * N + req[:, 1]
        present = np.isin(req_codes, codes)
        if not present.all():
            # split every missing boundary sub-segment at its arc midpoint
            missing = np.nonzero(~present)[0]
            cum = np.cumsum([0] + [len(side_offsets[s]) - 1 for s in range(polygon.n_sides)])
            for k in missing:
                s = int(np.searchsorted(cum, k, side="right") - 1)
                i = k - cum[s]
                offs = side_offsets[s]
                side_offsets[s] = np.insert(offs, i + 1, 0.5 * (offs[i] + offs[i + 1]))
            continue

        cent = pts[simp].mean(axis=1)
        keep = polygon.contains_points(cent)
        simp = simp[keep]
        verts = pts[simp]
        e1 = verts[:, 1] - verts[:, 0]
        e2 = verts[:, 2] - verts[:, 0]
        signed = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        flip = signed < 0
        simp[flip] = simp[flip][:, [0, 2, 1]]
        verts = pts[simp]
        areas = np.abs(signed)
        if abs(areas.sum() - polygon.area) > 1e-9 * polygon.area:
            raise MeshError("culled triangulation does not tile the polygon")

        flags = np.zeros(N, dtype=bool)
        flags[:B] = True
        mesh = Mesh(
            nodes=pts,
            triangles=simp,
            boundary_node_flags=flags,
            h_target=h,
            grading_exponent=q,
            polygon=polygon,
        )

        # quality and size marks
        min_ang = _min_angles(verts)
        diam = mesh.diameters()
        target = size_factor * _local_size(polygon, h, q, verts.mean(axis=1))
        bad = (min_ang < math.radians(min_angle_deg) - 1e-12) | (diam > target)
        if not bad.any():
            clean = True
            break

        cc = _circumcenters(verts[bad])
        cc = cc[np.isfinite(cc).all(axis=1)]
        new_pts, split_any = _process_candidates(
            polygon, side_offsets, pts, cc, h, q, scale
        )
        if not len(new_pts) and not split_any:
            break  # nothing insertable: accept the mesh as is
        if len(new_pts):
            interior = np.vstack([interior, new_pts]) if len(interior) else new_pts

    if mesh is None:
        raise MeshError("triangulation failed to produce a mesh")
    if not clean:
        warnings.warn(
            f"mesh refinement budget exhausted (min angle {mesh.min_angle_deg():.2f} deg)",
            MeshQualityWarning,
        )
    return mesh


def _process_candidates(polygon, side_offsets, pts, cc, h, q, scale):
    """Ruppert rule over all circumcenter candidates at once.

    A candidate inside the diametral circle of its nearest boundary
    sub-segment (or outside the polygon) splits that sub-segment; the rest are
    inserted as interior points after mutual and against-existing dedupe.
    Fixed candidate order keeps the result deterministic.
    """
    if not len(cc):
        return np.zeros((0, 2)), False
    # nearest side and arc offset, vectorized over sides
    d = cc[:, None, :] - polygon.side_starts[None, :, :]
    t = np.einsum("csd,sd->cs", d, polygon.side_tangents)
    t = np.clip(t, 0.0, polygon.side_lengths[None, :])
    feet = polygon.side_starts[None, :, :] + t[..., None] * polygon.side_tangents[None, :, :]
    dist2 = np.einsum("csd,csd->cs", cc[:, None, :] - feet, cc[:, None, :] - feet)
    side = np.argmin(dist2, axis=1)
    t_at = t[np.arange(len(cc)), side]

    inside = polygon.contains_points(cc)
    encroach = np.zeros(len(cc), dtype=bool)
    interval = np.zeros(len(cc), dtype=int)
    for s in np.unique(side):
        rows = np.nonzero(side == s)[0]
        offs = side_offsets[s]
        i = np.clip(np.searchsorted(offs, t_at[rows]) - 1, 0, len(offs) - 2)
        interval[rows] = i
        mids = polygon.boundary_point(s, 0.5 * (offs[i] + offs[i + 1]))
        half = 0.5 * (offs[i + 1] - offs[i])
        encroach[rows] = np.linalg.norm(cc[rows] - mids, axis=1) < half

    # split every encroached (or exterior-candidate) sub-segment once
    floor = max(1e-10 * scale, 0.25 * h**q)
    split_any = False
    to_split = encroach | ~inside
    for s in np.unique(side[to_split]):
        offs = side_offsets[s]
        ivals = np.unique(interval[to_split & (side == s)])[::-1]  # descending
        for i in ivals:
            if offs[i + 1] - offs[i] > floor:
                offs = np.insert(offs, i + 1, 0.5 * (offs[i] + offs[i + 1]))
                split_any = True
        side_offsets[s] = offs

    cand = cc[inside & ~encroach]
    if not len(cand):
        return np.zeros((0, 2)), split_any
    # mutual dedupe at 0.3 * local size, greedy in fixed order (KDTree radius
    # queries keep this O(n log n) even for thousands of candidates)
    cand = cand[:4000]
    sizes = _local_size(polygon, h, q, cand)
    neigh = cKDTree(cand).query_ball_point(cand, r=0.3 * sizes)
    keep = np.zeros(len(cand), dtype=bool)
    for i, nb in enumerate(neigh):
        if not any(keep[j] for j in nb if j != i):
            keep[i] = True
    cand = cand[keep]
    d_exist, _ = cKDTree(pts).query(cand, k=1)
    return cand[d_exist > 1e-10 * scale], split_any


# --- boundary extraction ------------------------------------------------------


def extract_boundary(mesh: Mesh) -> BoundaryMesh:
    """Extract the single closed boundary cycle with side ids and normals."""
    simp = mesh.triangles
    directed = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    codes = und[:, 0].astype(np.int64) * mesh.n_nodes + und[:, 1]
    uniq, counts = np.unique(codes, return_counts=True)
    if counts.max() > 2:
        raise MeshError("non-manifold edge: mesh is not conforming")
    bcodes = set(uniq[counts == 1].tolist())
    succ = {}
    for i, j in directed:
        c = int(min(i, j)) * mesh.n_nodes + int(max(i, j))
        if c in bcodes:
            if int(i) in succ:
                raise MeshError("boundary is not a single closed cycle")
            succ[int(i)] = int(j)
    if len(succ) != len(bcodes):
        raise MeshError("boundary is not a single closed cycle")

    poly = mesh.polygon
    start_candidates = np.nonzero(mesh.boundary_node_flags)[0]
    d0 = np.linalg.norm(mesh.nodes[start_candidates] - poly.vertices[0], axis=1)
    start = int(start_candidates[np.argmin(d0)])
    if d0.min() > 1e-12 * max(1.0, poly.perimeter):
        raise MeshError("polygon vertex 0 is not a mesh node")

    cycle = [start]
    node = succ[start]
    while node != start:
        cycle.append(node)
        node = succ[node]
        if len(cycle) > len(succ):
            raise MeshError("boundary walk did not close")
    if len(cycle) != len(succ):
        raise MeshError("boundary is not a single closed cycle")

    bnodes = np.array(cycle, dtype=int)
    pairs = np.column_stack([bnodes, np.roll(bnodes, -1)])
    p0 = mesh.nodes[pairs[:, 0]]
    p1 = mesh.nodes[pairs[:, 1]]
    lengths = np.linalg.norm(p1 - p0, axis=1)
    if np.any(lengths <= 0):
        raise MeshError("zero-length boundary segment")

    mids = 0.5 * (p0 + p1)
    side_ids = np.array([poly.locate_boundary_point(m)[0] for m in mids], dtype=int)
    normals = poly.side_normals[side_ids]
    if abs(lengths.sum() - poly.perimeter) > 1e-10 * poly.perimeter:
        raise MeshError("boundary length does not match the polygon perimeter")

    arclen = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    return BoundaryMesh(
        mesh=mesh,
        node_pairs=pairs,
        lengths=lengths,
        side_ids=side_ids,
        normals=normals,
        boundary_nodes=bnodes,
        arclength_coords=arclen,
    )


# --- uniform refinement -------------------------------------------------------


def refine(mesh: Mesh) -> Mesh:
    """Split every triangle into 4 by edge midpoints; old nodes keep indices."""
    simp = mesh.triangles
    N = mesh.n_nodes
    pair_per_edge = [simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]]
    all_edges = np.sort(np.concatenate(pair_per_edge), axis=1)
    codes = all_edges[:, 0].astype(np.int64) * N + all_edges[:, 1]
    uniq, inv, counts = np.unique(codes, return_inverse=True, return_counts=True)
    mid_index = N + np.arange(len(uniq))
    ei, ej = uniq // N, uniq % N
    mid_coords = 0.5 * (mesh.nodes[ei] + mesh.nodes[ej])

    T = len(simp)
    m = mid_index[inv].reshape(3, T).T  # columns: mid01, mid12, mid20
    children = np.concatenate(
        [
            np.column_stack([simp[:, 0], m[:, 0], m[:, 2]]),
            np.column_stack([simp[:, 1], m[:, 1], m[:, 0]]),
            np.column_stack([simp[:, 2], m[:, 2], m[:, 1]]),
            m,
        ]
    )
    new_nodes = np.vstack([mesh.nodes, mid_coords])
    new_flags = np.concatenate([mesh.boundary_node_flags, counts == 1])
    return Mesh(
        nodes=new_nodes,
        triangles=children,
        boundary_node_flags=new_flags,
        h_target=0.5 * mesh.h_target,
        grading_exponent=mesh.grading_exponent,
        polygon=mesh.polygon,
    )


# --- consistency checks and plain-text dumps ----------------------------------


def check_mesh(mesh: Mesh, rel_tol: float = 1e-10):
    """Raise MeshError if basic mesh invariants are violated."""
    if np.any(mesh.areas <= 0):
        raise MeshError("non-positive triangle area")
    if abs(mesh.areas.sum() - mesh.polygon.area) > rel_tol * mesh.polygon.area:
        raise MeshError("triangle areas do not sum to the polygon area")
    simp = mesh.triangles
    und = np.sort(
        np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]]), axis=1
    )
    codes = und[:, 0].astype(np.int64) * mesh.n_nodes + und[:, 1]
    _, counts = np.unique(codes, return_counts=True)
    if counts.max() > 2:
        raise MeshError("edge shared by more than two triangles")
    bidx = np.nonzero(mesh.boundary_node_flags)[0]
    d = mesh.polygon.distance_to_boundary(mesh.nodes[bidx])
    if len(d) and d.max() > 1e-12 * max(1.0, mesh.polygon.perimeter):
        raise MeshError("boundary node off the polygon boundary")
    vd = np.linalg.norm(
        mesh.nodes[None, :, :] - mesh.polygon.vertices[:, None, :], axis=2
    ).min(axis=1)
    if vd.max() > 1e-12 * max(1.0, mesh.polygon.perimeter):
        raise MeshError("a polygon vertex is not a mesh node")


def write_mesh(path, mesh: Mesh):
    """Plain-text dump: `nodes N triangles T`, N lines `x y`, T lines `i j k`."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"nodes {mesh.n_nodes} triangles {mesh.n_triangles}\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{int(i)} {int(j)} {int(k)}\n")


def read_mesh(path):
    """Read a mesh dump back as (nodes, triangles) arrays."""
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "nodes" or head[2] != "triangles":
            raise MeshError(f"bad mesh file header in {path}")
        n, t = int(head[1]), int(head[3])
        nodes = np.array([[float(v) for v in fh.readline().split()] for _ in range(n)])
        tris = np.array([[int(v) for v in fh.readline().split()] for _ in range(t)], dtype=int)
    return nodes, tris


def write_field(path, values: np.ndarray):
    """Plain-text nodal field dump: `field N` then one value per line."""
    values = np.asarray(values)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"field {len(values)}\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")
