"""Triangular meshes, nodal deformations, retraction and transport.

The optimization variable of every problem in this package is the node
placement of a fixed-connectivity triangulation.  Deforming a mesh means
adding a nodal displacement field to its coordinates; the connectivity,
cell markers and facet markers never change.  Deformation fields carried
across meshes of the same connectivity keep their nodal value vector
bit-exactly (the transported field is the same coefficient vector hosted
on the other mesh).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConnectivityMismatch,
    DegenerateMesh,
    InvalidParameter,
    MeshMismatch,
)

__all__ = [
    "Mesh",
    "Deformation",
    "apply_deformation",
    "inverse_retraction",
    "transport",
    "quality",
    "generate_disk_in_square",
    "generate_ellipse_in_square",
    "generate_rectangle",
]


class _Topology:
    """Connectivity-derived data shared by all meshes with the same triangles.

    Building edge tables is the expensive part of mesh construction; meshes
    produced by deformation reuse the host topology unchanged.
    """

    def __init__(self, triangles):
        tri = np.ascontiguousarray(triangles, dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise InvalidParameter("triangles must be an (M, 3) index array")
        self.triangles = tri
        self.triangles.setflags(write=False)

        # unique undirected edges; cell_edges[m, k] is the edge opposite
        # local vertex k of triangle m
        pairs = np.sort(
            np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]]), axis=1
        )
        self.edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        self.edges.setflags(write=False)
        self.cell_edges = inverse.reshape(3, -1).T.copy()
        self.cell_edges.setflags(write=False)

        counts = np.bincount(inverse, minlength=len(self.edges))
        self.boundary_edge_ids = np.flatnonzero(counts == 1)
        self.boundary_edge_ids.setflags(write=False)

        # owning triangle of each boundary edge (for outward normals)
        owner = np.full(len(self.edges), -1, dtype=np.int64)
        for k in range(3):
            owner[self.cell_edges[:, k]] = np.arange(len(tri))
        self.edge_owner = owner
        self.edge_owner.setflags(write=False)

        self.edge_index = {tuple(e): i for i, e in enumerate(map(tuple, self.edges))}

    @property
    def n_triangles(self):
        return len(self.triangles)


class Mesh:
    """Immutable 2D triangulation with cell and facet markers.

    Parameters
    ----------
    nodes : (N, 2) array of node coordinates.
    triangles : (M, 3) array of node indices, counterclockwise.
    facet_markers : dict mapping an edge, given as a node-index pair, to an
        integer tag.  Every boundary edge must be tagged; interior edges may
        additionally be tagged (used for material interfaces).
    cell_markers : (M,) integer tags, one per triangle.
    """

    def __init__(self, nodes, triangles, facet_markers, cell_markers, _topology=None):
        self.nodes = np.ascontiguousarray(nodes, dtype=np.float64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise InvalidParameter("nodes must be an (N, 2) coordinate array")
        self.nodes.setflags(write=False)

        self.topology = _topology if _topology is not None else _Topology(triangles)
        tri = self.topology.triangles
        if tri.size and (tri.min() < 0 or tri.max() >= len(self.nodes)):
            raise InvalidParameter("triangle indices out of range")

        self.cell_markers = np.ascontiguousarray(cell_markers, dtype=np.int64)
        if self.cell_markers.shape != (len(tri),):
            raise InvalidParameter("cell_markers must have one tag per triangle")
        self.cell_markers.setflags(write=False)

        self.facet_markers = {
            (min(a, b), max(a, b)): int(m) for (a, b), m in facet_markers.items()
        }
        self._validate(_topology is None)

        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            worst = int(np.argmin(areas))
            raise DegenerateMesh(
                f"triangle {worst} has non-positive area {areas[worst]:.3e}"
            )

    def _validate(self, full):
        topo = self.topology
        marked = set(self.facet_markers)
        boundary = {tuple(topo.edges[i]) for i in topo.boundary_edge_ids}
        missing = boundary - marked
        if missing:
            raise InvalidParameter(f"{len(missing)} boundary edges carry no marker")
        if full:
            stray = [e for e in marked if e not in topo.edge_index]
            if stray:
                raise InvalidParameter(f"marked edge {stray[0]} is not a mesh edge")

    # -- geometry ---------------------------------------------------------

    @property
    def triangles(self):
        return self.topology.triangles

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return self.topology.n_triangles

    def cell_nodes(self):
        """Node coordinates per triangle, shape (M, 3, 2)."""
        return self.nodes[self.triangles]

    def signed_areas(self):
        p = self.cell_nodes()
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def with_nodes(self, nodes):
        """New mesh sharing this connectivity and markers."""
        return Mesh(
            nodes,
            self.topology.triangles,
            self.facet_markers,
            self.cell_markers,
            _topology=self.topology,
        )

    def facets_with_marker(self, marker):
        """Edges tagged ``marker`` as an (F, 2) node-index array."""
        out = [e for e, m in self.facet_markers.items() if m == marker]
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)

    def boundary_markers(self):
        """Sorted set of markers appearing on boundary edges."""
        topo = self.topology
        tags = {
            self.facet_markers[tuple(topo.edges[i])] for i in topo.boundary_edge_ids
        }
        return sorted(tags)

    def nodes_on_markers(self, markers):
        """Indices of nodes lying on any facet tagged with one of ``markers``."""
        wanted = set(markers)
        ids = [e for e, m in self.facet_markers.items() if m in wanted]
        if not ids:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.array(ids, dtype=np.int64).ravel())

    def same_connectivity(self, other):
        return self.topology is other.topology or (
            self.n_nodes == other.n_nodes
            and np.array_equal(self.topology.triangles, other.topology.triangles)
        )


@dataclass(frozen=True)
class Deformation:
    """Nodal displacement field hosted on a mesh."""

    mesh: Mesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (self.mesh.n_nodes, 2):
            raise ConnectivityMismatch(
                f"deformation shape {vals.shape} does not match mesh "
                f"with {self.mesh.n_nodes} nodes"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @staticmethod
    def zero(mesh):
        return Deformation(mesh, np.zeros((mesh.n_nodes, 2)))

    def __add__(self, other):
        if other.mesh is not self.mesh:
            raise MeshMismatch("deformations are hosted on different meshes")
        return Deformation(self.mesh, self.values + other.values)

    def __sub__(self, other):
        if other.mesh is not self.mesh:
            raise MeshMismatch("deformations are hosted on different meshes")
        return Deformation(self.mesh, self.values - other.values)

    def __mul__(self, scalar):
        return Deformation(self.mesh, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return Deformation(self.mesh, -self.values)


def apply_deformation(mesh, d):
    """Deform ``mesh`` by adding nodal displacements (perturbation of identity).

    Raises DegenerateMesh if any resulting triangle area falls below
    1e-12 times the median triangle area of the input mesh.
    """
    if d.mesh is not mesh and not mesh.same_connectivity(d.mesh):
        raise ConnectivityMismatch("deformation is not hosted on this mesh")
    new_nodes = mesh.nodes + d.values
    p = new_nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    area_eps = 1e-12 * float(np.median(mesh.signed_areas()))
    if np.any(areas <= area_eps):
        worst = int(np.argmin(areas))
        raise DegenerateMesh(
            f"deformation collapses triangle {worst} (area {areas[worst]:.3e})"
        )
    return mesh.with_nodes(new_nodes)


def inverse_retraction(reference, deformed):
    """Nodal difference ``deformed - reference`` as a deformation on ``reference``."""
    if not reference.same_connectivity(deformed):
        raise ConnectivityMismatch("meshes do not share connectivity")
    return Deformation(reference, deformed.nodes - reference.nodes)


def transport(d_from, target):
    """Re-host a deformation on ``target``, keeping nodal values bit-exactly."""
    if not d_from.mesh.same_connectivity(target):
        raise ConnectivityMismatch("transport requires shared connectivity")
    return Deformation(target, d_from.values)


def quality(mesh):
    """Minimum interior angle over all triangles, in radians."""
    p = mesh.cell_nodes()
    angles = []
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        cosang = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
        angles.append(np.arccos(cosang))
    return float(np.min(angles))


# -- built-in geometry --------------------------------------------------------

OUTER_BOUNDARY = 1
INTERFACE = 2


def _stitch_rings(inner_ids, inner_angles, outer_ids, outer_angles):
    """Triangulate the annular strip between two rings of nodes.

    Both rings are given in increasing angular order.  The strip is swept by
    advancing whichever ring has the smaller next angle, which keeps the
    triangles well shaped for comparable ring resolutions.
    """
    ni, no = len(inner_ids), len(outer_ids)
    tris = []
    i = j = 0
    # wrapped angle lookahead
    ia = np.concatenate([inner_angles, inner_angles[:1] + 2 * math.pi])
    oa = np.concatenate([outer_angles, outer_angles[:1] + 2 * math.pi])
    while i < ni or j < no:
        advance_outer = j < no and (i == ni or oa[j + 1] <= ia[i + 1])
        if advance_outer:
            tris.append(
                (outer_ids[j], outer_ids[(j + 1) % no], inner_ids[i % ni])
            )
            j += 1
        else:
            tris.append(
                (outer_ids[j % no], inner_ids[(i + 1) % ni], inner_ids[i % ni])
            )
            i += 1
    return tris


def _square_hit(center, direction):
    """Distance from ``center`` along ``direction`` to the boundary of (0,1)^2."""
    t = math.inf
    cx, cy = center
    dx, dy = direction
    if dx > 0:
        t = min(t, (1.0 - cx) / dx)
    elif dx < 0:
        t = min(t, (0.0 - cx) / dx)
    if dy > 0:
        t = min(t, (1.0 - cy) / dy)
    elif dy < 0:
        t = min(t, (0.0 - cy) / dy)
    return t


def generate_ellipse_in_square(center, semi_axes, angle, resolution):
    """Conforming triangulation of (0,1)^2 with an elliptic inclusion.

    The inclusion boundary is resolved exactly by mesh facets: concentric
    scaled copies of the ellipse fill the inside, and graded rings blend the
    ellipse boundary into the square outside.  Cell marker 1 tags inclusion
    triangles, marker 2 the exterior; facet marker 1 tags the outer boundary,
    marker 2 the interface.

    ``resolution`` sets the interface to 8 * resolution facets.
    """
    a, b = float(semi_axes[0]), float(semi_axes[1])
    cx, cy = float(center[0]), float(center[1])
    if a <= 0 or b <= 0:
        raise InvalidParameter("semi axes must be positive")
    if resolution < 1 or int(resolution) != resolution:
        raise InvalidParameter("resolution must be a positive integer")

    phi = float(angle)
    m_iface = 8 * int(resolution)

    def ellipse_radius(theta):
        psi = theta - phi
        return a * b / math.hypot(b * math.cos(psi), a * math.sin(psi))

    # reject inclusions touching the square boundary
    for theta in np.linspace(0.0, 2 * math.pi, 720, endpoint=False):
        r = ellipse_radius(theta)
        d = (math.cos(theta), math.sin(theta))
        if r >= 0.999 * _square_hit((cx, cy), d):
            raise InvalidParameter("inclusion does not fit inside the unit square")

    nodes = [(cx, cy)]
    r_mean = 0.5 * (a + b)
    n_rings = max(2, round(m_iface / (2 * math.pi)))

    ring_ids = []
    ring_angles = []
    for j in range(1, n_rings + 1):
        m_j = m_iface if j == n_rings else max(6, round(m_iface * j / n_rings))
        # stagger alternate rings by half a step for near-isoceles triangles
        offset = 0.5 * (j % 2)
        thetas = 2 * math.pi * (np.arange(m_j) + offset) / m_j
        ids = []
        for theta in thetas:
            r = ellipse_radius(theta) * j / n_rings
            ids.append(len(nodes))
            nodes.append((cx + r * math.cos(theta), cy + r * math.sin(theta)))
        ring_ids.append(ids)
        ring_angles.append(thetas)

    triangles = []
    cell_markers = []

    # innermost fan around the center node
    first = ring_ids[0]
    for i in range(len(first)):
        triangles.append((0, first[i], first[(i + 1) % len(first)]))
        cell_markers.append(1)
    for j in range(len(ring_ids) - 1):
        tris = _stitch_rings(
            ring_ids[j], ring_angles[j], ring_ids[j + 1], ring_angles[j + 1]
        )
        triangles.extend(tris)
        cell_markers.extend([1] * len(tris))

    # outside: rings interpolating from the ellipse to the square boundary,
    # on a fixed angle grid extended by the exact corner directions (radial
    # corner spokes keep the kinked contours from folding strips)
    corner_angles = [
        math.atan2(sy - cy, sx - cx) % (2 * math.pi)
        for sx, sy in ((0, 0), (1, 0), (1, 1), (0, 1))
    ]
    outer_thetas = list(2 * math.pi * np.arange(m_iface) / m_iface)
    for ca in corner_angles:
        if min(abs(ca - t) for t in outer_thetas) > 1e-12:
            outer_thetas.append(ca)
    outer_thetas = np.array(sorted(outer_thetas))

    gaps = []
    for theta in outer_thetas:
        d = (math.cos(theta), math.sin(theta))
        gaps.append(_square_hit((cx, cy), d) - ellipse_radius(theta))
    mean_gap = float(np.mean(gaps))
    h_iface = 2 * math.pi * r_mean / m_iface
    n_out = max(2, round(1.6 * mean_gap / h_iface))
    grading = 1.3

    prev_ids = ring_ids[-1]
    prev_angles = ring_angles[-1]
    for k in range(1, n_out + 1):
        s = (k / n_out) ** grading
        ids = []
        for theta in outer_thetas:
            d = (math.cos(theta), math.sin(theta))
            r0 = ellipse_radius(theta)
            r1 = _square_hit((cx, cy), d)
            r = r0 + (r1 - r0) * s
            x, y = cx + r * d[0], cy + r * d[1]
            if k == n_out:
                # snap onto the square boundary exactly
                x = 0.0 if abs(x) < 1e-12 else (1.0 if abs(x - 1) < 1e-12 else x)
                y = 0.0 if abs(y) < 1e-12 else (1.0 if abs(y - 1) < 1e-12 else y)
            ids.append(len(nodes))
            nodes.append((x, y))
        tris = _stitch_rings(prev_ids, prev_angles, ids, outer_thetas)
        triangles.extend(tris)
        cell_markers.extend([2] * len(tris))
        prev_ids, prev_angles = ids, outer_thetas

    facet_markers = {}
    iface = ring_ids[-1]
    for i in range(len(iface)):
        u, v = iface[i], iface[(i + 1) % len(iface)]
        facet_markers[(min(u, v), max(u, v))] = INTERFACE
    m_out = len(prev_ids)
    for i in range(m_out):
        u, v = prev_ids[i], prev_ids[(i + 1) % m_out]
        facet_markers[(min(u, v), max(u, v))] = OUTER_BOUNDARY

    return Mesh(np.array(nodes), np.array(triangles), facet_markers, cell_markers)


def generate_disk_in_square(radius, resolution):
    """Disk inclusion of the given radius centered at (0.5, 0.5) in (0,1)^2."""
    radius = float(radius)
    if not 0.0 < radius < 0.5:
        raise InvalidParameter("radius must lie in (0, 0.5)")
    return generate_ellipse_in_square((0.5, 0.5), (radius, radius), 0.0, resolution)


def generate_rectangle(
    width,
    height,
    nx,
    ny,
    origin=(0.0, 0.0),
    left=1,
    right=3,
    top=2,
    bottom=2,
    cell_marker=1,
):
    """Structured triangulation of an axis-aligned rectangle.

    Each grid cell is split along the same diagonal.  Side markers default to
    a channel setup: inlet on the left, walls top and bottom, outlet right.
    """
    x0, y0 = origin
    xs = x0 + width * np.arange(nx + 1) / nx
    ys = y0 + height * np.arange(ny + 1) / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    triangles = []
    for i in range(nx):
        for j in range(ny):
            p00, p10 = nid(i, j), nid(i + 1, j)
            p01, p11 = nid(i, j + 1), nid(i + 1, j + 1)
            triangles.append((p00, p10, p11))
            triangles.append((p00, p11, p01))
    triangles = np.array(triangles)
    cell_markers = np.full(len(triangles), cell_marker)

    facet_markers = {}
    for j in range(ny):
        facet_markers[tuple(sorted((nid(0, j), nid(0, j + 1))))] = left
        facet_markers[tuple(sorted((nid(nx, j), nid(nx, j + 1))))] = right
    for i in range(nx):
        facet_markers[tuple(sorted((nid(i, 0), nid(i + 1, 0))))] = bottom
        facet_markers[tuple(sorted((nid(i, ny), nid(i + 1, ny))))] = top
    return Mesh(nodes, triangles, facet_markers, cell_markers)
