"""Finite-element spaces, sparse assembly and solvers on triangle meshes.

Scalar and vector Lagrange elements of degree one, plus the degree-two /
degree-one velocity-pressure pair for flow problems.  All volume integrals
are evaluated with fixed quadrature rules on the reference triangle whose
points are strictly interior; assembly is vectorized over cells and scatters
into COO triplets.

Everything downstream differentiates these discrete forms with respect to
node positions, so consistency matters more than quadrature exactness: any
form and any derivative of it must be evaluated with the same rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    InvalidParameter,
    MissingCoefficient,
    NoConvergence,
    SingularSystem,
    SpaceMismatch,
    UnknownMarker,
)

__all__ = [
    "TriRule",
    "RULE_D2",
    "RULE_D4",
    "FunctionSpace",
    "FeField",
    "assemble_bilinear",
    "assemble_load",
    "apply_dirichlet",
    "DirichletSet",
    "solve_sparse",
    "newton_solve",
    "FlowBCs",
    "assemble_stokes",
    "assemble_ns_system",
    "boundary_flux",
    "facet_geometry",
]

LIN_TOL = 1e-10


@dataclass(frozen=True)
class TriRule:
    """Quadrature on the reference triangle, weights normalized to sum to 1."""

    points: np.ndarray
    weights: np.ndarray


# degree-2 rule with strictly interior points
RULE_D2 = TriRule(
    points=np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]]),
    weights=np.array([1 / 3, 1 / 3, 1 / 3]),
)

# degree-4 rule (six interior points)
_A = 0.445948490915965
_B = 0.091576213509771
RULE_D4 = TriRule(
    points=np.array(
        [
            [_A, _A],
            [1 - 2 * _A, _A],
            [_A, 1 - 2 * _A],
            [_B, _B],
            [1 - 2 * _B, _B],
            [_B, 1 - 2 * _B],
        ]
    ),
    weights=np.array(3 * [0.223381589678011] + 3 * [0.109951743655322]),
)


def _p1_basis(points):
    xi, eta = points[:, 0], points[:, 1]
    phi = np.column_stack([1 - xi - eta, xi, eta])
    dphi = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    dphi = np.broadcast_to(dphi, (len(points), 3, 2)).copy()
    return phi, dphi


def _p2_basis(points):
    xi, eta = points[:, 0], points[:, 1]
    lam = np.column_stack([1 - xi - eta, xi, eta])
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    nq = len(points)
    phi = np.empty((nq, 6))
    dphi = np.empty((nq, 6, 2))
    for v in range(3):
        phi[:, v] = lam[:, v] * (2 * lam[:, v] - 1)
        dphi[:, v] = (4 * lam[:, v, None] - 1) * dlam[v]
    # edge dof k sits on the edge opposite vertex k
    for k, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
        phi[:, 3 + k] = 4 * lam[:, i] * lam[:, j]
        dphi[:, 3 + k] = 4 * (lam[:, i, None] * dlam[j] + lam[:, j, None] * dlam[i])
    return phi, dphi


class FunctionSpace:
    """Degrees of freedom and reference-element data for one element family.

    Families: ``P1`` and ``P2`` scalars, ``P1v`` and ``P2v`` vectors with
    node-major interleaved components, and the mixed pair ``TH`` laid out as
    all velocity dofs followed by all pressure dofs.
    """

    def __init__(self, mesh, family):
        if family not in ("P1", "P2", "P1v", "P2v", "TH"):
            raise InvalidParameter(f"unknown element family {family!r}")
        self.mesh = mesh
        self.family = family
        topo = mesh.topology
        n, e = mesh.n_nodes, len(topo.edges)

        if family in ("P1", "P1v"):
            scalar_cell_dofs = topo.triangles
            self.n_scalar = n
        else:
            edge_dofs = n + topo.cell_edges
            scalar_cell_dofs = np.hstack([topo.triangles, edge_dofs])
            self.n_scalar = n + e
        self._scalar_cell_dofs = scalar_cell_dofs

        if family in ("P1", "P2"):
            self.ndof = self.n_scalar
            self.cell_dofs = scalar_cell_dofs
            self.components = 1
        elif family in ("P1v", "P2v"):
            self.ndof = 2 * self.n_scalar
            self.cell_dofs = _interleave(scalar_cell_dofs)
            self.components = 2
        else:  # TH: P2 vector velocity then P1 pressure
            self.n_velocity = 2 * (n + e)
            self.ndof = self.n_velocity + n
            self.cell_dofs = None
            self.components = 3
            self.velocity = FunctionSpace(mesh, "P2v")
            self.pressure = FunctionSpace(mesh, "P1")

    def scalar_dof_coords(self):
        """Coordinates of scalar dofs (nodes, then edge midpoints for P2)."""
        mesh = self.mesh
        if self.family in ("P1", "P1v"):
            return mesh.nodes
        mids = mesh.nodes[mesh.topology.edges].mean(axis=1)
        return np.vstack([mesh.nodes, mids])

    def basis(self, rule):
        pts = rule.points
        if self.family in ("P1", "P1v"):
            return _p1_basis(pts)
        if self.family in ("P2", "P2v"):
            return _p2_basis(pts)
        raise InvalidParameter("mixed space has no single basis")

    def facet_scalar_dofs(self, markers):
        """Scalar dof indices lying on facets tagged with any of ``markers``."""
        mesh = self.mesh
        known = set(mesh.facet_markers.values())
        for m in markers:
            if m not in known:
                raise UnknownMarker(f"facet marker {m} not present in mesh")
        wanted = set(markers)
        dofs = set()
        for (u, v), m in mesh.facet_markers.items():
            if m in wanted:
                dofs.add(u)
                dofs.add(v)
                if self.family in ("P2", "P2v", "TH"):
                    dofs.add(mesh.n_nodes + mesh.topology.edge_index[(u, v)])
        return np.array(sorted(dofs), dtype=np.int64)

    def vector_dofs(self, scalar_dofs, component):
        return 2 * np.asarray(scalar_dofs, dtype=np.int64) + component

    def gradients(self, rule):
        """Physical basis gradients per cell and quadrature point.

        Returns (areas, grads) with grads of shape (M, nq, nloc, 2).
        """
        mesh = self.mesh
        phi, dphi = self.basis(rule)
        p = mesh.cell_nodes()
        j11 = p[:, 1, 0] - p[:, 0, 0]
        j12 = p[:, 2, 0] - p[:, 0, 0]
        j21 = p[:, 1, 1] - p[:, 0, 1]
        j22 = p[:, 2, 1] - p[:, 0, 1]
        det = j11 * j22 - j12 * j21
        inv_t = np.empty((mesh.n_triangles, 2, 2))
        inv_t[:, 0, 0] = j22 / det
        inv_t[:, 0, 1] = -j21 / det
        inv_t[:, 1, 0] = -j12 / det
        inv_t[:, 1, 1] = j11 / det
        grads = np.einsum("mij,qaj->mqai", inv_t, dphi)
        return 0.5 * det, grads

    def quad_points(self, rule):
        """Physical quadrature points, shape (M, nq, 2)."""
        p = self.mesh.cell_nodes()
        lam = np.column_stack(
            [1 - rule.points[:, 0] - rule.points[:, 1], rule.points]
        )
        return np.einsum("qv,mvd->mqd", lam, p)

    def eval_scalar(self, values, rule):
        """Scalar field values at quadrature points, shape (M, nq)."""
        phi, _ = self.basis(rule)
        vals = np.asarray(values)[self._scalar_cell_dofs]
        return np.einsum("qa,ma->mq", phi, vals)

    def eval_vector(self, values, rule):
        """Vector field values at quadrature points, shape (M, nq, 2)."""
        v = np.asarray(values).reshape(-1, 2)
        phi, _ = self.basis(rule)
        vals = v[self._scalar_cell_dofs]
        return np.einsum("qa,mad->mqd", phi, vals)

    def grad_scalar(self, values, rule):
        """Scalar field gradients at quadrature points, shape (M, nq, 2)."""
        _, grads = self.gradients(rule)
        vals = np.asarray(values)[self._scalar_cell_dofs]
        return np.einsum("mqai,ma->mqi", grads, vals)

    def grad_vector(self, values, rule):
        """Vector field Jacobians at quadrature points, shape (M, nq, 2, 2).

        Entry [..., c, i] is the derivative of component c along direction i.
        """
        v = np.asarray(values).reshape(-1, 2)
        _, grads = self.gradients(rule)
        vals = v[self._scalar_cell_dofs]
        return np.einsum("mqai,mac->mqci", grads, vals)


def _interleave(scalar_cell_dofs):
    m, nloc = scalar_cell_dofs.shape
    out = np.empty((m, 2 * nloc), dtype=np.int64)
    out[:, 0::2] = 2 * scalar_cell_dofs
    out[:, 1::2] = 2 * scalar_cell_dofs + 1
    return out


@dataclass
class FeField:
    """Coefficient vector over a function space."""

    space: FunctionSpace
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (self.space.ndof,):
            raise SpaceMismatch(
                f"coefficient length {vals.shape} does not match "
                f"{self.space.ndof} dofs"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidParameter("field contains non-finite entries")
        self.values = vals

    def same_space(self, other):
        return (
            self.space.family == other.space.family
            and self.space.mesh is other.space.mesh
        )


def _scatter(cell_dofs, local, ndof):
    m, a, b = local.shape
    rows = np.repeat(cell_dofs, b, axis=1).ravel()
    cols = np.tile(cell_dofs, (1, a)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(ndof, ndof))
    return mat.tocsr()


def _cell_coefficients(mesh, coeff):
    """Per-cell values from a scalar or a marker -> value mapping."""
    if np.isscalar(coeff):
        return np.full(mesh.n_triangles, float(coeff))
    out = np.empty(mesh.n_triangles)
    present = np.unique(mesh.cell_markers)
    for m in present:
        if m not in coeff:
            raise MissingCoefficient(f"no coefficient for cell marker {m}")
    for m in present:
        out[mesh.cell_markers == m] = float(coeff[m])
    return out


def assemble_stiffness(space, coeff, rule=RULE_D2):
    mesh = space.mesh
    c = _cell_coefficients(mesh, coeff)
    areas, grads = space.gradients(rule)
    local = np.einsum(
        "q,mqai,mqbi,m->mab", rule.weights, grads, grads, c * areas, optimize=True
    )
    if space.components == 1:
        return _scatter(space._scalar_cell_dofs, local, space.ndof)
    # vector Laplacian: identical blocks per component
    m, nloc, _ = local.shape
    big = np.zeros((m, 2 * nloc, 2 * nloc))
    big[:, 0::2, 0::2] = local
    big[:, 1::2, 1::2] = local
    return _scatter(space.cell_dofs, big, space.ndof)


def assemble_mass(space, coeff=1.0, rule=RULE_D2, qp_weight=None):
    """Mass matrix, optionally weighted by per-quadrature-point values."""
    mesh = space.mesh
    phi, _ = space.basis(rule)
    areas = mesh.signed_areas()
    if qp_weight is None:
        c = _cell_coefficients(mesh, coeff)
        w = rule.weights[None, :] * np.ones((mesh.n_triangles, 1)) * c[:, None]
    else:
        w = rule.weights[None, :] * qp_weight
    local = np.einsum("mq,qa,qb,m->mab", w, phi, phi, areas, optimize=True)
    if space.components != 1:
        raise InvalidParameter("mass assembly is scalar only")
    return _scatter(space._scalar_cell_dofs, local, space.ndof)


def assemble_elasticity(space, mu=1.0, lam=0.0, delta=0.0, rule=RULE_D2):
    """2 mu eps(V):eps(W) + lam div V div W + delta V.W on a P1 vector space."""
    if space.family != "P1v":
        raise InvalidParameter("elasticity form expects a P1 vector space")
    mesh = space.mesh
    areas, grads = space.gradients(rule)
    g = grads[:, 0]  # P1 gradients are constant per cell, shape (M, 3, 2)
    m = mesh.n_triangles

    # strain of basis field (node a, comp c): 0.5 (g_a x e_c + e_c x g_a)
    eps = np.zeros((m, 3, 2, 2, 2))
    for c in range(2):
        eps[:, :, c, c, 0] += 0.5 * g[:, :, 0]
        eps[:, :, c, c, 1] += 0.5 * g[:, :, 1]
        eps[:, :, c, 0, c] += 0.5 * g[:, :, 0]
        eps[:, :, c, 1, c] += 0.5 * g[:, :, 1]
    eps = eps.reshape(m, 6, 2, 2)
    local = 2.0 * mu * np.einsum("maij,mbij,m->mab", eps, eps, areas, optimize=True)
    if lam != 0.0:
        div = np.zeros((m, 6))
        div[:, 0::2] = g[:, :, 0]
        div[:, 1::2] = g[:, :, 1]
        local += lam * np.einsum("ma,mb,m->mab", div, div, areas)
    if delta != 0.0:
        phi, _ = space.basis(rule)
        mass = np.einsum("q,qa,qb,m->mab", rule.weights, phi, phi, areas)
        big = np.zeros((m, 6, 6))
        big[:, 0::2, 0::2] = mass
        big[:, 1::2, 1::2] = mass
        local += delta * big
    return _scatter(space.cell_dofs, local, space.ndof)


def assemble_bilinear(space, form, coeff):
    """Spec-level assembly dispatch for the three supported form kinds."""
    if form == "stiffness":
        return assemble_stiffness(space, coeff)
    if form == "mass":
        return assemble_mass(space, coeff)
    if form == "elasticity":
        mu, lam, delta = coeff
        return assemble_elasticity(space, mu, lam, delta)
    raise InvalidParameter(f"unknown form kind {form!r}")


def assemble_load(space, f, rule=RULE_D2):
    """Right-hand side vector for ``\\int f v``.

    ``f`` is a per-cell-marker mapping, a scalar, or a callable evaluated at
    physical quadrature points (returning (M, nq) for scalar spaces).
    """
    mesh = space.mesh
    phi, _ = space.basis(rule)
    areas = mesh.signed_areas()
    if callable(f):
        fq = f(space.quad_points(rule))
    else:
        fq = _cell_coefficients(mesh, f)[:, None] * np.ones((1, len(rule.weights)))
    if space.components == 1:
        local = np.einsum("q,mq,qa,m->ma", rule.weights, fq, phi, areas)
        out = np.zeros(space.ndof)
        np.add.at(out, space._scalar_cell_dofs.ravel(), local.ravel())
        return out
    local = np.einsum("q,mqd,qa,m->mad", rule.weights, fq, phi, areas)
    out = np.zeros(space.ndof)
    dofs = space.cell_dofs.reshape(len(areas), -1, 2)
    np.add.at(out, dofs.ravel(), local.ravel())
    return out


def interpolate(space, fn):
    """Nodal interpolation of a callable onto a scalar or vector space."""
    coords = space.scalar_dof_coords()
    vals = np.asarray(fn(coords), dtype=np.float64)
    if space.components == 1:
        return FeField(space, vals)
    return FeField(space, vals.reshape(-1))


# -- Dirichlet handling -------------------------------------------------------


def constrain_dofs(op, rhs, dofs, values):
    """Symmetric elimination of prescribed dofs with lifting into the rhs."""
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    lifted = np.asarray(rhs, dtype=np.float64).copy()
    if len(dofs):
        g = np.zeros(op.shape[0])
        g[dofs] = values
        lifted -= op @ g
    keep = np.ones(op.shape[0])
    keep[dofs] = 0.0
    dk = sp.diags(keep)
    out = (dk @ op @ dk + sp.diags(1.0 - keep)).tocsr()
    lifted *= keep
    lifted[dofs] = values
    return out, lifted


class DirichletSet:
    """Resolved Dirichlet constraints for one space.

    Collects (marker set, value, components) declarations, resolves them to
    dof indices and prescribed values, and applies the symmetric elimination.
    Later declarations win on overlapping dofs.
    """

    def __init__(self, space):
        self.space = space
        self._map = {}

    def add(self, markers, value=0.0, components=(0, 1)):
        space = self.space
        scalar = space if space.components == 1 else None
        if space.family == "TH":
            base = space.velocity
        else:
            base = space
        sdofs = base.facet_scalar_dofs(markers)
        coords = base.scalar_dof_coords()[sdofs]
        if callable(value):
            vals = np.asarray(value(coords), dtype=np.float64)
        else:
            vals = np.full((len(sdofs), 2), float(value))
        if scalar is not None:
            v = vals if vals.ndim == 1 else vals[:, 0]
            for d, g in zip(sdofs, v):
                self._map[int(d)] = float(g)
            return self
        if vals.ndim == 1:
            vals = np.column_stack([vals, vals])
        for c in components:
            for d, g in zip(base.vector_dofs(sdofs, c), vals[:, c]):
                self._map[int(d)] = float(g)
        return self

    def add_dofs(self, dofs, values):
        values = np.broadcast_to(values, (len(dofs),))
        for d, g in zip(dofs, values):
            self._map[int(d)] = float(g)
        return self

    @property
    def dofs(self):
        return np.array(sorted(self._map), dtype=np.int64)

    @property
    def values(self):
        return np.array([self._map[d] for d in sorted(self._map)])

    def apply(self, op, rhs):
        return constrain_dofs(op, rhs, self.dofs, self.values)

    def fold_residual(self, res, x):
        """Residual with constraint rows replaced by x - g."""
        out = res.copy()
        d = self.dofs
        out[d] = x[d] - self.values
        return out

    def fold_jacobian(self, jac):
        """Jacobian with identity rows/columns at constrained dofs."""
        keep = np.ones(jac.shape[0])
        keep[self.dofs] = 0.0
        dk = sp.diags(keep)
        return (dk @ jac @ dk + sp.diags(1.0 - keep)).tocsr()

    def satisfy(self, x):
        out = np.asarray(x, dtype=np.float64).copy()
        out[self.dofs] = self.values
        return out


def apply_dirichlet(space, op, rhs, where, value=0.0, components=(0, 1)):
    """Eliminate the dofs on the facets tagged by ``where``.

    Returns the constrained operator and right-hand side; the solution of the
    constrained system carries the prescribed values exactly.
    """
    bc = DirichletSet(space).add(where, value, components)
    return bc.apply(op, rhs)


# -- solvers -------------------------------------------------------------------


def solve_sparse(op, rhs, sym=False):
    """Direct sparse solve with a residual check against ``LIN_TOL``."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if op.shape[0] != op.shape[1] or op.shape[0] != len(rhs):
        raise InvalidParameter("operator and right-hand side sizes disagree")
    try:
        lu = spla.splu(op.tocsc())
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("factorization produced non-finite entries")
    nb = np.linalg.norm(rhs)
    res = np.linalg.norm(op @ x - rhs)
    if res > LIN_TOL * max(nb, 1e-300):
        raise NoConvergence(f"direct solve residual {res:.3e} exceeds tolerance")
    return x


def newton_solve(
    residual,
    jacobian,
    init,
    abs_tol=1e-11,
    rel_tol=1e-12,
    max_iter=30,
    max_damping=20,
):
    """Damped Newton iteration on a residual/Jacobian pair.

    The initial guess must already satisfy any Dirichlet constraints folded
    into the callables.  Backtracks by halving whenever a full step increases
    the residual norm.
    """
    x = np.asarray(init, dtype=np.float64).copy()
    r = residual(x)
    norm0 = np.linalg.norm(r)
    target = max(abs_tol, rel_tol * norm0)
    if norm0 <= target:
        return x
    norm = norm0
    for _ in range(max_iter):
        step = solve_sparse(jacobian(x), -r)
        t = 1.0
        for _ in range(max_damping):
            x_new = x + t * step
            r_new = residual(x_new)
            norm_new = np.linalg.norm(r_new)
            if np.isfinite(norm_new) and norm_new < norm:
                break
            t *= 0.5
        else:
            raise NoConvergence("Newton damping exhausted")
        x, r, norm = x_new, r_new, norm_new
        if norm <= target:
            return x
    raise NoConvergence(
        f"Newton did not reach tolerance (residual {norm:.3e} after {max_iter} its)"
    )


# -- flow systems ---------------------------------------------------------------


@dataclass
class FlowBCs:
    """Boundary condition declaration for the channel flow problems.

    The inlet profile is a callable mapping (K, 2) coordinates to (K, 2)
    velocities.  Outlet facets must be axis aligned; their tangential
    velocity component is constrained to zero strongly while the normal
    component keeps the natural boundary term.
    """

    inlet_marker: int
    inlet_profile: object
    wall_markers: tuple
    outlet_markers: tuple

    def build(self, space):
        mesh = space.mesh
        bc = DirichletSet(space)
        # declaration order matters at shared corner dofs: no-slip wins there
        for marker in self.outlet_markers:
            facets = mesh.facets_with_marker(marker)
            if not len(facets):
                raise UnknownMarker(f"outlet marker {marker} not present")
            vecs = mesh.nodes[facets[:, 1]] - mesh.nodes[facets[:, 0]]
            horiz = np.abs(vecs[:, 1]) <= 1e-12 * np.abs(vecs[:, 0])
            vert = np.abs(vecs[:, 0]) <= 1e-12 * np.abs(vecs[:, 1])
            if not (np.all(horiz) or np.all(vert)):
                raise InvalidParameter(
                    f"outlet {marker} facets are not axis aligned"
                )
            tangential = 0 if np.all(horiz) else 1
            sdofs = space.velocity.facet_scalar_dofs([marker])
            bc.add_dofs(space.velocity.vector_dofs(sdofs, tangential), 0.0)
        bc.add([self.inlet_marker], self.inlet_profile)
        bc.add(list(self.wall_markers), 0.0)
        return bc


def _divergence_block(space, rule=RULE_D4):
    """Pressure-test x velocity-trial block for ``\\int q div u``."""
    mesh = space.mesh
    areas, vgrads = space.velocity.gradients(rule)
    pphi, _ = space.pressure.basis(rule)
    # div of velocity basis (scalar dof a, comp c) is grad_a[c]
    m = mesh.n_triangles
    div = np.empty((m, len(rule.weights), 12))
    div[:, :, 0::2] = vgrads[:, :, :, 0]
    div[:, :, 1::2] = vgrads[:, :, :, 1]
    local = np.einsum("q,qa,mqb,m->mab", rule.weights, pphi, div, areas, optimize=True)
    rows = np.repeat(
        space.n_velocity + space.pressure._scalar_cell_dofs, 12, axis=1
    ).ravel()
    cols = np.tile(space.velocity.cell_dofs, (1, 3)).ravel()
    return sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.ndof, space.ndof)
    ).tocsr()


def stokes_operator(space, rule=RULE_D4):
    """Symmetric saddle-point operator of the creeping-flow system.

    Velocity block is the vector Laplacian; the pressure coupling rows are
    scaled so the full matrix equals its transpose.
    """
    a_vel = assemble_stiffness(space.velocity, 1.0, rule)
    a_full = sp.bmat(
        [
            [a_vel, None],
            [None, sp.csr_matrix((space.pressure.ndof, space.pressure.ndof))],
        ]
    ).tocsr()
    b = _divergence_block(space, rule)
    return (a_full - b.T - b).tocsr()


def assemble_stokes(space, bc, rule=RULE_D4):
    """Constrained linear system for the creeping-flow model."""
    if space.family != "TH":
        raise InvalidParameter("flow systems need the mixed velocity/pressure space")
    op = stokes_operator(space, rule)
    rhs = np.zeros(space.ndof)
    dirichlet = bc.build(space)
    return dirichlet.apply(op, rhs)


def convection_residual(space, x, reynolds, rule=RULE_D4):
    """Vector of ``Re (u . grad u) . v`` at the current velocity iterate."""
    mesh = space.mesh
    areas = mesh.signed_areas()
    vel = x[: space.n_velocity]
    u_q = space.velocity.eval_vector(vel, rule)
    du_q = space.velocity.grad_vector(vel, rule)
    conv = np.einsum("mqi,mqci->mqc", u_q, du_q)
    phi, _ = space.velocity.basis(rule)
    local = reynolds * np.einsum("q,mqc,qa,m->mac", rule.weights, conv, phi, areas)
    out = np.zeros(space.ndof)
    dofs = space.velocity.cell_dofs.reshape(mesh.n_triangles, -1, 2)
    np.add.at(out, dofs.ravel(), local.ravel())
    return out


def convection_jacobian(space, x, reynolds, rule=RULE_D4):
    """Linearization ``Re [(du . grad) u + (u . grad) du] . v``.

    For test phi_a e_c and trial phi_b e_d the local entry is
    ``phi_a phi_b du_c/dx_d + delta_cd phi_a (u . grad phi_b)``.
    """
    mesh = space.mesh
    areas = mesh.signed_areas()
    vel = x[: space.n_velocity]
    u_q = space.velocity.eval_vector(vel, rule)
    du_q = space.velocity.grad_vector(vel, rule)
    phi, _ = space.velocity.basis(rule)
    _, grads = space.velocity.gradients(rule)

    m = mesh.n_triangles
    t1 = np.einsum(
        "q,qa,qb,mqcd,m->macbd", rule.weights, phi, phi, du_q, areas, optimize=True
    )
    ugb = np.einsum("mqi,mqbi->mqb", u_q, grads)
    t2 = np.einsum("q,qa,mqb,m->mab", rule.weights, phi, ugb, areas, optimize=True)
    local = t1
    local[:, :, 0, :, 0] += t2
    local[:, :, 1, :, 1] += t2
    local = reynolds * local.reshape(m, 12, 12)
    return _scatter(space.velocity.cell_dofs, local, space.ndof)


def assemble_ns_system(space, reynolds, x_current, bc, rule=RULE_D4):
    """Newton Jacobian and residual of the inertial flow system.

    Both carry the Dirichlet constraints folded in: constrained residual
    entries read ``x - g`` and the Jacobian has identity rows and columns
    there, so a Newton step preserves exactly satisfied constraints.
    """
    if reynolds < 0:
        raise InvalidParameter("Reynolds number must be nonnegative")
    op = stokes_operator(space, rule)
    dirichlet = bc.build(space)
    res = op @ x_current + convection_residual(space, x_current, reynolds, rule)
    res = dirichlet.fold_residual(res, x_current)
    jac = op + convection_jacobian(space, x_current, reynolds, rule)
    jac = dirichlet.fold_jacobian(jac)
    return jac, res


# -- boundary integrals ---------------------------------------------------------


def facet_geometry(mesh, marker):
    """Facets with a marker: (F, 2) node pairs, lengths, outward unit normals."""
    facets = mesh.facets_with_marker(marker)
    if not len(facets):
        raise UnknownMarker(f"facet marker {marker} not present in mesh")
    topo = mesh.topology
    p0 = mesh.nodes[facets[:, 0]]
    p1 = mesh.nodes[facets[:, 1]]
    vec = p1 - p0
    lengths = np.linalg.norm(vec, axis=1)
    normals = np.column_stack([vec[:, 1], -vec[:, 0]]) / lengths[:, None]
    mids = 0.5 * (p0 + p1)
    for i, (u, v) in enumerate(facets):
        owner = topo.edge_owner[topo.edge_index[(min(u, v), max(u, v))]]
        tri = topo.triangles[owner]
        w = [n for n in tri if n not in (u, v)][0]
        if np.dot(normals[i], mesh.nodes[w] - mids[i]) > 0:
            normals[i] = -normals[i]
    return facets, lengths, normals


def boundary_flux(velocity_field, marker):
    """``\\int u . n`` over the facets tagged ``marker`` (exact for P2 traces)."""
    space = velocity_field.space
    if space.family != "P2v":
        raise InvalidParameter("flux integration expects a P2 velocity field")
    mesh = space.mesh
    facets, lengths, normals = facet_geometry(mesh, marker)
    vals = velocity_field.values.reshape(-1, 2)
    total = 0.0
    for i, (u, v) in enumerate(facets):
        mid = mesh.n_nodes + mesh.topology.edge_index[(min(u, v), max(u, v))]
        un = (
            vals[u] @ normals[i]
            + 4.0 * vals[mid] @ normals[i]
            + vals[v] @ normals[i]
        )
        total += lengths[i] / 6.0 * un
    return float(total)
