"""The two fine/coarse model pairs, their cost functionals and responses.

Transmission pair: a scalar diffusion problem with a jumping coefficient
across the inclusion interface; the fine model adds a cubic reaction term,
the coarse model is the linear problem.  Flow pair: stationary channel flow
through a pipe network; the fine model keeps the inertial term at a given
Reynolds number, the coarse model is creeping flow.

Target fields produced on one geometry are treated as functions of absolute
position: a ``PinnedField`` snapshots the geometry it was solved on and is
evaluated by barycentric point location wherever later meshes place their
quadrature points.  Evaluating costs this way (rather than re-interpolating
node by node) keeps every discrete cost functional an exactly differentiable
function of the node positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import fem
from .errors import InvalidParameter, KindMismatch, SpaceMismatch
from .fem import FeField, FunctionSpace, RULE_D2, RULE_D4
from .mesh import generate_ellipse_in_square

__all__ = [
    "TransmissionParams",
    "FlowParams",
    "Ellipse",
    "ModelResponse",
    "PinnedField",
    "solve_transmission",
    "tracking_cost",
    "tracking_cost_pinned",
    "solve_flow",
    "flow_rates",
    "flow_cost",
    "q_desired",
    "make_desired_state",
    "interpolate_pinned",
]

INCLUSION = 1
EXTERIOR = 2


@dataclass(frozen=True)
class TransmissionParams:
    """Piecewise-constant data of the transmission models.

    ``beta`` scales the cubic reaction term; zero selects the linear
    coarse model.
    """

    alpha_in: float = 10.0
    alpha_out: float = 1.0
    f_in: float = 10.0
    f_out: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha_in <= 0 or self.alpha_out <= 0:
            raise InvalidParameter("conductivities must be positive")
        if self.beta < 0:
            raise InvalidParameter("reaction coefficient must be nonnegative")

    @property
    def alpha(self):
        return {INCLUSION: self.alpha_in, EXTERIOR: self.alpha_out}

    @property
    def f(self):
        return {INCLUSION: self.f_in, EXTERIOR: self.f_out}

    def linearized(self):
        return TransmissionParams(
            self.alpha_in, self.alpha_out, self.f_in, self.f_out, 0.0
        )


@dataclass(frozen=True)
class FlowParams:
    """Flow model data; ``reynolds = 0`` selects the creeping-flow model."""

    reynolds: float = 0.0
    inlet_scale: float = 1.0
    inlet_marker: int = 1
    wall_markers: tuple = (2, 6)
    outlet_markers: tuple = (3, 4, 5)

    def __post_init__(self):
        if self.reynolds < 0:
            raise InvalidParameter("Reynolds number must be nonnegative")

    def profile(self, points):
        y = points[:, 1]
        u = -6.0 * self.inlet_scale * y * (y + 1.0)
        return np.column_stack([u, np.zeros_like(u)])

    def bcs(self):
        return fem.FlowBCs(
            inlet_marker=self.inlet_marker,
            inlet_profile=self.profile,
            wall_markers=tuple(self.wall_markers),
            outlet_markers=tuple(self.outlet_markers),
        )

    def linearized(self):
        return FlowParams(
            0.0,
            self.inlet_scale,
            self.inlet_marker,
            tuple(self.wall_markers),
            tuple(self.outlet_markers),
        )


@dataclass(frozen=True)
class Ellipse:
    """Inclusion geometry: center, semi axes, counterclockwise rotation."""

    center: tuple = (0.5, 0.5)
    semi_major: float = 0.3
    semi_minor: float = 0.15
    angle: float = math.pi / 6


@dataclass
class ModelResponse:
    """Either a nodal scalar field or a small vector of outlet flow rates."""

    kind: str
    field: FeField | None = None
    rates: np.ndarray | None = None

    @staticmethod
    def of_field(f):
        return ModelResponse("field", field=f)

    @staticmethod
    def of_rates(r):
        r = np.asarray(r, dtype=np.float64)
        if not np.all(np.isfinite(r)):
            raise InvalidParameter("rates contain non-finite entries")
        return ModelResponse("rates", rates=r)


class PinnedField:
    """Piecewise-linear scalar field pinned to a geometry snapshot.

    Evaluation at arbitrary points locates the containing source cell by a
    centroid tree plus barycentric test; points outside the snapshot (up to
    1e-12) snap to the best candidate cell.
    """

    def __init__(self, nodes, triangles, values):
        self.nodes = np.array(nodes, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        p = self.nodes[self.triangles]
        self._p0 = p[:, 0]
        t = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] * t[:, 1, 0]
        inv = np.empty_like(t)
        inv[:, 0, 0] = t[:, 1, 1] / det
        inv[:, 0, 1] = -t[:, 0, 1] / det
        inv[:, 1, 0] = -t[:, 1, 0] / det
        inv[:, 1, 1] = t[:, 0, 0] / det
        self._inv = inv
        v = self.values[self.triangles]
        dv = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=1)
        # per-cell gradient: T^{-T} (v1-v0, v2-v0)
        self._grad = np.einsum("mji,mj->mi", inv, dv)
        self._tree = cKDTree(p.mean(axis=1))

    @classmethod
    def from_field(cls, f):
        if f.space.family != "P1":
            raise SpaceMismatch("pinned fields require P1 scalar data")
        mesh = f.space.mesh
        return cls(mesh.nodes, mesh.triangles, f.values)

    def locate(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cells = np.full(len(pts), -1, dtype=np.int64)
        best = np.full(len(pts), -np.inf)
        best_cell = np.zeros(len(pts), dtype=np.int64)
        pending = np.arange(len(pts))
        for k in (8, 64):
            if not len(pending):
                break
            kk = min(k, len(self._tree.data))
            _, cand = self._tree.query(pts[pending], k=kk)
            cand = cand.reshape(len(pending), -1)
            local = pts[pending][:, None, :] - self._p0[cand]
            lam12 = np.einsum("pkij,pkj->pki", self._inv[cand], local)
            lam0 = 1.0 - lam12.sum(axis=2)
            lam_min = np.minimum(lam0, lam12.min(axis=2))
            hit = lam_min >= -1e-12
            first = hit.argmax(axis=1)
            ok = hit.any(axis=1)
            cells[pending[ok]] = cand[np.flatnonzero(ok), first[ok]]
            arg = lam_min.argmax(axis=1)
            improved = lam_min[np.arange(len(pending)), arg] > best[pending]
            best[pending[improved]] = lam_min[np.flatnonzero(improved), arg[improved]]
            best_cell[pending[improved]] = cand[
                np.flatnonzero(improved), arg[improved]
            ]
            pending = pending[~ok]
        # points outside the snapshot snap to the nearest candidate cell
        cells[cells < 0] = best_cell[cells < 0]
        return cells

    def eval_with_grad(self, points):
        """Values and source-cell gradients at the given points."""
        shape = np.asarray(points).shape[:-1]
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cells = self.locate(pts)
        local = pts - self._p0[cells]
        lam12 = np.einsum("pij,pj->pi", self._inv[cells], local)
        lam0 = 1.0 - lam12.sum(axis=1)
        tri = self.triangles[cells]
        vals = (
            lam0 * self.values[tri[:, 0]]
            + lam12[:, 0] * self.values[tri[:, 1]]
            + lam12[:, 1] * self.values[tri[:, 2]]
        )
        return vals.reshape(shape), self._grad[cells].reshape(shape + (2,))

    def eval(self, points):
        return self.eval_with_grad(points)[0]


def as_pinned(target):
    if isinstance(target, PinnedField):
        return target
    if isinstance(target, FeField):
        return PinnedField.from_field(target)
    raise SpaceMismatch("target must be an FeField or PinnedField")


# -- transmission models --------------------------------------------------------


@dataclass
class TransmissionState:
    """Solved transmission state with the pieces the adjoint can reuse."""

    space: FunctionSpace
    u: FeField
    bc: fem.DirichletSet
    operator: object = field(repr=False, default=None)
    lu: object = field(repr=False, default=None)

    def adjoint_solve(self, rhs):
        """Solve the (self-adjoint) linearized operator with homogeneous BC."""
        b = rhs.copy()
        b[self.bc.dofs] = 0.0
        if self.lu is not None:
            return self.lu.solve(b)
        op, b = fem.constrain_dofs(
            self.operator, b, self.bc.dofs, np.zeros(len(self.bc.dofs))
        )
        return fem.solve_sparse(op, b, sym=True)


def transmission_state(mesh, params):
    """Solve the (semi)linear transmission model with zero outer trace."""
    space = FunctionSpace(mesh, "P1")
    stiff = fem.assemble_stiffness(space, params.alpha)
    load = fem.assemble_load(space, params.f)
    bc = fem.DirichletSet(space).add(mesh.boundary_markers(), 0.0)
    if params.beta == 0.0:
        op, rhs = bc.apply(stiff, load)
        try:
            lu = spla.splu(op.tocsc())
        except RuntimeError as exc:
            raise fem.SingularSystem(str(exc)) from exc
        u = lu.solve(rhs)
        resnorm = np.linalg.norm(op @ u - rhs)
        if resnorm > fem.LIN_TOL * max(np.linalg.norm(rhs), 1e-300):
            raise fem.NoConvergence(f"linear residual {resnorm:.3e}")
        return TransmissionState(space, FeField(space, u), bc, lu=lu)

    beta = params.beta
    phi, _ = space.basis(RULE_D4)
    areas = mesh.signed_areas()
    dofs = space._scalar_cell_dofs

    def reaction(u):
        uq = space.eval_scalar(u, RULE_D4)
        local = beta * np.einsum("q,mq,qa,m->ma", RULE_D4.weights, uq**3, phi, areas)
        out = np.zeros(space.ndof)
        np.add.at(out, dofs.ravel(), local.ravel())
        return out

    def residual(u):
        return bc.fold_residual(stiff @ u + reaction(u) - load, u)

    def jacobian(u):
        uq = space.eval_scalar(u, RULE_D4)
        mw = fem.assemble_mass(space, rule=RULE_D4, qp_weight=3.0 * beta * uq**2)
        return bc.fold_jacobian(stiff + mw)

    init = bc.satisfy(np.zeros(space.ndof))
    u = fem.newton_solve(residual, jacobian, init)
    uq = space.eval_scalar(u, RULE_D4)
    op_lin = stiff + fem.assemble_mass(
        space, rule=RULE_D4, qp_weight=3.0 * beta * uq**2
    )
    return TransmissionState(space, FeField(space, u), bc, operator=op_lin)


def solve_transmission(mesh, params):
    """Nodal state response of the transmission model."""
    return ModelResponse.of_field(transmission_state(mesh, params).u)


def tracking_cost(u, u_des):
    """Exact ``\\int (u - u_des)^2`` for two fields on the same space."""
    if not u.same_space(u_des):
        raise SpaceMismatch("tracking cost requires a shared space")
    space = u.space
    diff = u.values - u_des.values
    dq = space.eval_scalar(diff, RULE_D2)
    areas = space.mesh.signed_areas()
    return float(np.einsum("q,mq,m->", RULE_D2.weights, dq**2, areas))


def tracking_cost_pinned(u, target):
    """``\\int (u - target)^2`` with the target evaluated at quadrature points."""
    space = u.space
    qp = space.quad_points(RULE_D2)
    tq = as_pinned(target).eval(qp)
    uq = space.eval_scalar(u.values, RULE_D2)
    areas = space.mesh.signed_areas()
    return float(np.einsum("q,mq,m->", RULE_D2.weights, (uq - tq) ** 2, areas))


# -- flow models ------------------------------------------------------------------


@dataclass
class FlowState:
    """Solved flow state with the factorization the Stokes adjoint reuses."""

    space: FunctionSpace
    dirichlet: fem.DirichletSet
    x: np.ndarray = field(repr=False)
    velocity: FeField = None
    pressure: FeField = None
    lu: object = field(repr=False, default=None)
    newton_iters: int = 0

    def adjoint_solve(self, rhs):
        """Transpose solve of the constrained (linearized) flow operator."""
        b = rhs.copy()
        b[self.dirichlet.dofs] = 0.0
        return self.lu.solve(b, trans="T")


def flow_state(mesh, params):
    """Solve the flow model, keeping the last factorization for reuse.

    Creeping flow is one factorized solve.  The inertial model starts Newton
    from the creeping-flow solution; if that stalls, the Reynolds number is
    stepped up in increments of 25.  The kept factorization is only
    adjoint-ready for the creeping-flow case.
    """
    space = FunctionSpace(mesh, "TH")
    bc = params.bcs()
    dirichlet = bc.build(space)
    op = fem.stokes_operator(space)
    a, b = dirichlet.apply(op, np.zeros(space.ndof))
    try:
        lu = spla.splu(a.tocsc())
    except RuntimeError as exc:
        raise fem.SingularSystem(str(exc)) from exc
    x = lu.solve(b)
    resnorm = np.linalg.norm(a @ x - b)
    if resnorm > fem.LIN_TOL * max(np.linalg.norm(b), 1e-300):
        raise fem.NoConvergence(f"creeping-flow residual {resnorm:.3e}")
    iters = 0
    if params.reynolds > 0.0:
        try:
            x, iters = _newton_flow(space, op, params.reynolds, x, dirichlet)
        except fem.NoConvergence:
            re, iters = 0.0, 0
            while re < params.reynolds:
                re = min(re + 25.0, params.reynolds)
                x, it = _newton_flow(space, op, re, x, dirichlet)
                iters += it
        lu = None
    return FlowState(
        space,
        dirichlet,
        x,
        velocity=FeField(space.velocity, x[: space.n_velocity]),
        pressure=FeField(space.pressure, x[space.n_velocity :]),
        lu=lu,
        newton_iters=iters,
    )


def solve_flow(mesh, params):
    """Velocity and pressure of the flow model on the given geometry."""
    st = flow_state(mesh, params)
    return st.velocity, st.pressure


def _newton_flow(space, stokes_op, reynolds, init, dirichlet):
    iters = 0

    def residual(x):
        r = stokes_op @ x + fem.convection_residual(space, x, reynolds)
        return dirichlet.fold_residual(r, x)

    def jacobian(x):
        nonlocal iters
        iters += 1
        return dirichlet.fold_jacobian(
            stokes_op + fem.convection_jacobian(space, x, reynolds)
        )

    x = fem.newton_solve(residual, jacobian, dirichlet.satisfy(init))
    return x, iters


def flow_rates(velocity, outlets):
    """Outlet flow rates ``\\int u . n`` per marker, exact for P2 traces."""
    return np.array([fem.boundary_flux(velocity, m) for m in outlets])


def flow_cost(rates, q_des):
    """Half the squared deviation of the rates from their target(s)."""
    rates = np.asarray(rates, dtype=np.float64)
    target = np.broadcast_to(np.asarray(q_des, dtype=np.float64), rates.shape)
    return 0.5 * float(np.sum((rates - target) ** 2))


def q_desired(mesh, params):
    """Per-pipe target rate from the inlet flux and incompressibility."""
    facets, lengths, normals = fem.facet_geometry(mesh, params.inlet_marker)
    total = 0.0
    for (u, v), length, n in zip(facets, lengths, normals):
        pts = np.array(
            [mesh.nodes[u], 0.5 * (mesh.nodes[u] + mesh.nodes[v]), mesh.nodes[v]]
        )
        un = params.profile(pts) @ n
        total += length / 6.0 * (un[0] + 4.0 * un[1] + un[2])
    q_in = -total
    return q_in / len(params.outlet_markers)


# -- desired state -----------------------------------------------------------------


def interpolate_pinned(pinned, mesh):
    """Nodal interpolation of a pinned field onto a mesh (P1)."""
    space = FunctionSpace(mesh, "P1")
    return FeField(space, pinned.eval(mesh.nodes))


def make_desired_state(reference_mesh, params, ellipse, resolution):
    """Fine-model state for an elliptic inclusion, carried to the reference mesh.

    Builds a conforming ellipse-interface mesh, solves the fine transmission
    model there, and transfers the state by barycentric P1 interpolation.
    """
    source = generate_ellipse_in_square(
        ellipse.center,
        (ellipse.semi_major, ellipse.semi_minor),
        ellipse.angle,
        resolution,
    )
    response = solve_transmission(source, params)
    pinned = PinnedField.from_field(response.field)
    return interpolate_pinned(pinned, reference_mesh)


def misalignment_field(a, b):
    """Field misalignment ``\\int (a - b)^2`` on a shared space."""
    return tracking_cost(a, b)


def misalignment_rates(a, b):
    """Rate misalignment ``0.5 || a - b ||^2``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise KindMismatch("rate vectors have different lengths")
    return 0.5 * float(np.sum((a - b) ** 2))
