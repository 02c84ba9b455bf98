"""Adjoint solves, volume-form shape derivatives and gradient deformations.

The shape derivative of each reduced cost is assembled as a linear functional
over piecewise-linear deformation fields, using exactly the quadrature rules
of the forward discretization.  This makes the assembled value the exact
derivative of the discrete cost under node motion, so central finite
differences converge at second order down to roundoff; the test suite leans
on that heavily.

The deformation inner product is the linear-elasticity form
``2 mu eps(V):eps(W) + lambda div V div W + delta V.W``; its Riesz
representative of a shape derivative is the gradient deformation driving
every descent loop in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .errors import InvalidParameter, MeshMismatch, SingularSystem
from .fem import FeField, FunctionSpace, RULE_D2, RULE_D4
from .mesh import Deformation
from .models import as_pinned

__all__ = [
    "ElasticityParams",
    "ShapeDerivative",
    "GradientDeformation",
    "ElasticityForm",
    "a_inner",
    "gradient_deformation",
    "solve_adjoint_transmission",
    "shape_derivative_transmission",
    "solve_adjoint_flow",
    "shape_derivative_flow",
    "flow_cost_rhs",
]


@dataclass(frozen=True)
class ElasticityParams:
    """Moduli of the deformation inner product."""

    mu: float = 1.0
    lam: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if self.mu <= 0:
            raise InvalidParameter("shear modulus must be positive")
        if self.lam < 0 or self.delta < 0:
            raise InvalidParameter("lambda and delta must be nonnegative")


@dataclass
class ShapeDerivative:
    """Assembled linear functional over P1 deformation fields.

    Rows at dofs on the fixed boundaries are exactly zero, so evaluating on
    any deformation supported there returns zero.
    """

    mesh: object
    values: np.ndarray = field(repr=False)
    fixed_markers: tuple = ()

    def __call__(self, d):
        if not self.mesh.same_connectivity(d.mesh):
            raise MeshMismatch("deformation lives on a different mesh")
        return float(self.values @ d.values.ravel())


@dataclass
class GradientDeformation:
    """Inner-product representative of a shape derivative and its norm."""

    deformation: Deformation
    norm_squared: float

    @property
    def norm(self):
        return float(np.sqrt(max(self.norm_squared, 0.0)))


class ElasticityForm:
    """Deformation inner product and its constrained solve on one mesh."""

    def __init__(self, mesh, ep, fixed_markers):
        self.mesh = mesh
        self.ep = ep
        self.fixed_markers = tuple(fixed_markers)
        self.space = FunctionSpace(mesh, "P1v")
        self.matrix = fem.assemble_elasticity(self.space, ep.mu, ep.lam, ep.delta)
        fixed_nodes = mesh.nodes_on_markers(self.fixed_markers)
        self.fixed_dofs = np.sort(
            np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1])
        )
        self._lu = None

    def inner(self, d1, d2):
        if not (
            self.mesh.same_connectivity(d1.mesh)
            and self.mesh.same_connectivity(d2.mesh)
        ):
            raise MeshMismatch("deformations do not match the form's mesh")
        return float(d1.values.ravel() @ (self.matrix @ d2.values.ravel()))

    def norm(self, d):
        return float(np.sqrt(max(self.inner(d, d), 0.0)))

    def solve(self, rhs_values):
        """Riesz representative of a functional vanishing at fixed dofs."""
        if self._lu is None:
            op, _ = fem.constrain_dofs(
                self.matrix, np.zeros(self.space.ndof), self.fixed_dofs,
                np.zeros(len(self.fixed_dofs)),
            )
            if len(self.fixed_dofs) == 0 and self.ep.delta == 0.0:
                raise SingularSystem(
                    "elasticity form has a rigid-motion kernel without "
                    "fixed boundaries or a mass term"
                )
            try:
                self._lu = spla.splu(op.tocsc())
            except RuntimeError as exc:
                raise SingularSystem(str(exc)) from exc
        rhs = np.asarray(rhs_values, dtype=np.float64).copy()
        rhs[self.fixed_dofs] = 0.0
        sol = self._lu.solve(rhs)
        sol[self.fixed_dofs] = 0.0
        return sol


def a_inner(mesh, ep, d1, d2):
    """Elasticity inner product of two deformations hosted on ``mesh``."""
    return ElasticityForm(mesh, ep, ()).inner(d1, d2)


def gradient_deformation(mesh, ep, dj, form=None):
    """Solve ``a(G, V) = dJ[V]`` for all V vanishing on the fixed boundaries."""
    if form is None:
        form = ElasticityForm(mesh, ep, dj.fixed_markers)
    g = form.solve(dj.values)
    defo = Deformation(mesh, g.reshape(-1, 2))
    return GradientDeformation(defo, float(dj.values @ g))


# -- transmission -----------------------------------------------------------------


def _transmission_bc(mesh, space):
    return fem.DirichletSet(space).add(mesh.boundary_markers(), 0.0)


def solve_adjoint_transmission(mesh, params, u, u_des):
    """Adjoint state of the tracking cost for the transmission model.

    Solves ``a(p, v) = -2 (u - u_des, v)`` with the state operator; a
    positive reaction coefficient contributes its linearization.
    """
    space = u.space
    stiff = fem.assemble_stiffness(space, params.alpha)
    if params.beta > 0.0:
        uq4 = space.eval_scalar(u.values, RULE_D4)
        stiff = stiff + fem.assemble_mass(
            space, rule=RULE_D4, qp_weight=3.0 * params.beta * uq4**2
        )
    qp = space.quad_points(RULE_D2)
    tq = as_pinned(u_des).eval(qp)
    uq = space.eval_scalar(u.values, RULE_D2)
    phi, _ = space.basis(RULE_D2)
    areas = mesh.signed_areas()
    local = -2.0 * np.einsum("q,mq,qa,m->ma", RULE_D2.weights, uq - tq, phi, areas)
    rhs = np.zeros(space.ndof)
    np.add.at(rhs, space._scalar_cell_dofs.ravel(), local.ravel())
    op, rhs = _transmission_bc(mesh, space).apply(stiff, rhs)
    return FeField(space, fem.solve_sparse(op, rhs, sym=True))


def shape_derivative_transmission(
    mesh, params, u, p, u_des, grad_u_des=None, fixed_markers=None
):
    """Volume form of the tracking-cost shape derivative.

    Assembles, against every P1 deformation basis field V,

        (u - u_des)^2 div V - 2 (u - u_des) (grad u_des . V)
        + alpha ((div V I - (DV + DV^T)) grad u) . grad p
        - f div V p
        [+ beta u^3 p div V when the reaction term is active]

    with the target's value and gradient taken from its pinned geometry at
    the quadrature points.  Rows at fixed-boundary dofs are exactly zero.
    """
    space = u.space
    rule = RULE_D2
    qp = space.quad_points(rule)
    pinned = as_pinned(u_des)
    if grad_u_des is None:
        tq, gtq = pinned.eval_with_grad(qp)
    else:
        tq = pinned.eval(qp)
        gtq = grad_u_des
    areas, grads = space.gradients(rule)
    g = grads[:, 0]  # P1 gradients, constant per cell: (M, 3, 2)
    phi, _ = space.basis(rule)

    uq = space.eval_scalar(u.values, rule)
    pq = space.eval_scalar(p.values, rule)
    gu = space.grad_scalar(u.values, rule)[:, 0]  # constant per cell
    gp = space.grad_scalar(p.values, rule)[:, 0]
    alpha = fem._cell_coefficients(mesh, params.alpha)
    f = fem._cell_coefficients(mesh, params.f)
    w = rule.weights

    diff = uq - tq
    # div V for basis (a, c) is g[m, a, c]; the terms split into a part
    # multiplying div V and a part contracting V or DV directly
    div_factor = np.einsum("q,mq->m", w, diff**2) - f * np.einsum("q,mq->m", w, pq)
    if params.beta > 0.0:
        uq4 = space.eval_scalar(u.values, RULE_D4)
        pq4 = space.eval_scalar(p.values, RULE_D4)
        div_factor = div_factor + params.beta * np.einsum(
            "q,mq,mq->m", RULE_D4.weights, uq4**3, pq4
        )
    div_factor = div_factor + alpha * (gu * gp).sum(axis=1)
    local = np.einsum("m,mac,m->mac", div_factor, g, areas)

    # -2 (u - u_des) grad(u_des) . V
    vq = -2.0 * np.einsum("q,mq,mqc,qa->mac", w, diff, gtq, phi)
    local += vq * areas[:, None, None]

    # -alpha (DV + DV^T) grad u . grad p
    t_a = np.einsum("ma,mc->mac", (g * gu[:, None, :]).sum(axis=2), gp)
    t_b = np.einsum("ma,mc->mac", (g * gp[:, None, :]).sum(axis=2), gu)
    local -= (alpha * areas)[:, None, None] * (t_a + t_b)

    values = np.zeros(space.ndof * 2)
    dofs = 2 * space._scalar_cell_dofs[:, :, None] + np.arange(2)[None, None, :]
    np.add.at(values, dofs.ravel(), local.ravel())

    if fixed_markers is None:
        fixed_markers = tuple(mesh.boundary_markers())
    fixed_nodes = mesh.nodes_on_markers(fixed_markers)
    values[2 * fixed_nodes] = 0.0
    values[2 * fixed_nodes + 1] = 0.0
    return ShapeDerivative(mesh, values, tuple(fixed_markers))


# -- flow ---------------------------------------------------------------------------


def flow_cost_rhs(mesh, space, params, rates, q_des):
    """Cost-side adjoint source: ``(rate_i - target_i) n`` on each outlet."""
    rates = np.asarray(rates, dtype=np.float64)
    target = np.broadcast_to(np.asarray(q_des, dtype=np.float64), rates.shape)
    rhs = np.zeros(space.ndof)
    for k, marker in enumerate(params.outlet_markers):
        facets, lengths, normals = fem.facet_geometry(mesh, marker)
        coef = rates[k] - target[k]
        for (a, b), length, n in zip(facets, lengths, normals):
            mid = mesh.n_nodes + mesh.topology.edge_index[(min(a, b), max(a, b))]
            for sdof, wgt in (
                (a, length / 6.0),
                (b, length / 6.0),
                (mid, 4 * length / 6.0),
            ):
                rhs[2 * sdof] += coef * wgt * n[0]
                rhs[2 * sdof + 1] += coef * wgt * n[1]
    return rhs


def solve_adjoint_flow(mesh, params, velocity, pressure, rates, q_des):
    """Adjoint velocity/pressure pair of the rate-tracking cost.

    The right-hand side carries ``(rate_i - target_i) n`` on each outlet; the
    system is the transpose of the (linearized) forward operator with the
    same strong constraints, homogeneous.
    """
    space = FunctionSpace(mesh, "TH")
    bc = params.bcs()
    dirichlet = bc.build(space)
    x = np.concatenate([velocity.values, pressure.values])
    jac, _ = fem.assemble_ns_system(space, params.reynolds, x, bc)

    rhs = flow_cost_rhs(mesh, space, params, rates, q_des)
    rhs[dirichlet.dofs] = 0.0
    z = fem.solve_sparse(jac.T.tocsr(), rhs)
    return (
        FeField(space.velocity, z[: space.n_velocity]),
        FeField(space.pressure, z[space.n_velocity :]),
    )


def shape_derivative_flow(mesh, params, state, adjoint, fixed_markers):
    """Volume form of the rate-tracking shape derivative for the flow models.

    Material derivative of the discrete flow residual contracted with the
    adjoint pair; assembled with the forward quadrature rule so the value is
    the exact derivative of the discrete cost.  The outlets and every fixed
    marker get exactly zero rows.
    """
    velocity, pressure = state
    z_vel, z_pre = adjoint
    space = FunctionSpace(mesh, "TH")
    rule = RULE_D4
    w = rule.weights
    areas = mesh.signed_areas()

    u_q = space.velocity.eval_vector(velocity.values, rule)
    du_q = space.velocity.grad_vector(velocity.values, rule)
    z_q = space.velocity.eval_vector(z_vel.values, rule)
    dz_q = space.velocity.grad_vector(z_vel.values, rule)
    p_q = space.pressure.eval_scalar(pressure.values, rule)
    pi_q = space.pressure.eval_scalar(z_pre.values, rule)

    p1 = FunctionSpace(mesh, "P1")
    _, g1 = p1.gradients(RULE_D2)
    gfull = g1[:, 0]  # P1 gradients, constant per cell: (M, 3, 2)

    div_u = np.einsum("mqkk->mq", du_q)
    div_z = np.einsum("mqkk->mq", dz_q)

    # scalar factor of div V
    s_div = np.einsum("q,mqki,mqki->m", w, du_q, dz_q)
    s_div -= np.einsum("q,mq,mq->m", w, p_q, div_z)
    s_div -= np.einsum("q,mq,mq->m", w, pi_q, div_u)
    if params.reynolds > 0.0:
        conv = np.einsum("mqi,mqki->mqk", u_q, du_q)
        s_div += params.reynolds * np.einsum("q,mqk,mqk->m", w, conv, z_q)

    # vector factor: entry [m, i, c] multiplies g_a[i] into component c
    # viscous part: -(g_a . grad u_k) dz[k, c] - du[k, c] (g_a . grad z_k)
    a_vec = -np.einsum("q,mqki,mqkc->mic", w, du_q, dz_q)
    a_vec -= np.einsum("q,mqkc,mqki->mic", w, du_q, dz_q)
    # pressure couplings: + p dz[i, c] and + pi du[i, c]
    a_vec += np.einsum("q,mq,mqic->mic", w, p_q, dz_q)
    a_vec += np.einsum("q,mq,mqic->mic", w, pi_q, du_q)
    if params.reynolds > 0.0:
        # -(g_a . u) du[k, c] z_k
        a_vec -= params.reynolds * np.einsum(
            "q,mqi,mqkc,mqk->mic", w, u_q, du_q, z_q
        )

    local = np.einsum("m,mac,m->mac", s_div, gfull, areas)
    local += np.einsum("mic,mai,m->mac", a_vec, gfull, areas)

    values = np.zeros(2 * mesh.n_nodes)
    dofs = 2 * mesh.triangles[:, :, None] + np.arange(2)[None, None, :]
    np.add.at(values, dofs.ravel(), local.ravel())
    values = -values

    fixed_nodes = mesh.nodes_on_markers(fixed_markers)
    values[2 * fixed_nodes] = 0.0
    values[2 * fixed_nodes + 1] = 0.0
    return ShapeDerivative(mesh, values, tuple(fixed_markers))
