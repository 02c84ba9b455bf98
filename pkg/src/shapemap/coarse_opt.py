"""Limited-memory BFGS shape optimizer for the coarse model problems.

The optimization variable is the mesh itself: each iterate deforms the
current mesh along a descent deformation found by a two-loop recursion in
the elasticity inner product, with the stored pairs re-hosted on the current
mesh (transport keeps nodal values, so re-hosting is free).  A backtracking
line search guards sufficient decrease, element validity and mesh quality.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import fem, mesh as meshmod, models, shape_grad
from .errors import DegenerateMesh, LineSearchFailure
from .fem import FeField, RULE_D2
from .mesh import Deformation, apply_deformation, inverse_retraction, quality
from .models import PinnedField, as_pinned
from .shape_grad import (
    ElasticityForm,
    ElasticityParams,
    GradientDeformation,
    gradient_deformation,
)

__all__ = [
    "LbfgsHistory",
    "OptimizeResult",
    "TransmissionTracking",
    "FlowTracking",
    "two_loop_direction",
    "armijo_search",
    "optimize",
    "QUALITY_MIN",
]

# steps producing a minimum interior angle below half a degree are rejected
QUALITY_MIN = math.radians(0.5)

ARMIJO_C1 = 1e-4
MAX_HALVINGS = 30


@dataclass
class LbfgsHistory:
    """Bounded curvature-pair storage with host-mesh snapshots.

    Pairs whose curvature is not strictly positive at storage time are
    skipped.  The recursion re-hosts stored pairs on the current mesh and
    re-evaluates all inner products there.
    """

    memory: int = 5
    pairs: deque = field(default_factory=deque)

    def push(self, s, y, rho):
        if not (np.isfinite(rho) and rho > 0.0):
            return False
        self.pairs.append((s, y, rho))
        while len(self.pairs) > self.memory:
            self.pairs.popleft()
        return True

    def clear(self):
        self.pairs.clear()

    def __len__(self):
        return len(self.pairs)


def two_loop_direction(history, grad, current, form=None, ep=None):
    """Quasi-Newton descent deformation from the two-loop recursion.

    All inner products are taken in the elasticity form assembled on the
    current mesh; stored pairs whose curvature degenerates there are
    skipped.  With no usable pairs the direction is the negative gradient
    deformation exactly.
    """
    if form is None:
        form = ElasticityForm(current, ep or ElasticityParams(), ())
    g = grad.deformation.values.copy()
    usable = []
    for s, y, _ in history.pairs:
        s_c = meshmod.transport(s, current)
        y_c = meshmod.transport(y, current)
        curv = form.inner(s_c, y_c)
        ns = form.norm(s_c)
        ny = form.norm(y_c)
        if curv > 1e-14 * max(ns * ny, 1e-300):
            usable.append((s_c, y_c, curv))
    if not usable:
        return Deformation(current, -grad.deformation.values)

    def inner(a, b):
        return float(a.ravel() @ (form.matrix @ b.ravel()))

    q = g.ravel().copy()
    alphas = []
    for s, y, curv in reversed(usable):
        alpha = inner(s.values, q.reshape(-1, 2)) / curv
        q -= alpha * y.values.ravel()
        alphas.append(alpha)
    s_l, y_l, curv_l = usable[-1]
    gamma = curv_l / max(inner(y_l.values, y_l.values.reshape(-1, 2)), 1e-300)
    r = gamma * q
    for (s, y, curv), alpha in zip(usable, reversed(alphas)):
        beta = inner(y.values, r.reshape(-1, 2)) / curv
        r += (alpha - beta) * s.values.ravel()
    return Deformation(current, -r.reshape(-1, 2))


def armijo_search(mesh, direction, cost_fn, dj_value, init_step, quality_min=QUALITY_MIN):
    """Backtracking line search with sufficient decrease and validity guards.

    ``cost_fn(mesh)`` returns ``(cost, state)``.  Candidate meshes with an
    inverted element or a minimum angle below ``quality_min`` count as
    failed decrease.  Returns the accepted step, mesh, cost and state.
    """
    if dj_value >= 0.0:
        raise LineSearchFailure("search direction is not a descent direction")
    j0, _ = cost_fn(mesh)
    step = float(init_step)
    for _ in range(MAX_HALVINGS):
        try:
            candidate = apply_deformation(mesh, step * direction)
        except DegenerateMesh:
            step *= 0.5
            continue
        if quality(candidate) < quality_min:
            step *= 0.5
            continue
        cost, state = cost_fn(candidate)
        if cost <= j0 + ARMIJO_C1 * step * dj_value:
            return step, candidate, cost, state
        step *= 0.5
    raise LineSearchFailure(
        f"no sufficient decrease within {MAX_HALVINGS} halvings"
    )


@dataclass
class OptimizeResult:
    """Outcome of a coarse shape optimization run."""

    mesh: object
    total_deformation: Deformation
    iterations: int
    cost_history: list
    grad_norm_history: list
    reason: str
    final_state: object = None


def optimize(start, problem, rtol=1e-2, max_iter=100):
    """Descend the problem's reduced cost from ``start`` until the gradient
    deformation norm drops below ``rtol`` times its initial value.

    Accepted iterates are monotonically non-increasing in cost and keep mesh
    quality above the rejection threshold.
    """
    current = start
    state = problem.evaluate(current)
    costs = [state.cost]
    history = LbfgsHistory(memory=problem.memory)
    grad_norms = []
    prev_grad = None
    step = 1.0
    reason = "max_iterations"
    iterations = 0

    for k in range(max_iter):
        dj = problem.derivative(current, state)
        form = ElasticityForm(current, problem.elasticity, problem.fixed_markers)
        grad = gradient_deformation(current, problem.elasticity, dj, form)
        grad_norms.append(grad.norm)
        if grad.norm <= rtol * grad_norms[0]:
            reason = "converged"
            break

        direction = two_loop_direction(history, grad, current, form)
        dj_dir = dj(direction)
        if dj_dir >= 0.0:
            history.clear()
            direction = Deformation(current, -grad.deformation.values)
            dj_dir = -grad.norm_squared

        def cost_fn(m):
            st = problem.evaluate(m)
            return st.cost, st

        try:
            step, new_mesh, cost, new_state = armijo_search(
                current, direction, cost_fn, dj_dir, min(1.0, 2.0 * step)
            )
        except LineSearchFailure:
            if history.pairs:
                # retry along the plain gradient before giving up
                history.clear()
                direction = Deformation(current, -grad.deformation.values)
                step, new_mesh, cost, new_state = armijo_search(
                    current, direction, cost_fn, -grad.norm_squared, 1.0
                )
            else:
                raise

        s_pair = Deformation(new_mesh, step * direction.values)
        new_dj = problem.derivative(new_mesh, new_state)
        new_form = ElasticityForm(new_mesh, problem.elasticity, problem.fixed_markers)
        new_grad = gradient_deformation(
            new_mesh, problem.elasticity, new_dj, new_form
        )
        y_pair = Deformation(
            new_mesh, new_grad.deformation.values - grad.deformation.values
        )
        curv = new_form.inner(s_pair, y_pair)
        history.push(s_pair, y_pair, 1.0 / curv if curv > 0 else -1.0)

        current, state = new_mesh, new_state
        costs.append(cost)
        iterations = k + 1
        prev_grad = new_grad

    # reuse the gradient norm computed for the accepted iterate when the
    # loop ended by exhausting iterations
    if reason == "max_iterations" and prev_grad is not None:
        grad_norms.append(prev_grad.norm)
        if prev_grad.norm <= rtol * grad_norms[0]:
            reason = "converged"

    return OptimizeResult(
        mesh=current,
        total_deformation=inverse_retraction(start, current),
        iterations=iterations,
        cost_history=costs,
        grad_norm_history=grad_norms,
        reason=reason,
        final_state=state,
    )


# -- coarse problem adapters -----------------------------------------------------


@dataclass
class _TransmissionEval:
    cost: float
    state: models.TransmissionState


@dataclass
class TransmissionTracking:
    """Coarse transmission problem: track a pinned target field.

    The target is evaluated at quadrature points of whatever mesh the
    optimizer visits; its value and gradient enter the shape derivative from
    the pinned source geometry.
    """

    params: models.TransmissionParams
    target: PinnedField
    fixed_markers: tuple
    elasticity: ElasticityParams = ElasticityParams()
    memory: int = 5

    def evaluate(self, mesh):
        st = models.transmission_state(mesh, self.params)
        cost = models.tracking_cost_pinned(st.u, self.target)
        return _TransmissionEval(cost, st)

    def derivative(self, mesh, ev):
        st = ev.state
        space = st.space
        qp = space.quad_points(RULE_D2)
        tq = self.target.eval(qp)
        uq = space.eval_scalar(st.u.values, RULE_D2)
        phi, _ = space.basis(RULE_D2)
        areas = mesh.signed_areas()
        local = -2.0 * np.einsum(
            "q,mq,qa,m->ma", RULE_D2.weights, uq - tq, phi, areas
        )
        rhs = np.zeros(space.ndof)
        np.add.at(rhs, space._scalar_cell_dofs.ravel(), local.ravel())
        p = FeField(space, st.adjoint_solve(rhs))
        return shape_grad.shape_derivative_transmission(
            mesh, self.params, st.u, p, self.target,
            fixed_markers=self.fixed_markers,
        )


@dataclass
class _FlowEval:
    cost: float
    state: models.FlowState
    rates: np.ndarray


@dataclass
class FlowTracking:
    """Coarse flow problem: drive outlet rates to per-outlet targets."""

    params: models.FlowParams
    target_rates: np.ndarray
    fixed_markers: tuple
    elasticity: ElasticityParams = ElasticityParams()
    memory: int = 5

    def evaluate(self, mesh):
        st = models.flow_state(mesh, self.params)
        rates = models.flow_rates(st.velocity, self.params.outlet_markers)
        return _FlowEval(models.flow_cost(rates, self.target_rates), st, rates)

    def derivative(self, mesh, ev):
        st = ev.state
        rhs = shape_grad.flow_cost_rhs(
            mesh, st.space, self.params, ev.rates, self.target_rates
        )
        z = st.adjoint_solve(rhs)
        adj = (
            FeField(st.space.velocity, z[: st.space.n_velocity]),
            FeField(st.space.pressure, z[st.space.n_velocity :]),
        )
        return shape_grad.shape_derivative_flow(
            mesh, self.params, (st.velocity, st.pressure), adj, self.fixed_markers
        )
