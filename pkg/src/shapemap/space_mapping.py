"""Misalignment, parameter extraction and the aggressive space-mapping driver.

The driver optimizes an expensive fine model using only its simulations: a
cheap coarse model is optimized once to produce the starting shape and the
reference deformation, then a limited-memory Broyden iteration drives the
mismatch between the coarse shape that best explains the current fine
response (the space-mapping deformation) and the coarse optimum to zero.

All deformations are compared in the elasticity inner product assembled on
the current iterate's mesh; history entries are re-hosted there by the
nodal-identity transport.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field as dfield

import numpy as np

from . import coarse_opt, fileio, models
from .errors import KindMismatch, SkippedUpdate, ZeroDenominator
from .fem import FeField, FunctionSpace
from .mesh import Deformation, apply_deformation, inverse_retraction, transport
from .models import ModelResponse, PinnedField
from .shape_grad import ElasticityForm, ElasticityParams

__all__ = [
    "Misalignment",
    "BroydenMemory",
    "AsmConfig",
    "AsmRun",
    "HistoryRecord",
    "misalignment",
    "evaluate_fine",
    "parameter_extraction",
    "space_map",
    "broyden_apply_inverse",
    "broyden_update",
    "stationarity",
    "asm_run",
    "InternalBackend",
    "ExternalBackend",
    "TransmissionExperiment",
    "FlowExperiment",
]

CURVATURE_EPS = 1e-14


@dataclass(frozen=True)
class Misalignment:
    """Response discrepancy measure: squared field distance or rate mismatch."""

    kind: str  # "field" or "rates"


def misalignment(r, a, b):
    """Evaluate the misalignment of two model responses of matching kind."""
    if a.kind != b.kind or a.kind != r.kind:
        raise KindMismatch(
            f"misalignment {r.kind!r} got responses {a.kind!r} and {b.kind!r}"
        )
    if r.kind == "field":
        return models.misalignment_field(a.field, b.field)
    return models.misalignment_rates(a.rates, b.rates)


@dataclass
class BroydenMemory:
    """Bounded storage of update pairs with their host-mesh snapshots."""

    memory: int = 5
    pairs: deque = dfield(default_factory=deque)

    def push(self, s, y):
        self.pairs.append((s, y))
        while len(self.pairs) > self.memory:
            self.pairs.popleft()

    def __len__(self):
        return len(self.pairs)


def broyden_apply_inverse(memory, rhs, current, form):
    """Apply the limited-memory inverse operator to a deformation.

    Walks the stored pairs oldest to newest: re-host on the current mesh,
    accumulate ``H += a(H, Y_i) S_i``.  Empty memory returns the right-hand
    side unchanged (identity initial operator).
    """
    if isinstance(form, ElasticityParams):
        form = ElasticityForm(current, form, ())
    h = rhs.values.copy()
    for s, y in memory.pairs:
        y_c = transport(y, current)
        s_c = transport(s, current)
        theta = float(h.ravel() @ (form.matrix @ y_c.values.ravel()))
        h = h + theta * s_c.values
    return Deformation(current, h)


def broyden_update(memory, x_step, nu, form, magnitude_guard=None):
    """Store the next update pair, skipping on degenerate curvature.

    Raises SkippedUpdate (signal, not fatal) when ``a(X, nu)`` vanishes
    relative to the factor norms, or when the resulting rank-one factor is
    so large that it would amplify extraction noise rather than curvature
    (``|S| |Y|`` above ``magnitude_guard``); the memory is unchanged then.
    """
    if isinstance(form, ElasticityParams):
        form = ElasticityForm(x_step.mesh, form, ())
    denom = form.inner(x_step, nu)
    guard = CURVATURE_EPS * max(form.norm(x_step) * form.norm(nu), 1e-300)
    if abs(denom) <= guard:
        raise SkippedUpdate(
            f"update denominator {denom:.3e} below curvature guard"
        )
    s_new = Deformation(x_step.mesh, (x_step.values - nu.values) / denom)
    if magnitude_guard is not None:
        size = form.norm(s_new) * form.norm(x_step)
        if size > magnitude_guard:
            raise SkippedUpdate(
                f"update magnitude {size:.3e} above guard {magnitude_guard:.1e}"
            )
    memory.push(s_new, x_step)
    return memory


def stationarity(s_k, transported_vstar, mesh, form):
    """Relative residual of the space-mapping root equation in the a-norm."""
    if isinstance(form, ElasticityParams):
        form = ElasticityForm(mesh, form, ())
    denom = form.norm(transported_vstar)
    if denom == 0.0:
        raise ZeroDenominator("reference deformation has zero a-norm")
    diff = Deformation(mesh, s_k.values - transported_vstar.values)
    return form.norm(diff) / denom


# -- fine-model backends ---------------------------------------------------------


@dataclass
class InternalBackend:
    """Run the fine model in process."""

    experiment: object

    def evaluate(self, mesh):
        return self.experiment.solve_fine(mesh)


@dataclass
class ExternalBackend:
    """Run the fine model behind the directory-handshake file protocol."""

    directory: str
    timeout_s: float = 600.0
    poll_s: float = 0.1
    experiment: object = None

    def evaluate(self, mesh):
        request = self.experiment.protocol_request()
        values = fileio.external_protocol_roundtrip(
            self.directory, mesh, request, self.timeout_s, self.poll_s
        )
        if request["kind"] == "field":
            space = FunctionSpace(mesh, "P1")
            return ModelResponse.of_field(FeField(space, values))
        return ModelResponse.of_rates(values)


def evaluate_fine(mesh, backend):
    """One fine-model simulation; never returns derivative information."""
    return backend.evaluate(mesh)


# -- experiments -------------------------------------------------------------------


@dataclass
class TransmissionExperiment:
    """Shape identification with the semilinear fine / linear coarse pair."""

    reference: object
    params_fine: models.TransmissionParams
    target: PinnedField
    elasticity: ElasticityParams = ElasticityParams()
    memory: int = 5

    def __post_init__(self):
        self.fixed_markers = tuple(self.reference.boundary_markers())
        self.params_coarse = self.params_fine.linearized()

    @property
    def misalignment_kind(self):
        return Misalignment("field")

    def solve_fine(self, mesh):
        return models.solve_transmission(mesh, self.params_fine)

    def protocol_request(self):
        p = self.params_fine
        return {
            "kind": "field",
            "outlets": [],
            "params": {
                "model": "transmission",
                "alpha_in": p.alpha_in,
                "alpha_out": p.alpha_out,
                "f_in": p.f_in,
                "f_out": p.f_out,
                "beta": p.beta,
            },
        }

    def coarse_problem(self, target=None):
        pinned = self.target if target is None else _pin_response(target)
        return coarse_opt.TransmissionTracking(
            params=self.params_coarse,
            target=pinned,
            fixed_markers=self.fixed_markers,
            elasticity=self.elasticity,
            memory=self.memory,
        )

    def fine_cost(self, response):
        return models.tracking_cost_pinned(response.field, self.target)


def _pin_response(response):
    if isinstance(response, PinnedField):
        return response
    return PinnedField.from_field(response.field)


@dataclass
class FlowExperiment:
    """Uniform flow distribution with inertial fine / creeping coarse flow."""

    reference: object
    params_fine: models.FlowParams
    fixed_markers: tuple = (1, 3, 4, 5, 6)
    elasticity: ElasticityParams = ElasticityParams()
    memory: int = 5

    def __post_init__(self):
        self.params_coarse = self.params_fine.linearized()
        self.q_des = models.q_desired(self.reference, self.params_fine)

    @property
    def misalignment_kind(self):
        return Misalignment("rates")

    def solve_fine(self, mesh):
        st = models.flow_state(mesh, self.params_fine)
        rates = models.flow_rates(st.velocity, self.params_fine.outlet_markers)
        return ModelResponse.of_rates(rates)

    def protocol_request(self):
        p = self.params_fine
        return {
            "kind": "rates",
            "outlets": list(p.outlet_markers),
            "params": {
                "model": "flow",
                "reynolds": p.reynolds,
                "inlet_scale": p.inlet_scale,
                "inlet_marker": p.inlet_marker,
                "wall_markers": list(p.wall_markers),
            },
        }

    def coarse_problem(self, target=None):
        rates = (
            np.full(len(self.params_fine.outlet_markers), self.q_des)
            if target is None
            else np.asarray(target.rates, dtype=np.float64)
        )
        return coarse_opt.FlowTracking(
            params=self.params_coarse,
            target_rates=rates,
            fixed_markers=self.fixed_markers,
            elasticity=self.elasticity,
            memory=self.memory,
        )

    def fine_cost(self, response):
        return models.flow_cost(response.rates, self.q_des)


# -- parameter extraction and the space-mapping function ---------------------------


def parameter_extraction(reference, fine_response, experiment, rtol, max_iter=100):
    """Coarse optimization from the reference with the fine response as target.

    Returns the extracted deformation (hosted on the reference mesh) and the
    iteration count of the inner optimization.
    """
    problem = experiment.coarse_problem(fine_response)
    result = coarse_opt.optimize(reference, problem, rtol=rtol, max_iter=max_iter)
    return result.total_deformation, result.iterations


def space_map(current_fine, reference, experiment, backend, rtol, max_iter=100):
    """Space-mapping deformation at the current fine-model geometry."""
    response = evaluate_fine(current_fine, backend)
    extracted, iters = parameter_extraction(
        reference, response, experiment, rtol, max_iter
    )
    return transport(extracted, current_fine), response, iters


def _safeguard_step(current, step):
    """Halve a quasi-Newton step while it would break the mesh.

    The root-finding iteration has no line search; this guard only protects
    element validity and the quality floor, leaving valid steps untouched.
    """
    from .errors import DegenerateMesh
    from .mesh import quality as mesh_quality

    scale = 1.0
    for _ in range(30):
        candidate = Deformation(current, scale * step.values)
        try:
            new_mesh = apply_deformation(current, candidate)
        except DegenerateMesh:
            scale *= 0.5
            continue
        if mesh_quality(new_mesh) < coarse_opt.QUALITY_MIN:
            scale *= 0.5
            continue
        return candidate, new_mesh
    raise DegenerateMesh("quasi-Newton step cannot be made mesh-valid")


# -- the driver ---------------------------------------------------------------------


@dataclass(frozen=True)
class AsmConfig:
    """Driver configuration.

    ``backend`` is "internal" or an object with an ``evaluate(mesh)`` method;
    the extraction tolerance defaults to the coarse tolerance.
    """

    tau: float = 1e-2
    memory: int = 5
    k_max: int = 25
    coarse_rtol: float = 1e-2
    extraction_rtol: float | None = None
    coarse_max_iter: int = 100
    backend: object = "internal"
    pair_guard: float | None = 50.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.memory < 0:
            raise ValueError("memory must be nonnegative")

    @property
    def ext_rtol(self):
        return self.coarse_rtol if self.extraction_rtol is None else self.extraction_rtol


@dataclass
class HistoryRecord:
    iteration: int
    cost: float
    sigma: float
    coarse_iters: int
    wall_s: float


@dataclass
class AsmRun:
    """Per-iteration history and geometry snapshots of one driver run."""

    records: list
    meshes: list
    reason: str
    coarse_result: object
    vstar: Deformation

    @property
    def final_mesh(self):
        return self.meshes[-1]


def asm_run(config, experiment):
    """Aggressive space mapping on the experiment's fine model.

    Optimizes the coarse model once for the starting shape, then iterates:
    extract the coarse deformation explaining the current fine response,
    test the relative stationarity measure, take a limited-memory Broyden
    step and update the pair storage.  Each iteration costs one fine
    simulation and one coarse optimization (the step's trial extraction is
    reused as the next iterate's space map).
    """
    backend = (
        InternalBackend(experiment) if config.backend == "internal" else config.backend
    )
    if getattr(backend, "experiment", None) is None:
        backend.experiment = experiment

    reference = experiment.reference
    ep = experiment.elasticity

    t_start = time.perf_counter()
    coarse_result = coarse_opt.optimize(
        reference,
        experiment.coarse_problem(),
        rtol=config.coarse_rtol,
        max_iter=config.coarse_max_iter,
    )
    vstar = coarse_result.total_deformation

    current = coarse_result.mesh
    memory = BroydenMemory(memory=config.memory)
    records = []
    meshes = [current]
    reason = "max_iterations"

    s_k, response, ext_iters = space_map(
        current, reference, experiment, backend, config.ext_rtol,
        config.coarse_max_iter,
    )

    for k in range(config.k_max + 1):
        form = ElasticityForm(current, ep, ())
        vstar_k = transport(vstar, current)
        sigma = stationarity(s_k, vstar_k, current, form)
        cost = experiment.fine_cost(response)
        records.append(
            HistoryRecord(
                iteration=k,
                cost=cost,
                sigma=sigma,
                coarse_iters=ext_iters,
                wall_s=time.perf_counter() - t_start,
            )
        )
        if sigma <= config.tau:
            reason = "converged"
            break
        if k == config.k_max:
            break

        residual = Deformation(current, s_k.values - vstar_k.values)
        x_step = -1.0 * broyden_apply_inverse(memory, residual, current, form)
        x_step, new_mesh = _safeguard_step(current, x_step)

        s_next, response_next, ext_iters_next = space_map(
            new_mesh, reference, experiment, backend, config.ext_rtol,
            config.coarse_max_iter,
        )
        # transport of the new space map back to the current mesh is a
        # re-hosting; the difference drives the pair update
        diff = Deformation(current, s_next.values - s_k.values)
        nu = broyden_apply_inverse(memory, diff, current, form)
        try:
            broyden_update(memory, x_step, nu, form, config.pair_guard)
        except SkippedUpdate:
            pass

        current = new_mesh
        meshes.append(current)
        s_k, response, ext_iters = s_next, response_next, ext_iters_next

    return AsmRun(
        records=records,
        meshes=meshes,
        reason=reason,
        coarse_result=coarse_result,
        vstar=vstar,
    )
