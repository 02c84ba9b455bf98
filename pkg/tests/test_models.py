import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import shapemap as sm
from shapemap import fem, models
from shapemap.errors import InvalidParameter, SpaceMismatch
from shapemap.fem import FeField, FunctionSpace
from shapemap.models import (
    Ellipse,
    FlowParams,
    PinnedField,
    TransmissionParams,
)


@pytest.fixture(scope="module")
def disk_mesh():
    return sm.generate_disk_in_square(0.2, 6)


@pytest.fixture(scope="module")
def channel_mesh():
    return sm.generate_rectangle(2.0, 1.0, 16, 8, origin=(0.0, -1.0))


def channel_params(reynolds=0.0):
    return FlowParams(reynolds=reynolds, wall_markers=(2,), outlet_markers=(3,))


class TestParams:
    def test_positivity_checks(self):
        with pytest.raises(InvalidParameter):
            TransmissionParams(alpha_in=-1.0)
        with pytest.raises(InvalidParameter):
            TransmissionParams(beta=-1.0)
        with pytest.raises(InvalidParameter):
            FlowParams(reynolds=-1.0)

    def test_linearized_drops_nonlinearity(self):
        assert TransmissionParams(beta=100.0).linearized().beta == 0.0
        assert FlowParams(reynolds=100.0).linearized().reynolds == 0.0


class TestTransmission:
    def test_zero_source_zero_field(self, disk_mesh):
        params = TransmissionParams(f_in=0.0, f_out=0.0, beta=0.0)
        resp = models.solve_transmission(disk_mesh, params)
        assert np.abs(resp.field.values).max() < 1e-14

    def test_semilinear_newton_converges_quickly(self, disk_mesh):
        st = models.transmission_state(disk_mesh, TransmissionParams(beta=100.0))
        assert np.abs(st.u.values).max() < 1.0

    def test_semilinear_damps_solution(self, disk_mesh):
        lin = models.solve_transmission(
            disk_mesh, TransmissionParams(beta=0.0)
        ).field
        sem = models.solve_transmission(
            disk_mesh, TransmissionParams(beta=100.0)
        ).field
        assert np.abs(sem.values).max() < np.abs(lin.values).max()

    def test_hierarchy_monotone_in_beta(self, disk_mesh):
        lin = models.solve_transmission(disk_mesh, TransmissionParams(beta=0.0)).field
        dists = []
        for beta in (10.0, 1.0, 0.1):
            u_b = models.solve_transmission(
                disk_mesh, TransmissionParams(beta=beta)
            ).field
            dists.append(models.tracking_cost(u_b, lin))
        assert dists[0] > dists[1] > dists[2]

    def test_manufactured_solution_order(self):
        # alpha identical in both subdomains reduces to a Poisson problem
        errors = []
        for n in (8, 16, 32):
            mesh = sm.generate_rectangle(1.0, 1.0, n, n)
            space = FunctionSpace(mesh, "P1")
            k = fem.assemble_stiffness(space, 1.0)
            f = lambda p: (
                2 * math.pi**2
                * np.sin(math.pi * p[..., 0])
                * np.sin(math.pi * p[..., 1])
            )
            b = fem.assemble_load(space, f, rule=fem.RULE_D4)
            op, rhs = fem.apply_dirichlet(space, k, b, {1, 2, 3})
            u = fem.solve_sparse(op, rhs, sym=True)
            uq = space.eval_scalar(u, fem.RULE_D4)
            pq = space.quad_points(fem.RULE_D4)
            ue = np.sin(math.pi * pq[..., 0]) * np.sin(math.pi * pq[..., 1])
            areas = mesh.signed_areas()
            errors.append(
                math.sqrt(
                    np.einsum("q,mq,m->", fem.RULE_D4.weights, (uq - ue) ** 2, areas)
                )
            )
        orders = [math.log2(errors[i] / errors[i + 1]) for i in range(2)]
        assert all(1.8 <= o <= 2.2 for o in orders)


class TestTrackingCost:
    def test_zero_on_equal_fields(self, disk_mesh):
        space = FunctionSpace(disk_mesh, "P1")
        rng = np.random.default_rng(0)
        u = FeField(space, rng.standard_normal(space.ndof))
        assert models.tracking_cost(u, u) == 0.0

    def test_constant_difference_integrates_area(self, disk_mesh):
        space = FunctionSpace(disk_mesh, "P1")
        u = FeField(space, np.ones(space.ndof))
        z = FeField(space, np.zeros(space.ndof))
        assert models.tracking_cost(u, z) == pytest.approx(1.0, abs=1e-12)

    def test_against_refined_quadrature_oracle(self, disk_mesh):
        space = FunctionSpace(disk_mesh, "P1")
        rng = np.random.default_rng(1)
        u = FeField(space, rng.standard_normal(space.ndof))
        v = FeField(space, rng.standard_normal(space.ndof))
        got = models.tracking_cost(u, v)
        dq = space.eval_scalar(u.values - v.values, fem.RULE_D4)
        oracle = float(
            np.einsum("q,mq,m->", fem.RULE_D4.weights, dq**2, disk_mesh.signed_areas())
        )
        assert got == pytest.approx(oracle, rel=1e-12)

    def test_space_mismatch(self, disk_mesh, channel_mesh):
        u = FeField(FunctionSpace(disk_mesh, "P1"), np.zeros(disk_mesh.n_nodes))
        v = FeField(FunctionSpace(channel_mesh, "P1"), np.zeros(channel_mesh.n_nodes))
        with pytest.raises(SpaceMismatch):
            models.tracking_cost(u, v)


class TestPinnedField:
    def test_same_mesh_evaluation_matches_nodal(self, disk_mesh):
        space = FunctionSpace(disk_mesh, "P1")
        f = fem.interpolate(space, lambda p: p[:, 0] + 2 * p[:, 1])
        pinned = PinnedField.from_field(f)
        got = pinned.eval(disk_mesh.nodes)
        assert np.abs(got - f.values).max() < 1e-13

    def test_affine_cross_mesh_exact(self, disk_mesh):
        fine = sm.generate_disk_in_square(0.2, 9)
        space = FunctionSpace(fine, "P1")
        f = fem.interpolate(space, lambda p: 3.0 * p[:, 0] - p[:, 1] + 0.25)
        pinned = PinnedField.from_field(f)
        target = models.interpolate_pinned(pinned, disk_mesh)
        expected = 3.0 * disk_mesh.nodes[:, 0] - disk_mesh.nodes[:, 1] + 0.25
        assert np.abs(target.values - expected).max() < 1e-12

    def test_outside_points_snap(self, disk_mesh):
        space = FunctionSpace(disk_mesh, "P1")
        f = fem.interpolate(space, lambda p: p[:, 0])
        pinned = PinnedField.from_field(f)
        vals = pinned.eval(np.array([[1.0 + 1e-13, 0.5], [-1e-13, 0.5]]))
        assert vals[0] == pytest.approx(1.0, abs=1e-9)
        assert vals[1] == pytest.approx(0.0, abs=1e-9)


class TestFlow:
    def test_poiseuille(self, channel_mesh):
        vel, pre = models.solve_flow(channel_mesh, channel_params())
        coords = vel.space.scalar_dof_coords()
        y = coords[:, 1]
        expected = np.column_stack([-6 * y * (y + 1), np.zeros_like(y)])
        assert np.abs(vel.values.reshape(-1, 2) - expected).max() < 1e-10

    def test_single_outlet_rate_conserves_inflow(self, channel_mesh):
        vel, _ = models.solve_flow(channel_mesh, channel_params())
        rates = models.flow_rates(vel, (3,))
        assert rates[0] == pytest.approx(1.0, abs=1e-10)

    def test_zero_velocity_zero_rates(self, channel_mesh):
        space = FunctionSpace(channel_mesh, "TH")
        vel = FeField(space.velocity, np.zeros(space.n_velocity))
        assert np.all(models.flow_rates(vel, (3,)) == 0.0)

    def test_q_desired_from_profile(self, channel_mesh):
        assert models.q_desired(channel_mesh, channel_params()) == pytest.approx(
            1.0, abs=1e-13
        )

    def test_reynolds_continuation_channel(self, channel_mesh):
        # Poiseuille is a Navier-Stokes solution, so Newton converges fast
        vel, _ = models.solve_flow(channel_mesh, channel_params(reynolds=100.0))
        rates = models.flow_rates(vel, (3,))
        assert rates[0] == pytest.approx(1.0, abs=1e-8)


class TestFlowCost:
    def test_uniform_rates_zero_cost(self):
        assert models.flow_cost(np.full(3, 1 / 3), 1 / 3) == 0.0

    def test_arithmetic_example(self):
        assert models.flow_cost(np.array([0.0, 0.0, 1.0]), 1 / 3) == pytest.approx(
            1 / 3, abs=1e-15
        )

    @given(
        st.lists(
            st.floats(-2, 2, allow_nan=False).map(lambda v: round(v, 6)),
            min_size=3,
            max_size=3,
        ),
        st.floats(-1, 1, allow_nan=False).map(lambda v: round(v, 6)),
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_zero_iff_on_target(self, rates, q):
        rates = np.asarray(rates)
        cost = models.flow_cost(rates, q)
        assert cost >= 0.0
        assert (cost == 0.0) == bool(np.all(rates == q))


class TestDesiredState:
    def test_circle_self_consistency(self, disk_mesh):
        params = TransmissionParams(beta=100.0)
        circle = Ellipse(center=(0.5, 0.5), semi_major=0.2, semi_minor=0.2, angle=0.0)
        u_des = models.make_desired_state(disk_mesh, params, circle, 6)
        direct = models.solve_transmission(disk_mesh, params).field
        err = math.sqrt(models.tracking_cost(u_des, direct))
        assert err < 5e-3  # interpolation-level agreement

    def test_regression_paper_ellipse(self, disk_mesh):
        params = TransmissionParams(beta=100.0)
        u_des = models.make_desired_state(disk_mesh, params, Ellipse(), 6)
        # frozen summary statistics of the transferred state
        norm2 = models.tracking_cost(
            u_des, FeField(u_des.space, np.zeros(u_des.space.ndof))
        )
        assert norm2 == pytest.approx(0.014214002216919, rel=1e-6)
        assert np.abs(u_des.values).max() == pytest.approx(0.21742088354459, rel=1e-6)


class TestResponses:
    def test_rate_response_validation(self):
        with pytest.raises(InvalidParameter):
            models.ModelResponse.of_rates(np.array([1.0, np.nan]))
