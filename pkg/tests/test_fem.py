import math

import numpy as np
import pytest

import shapemap as sm
from shapemap import fem
from shapemap.errors import NoConvergence, UnknownMarker
from shapemap.fem import FeField, FunctionSpace
from shapemap.mesh import Mesh


def unit_right_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    fm = {(0, 1): 1, (1, 2): 1, (0, 2): 1}
    return Mesh(nodes, [[0, 1, 2]], fm, [1])


def channel(nx=16, ny=8, length=2.0):
    return sm.generate_rectangle(length, 1.0, nx, ny, origin=(0.0, -1.0))


def parabolic_profile(p):
    y = p[:, 1]
    return np.column_stack([-6.0 * y * (y + 1.0), np.zeros_like(y)])


def channel_bcs():
    return fem.FlowBCs(
        inlet_marker=1,
        inlet_profile=parabolic_profile,
        wall_markers=(2,),
        outlet_markers=(3,),
    )


class TestAssembly:
    def test_p1_stiffness_element_matrix(self):
        space = FunctionSpace(unit_right_triangle(), "P1")
        k = fem.assemble_stiffness(space, 1.0).toarray()
        expected = np.array(
            [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]]
        )
        assert np.abs(k - expected).max() < 1e-14

    def test_mass_partition_of_unity(self):
        mesh = sm.generate_disk_in_square(0.2, 4)
        space = FunctionSpace(mesh, "P1")
        m = fem.assemble_mass(space, 1.0)
        row_sums = np.asarray(m.sum(axis=1)).ravel()
        # each row integrates the hat function over its patch
        patch = np.zeros(mesh.n_nodes)
        areas = mesh.signed_areas()
        for t, tri in enumerate(mesh.triangles):
            patch[tri] += areas[t] / 3.0
        assert np.abs(row_sums - patch).max() < 1e-14
        assert m.sum() == pytest.approx(1.0, abs=1e-12)

    def test_elasticity_spd_on_constrained_space(self):
        mesh = sm.generate_disk_in_square(0.2, 3)
        space = FunctionSpace(mesh, "P1v")
        a = fem.assemble_bilinear(space, "elasticity", (1.0, 0.0, 0.0))
        fixed = mesh.nodes_on_markers([1])
        dofs = np.sort(np.concatenate([2 * fixed, 2 * fixed + 1]))
        op, _ = fem.constrain_dofs(a, np.zeros(space.ndof), dofs, np.zeros(len(dofs)))
        dense = op.toarray()
        np.linalg.cholesky(dense + 1e-14 * np.eye(len(dense)))

    def test_symmetric_forms_on_random_probes(self):
        mesh = sm.generate_disk_in_square(0.2, 4)
        rng = np.random.default_rng(0)
        for family, form, coeff in (
            ("P1", "stiffness", {1: 10.0, 2: 1.0}),
            ("P1", "mass", 1.0),
            ("P1v", "elasticity", (1.0, 0.5, 0.2)),
        ):
            space = FunctionSpace(mesh, family)
            a = fem.assemble_bilinear(space, form, coeff)
            norm = abs(a).sum() / a.shape[0]
            for _ in range(5):
                v = rng.standard_normal(space.ndof)
                w = rng.standard_normal(space.ndof)
                asym = abs(v @ (a @ w) - w @ (a @ v))
                assert asym <= 1e-12 * norm * np.linalg.norm(v) * np.linalg.norm(w)

    def test_missing_coefficient(self):
        mesh = sm.generate_disk_in_square(0.2, 3)
        space = FunctionSpace(mesh, "P1")
        with pytest.raises(fem.MissingCoefficient):
            fem.assemble_stiffness(space, {1: 1.0})


class TestDirichlet:
    def test_homogeneous_rows_identity(self):
        mesh = unit_right_triangle()
        space = FunctionSpace(mesh, "P1")
        k = fem.assemble_stiffness(space, 1.0)
        op, rhs = fem.apply_dirichlet(space, k, np.ones(3), {1})
        assert np.abs(op.toarray() - np.eye(3)).max() < 1e-15
        assert np.all(rhs == 0.0)

    def test_unknown_marker(self):
        mesh = unit_right_triangle()
        space = FunctionSpace(mesh, "P1")
        k = fem.assemble_stiffness(space, 1.0)
        with pytest.raises(UnknownMarker):
            fem.apply_dirichlet(space, k, np.zeros(3), {7})

    def test_elimination_preserves_symmetry(self):
        mesh = sm.generate_disk_in_square(0.2, 4)
        space = FunctionSpace(mesh, "P1")
        k = fem.assemble_stiffness(space, {1: 10.0, 2: 1.0})
        op, _ = fem.apply_dirichlet(space, k, np.zeros(space.ndof), {1}, 2.0)
        rng = np.random.default_rng(1)
        norm = abs(op).sum() / op.shape[0]
        for _ in range(5):
            v = rng.standard_normal(space.ndof)
            w = rng.standard_normal(space.ndof)
            assert abs(v @ (op @ w) - w @ (op @ v)) <= 1e-12 * norm * np.linalg.norm(
                v
            ) * np.linalg.norm(w)

    def test_inlet_profile_values_exact(self):
        mesh = channel()
        space = FunctionSpace(mesh, "TH")
        bc = channel_bcs().build(space)
        coords = space.velocity.scalar_dof_coords()
        sdofs = space.velocity.facet_scalar_dofs([1])
        x = bc.satisfy(np.zeros(space.ndof))
        expected = parabolic_profile(coords[sdofs])
        got = np.column_stack(
            [x[2 * sdofs], x[2 * sdofs + 1]]
        )
        assert np.abs(got - expected).max() < 1e-14


class TestSolvers:
    def test_identity_returns_rhs(self):
        import scipy.sparse as sp

        rhs = np.arange(5.0)
        assert np.array_equal(fem.solve_sparse(sp.eye(5).tocsr(), rhs), rhs)

    def test_small_spd_against_dense_oracle(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(2)
        m = rng.standard_normal((5, 5))
        a = m @ m.T + 5 * np.eye(5)
        b = rng.standard_normal(5)
        x = fem.solve_sparse(sp.csr_matrix(a), b, sym=True)
        assert np.abs(x - np.linalg.solve(a, b)).max() < 1e-12

    def test_poisson_mms_second_order(self):
        def run(n):
            mesh = sm.generate_rectangle(1.0, 1.0, n, n)
            space = FunctionSpace(mesh, "P1")
            k = fem.assemble_stiffness(space, 1.0)
            f = lambda p: (
                2 * math.pi**2 * np.sin(math.pi * p[..., 0]) * np.sin(math.pi * p[..., 1])
            )
            b = fem.assemble_load(space, f, rule=fem.RULE_D4)
            op, rhs = fem.apply_dirichlet(space, k, b, {1, 2, 3})
            u = fem.solve_sparse(op, rhs, sym=True)
            uq = space.eval_scalar(u, fem.RULE_D4)
            pq = space.quad_points(fem.RULE_D4)
            ue = np.sin(math.pi * pq[..., 0]) * np.sin(math.pi * pq[..., 1])
            areas = mesh.signed_areas()
            return math.sqrt(
                np.einsum("q,mq,m->", fem.RULE_D4.weights, (uq - ue) ** 2, areas)
            )

        errors = [run(n) for n in (8, 16, 32)]
        orders = [math.log2(errors[i] / errors[i + 1]) for i in range(2)]
        assert all(1.8 <= o <= 2.2 for o in orders)

    def test_affine_solutions_nodally_exact(self):
        mesh = sm.generate_rectangle(1.0, 1.0, 9, 7)
        space = FunctionSpace(mesh, "P1")
        k = fem.assemble_stiffness(space, 1.0)
        affine = lambda p: 2.0 * p[..., 0] - 3.0 * p[..., 1] + 0.5
        op, rhs = fem.apply_dirichlet(
            space, k, np.zeros(space.ndof), {1, 2, 3}, lambda c: affine(c)
        )
        u = fem.solve_sparse(op, rhs, sym=True)
        assert np.abs(u - affine(mesh.nodes)).max() < 1e-12

    def test_newton_on_linear_system_one_iteration(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(3)
        m = rng.standard_normal((6, 6))
        a = sp.csr_matrix(m @ m.T + 6 * np.eye(6))
        b = rng.standard_normal(6)
        calls = {"n": 0}

        def residual(x):
            calls["n"] += 1
            return a @ x - b

        x = fem.newton_solve(residual, lambda x: a, np.zeros(6))
        assert np.abs(a @ x - b).max() < 1e-11
        # initial check + the post-update check
        assert calls["n"] <= 3

    def test_newton_scalar_cubic(self):
        import scipy.sparse as sp

        def residual(x):
            return np.array([x[0] ** 3 + x[0] - 1.0])

        def jacobian(x):
            return sp.csr_matrix(np.array([[3 * x[0] ** 2 + 1.0]]))

        x = fem.newton_solve(residual, jacobian, np.zeros(1))
        # root located independently by bisection
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if mid**3 + mid - 1.0 > 0:
                hi = mid
            else:
                lo = mid
        assert abs(x[0] - lo) < 1e-11
        assert abs(x[0] - 0.6823278) < 1e-7

    def test_newton_no_convergence(self):
        import scipy.sparse as sp

        def residual(x):
            return np.array([1.0 + x[0] ** 2])

        def jacobian(x):
            return sp.csr_matrix(np.array([[2 * x[0] + 1e-3]]))

        with pytest.raises(NoConvergence):
            fem.newton_solve(residual, jacobian, np.array([1.0]), max_iter=5)


class TestFlowSystems:
    def test_poiseuille_exact(self):
        mesh = channel()
        space = FunctionSpace(mesh, "TH")
        op, rhs = fem.assemble_stokes(space, channel_bcs())
        x = fem.solve_sparse(op, rhs)
        coords = space.velocity.scalar_dof_coords()
        expected = parabolic_profile(coords)
        got = x[: space.n_velocity].reshape(-1, 2)
        assert np.abs(got - expected).max() < 1e-10
        pressure = x[space.n_velocity :]
        assert np.abs(pressure - 12.0 * (2.0 - mesh.nodes[:, 0])).max() < 1e-9

    def test_zero_inlet_zero_solution(self):
        mesh = channel(nx=8, ny=4)
        space = FunctionSpace(mesh, "TH")
        bc = fem.FlowBCs(1, lambda p: np.zeros((len(p), 2)), (2,), (3,))
        op, rhs = fem.assemble_stokes(space, bc)
        x = fem.solve_sparse(op, rhs)
        assert np.abs(x).max() < 1e-12

    def test_discrete_divergence_residual(self):
        mesh = channel()
        space = FunctionSpace(mesh, "TH")
        op, rhs = fem.assemble_stokes(space, channel_bcs())
        x = fem.solve_sparse(op, rhs)
        div_rows = fem._divergence_block(space) @ x
        assert np.abs(div_rows[space.n_velocity :]).max() < 1e-9

    def test_ns_residual_vanishes_at_poiseuille(self):
        # Poiseuille solves the inertial equations in a straight channel
        mesh = channel()
        space = FunctionSpace(mesh, "TH")
        op, rhs = fem.assemble_stokes(space, channel_bcs())
        x = fem.solve_sparse(op, rhs)
        _, res = fem.assemble_ns_system(space, 50.0, x, channel_bcs())
        assert np.linalg.norm(res) < 1e-9

    def test_ns_jacobian_matches_fd(self):
        mesh = channel(nx=10, ny=5)
        space = FunctionSpace(mesh, "TH")
        bc = channel_bcs()
        op, rhs = fem.assemble_stokes(space, bc)
        x0 = fem.solve_sparse(op, rhs)
        rng = np.random.default_rng(4)
        x0 = x0 + 0.05 * rng.standard_normal(len(x0))
        dirichlet = bc.build(space)
        dx = rng.standard_normal(len(x0))
        dx[dirichlet.dofs] = 0.0
        jac, _ = fem.assemble_ns_system(space, 40.0, x0, bc)
        eps = 1e-6
        _, rp = fem.assemble_ns_system(space, 40.0, x0 + eps * dx, bc)
        _, rm = fem.assemble_ns_system(space, 40.0, x0 - eps * dx, bc)
        fd = (rp - rm) / (2 * eps)
        jv = jac @ dx
        assert np.linalg.norm(jv - fd) <= 1e-6 * np.linalg.norm(jv)

    def test_flux_conservation(self):
        mesh = channel()
        space = FunctionSpace(mesh, "TH")
        op, rhs = fem.assemble_stokes(space, channel_bcs())
        x = fem.solve_sparse(op, rhs)
        vel = FeField(space.velocity, x[: space.n_velocity])
        assert fem.boundary_flux(vel, 3) == pytest.approx(1.0, abs=1e-10)
        assert fem.boundary_flux(vel, 1) == pytest.approx(-1.0, abs=1e-12)
