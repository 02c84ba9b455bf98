import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import shapemap as sm
from shapemap.errors import (
    ConnectivityMismatch,
    DegenerateMesh,
    InvalidParameter,
)
from shapemap.mesh import Deformation, Mesh


def unit_square_two_tris():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    fm = {(0, 1): 1, (1, 2): 1, (2, 3): 1, (0, 3): 1}
    return Mesh(nodes, tris, fm, [1, 1])


def single_triangle(p0=(0, 0), p1=(1, 0), p2=(0, 1)):
    nodes = np.array([p0, p1, p2], dtype=float)
    fm = {(0, 1): 1, (1, 2): 1, (0, 2): 1}
    return Mesh(nodes, [[0, 1, 2]], fm, [1])


class TestMeshValidation:
    def test_negative_area_rejected(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DegenerateMesh):
            Mesh(nodes, [[0, 2, 1]], {(0, 1): 1, (1, 2): 1, (0, 2): 1}, [1])

    def test_uncovered_boundary_rejected(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(InvalidParameter):
            Mesh(nodes, [[0, 1, 2]], {(0, 1): 1}, [1])

    def test_index_out_of_range(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(InvalidParameter):
            Mesh(nodes, [[0, 1, 5]], {(0, 1): 1, (1, 5): 1, (0, 5): 1}, [1])


class TestRetraction:
    def test_zero_deformation_is_identity(self):
        mesh = unit_square_two_tris()
        out = sm.apply_deformation(mesh, Deformation.zero(mesh))
        assert np.array_equal(out.nodes, mesh.nodes)
        assert out.topology is mesh.topology

    def test_negation_round_trip_exact(self):
        mesh = unit_square_two_tris()
        rng = np.random.default_rng(0)
        d = Deformation(mesh, 0.05 * rng.standard_normal((4, 2)))
        moved = sm.apply_deformation(mesh, d)
        back = sm.apply_deformation(moved, Deformation(moved, -d.values))
        assert np.abs(back.nodes - mesh.nodes).max() < 1e-15

    def test_orientation_flip_raises(self):
        # moving the node at (1, 0) to (-1, 1) flips the signed area
        mesh = single_triangle()
        d = Deformation(mesh, np.array([[0.0, 0.0], [-2.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(DegenerateMesh):
            sm.apply_deformation(mesh, d)

    def test_inverse_retraction_of_self_is_zero(self):
        mesh = unit_square_two_tris()
        d = sm.inverse_retraction(mesh, mesh)
        assert np.all(d.values == 0.0)

    def test_inverse_retraction_recovers_deformation(self):
        # round trip through coordinate addition is exact to rounding (ulp)
        mesh = unit_square_two_tris()
        rng = np.random.default_rng(1)
        d = Deformation(mesh, 0.08 * rng.standard_normal((4, 2)))
        moved = sm.apply_deformation(mesh, d)
        rec = sm.inverse_retraction(mesh, moved)
        assert np.abs(rec.values - d.values).max() < 1e-15
        # and applying the recovered deformation reproduces the mesh exactly
        again = sm.apply_deformation(mesh, rec)
        assert np.array_equal(again.nodes, moved.nodes)

    def test_connectivity_mismatch(self):
        a = unit_square_two_tris()
        b = single_triangle()
        with pytest.raises(ConnectivityMismatch):
            sm.inverse_retraction(a, b)


class TestTransport:
    def test_zero_and_identity(self):
        mesh = unit_square_two_tris()
        z = Deformation.zero(mesh)
        assert np.all(sm.transport(z, mesh).values == 0.0)
        rng = np.random.default_rng(2)
        d = Deformation(mesh, rng.standard_normal((4, 2)))
        assert np.array_equal(sm.transport(d, mesh).values, d.values)

    def test_values_preserved_bit_exactly(self):
        mesh = unit_square_two_tris()
        rng = np.random.default_rng(3)
        d = Deformation(mesh, 0.05 * rng.standard_normal((4, 2)))
        moved = sm.apply_deformation(mesh, d)
        carried = sm.transport(d, moved)
        assert np.array_equal(carried.values, d.values)
        assert carried.mesh is moved

    @given(
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=25, deadline=None)
    def test_transport_linearity(self, a, b, seed):
        mesh = unit_square_two_tris()
        rng = np.random.default_rng(seed)
        d1 = Deformation(mesh, rng.standard_normal((4, 2)))
        d2 = Deformation(mesh, rng.standard_normal((4, 2)))
        moved = sm.apply_deformation(mesh, Deformation(mesh, 0.01 * d1.values))
        lhs = sm.transport(a * d1 + b * d2, moved).values
        rhs = a * sm.transport(d1, moved).values + b * sm.transport(d2, moved).values
        assert np.abs(lhs - rhs).max() <= 1e-15 * max(1.0, np.abs(lhs).max())


class TestQuality:
    def test_equilateral(self):
        mesh = single_triangle((0, 0), (1, 0), (0.5, math.sqrt(3) / 2))
        assert sm.quality(mesh) == pytest.approx(math.pi / 3, abs=1e-12)

    def test_right_isoceles(self):
        assert sm.quality(single_triangle()) == pytest.approx(math.pi / 4, abs=1e-12)

    def test_sliver_detected(self):
        mesh = single_triangle((0, 0), (1, 0), (0.5, 0.5 * math.tan(1e-3)))
        assert sm.quality(mesh) < math.radians(0.5)

    def test_rigid_motion_invariance(self):
        mesh = sm.generate_disk_in_square(0.2, 3)
        q0 = sm.quality(mesh)
        c, s = math.cos(0.7), math.sin(0.7)
        rot = mesh.nodes @ np.array([[c, s], [-s, c]]) + np.array([3.0, -2.0])
        assert abs(sm.quality(mesh.with_nodes(rot)) - q0) < 1e-12


class TestGenerators:
    def test_disk_radius_resolved(self):
        mesh = sm.generate_disk_in_square(0.2, 6)
        iface = mesh.facets_with_marker(2)
        pts = mesh.nodes[np.unique(iface.ravel())]
        r = np.hypot(pts[:, 0] - 0.5, pts[:, 1] - 0.5)
        assert np.abs(r - 0.2).max() < 1e-12

    def test_markers_partition(self):
        mesh = sm.generate_disk_in_square(0.2, 6)
        assert mesh.boundary_markers() == [1]
        assert set(np.unique(mesh.cell_markers)) == {1, 2}

    def test_large_radius_still_valid(self):
        mesh = sm.generate_disk_in_square(0.49, 6)
        assert mesh.signed_areas().min() > 0.0

    def test_radius_out_of_range(self):
        with pytest.raises(InvalidParameter):
            sm.generate_disk_in_square(0.6, 6)
        with pytest.raises(InvalidParameter):
            sm.generate_disk_in_square(-0.1, 6)

    def test_ellipse_interface_on_ellipse(self):
        ang = math.pi / 6
        mesh = sm.generate_ellipse_in_square((0.5, 0.5), (0.3, 0.15), ang, 8)
        iface = mesh.facets_with_marker(2)
        pts = mesh.nodes[np.unique(iface.ravel())] - 0.5
        c, s = math.cos(ang), math.sin(ang)
        xr = c * pts[:, 0] + s * pts[:, 1]
        yr = -s * pts[:, 0] + c * pts[:, 1]
        assert np.abs((xr / 0.3) ** 2 + (yr / 0.15) ** 2 - 1.0).max() < 1e-12

    def test_rectangle_channel_markers(self):
        mesh = sm.generate_rectangle(2.0, 1.0, 8, 4, origin=(0.0, -1.0))
        assert sorted(set(mesh.facet_markers.values())) == [1, 2, 3]
        assert mesh.signed_areas().min() > 0.0

    def test_resolution_must_be_positive_integer(self):
        with pytest.raises(InvalidParameter):
            sm.generate_disk_in_square(0.2, 0)
