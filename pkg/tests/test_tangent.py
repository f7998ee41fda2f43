import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetnormal.cloud import PointCloud, build_index, neighborhood
from jetnormal.tangent import (DegenerateFrameError, TangentFrame, direction_to_local,
                               frame_from_points, normal_to_world, pca_frame, to_local, to_world)


def random_rotation(r):
    q, m = np.linalg.qr(r.normal(size=(3, 3)))
    q = q * np.sign(np.diag(m))
    if np.linalg.det(q) < 0:
        q[0] = -q[0]
    return q


class TestFrame:
    def test_plane_z0(self, rng):
        pts = np.column_stack([rng.normal(size=(50, 2)), np.zeros(50)])
        f = frame_from_points(pts, pts[0])
        np.testing.assert_allclose(np.abs(f.normal), [0, 0, 1], atol=1e-12)

    def test_tilted_plane(self, rng):
        # oracle: eigenvector of the smallest eigenvalue is the plane normal
        uv = rng.normal(size=(80, 2))
        a = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
        b = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
        pts = uv[:, :1] * a + uv[:, 1:] * b
        f = frame_from_points(pts, pts[0])
        np.testing.assert_allclose(np.abs(f.normal), np.ones(3) / np.sqrt(3), atol=1e-10)

    def test_right_handed_and_orthonormal(self, rng):
        f = frame_from_points(rng.normal(size=(30, 3)) * [3, 2, 1], np.zeros(3))
        np.testing.assert_allclose(f.rotation @ f.rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(f.rotation) == pytest.approx(1.0)

    def test_isotropic_is_deterministic(self, rng):
        pts = rng.normal(size=(200, 3))
        f1 = frame_from_points(pts, np.zeros(3))
        f2 = frame_from_points(pts.copy(), np.zeros(3))
        np.testing.assert_array_equal(f1.rotation, f2.rotation)

    @pytest.mark.parametrize("pts", [
        np.zeros((5, 3)),
        np.outer(np.arange(6.0), [1.0, 2.0, 3.0]),
        np.zeros((2, 3)),
    ])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateFrameError):
            frame_from_points(pts, np.zeros(3))

    def test_pca_frame_origin_is_query(self, rng):
        cloud = PointCloud(rng.normal(size=(40, 3)) * [1, 1, 0.1])
        nb = neighborhood(build_index(cloud), 3, 15)
        patch = to_local(pca_frame(cloud, nb), cloud, nb)
        np.testing.assert_array_equal(patch.coords[0], 0.0)
        assert len(patch) == 15


class TestTransforms:
    def test_identity_frame(self, rng):
        cloud = PointCloud(rng.normal(size=(10, 3)))
        nb = neighborhood(build_index(cloud), 2, 10)
        patch = to_local(TangentFrame.identity(cloud.points[2]), cloud, nb)
        np.testing.assert_allclose(patch.coords, cloud.points[nb.indices] - cloud.points[2])
        np.testing.assert_array_equal(normal_to_world(TangentFrame.identity(), [0, 0, 1]), [0, 0, 1])

    def test_rotation_about_x(self):
        c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        n = normal_to_world(TangentFrame(np.zeros(3), rot), [0, 0, 1])
        np.testing.assert_allclose(n, [0, 1, 0], atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        r = np.random.default_rng(seed)
        frame = TangentFrame(r.normal(size=3), random_rotation(r))
        cloud = PointCloud(r.normal(size=(12, 3)) * 10)
        nb = neighborhood(build_index(cloud), 0, 12)
        back = to_world(frame, to_local(frame, cloud, nb).coords)
        np.testing.assert_allclose(back, cloud.points[nb.indices], atol=1e-9)
        v = r.normal(size=3)
        np.testing.assert_allclose(np.linalg.norm(normal_to_world(frame, v)), np.linalg.norm(v))
        np.testing.assert_allclose(normal_to_world(frame, direction_to_local(frame, v)), v,
                                   atol=1e-12)
