import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jetnormal import synth
from jetnormal.cloud import PointCloud, build_index
from jetnormal.estimators import (IRLS, EstimatorConfig, GaussianDistance, IterativeReprojection,
                                  Learned, NoOffset, TooFewPointsError, Uniform, best_order_oracle,
                                  estimate_normal, estimate_normals, irls_weights,
                                  reproject_offsets, strategy_from_dict, truncate_weights)
from jetnormal.evaluation import angle_error
from jetnormal.jet import FitProblem, design_matrix, fit_system, normal_from_jet, wls_fit
from jetnormal.micronet import FitNet


def plane_with_outlier(r, n=40, lift=1.0):
    xy = r.uniform(-1, 1, size=(n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    pts[n // 2, 2] = lift
    return pts, n // 2


def rotation(r):
    q, m = np.linalg.qr(r.normal(size=(3, 3)))
    q = q * np.sign(np.diag(m))
    return q if np.linalg.det(q) > 0 else -q


def rad(a, b):
    return np.radians(angle_error(a, b))


class TestStrategies:
    def test_defaults(self):
        cfg = EstimatorConfig()
        assert cfg.order == 3
        assert cfg.scales == (700, 350, 175)
        assert cfg.truncation_threshold == 0.0

    @pytest.mark.parametrize("bad", [
        dict(order=0), dict(scales=(10, 20)), dict(truncation_threshold=1.0),
        dict(scales=(10, 2)),
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            EstimatorConfig(**bad)

    def test_round_trip(self):
        cfg = EstimatorConfig(2, (64, 32), IRLS("huber", 2, 0.5), IterativeReprojection(2, 0.5, 1.5),
                              0.1)
        assert EstimatorConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            EstimatorConfig.from_dict({"order": 2, "colour": "red"})
        with pytest.raises(ValueError):
            strategy_from_dict({"kind": "magic"})

    def test_learned_round_trip(self, tmp_path):
        from jetnormal.micronet import load_model, save_model

        path = save_model(FitNet((64, 32, 16)), tmp_path / "m.jnet")
        cfg = EstimatorConfig(3, (64, 32, 16), Learned(load_model(path), str(path)))
        d = cfg.to_dict()
        assert d["weight"] == {"kind": "learned", "path": str(path)}
        back = EstimatorConfig.from_dict(d, model_loader=load_model)
        assert back.weight.path == str(path)

    def test_learned_scale_mismatch(self):
        with pytest.raises(ValueError, match="scales"):
            EstimatorConfig(3, (100, 50), Learned(FitNet((64, 32, 16))))


class TestWeights:
    def test_irls_zero_residuals(self, rng):
        xy = rng.uniform(-1, 1, size=(30, 2))
        pts = np.column_stack([xy, 0.2 * xy[:, 0]])
        np.testing.assert_array_equal(irls_weights(pts, 1, "tukey", 1), np.ones(30))

    def test_irls_zero_iterations_keeps_initial(self, rng):
        pts, _ = plane_with_outlier(rng)
        w0 = rng.uniform(0.1, 1, size=len(pts))
        np.testing.assert_array_equal(irls_weights(pts, 1, "huber", 0, weights=w0), w0)

    def test_tukey_rejects_gross_outlier(self, rng):
        pts, j = plane_with_outlier(rng)
        pts[j] = [0.9, 0.9, 3.0]
        pts[:, 2] += 0.002 * rng.normal(size=len(pts)) * (np.arange(len(pts)) != j)
        w = irls_weights(pts, 1, "tukey", 3)
        assert w[j] < 1e-3
        truth = np.array([0.0, 0.0, 1.0])
        robust = normal_from_jet(wls_fit(FitProblem(pts, 1, w)))
        plain = normal_from_jet(wls_fit(FitProblem(pts, 1)))
        assert angle_error(robust, truth) < 0.5
        assert angle_error(plain, truth) > 5.0

    def test_irls_invariant_under_rigid_motion(self, rng):
        # rotations about the local z-axis and shifts along it keep the height field a plane
        pts, _ = plane_with_outlier(rng)
        pts[:, 2] += 0.3 * pts[:, 0] + 0.01 * rng.normal(size=len(pts))
        th = 0.7
        rz = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
        moved = pts @ rz.T + [0, 0, 2.5]
        np.testing.assert_allclose(irls_weights(moved, 1, "tukey", 3),
                                   irls_weights(pts, 1, "tukey", 3), atol=1e-9)

    def test_weights_in_unit_interval(self, rng):
        pts, _ = plane_with_outlier(rng)
        pts[:, 2] += 0.05 * rng.normal(size=len(pts))
        for kern in ("huber", "tukey"):
            w = irls_weights(pts, 2, kern, 3)
            assert np.all(w > 0) and np.all(w <= 1)

    def test_gaussian_weights(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 0.5, 0]], dtype=float)
        cfg = GaussianDistance(0.5)
        from jetnormal.estimators import gaussian_weights

        w = gaussian_weights(pts, cfg.bandwidth)
        np.testing.assert_allclose(w, [1.0, np.exp(-2.0), np.exp(-0.5)])


class TestTruncation:
    def test_identity_at_zero(self, rng):
        w = rng.uniform(size=20)
        np.testing.assert_array_equal(truncate_weights(w, 0.0), w)

    @pytest.mark.parametrize("t", [0.05, 0.3, 0.99])
    def test_equal_weights_identity(self, t):
        np.testing.assert_array_equal(truncate_weights(np.full(5, 0.3), t), np.full(5, 0.3))

    def test_example(self):
        np.testing.assert_array_equal(truncate_weights(np.array([1.0, 0.04, 0.5]), 0.05),
                                      [1.0, 0.0, 0.5])

    def test_too_few_survivors(self):
        with pytest.raises(TooFewPointsError):
            truncate_weights(np.array([1.0, 0.01, 0.01]), 0.5, 3)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            truncate_weights(np.ones(3), 1.0)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0, 0.99))
    def test_property(self, ws, t):
        w = np.array(ws)
        out = truncate_weights(w, t)
        kept = out > 0
        np.testing.assert_array_equal(out[kept], w[kept])
        dropped = w[~kept]
        assert np.all((dropped < t * w.max()) | (dropped == 0))


class TestOffsets:
    def test_on_jet_offsets_vanish(self, rng):
        xy = rng.uniform(-1, 1, size=(40, 2))
        z = design_matrix(2, xy[:, 0], xy[:, 1]) @ rng.normal(size=6)
        off = reproject_offsets(np.column_stack([xy, z]), 2, iterations=3)
        assert np.max(np.abs(off)) < 1e-9
        np.testing.assert_array_equal(off[:, :2], 0.0)

    def test_outlier_residual_shrinks(self, rng):
        pts, j = plane_with_outlier(rng, lift=0.5)
        before = fit_system(FitProblem(pts, 1)).residuals[j]
        off = reproject_offsets(pts, 1, iterations=1, step=1.0, clip=2.0)
        after = fit_system(FitProblem(pts, 1, None, off)).residuals[j]
        assert abs(after) < abs(before)

    def test_offsets_beat_weights_only(self, rng):
        pts, _ = plane_with_outlier(rng, lift=0.5)
        pts[:, 2] += 0.002 * rng.normal(size=len(pts))
        truth = np.array([0.0, 0.0, 1.0])
        w = np.ones(len(pts))
        plain = normal_from_jet(wls_fit(FitProblem(pts, 1, w)))
        off = reproject_offsets(pts, 1, w, iterations=3, clip=2.0)
        moved = normal_from_jet(wls_fit(FitProblem(pts, 1, w, off)))
        assert angle_error(moved, truth) < angle_error(plain, truth)

    def test_full_projection_zeroes_residuals(self, rng):
        # clip=0, step=1: one pass drives every residual of the offset targets to zero
        pts = rng.normal(size=(30, 3))
        off = reproject_offsets(pts, 2, iterations=1, step=1.0, clip=0.0)
        res = fit_system(FitProblem(pts, 2, None, off)).residuals
        np.testing.assert_allclose(res, 0.0, atol=1e-12)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0), st.floats(0.0, 3.0))
    def test_residuals_non_increasing(self, seed, step, clip):
        r = np.random.default_rng(seed)
        pts, _ = plane_with_outlier(r, lift=r.uniform(0.1, 2))
        prev = np.max(np.abs(fit_system(FitProblem(pts, 1)).residuals))
        for it in (1, 2, 3):
            off = reproject_offsets(pts, 1, iterations=it, step=step, clip=clip)
            cur = np.max(np.abs(fit_system(FitProblem(pts, 1, None, off)).residuals))
            assert cur <= prev * (1 + 1e-9) + 1e-12
            prev = cur


def jet_scene(r, order=3, n=600, curvature=1.0):
    surf = synth.random_jet(r, order, curvature)
    return synth.generate(synth.SceneSpec(surf, n, seed=int(r.integers(2**31)))).cloud


class TestEstimateNormal:
    def test_plane_any_config(self, rng):
        normal = np.array([1.0, 2.0, 2.0]) / 3
        uv = rng.uniform(-1, 1, size=(400, 2))
        a = np.cross(normal, [1, 0, 0])
        a /= np.linalg.norm(a)
        b = np.cross(normal, a)
        cloud = PointCloud(uv[:, :1] * a + uv[:, 1:] * b + 5.0)
        index = build_index(cloud)
        configs = [EstimatorConfig(o, (100, 50, 30), w, NoOffset(), t)
                   for o in (1, 2, 3) for w in (Uniform(), GaussianDistance(), IRLS())
                   for t in (0.0, 0.3)]
        for cfg in configs:
            est = estimate_normal(cloud, index, 17, cfg)
            assert rad(est.normal, normal) < 1e-6
            assert abs(np.linalg.norm(est.normal) - 1) < 1e-10

    def test_noise_free_curved_jet(self, rng):
        # a curved graph seen from a tilted PCA frame is no longer polynomial, so the
        # fit is near-exact rather than exact (exact recovery is tested on the jet level)
        cloud = jet_scene(rng, n=3000)
        q = np.arange(0, 3000, 10)
        n, diags = estimate_normals(cloud, EstimatorConfig(3, (120, 60, 40)), q)
        err = angle_error(n, cloud.gt_normals[q])
        assert np.median(err) < 0.02
        assert np.max(err) < 0.5
        assert all(d["order_used"] == 3 for d in diags)

    def test_order3_beats_order1_on_curved(self, rng):
        cloud = jet_scene(rng, n=1500, curvature=2.0)
        index = build_index(cloud)
        q = np.arange(0, len(cloud), 15)
        errs = {}
        for order in (1, 3):
            n, _ = estimate_normals(cloud, EstimatorConfig(order, (60, 40, 30)), q, index)
            errs[order] = np.mean(angle_error(n, cloud.gt_normals[q]))
        assert errs[3] < errs[1]

    def test_rigid_motion_equivariance(self, rng):
        cloud = jet_scene(rng, n=500)
        rot = rotation(rng)
        moved = PointCloud(cloud.points @ rot.T + [3, -1, 2])
        cfg = EstimatorConfig(3, (80, 50, 30), IRLS("huber", 1), IterativeReprojection())
        a, _ = estimate_normals(cloud, cfg, range(0, 500, 25))
        b, _ = estimate_normals(moved, cfg, range(0, 500, 25))
        assert np.max(rad(a @ rot.T, b)) < 1e-6

    def test_deterministic_and_threaded(self, rng):
        cloud = jet_scene(rng, n=400)
        cfg = EstimatorConfig(2, (60, 30, 20), IRLS(), IterativeReprojection())
        a, da = estimate_normals(cloud, cfg, workers=1)
        b, db = estimate_normals(cloud, cfg, workers=4)
        np.testing.assert_array_equal(a, b)
        assert da == db or all(
            {k: v for k, v in x.items() if k != "condition"} == {k: v for k, v in y.items()
                                                                 if k != "condition"}
            for x, y in zip(da, db))

    def test_fallback_to_order1(self):
        pts = np.array([[0, 0, 0], [1, 0, 0.1], [0, 1, 0], [1, 1, 0.2], [0.5, 0.2, 0]], float)
        cloud = PointCloud(pts)
        est = estimate_normal(cloud, build_index(cloud), 0, EstimatorConfig(3, (5, 4)))
        assert est.diagnostics["fallback"] == "order1"
        assert est.diagnostics["order_used"] == 1

    def test_degenerate_fallback(self):
        cloud = PointCloud(np.outer(np.arange(5.0), [1, 0, 0]))
        est = estimate_normal(cloud, build_index(cloud), 2, EstimatorConfig(1, (5, 4)))
        assert est.diagnostics["fallback"] == "degenerate"
        assert abs(np.linalg.norm(est.normal) - 1) < 1e-12

    def test_diagnostics(self, rng):
        cloud = jet_scene(rng, n=300)
        est = estimate_normal(cloud, build_index(cloud), 4,
                              EstimatorConfig(2, (60, 30), offset=IterativeReprojection()))
        d = est.diagnostics
        assert d["n_points"] == 30
        assert d["effective_weights"] == pytest.approx(30.0)
        assert d["condition"] >= 1.0
        assert d["offset_max"] >= d["offset_mean"] >= 0


class TestBestOrder:
    def test_plane_ties_to_lowest(self, rng):
        xy = rng.uniform(-1, 1, size=(200, 2))
        cloud = PointCloud(np.column_stack([xy, np.zeros(200)]), np.tile([0, 0, 1.0], (200, 1)))
        order, err = best_order_oracle(cloud, build_index(cloud), 3, (3, 2, 1),
                                       EstimatorConfig(3, (50, 30)))
        assert order == 1
        assert err < 1e-6

    def test_needs_ground_truth(self, rng):
        cloud = PointCloud(rng.normal(size=(50, 3)))
        with pytest.raises(ValueError):
            best_order_oracle(cloud, build_index(cloud), 0)
