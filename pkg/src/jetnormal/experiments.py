"""Reusable synthetic experiments: benchmark suites, ablation grids and order mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synth
from .cloud import build_index
from .estimators import (IRLS, EstimatorConfig, IterativeReprojection, NoOffset, Uniform,
                         estimate_normals)
from .evaluation import angle_error, rmse

#: desk-scale neighbourhood chain for the classical ablations
ABLATION_SCALES = (96, 64, 48)
TRUNCATION_THRESHOLDS = (0.0, 0.05, 0.10, 0.30, 0.50)
ORDERS = (1, 2, 3)

#: soft robust weights standing in for learned ones: one Huber reweighting pass
ABLATION_WEIGHTS = IRLS("huber", iterations=1)
ABLATION_OFFSETS = IterativeReprojection(iterations=3, step=1.0, clip=2.0)


@dataclass(frozen=True)
class NamedScene:
    name: str
    spec: synth.SceneSpec


def outlier_curvature_suite(n_scenes: int = 20, n_points: int = 3000, noise: float = 0.00125,
                            outlier_fraction: float = 0.1, outlier_scale: float = 0.02,
                            curvature: float = 1.0, seed: int = 0) -> list[NamedScene]:
    """Random cubic height fields with light noise and 10% nearby outliers."""
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        surf = synth.random_jet(rng, 3, curvature)
        spec = synth.SceneSpec(surf, n_points, noise, outlier_fraction=outlier_fraction,
                               outlier_scale=outlier_scale, seed=seed * 1000 + i)
        scenes.append(NamedScene(f"oc{i:02d}", spec))
    return scenes


def mixed_curvature_scene(noise: float = 0.00125, n_points: int = 4000, seed: int = 7) -> NamedScene:
    """Flat half (x < 0) joined to a curved cubic half: different points prefer different orders."""
    curved = synth.Jet(3, (0, 0, 0, 1.5, 0, 0.5, 1.0, 0, 0.5, 0))
    surf = synth.Composite(((-1.0, 0.0, synth.Plane()), (0.0, 1.01, curved)))
    return NamedScene("mixed", synth.SceneSpec(surf, n_points, noise, seed=seed))


def query_points(labeled: synth.LabeledCloud, count: int | None, seed: int) -> np.ndarray:
    """Sorted random inlier indices (all inliers when ``count`` is None)."""
    inl = labeled.inliers
    if count is None or count >= inl.size:
        return inl
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(inl, size=count, replace=False))


class PreparedScene:
    def __init__(self, scene: NamedScene, queries_per_scene: int | None, query_seed: int):
        self.name = scene.name
        self.labeled = synth.generate(scene.spec)
        self.index = build_index(self.labeled.cloud)
        self.queries = query_points(self.labeled, queries_per_scene, query_seed)

    def errors(self, config: EstimatorConfig, workers: int = 1) -> np.ndarray:
        normals, _ = estimate_normals(self.labeled.cloud, config, self.queries, self.index, workers)
        return angle_error(normals, self.labeled.cloud.gt_normals[self.queries])


def prepare_scenes(scenes, queries_per_scene: int | None = 100, query_seed: int = 0):
    return [PreparedScene(s, queries_per_scene, query_seed + i) for i, s in enumerate(scenes)]


def run_ablation(prepared, configs: dict, workers: int = 1) -> list[tuple[str, str, float, int]]:
    """One (config, scene, rmse, n_queries) row per pair, configs in insertion order."""
    rows = []
    for cname, cfg in configs.items():
        for ps in prepared:
            err = ps.errors(cfg, workers)
            rows.append((cname, ps.name, rmse(err), int(err.size)))
    return rows


def average_by_config(rows) -> dict:
    out: dict = {}
    for cname, _, value, _ in rows:
        out.setdefault(cname, []).append(value)
    return {k: float(np.mean(v)) for k, v in out.items()}


def offset_grid(scales=ABLATION_SCALES, weight=ABLATION_WEIGHTS,
                offset=ABLATION_OFFSETS, orders=ORDERS) -> dict:
    """Order x {no offset, reprojection offset} with the same weights throughout."""
    configs = {}
    for o in orders:
        configs[f"order={o},offset=off"] = EstimatorConfig(o, scales, weight, NoOffset())
        configs[f"order={o},offset=on"] = EstimatorConfig(o, scales, weight, offset)
    return configs


def truncation_grid(scales=ABLATION_SCALES, weight=ABLATION_WEIGHTS, offset=ABLATION_OFFSETS,
                    order: int = 3, thresholds=TRUNCATION_THRESHOLDS) -> dict:
    """Weight truncation thresholds plus the offset estimator, all at one order."""
    configs = {f"threshold={t:.2f}": EstimatorConfig(order, scales, weight, NoOffset(), t)
               for t in thresholds}
    configs["offset"] = EstimatorConfig(order, scales, weight, offset)
    return configs


@dataclass(frozen=True)
class OrderMixing:
    orders: tuple
    errors: np.ndarray  # (n_orders, n_queries)
    best_order: np.ndarray  # per query

    @property
    def mixed_errors(self) -> np.ndarray:
        return self.errors.min(axis=0)

    def fixed_rmse(self) -> dict:
        return {o: rmse(e) for o, e in zip(self.orders, self.errors)}

    def mixed_rmse(self) -> float:
        return rmse(self.mixed_errors)


def order_mixing(prepared: PreparedScene, orders=ORDERS, scales=ABLATION_SCALES,
                 weight=Uniform()) -> OrderMixing:
    """Errors of each fixed order and of picking the best order per point.

    Ties go to the lowest order, matching ``best_order_oracle``.
    """
    orders = tuple(sorted(orders))
    errs = np.array([prepared.errors(EstimatorConfig(o, scales, weight)) for o in orders])
    best = np.array(orders)[np.argmin(errs, axis=0)]
    return OrderMixing(orders, errs, best)
