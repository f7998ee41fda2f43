"""Classical end-to-end normal estimators built on the weighted jet fit.

A query goes through: nested neighbourhoods -> PCA frame of the fitting
(smallest) scale -> weights -> optional truncation -> offsets -> jet fit ->
normal mapped back to world coordinates.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .cloud import (DEFAULT_SCALES, PointCloud, ScaleChain, SpatialIndex, build_index,
                    nested_neighborhoods)
from .jet import (FitProblem, SingularFitError, check_order, fit_system, n_coeffs,
                  normal_from_jet)
from .tangent import (DegenerateFrameError, LocalPatch, TangentFrame, normal_to_world,
                      pca_frame, to_local)

logger = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
HUBER_C = 1.345
TUKEY_C = 4.685
# weights are kept strictly positive so the fit never silently loses a point
WEIGHT_FLOOR = 1e-12


class TooFewPointsError(ValueError):
    pass


# -- strategies -------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    kind = "uniform"


@dataclass(frozen=True)
class GaussianDistance:
    """exp(-d^2 / 2 (bandwidth * radius)^2) with d the distance to the query."""

    bandwidth: float = 0.5
    kind = "gaussian"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class IRLS:
    """Iteratively reweighted fit with a Huber or Tukey kernel.

    ``scale=None`` uses 1.4826 times the median absolute residual of each
    intermediate fit.
    """

    kernel: str = "tukey"
    iterations: int = 3
    scale: Optional[float] = None
    kind = "irls"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {sorted(KERNELS)}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class NoOffset:
    kind = "none"


@dataclass(frozen=True)
class IterativeReprojection:
    """Move points along the local z-axis toward the current fit.

    Each pass refits and shifts every target by ``step`` times the part of
    its residual lying outside ``clip`` robust standard deviations. With
    ``clip=0`` points are projected fully onto the fitted surface.
    """

    iterations: int = 3
    step: float = 1.0
    clip: float = 2.0
    kind = "reprojection"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.step <= 1:
            raise ValueError("step must be in (0, 1]")
        if self.clip < 0:
            raise ValueError("clip must be >= 0")


@dataclass(frozen=True)
class Learned:
    """Weights and/or offsets predicted by a trained network.

    ``model`` must provide ``predict(patch) -> (weights, offsets)`` for a
    :class:`LocalPatch` covering its largest scale, and a ``scales`` tuple.
    """

    model: object = field(compare=False)
    path: Optional[str] = None
    kind = "learned"


WeightStrategy = Union[Uniform, GaussianDistance, IRLS, Learned]
OffsetStrategy = Union[NoOffset, IterativeReprojection, Learned]


@dataclass(frozen=True)
class EstimatorConfig:
    order: int = 3
    scales: tuple = DEFAULT_SCALES
    weight: WeightStrategy = Uniform()
    offset: OffsetStrategy = NoOffset()
    truncation_threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "order", check_order(self.order))
        chain = ScaleChain(tuple(self.scales))
        chain.check_order(n_coeffs(1))
        object.__setattr__(self, "scales", chain.scales)
        if not 0 <= self.truncation_threshold < 1:
            raise ValueError("truncation threshold must be in [0, 1)")
        for strat in (self.weight, self.offset):
            if isinstance(strat, Learned):
                model_scales = tuple(getattr(strat.model, "scales", ()))
                if model_scales and model_scales != chain.scales:
                    raise ValueError(
                        f"learned model works on scales {model_scales}, config has {chain.scales}")

    @property
    def chain(self) -> ScaleChain:
        return ScaleChain(self.scales)

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "scales": list(self.scales),
            "weight": strategy_to_dict(self.weight),
            "offset": strategy_to_dict(self.offset),
            "truncation_threshold": self.truncation_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict, model_loader=None) -> "EstimatorConfig":
        known = {"order", "scales", "weight", "offset", "truncation_threshold"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown estimator config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("order", "truncation_threshold") if k in d}
        if "scales" in d:
            kw["scales"] = tuple(d["scales"])
        if "weight" in d:
            kw["weight"] = strategy_from_dict(d["weight"], model_loader)
        if "offset" in d:
            kw["offset"] = strategy_from_dict(d["offset"], model_loader)
        return cls(**kw)


_STRATEGIES = {c.kind: c for c in (Uniform, GaussianDistance, IRLS, NoOffset,
                                   IterativeReprojection)}


def strategy_to_dict(s) -> dict:
    if isinstance(s, Learned):
        return {"kind": "learned", "path": s.path}
    d = {"kind": s.kind}
    d.update({k: getattr(s, k) for k in s.__dataclass_fields__})
    return d


def strategy_from_dict(d: dict, model_loader=None):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "learned":
        if model_loader is None or not d.get("path"):
            raise ValueError("learned strategy needs a model path and a loader")
        return Learned(model_loader(d["path"]), d["path"])
    if kind not in _STRATEGIES:
        raise ValueError(f"unknown strategy kind {kind!r}")
    return _STRATEGIES[kind](**d)


@dataclass(frozen=True)
class NormalEstimate:
    query_index: int
    normal: np.ndarray
    diagnostics: dict


# -- weight and offset primitives --------------------------------------------


def _huber(u):
    au = np.abs(u)
    return np.where(au <= HUBER_C, 1.0, HUBER_C / np.maximum(au, HUBER_C))


def _tukey(u):
    r = u / TUKEY_C
    return np.where(np.abs(r) < 1, (1 - r * r) ** 2, 0.0)


KERNELS = {"huber": _huber, "tukey": _tukey}


def _coords(patch) -> np.ndarray:
    return np.asarray(getattr(patch, "coords", patch), dtype=float)


def robust_scale(residuals: np.ndarray) -> float:
    return MAD_TO_SIGMA * float(np.median(np.abs(residuals)))


def irls_weights(patch, order: int, kernel: str = "tukey", iterations: int = 3,
                 scale: float | None = None, weights: np.ndarray | None = None) -> np.ndarray:
    """Robust weights in (0, 1] from repeated fit-and-reweight passes.

    Each pass fits with the current weights (initially ``weights`` or
    uniform) and sets ``w_i = kernel(r_i / scale)``.
    """
    pts = _coords(patch)
    kern = KERNELS[kernel]
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    for _ in range(iterations):
        system = fit_system(FitProblem(pts, order, w))
        res = system.residuals
        s = robust_scale(res[w > 0]) if scale is None else scale
        floor = 1e-12 * max(float(np.max(np.abs(pts))), 1e-300)
        if s <= floor:
            u = np.where(np.abs(res) <= floor, 0.0, np.inf)
        else:
            u = res / s
        w = np.maximum(kern(u), WEIGHT_FLOOR)
    return w


def gaussian_weights(patch, bandwidth: float) -> np.ndarray:
    pts = _coords(patch)
    d2 = np.einsum("ij,ij->i", pts, pts)
    h = bandwidth * np.sqrt(np.max(d2))
    if h == 0:
        return np.ones(len(pts))
    return np.exp(-0.5 * d2 / (h * h))


def truncate_weights(weights: np.ndarray, threshold: float, min_survivors: int = 0) -> np.ndarray:
    """Zero every weight below ``threshold * max(weights)``."""
    if not 0 <= threshold < 1:
        raise ValueError("threshold must be in [0, 1)")
    w = np.asarray(weights, dtype=float)
    if threshold == 0:
        out = w.copy()
    else:
        out = np.where(w < threshold * np.max(w), 0.0, w)
    survivors = int(np.count_nonzero(out > 0))
    if survivors < min_survivors:
        raise TooFewPointsError(f"{survivors} weights survive truncation, need {min_survivors}")
    return out


def reproject_offsets(patch, order: int, weights: np.ndarray | None = None, iterations: int = 3,
                      step: float = 1.0, clip: float = 0.0) -> np.ndarray:
    """Offsets along local z pulling targets toward the refitted surface.

    ``clip`` is measured in robust standard deviations of the current
    residuals; only the excess beyond it is removed (times ``step``).
    """
    pts = _coords(patch)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    offsets = np.zeros_like(pts)
    for _ in range(iterations):
        res = fit_system(FitProblem(pts, order, w, offsets)).residuals
        band = clip * robust_scale(res[w > 0]) if clip > 0 else 0.0
        excess = res - np.clip(res, -band, band)
        offsets[:, 2] -= step * excess
    return offsets


# -- pipeline ----------------------------------------------------------------


@dataclass
class PreparedQuery:
    """Everything the fit needs for one query, before any weighting."""

    patch: LocalPatch  # largest scale, in the frame of the smallest
    fit_size: int
    chain: ScaleChain

    @property
    def fit_coords(self) -> np.ndarray:
        return self.patch.coords[: self.fit_size]


def prepare_query(cloud: PointCloud, index: SpatialIndex, query: int,
                  scales: Sequence[int]) -> PreparedQuery:
    chain = ScaleChain(tuple(scales)).clipped(len(cloud))
    nbhds = nested_neighborhoods(index, query, chain)
    frame = pca_frame(cloud, nbhds[-1])
    return PreparedQuery(to_local(frame, cloud, nbhds[0]), chain.smallest, chain)


def _strategy_weights(strategy, prepared: PreparedQuery, order: int, learned):
    pts = prepared.fit_coords
    if isinstance(strategy, Uniform):
        return np.ones(len(pts))
    if isinstance(strategy, GaussianDistance):
        return gaussian_weights(pts, strategy.bandwidth)
    if isinstance(strategy, IRLS):
        return irls_weights(pts, order, strategy.kernel, strategy.iterations, strategy.scale)
    if isinstance(strategy, Learned):
        return learned[0]
    raise TypeError(f"unsupported weight strategy {strategy!r}")


def _strategy_offsets(strategy, prepared: PreparedQuery, order: int, weights, learned):
    pts = prepared.fit_coords
    if isinstance(strategy, NoOffset):
        return np.zeros_like(pts)
    if isinstance(strategy, IterativeReprojection):
        return reproject_offsets(pts, order, weights, strategy.iterations, strategy.step,
                                 strategy.clip)
    if isinstance(strategy, Learned):
        return learned[1]
    raise TypeError(f"unsupported offset strategy {strategy!r}")


def fit_prepared(prepared: PreparedQuery, config: EstimatorConfig, order: int | None = None):
    """Weights, offsets and the solved system for a prepared query."""
    order = config.order if order is None else order
    learned = None
    for strat in (config.weight, config.offset):
        if isinstance(strat, Learned):
            learned = strat.model.predict(prepared.patch)
            break
    w = _strategy_weights(config.weight, prepared, order, learned)
    if config.truncation_threshold > 0:
        w = truncate_weights(w, config.truncation_threshold, n_coeffs(order))
    off = _strategy_offsets(config.offset, prepared, order, w, learned)
    system = fit_system(FitProblem(prepared.fit_coords, order, w, off))
    return w, off, system


def _diagnostics(order, fallback, system=None, weights=None, offsets=None, n=0):
    d = {"order_used": order, "fallback": fallback, "n_points": n,
         "condition": float("nan"), "effective_weights": float("nan"),
         "offset_max": 0.0, "offset_mean": 0.0}
    if system is not None:
        d["condition"] = system.condition_number
        d["effective_weights"] = float(weights.sum() ** 2 / np.sum(weights ** 2))
        mags = np.linalg.norm(offsets, axis=1)
        d["offset_max"] = float(mags.max())
        d["offset_mean"] = float(mags.mean())
    return d


def _degenerate_normal(cloud: PointCloud, index: SpatialIndex, query: int, k: int) -> np.ndarray:
    k = min(k, len(cloud))
    pts = cloud.points[index.knn(cloud.points[query], k)[0]]
    if len(pts) < 2:
        return np.array([0.0, 0.0, 1.0])
    centered = pts - pts.mean(axis=0)
    _, evecs = np.linalg.eigh(centered.T @ centered)
    n = evecs[:, 0]
    return n if n[np.argmax(np.abs(n))] >= 0 else -n


def estimate_normal(cloud: PointCloud, index: SpatialIndex, query: int,
                    config: EstimatorConfig = EstimatorConfig()) -> NormalEstimate:
    """Unoriented unit normal at point ``query``.

    Neighbourhoods too small or degenerate for the configured order fall
    back to an order-1 fit, then to the PCA normal; ``diagnostics["fallback"]``
    records which path was taken.
    """
    try:
        prepared = prepare_query(cloud, index, query, config.scales)
    except DegenerateFrameError:
        n = _degenerate_normal(cloud, index, query, config.scales[-1])
        return NormalEstimate(query, n, _diagnostics(0, "degenerate"))

    orders = [config.order] + ([1] if config.order > 1 else [])
    for order in orders:
        if prepared.fit_size < n_coeffs(order):
            continue
        try:
            w, off, system = fit_prepared(prepared, config, order)
        except (SingularFitError, TooFewPointsError) as exc:
            logger.debug("query %d: order %d fit failed: %s", query, order, exc)
            continue
        n_local = normal_from_jet(system.coefficients)
        n = normal_to_world(prepared.patch.frame, n_local)
        fallback = "" if order == config.order else "order1"
        return NormalEstimate(query, n, _diagnostics(order, fallback, system, w, off,
                                                     prepared.fit_size))
    n = prepared.patch.frame.normal.copy()
    return NormalEstimate(query, n, _diagnostics(0, "pca", n=prepared.fit_size))


def estimate_normals(cloud: PointCloud, config: EstimatorConfig = EstimatorConfig(),
                     queries: Iterable[int] | None = None, index: SpatialIndex | None = None,
                     workers: int = 1) -> tuple[np.ndarray, list[dict]]:
    """Normals (and diagnostics) for ``queries``, in query order."""
    index = build_index(cloud) if index is None else index
    queries = range(len(cloud)) if queries is None else list(queries)

    def one(q):
        return estimate_normal(cloud, index, int(q), config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    normals = np.array([r.normal for r in results]).reshape(-1, 3)
    return normals, [r.diagnostics for r in results]


def best_order_oracle(cloud: PointCloud, index: SpatialIndex, query: int,
                      orders: Iterable[int] = (1, 2, 3),
                      config: EstimatorConfig = EstimatorConfig()) -> tuple[int, float]:
    """Order whose estimate is closest to the ground truth (lowest order on ties).

    Only meaningful for evaluation; it reads ``cloud.gt_normals``.
    """
    from .evaluation import angle_error

    if cloud.gt_normals is None:
        raise ValueError("best-order selection needs ground-truth normals")
    best = None
    for order in sorted(set(int(o) for o in orders)):
        cfg = EstimatorConfig(order, config.scales, config.weight, config.offset,
                              config.truncation_threshold)
        est = estimate_normal(cloud, index, query, cfg)
        err = angle_error(est.normal, cloud.gt_normals[query])
        if best is None or err < best[1]:
            best = (order, err)
    return best
