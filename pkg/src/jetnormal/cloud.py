"""Point storage, exact k-nearest-neighbour search and nested neighbourhoods."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

#: neighbourhood sizes used by the classical pipeline by default
DEFAULT_SCALES = (700, 350, 175)
DEFAULT_K = DEFAULT_SCALES[0]


@dataclass(frozen=True)
class PointCloud:
    """World-space points with optional unit ground-truth normals."""

    points: np.ndarray
    gt_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.gt_normals is not None:
            nrm = np.ascontiguousarray(self.gt_normals, dtype=float)
            if nrm.shape != pts.shape:
                raise ValueError(f"gt_normals shape {nrm.shape} does not match points {pts.shape}")
            if not np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) <= 1e-6):
                raise ValueError("gt_normals must be unit vectors")
            nrm.setflags(write=False)
            object.__setattr__(self, "gt_normals", nrm)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Neighborhood:
    """Indices of the k points nearest to ``query_index``, nearest first."""

    query_index: int
    indices: np.ndarray
    distances: np.ndarray = field(repr=False)

    def __len__(self):
        return self.indices.shape[0]


@dataclass(frozen=True)
class ScaleChain:
    """Strictly decreasing neighbourhood sizes ``s_0 > s_1 > ... > s_K``."""

    scales: tuple

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValueError("scale chain must not be empty")
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly decreasing, got {scales}")
        if scales[-1] < 1:
            raise ValueError("scales must be positive")
        object.__setattr__(self, "scales", scales)

    @property
    def largest(self) -> int:
        return self.scales[0]

    @property
    def smallest(self) -> int:
        return self.scales[-1]

    def check_order(self, min_points: int) -> None:
        if self.smallest < min_points:
            raise ValueError(
                f"smallest scale {self.smallest} is below the {min_points} points the fit needs")

    def clipped(self, n: int) -> "ScaleChain":
        """Chain limited to ``n`` points, dropping scales that collapse together."""
        out = []
        for s in self.scales:
            s = min(s, n)
            if not out or s < out[-1]:
                out.append(s)
        return ScaleChain(tuple(out))


class SpatialIndex:
    """Exact k-NN over an immutable cloud.

    Results match a brute-force scan ordered by (squared distance, point
    index). The kd-tree only proposes candidates; the final ranking is done
    on explicitly computed squared distances so ties are resolved by index.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("cannot index an empty point cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def __len__(self):
        return len(self.cloud)

    def knn(self, point: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.cloud)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        point = np.asarray(point, dtype=float)
        if k == n:
            cand = np.arange(n)
        else:
            d, _ = self._tree.query(point, k=k)
            radius = float(np.atleast_1d(d)[-1])
            # slack so that every point tied with the k-th is a candidate
            radius = radius * (1 + 1e-9) + 1e-300
            cand = np.asarray(self._tree.query_ball_point(point, radius), dtype=np.intp)
        diff = self.cloud.points[cand] - point
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((cand, d2))[:k]
        return cand[order], np.sqrt(d2[order])


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def neighborhood(index: SpatialIndex, query: int, k: int = DEFAULT_K) -> Neighborhood:
    """The ``k`` nearest points to point ``query``; the query itself comes first."""
    n = len(index)
    if not 0 <= query < n:
        raise IndexError(f"query index {query} out of range for {n} points")
    idx, dist = index.knn(index.cloud.points[query], k)
    # a coincident point with a lower index would otherwise precede the query
    if idx[0] != query:
        hits = np.flatnonzero(idx == query)
        pos = int(hits[0]) if hits.size else k - 1
        idx = np.concatenate(([query], np.delete(idx, pos)))
        dist = np.concatenate(([0.0], np.delete(dist, pos)))
    return Neighborhood(int(query), idx, dist)


def scale_subset(nbhd: Neighborhood, s: int) -> Neighborhood:
    if not 1 <= s <= len(nbhd):
        raise ValueError(f"scale {s} outside [1, {len(nbhd)}]")
    return Neighborhood(nbhd.query_index, nbhd.indices[:s], nbhd.distances[:s])


def nested_neighborhoods(index: SpatialIndex, query: int, chain: ScaleChain | Sequence[int]):
    """Neighbourhoods for every scale of ``chain``, largest first."""
    if not isinstance(chain, ScaleChain):
        chain = ScaleChain(tuple(chain))
    top = neighborhood(index, query, chain.largest)
    return [scale_subset(top, s) for s in chain.scales]
