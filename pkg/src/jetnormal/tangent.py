"""PCA tangent frames and the world <-> local maps around a query point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import Neighborhood, PointCloud

# relative eigenvalue floor below which the in-plane spread is considered collapsed
_RANK_TOL = 1e-12


class DegenerateFrameError(ValueError):
    """The neighbourhood does not span a plane (too few or collinear points)."""


@dataclass(frozen=True)
class TangentFrame:
    """Rigid map into the local frame; ``rotation`` rows are the x, y, z axes."""

    origin: np.ndarray
    rotation: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[2]

    @classmethod
    def identity(cls, origin=(0.0, 0.0, 0.0)) -> "TangentFrame":
        return cls(np.asarray(origin, dtype=float), np.eye(3))


@dataclass(frozen=True)
class LocalPatch:
    coords: np.ndarray
    frame: TangentFrame
    source: Neighborhood | None = None

    def __len__(self):
        return self.coords.shape[0]

    @property
    def radius(self) -> float:
        """Largest distance of a patch point from the query."""
        return float(np.sqrt(np.max(np.einsum("ij,ij->i", self.coords, self.coords))))


def _canonical_sign(axis: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive; argmax picks the first on ties
    return axis if axis[np.argmax(np.abs(axis))] >= 0 else -axis


def frame_from_points(points: np.ndarray, origin: np.ndarray) -> TangentFrame:
    """PCA frame of ``points`` (covariance about their centroid) placed at ``origin``."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] < 3:
        raise DegenerateFrameError(f"need at least 3 points for a frame, got {points.shape[0]}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / points.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[2] <= 0 or evals[1] <= _RANK_TOL * evals[2]:
        raise DegenerateFrameError("neighbourhood points are coincident or collinear")
    axes = [_canonical_sign(evecs[:, j]) for j in (2, 1, 0)]
    rot = np.stack(axes)
    if np.linalg.det(rot) < 0:
        rot[1] = -rot[1]
    return TangentFrame(np.asarray(origin, dtype=float).copy(), rot)


def pca_frame(cloud: PointCloud, nbhd: Neighborhood) -> TangentFrame:
    """Tangent frame at the query point: z is the least-variance direction."""
    pts = cloud.points[nbhd.indices]
    return frame_from_points(pts, cloud.points[nbhd.query_index])


def to_local(frame: TangentFrame, cloud: PointCloud, nbhd: Neighborhood) -> LocalPatch:
    coords = (cloud.points[nbhd.indices] - frame.origin) @ frame.rotation.T
    return LocalPatch(coords, frame, nbhd)


def to_world(frame: TangentFrame, coords: np.ndarray) -> np.ndarray:
    return np.asarray(coords, dtype=float) @ frame.rotation + frame.origin


def normal_to_world(frame: TangentFrame, n_local: np.ndarray) -> np.ndarray:
    return frame.rotation.T @ np.asarray(n_local, dtype=float)


def direction_to_local(frame: TangentFrame, v_world: np.ndarray) -> np.ndarray:
    return frame.rotation @ np.asarray(v_world, dtype=float)
