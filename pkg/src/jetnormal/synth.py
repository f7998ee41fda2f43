"""Seeded synthetic height-field scenes with analytic normals.

Every random draw comes from ``numpy.random.Generator(PCG64(seed))`` in a
fixed order, so a spec and seed pin the generated cloud bit for bit on a
given numpy version.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import jet as _jet
from .cloud import PointCloud, build_index
from .tangent import LocalPatch, direction_to_local

RNG_NAME = "numpy.random.PCG64"

#: noise levels (fraction of the bounding-box diagonal) of the standard benchmark
NOISE_LEVELS = (0.0, 0.00125, 0.006, 0.012)


# -- surfaces ---------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """The plane z = 0."""

    kind = "plane"

    def height(self, x, y):
        return np.zeros_like(np.asarray(x, dtype=float))

    def gradient(self, x, y):
        z = np.zeros_like(np.asarray(x, dtype=float))
        return z, z.copy()


@dataclass(frozen=True)
class Jet:
    """Height field ``z = sum beta_(a,b) x^a y^b`` in the jet coefficient order."""

    order: int
    coeffs: tuple
    kind = "jet"

    def __post_init__(self):
        _jet.check_order(self.order)
        c = tuple(float(v) for v in self.coeffs)
        if len(c) != _jet.n_coeffs(self.order):
            raise ValueError(f"order {self.order} jet needs {_jet.n_coeffs(self.order)} coefficients")
        object.__setattr__(self, "coeffs", c)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        return (_jet.design_matrix(self.order, x.ravel(), np.asarray(y, float).ravel())
                @ np.array(self.coeffs)).reshape(x.shape)

    def gradient(self, x, y):
        x = np.asarray(x, dtype=float)
        dx, dy = _jet.design_derivatives(self.order, x.ravel(), np.asarray(y, float).ravel())
        c = np.array(self.coeffs)
        return (dx @ c).reshape(x.shape), (dy @ c).reshape(x.shape)


@dataclass(frozen=True)
class Quadric(Jet):
    """``z = c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2``."""

    order: int = 2
    coeffs: tuple = (0.0,) * 6
    kind = "quadric"

    def __init__(self, coeffs):
        object.__setattr__(self, "order", 2)
        object.__setattr__(self, "coeffs", tuple(coeffs))
        self.__post_init__()


@dataclass(frozen=True)
class Composite:
    """Different surfaces on x-intervals ``[x_lo, x_hi)``; later pieces win on overlap."""

    pieces: tuple
    kind = "composite"

    def __post_init__(self):
        pieces = tuple((float(lo), float(hi), s) for lo, hi, s in self.pieces)
        if not pieces:
            raise ValueError("composite surface needs at least one piece")
        object.__setattr__(self, "pieces", pieces)

    def _piece(self, x):
        x = np.asarray(x, dtype=float)
        which = np.zeros(x.shape, dtype=np.intp)
        for k, (lo, hi, _) in enumerate(self.pieces):
            which[(x >= lo) & (x < hi)] = k
        return which

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        which = self._piece(x)
        z = np.zeros(x.shape)
        for k, (_, _, s) in enumerate(self.pieces):
            m = which == k
            z[m] = s.height(x[m], y[m])
        return z

    def gradient(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        which = self._piece(x)
        gx = np.zeros(x.shape)
        gy = np.zeros(x.shape)
        for k, (_, _, s) in enumerate(self.pieces):
            m = which == k
            gx[m], gy[m] = s.gradient(x[m], y[m])
        return gx, gy


Surface = Union[Plane, Jet, Quadric, Composite]


def analytic_normal(surface: Surface, x, y) -> np.ndarray:
    """Upward unit normal ``(-f_x, -f_y, 1) / norm`` of the height field."""
    gx, gy = surface.gradient(x, y)
    n = np.stack([-np.asarray(gx), -np.asarray(gy), np.ones_like(gx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


# -- density patterns -------------------------------------------------------


@dataclass(frozen=True)
class UniformDensity:
    kind = "uniform"

    def keep_probability(self, x):
        return np.ones_like(x)


@dataclass(frozen=True)
class Stripes:
    """Bands of width ``period / 2`` across x where only ``keep_fraction`` survives."""

    period: float = 0.5
    keep_fraction: float = 0.2
    kind = "stripes"

    def keep_probability(self, x):
        phase = np.mod(x + 1.0, self.period) / self.period
        return np.where(phase >= 0.5, self.keep_fraction, 1.0)


@dataclass(frozen=True)
class Gradient:
    """Keep probability falling linearly from 1 at x = -1 to ``min_fraction`` at x = 1."""

    min_fraction: float = 0.1
    kind = "gradient"

    def keep_probability(self, x):
        return 1.0 - (1.0 - self.min_fraction) * (np.asarray(x) + 1.0) / 2.0


Density = Union[UniformDensity, Stripes, Gradient]


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene over the square ``[-1, 1]^2``.

    ``noise_sigma`` and ``outlier_scale`` are fractions of the clean
    bounding-box diagonal. ``noise_mode`` is ``"normal"`` (displacement
    along the true normal) or ``"isotropic"`` (3D Gaussian).
    """

    surface: Surface = Plane()
    n_points: int = 2000
    noise_sigma: float = 0.0
    density: Density = UniformDensity()
    outlier_fraction: float = 0.0
    outlier_scale: float = 0.05
    seed: int = 0
    noise_mode: str = "normal"

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("scene needs at least one point")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.outlier_scale < 0:
            raise ValueError("outlier_scale must be >= 0")
        if self.noise_mode not in ("normal", "isotropic"):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        for name in ("keep_fraction", "min_fraction"):
            v = getattr(self.density, name, None)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"density {name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "surface": surface_to_dict(self.surface),
            "n_points": self.n_points,
            "noise_sigma": self.noise_sigma,
            "density": {"kind": self.density.kind, **asdict(self.density)},
            "outlier_fraction": self.outlier_fraction,
            "outlier_scale": self.outlier_scale,
            "seed": self.seed,
            "noise_mode": self.noise_mode,
            "rng": RNG_NAME,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d.pop("rng", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        if "surface" in d:
            d["surface"] = surface_from_dict(d["surface"])
        if "density" in d:
            dens = dict(d["density"])
            kind = dens.pop("kind", "uniform")
            if kind not in _DENSITIES:
                raise ValueError(f"unknown density kind {kind!r}")
            d["density"] = _DENSITIES[kind](**dens)
        return cls(**d)


_DENSITIES = {"uniform": UniformDensity, "stripes": Stripes, "gradient": Gradient}


def surface_to_dict(s: Surface) -> dict:
    if isinstance(s, Composite):
        return {"kind": "composite",
                "pieces": [[lo, hi, surface_to_dict(p)] for lo, hi, p in s.pieces]}
    if isinstance(s, Quadric):
        return {"kind": "quadric", "coeffs": list(s.coeffs)}
    if isinstance(s, Jet):
        return {"kind": "jet", "order": s.order, "coeffs": list(s.coeffs)}
    return {"kind": "plane"}


def surface_from_dict(d: dict) -> Surface:
    kind = d.get("kind")
    if kind == "plane":
        return Plane()
    if kind == "quadric":
        return Quadric(d["coeffs"])
    if kind == "jet":
        return Jet(int(d["order"]), tuple(d["coeffs"]))
    if kind == "composite":
        return Composite(tuple((lo, hi, surface_from_dict(p)) for lo, hi, p in d["pieces"]))
    raise ValueError(f"unknown surface kind {kind!r}")


@dataclass(frozen=True)
class LabeledCloud:
    """Generated points with the true normal of the surface point each came from."""

    cloud: PointCloud
    outlier_mask: np.ndarray
    spec: SceneSpec | None = field(default=None, compare=False)

    @property
    def inliers(self) -> np.ndarray:
        return np.flatnonzero(~self.outlier_mask)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def generate(spec: SceneSpec) -> LabeledCloud:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    keep_u = rng.uniform(size=n)
    keep = keep_u < spec.density.keep_probability(xy[:, 0])
    if not np.any(keep):
        raise ValueError("density pattern removed every point")
    xy = xy[keep]
    z = spec.surface.height(xy[:, 0], xy[:, 1])
    pts = np.column_stack([xy, z])
    normals = analytic_normal(spec.surface, xy[:, 0], xy[:, 1])
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    m = len(pts)
    if spec.noise_mode == "normal":
        pts = pts + rng.normal(0.0, 1.0, size=m)[:, None] * (spec.noise_sigma * diag) * normals
    else:
        pts = pts + rng.normal(0.0, spec.noise_sigma * diag, size=(m, 3))

    n_out = _round_half_up(spec.outlier_fraction * m)
    mask = np.zeros(m, dtype=bool)
    if n_out:
        idx = np.sort(rng.choice(m, size=n_out, replace=False))
        dirs = rng.normal(size=(n_out, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts[idx] += spec.outlier_scale * diag * dirs
        mask[idx] = True
    return LabeledCloud(PointCloud(pts, normals), mask, spec)


def random_jet(rng: np.random.Generator, order: int, curvature: float = 1.0) -> Jet:
    """Jet with zero constant and slope terms and N(0, curvature) higher terms."""
    c = np.zeros(_jet.n_coeffs(order))
    c[3:] = rng.normal(0.0, curvature, size=c.size - 3)
    return Jet(order, tuple(c))


# -- local patches for the learned model ------------------------------------


@dataclass(frozen=True)
class PatchSample:
    patch: LocalPatch  # largest scale, in the PCA frame of the smallest scale
    gt_normal: np.ndarray  # world frame
    fit_size: int

    @property
    def gt_local(self) -> np.ndarray:
        return direction_to_local(self.patch.frame, self.gt_normal)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_patches(n_patches: int, scales=(64, 32, 16), noise_sigma: float = 0.01,
                 outlier_fraction: float = 0.0, outlier_scale: float = 0.3,
                 curvature: float = 0.0, seed: int = 0) -> list[PatchSample]:
    """Single-neighbourhood clouds around a query at the origin.

    Each patch samples ``scales[0]`` points in the unit disk of a randomly
    rotated and translated height field (a plane when ``curvature`` is 0,
    otherwise a random 3-jet). Noise and outlier displacement are in units
    of the disk radius. The returned patch is exactly what the estimator
    pipeline would build for point 0.
    """
    from .estimators import prepare_query

    rng = np.random.default_rng(seed)
    k = int(scales[0])
    out = []
    for _ in range(n_patches):
        surf = random_jet(rng, 3, curvature) if curvature > 0 else Plane()
        r = np.sqrt(rng.uniform(size=k - 1))
        th = rng.uniform(0.0, 2 * np.pi, size=k - 1)
        xy = np.vstack([[0.0, 0.0], np.column_stack([r * np.cos(th), r * np.sin(th)])])
        local = np.column_stack([xy, surf.height(xy[:, 0], xy[:, 1])])
        nrm = analytic_normal(surf, xy[:, 0], xy[:, 1])
        local[1:] += rng.normal(0.0, noise_sigma, size=k - 1)[:, None] * nrm[1:]
        n_out = _round_half_up(outlier_fraction * (k - 1))
        if n_out:
            idx = 1 + rng.choice(k - 1, size=n_out, replace=False)
            dirs = rng.normal(size=(n_out, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            local[idx] += outlier_scale * dirs
        rot = _random_rotation(rng)
        shift = rng.uniform(-5.0, 5.0, size=3)
        cloud = PointCloud(local @ rot.T + shift)
        prepared = prepare_query(cloud, build_index(cloud), 0, scales)
        out.append(PatchSample(prepared.patch, rot @ nrm[0], prepared.fit_size))
    return out


def cloud_patches(cloud: PointCloud, queries, scales=(64, 32, 16)) -> list[PatchSample]:
    """Patches around existing points of a cloud that carries ground-truth normals."""
    from .estimators import prepare_query

    if cloud.gt_normals is None:
        raise ValueError("training patches need ground-truth normals")
    index = build_index(cloud)
    out = []
    for q in queries:
        prepared = prepare_query(cloud, index, int(q), scales)
        out.append(PatchSample(prepared.patch, cloud.gt_normals[int(q)], prepared.fit_size))
    return out
