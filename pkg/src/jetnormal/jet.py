"""Truncated bivariate polynomial (n-jet) height fields and their weighted fit.

Coefficients are stored degree by degree; inside degree ``k`` the exponent
of ``x`` decreases::

    1 | x, y | x^2, xy, y^2 | x^3, x^2 y, x y^2, y^3 | ...

so ``beta[1]`` and ``beta[2]`` are the slopes along x and y at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

MAX_ORDER = 6
RIDGE = 1e-9
# refinement passes against the undamped matrix after the damped solve
REFINE_STEPS = 2


class SingularFitError(np.linalg.LinAlgError):
    """The weighted normal equations could not be solved."""


def check_order(order: int) -> int:
    order = int(order)
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"jet order must be in [1, {MAX_ORDER}], got {order}")
    return order


def n_coeffs(order: int) -> int:
    return (order + 1) * (order + 2) // 2


@lru_cache(maxsize=None)
def exponents(order: int) -> tuple[tuple[int, int], ...]:
    """(x-exponent, y-exponent) of every coefficient, in storage order."""
    return tuple((k - j, j) for k in range(order + 1) for j in range(k + 1))


@lru_cache(maxsize=None)
def _exp_arrays(order: int):
    e = np.array(exponents(order), dtype=np.intp)
    return e[:, 0], e[:, 1], e.sum(axis=1)


def degrees(order: int) -> np.ndarray:
    return _exp_arrays(order)[2]


def design_matrix(order: int, x, y) -> np.ndarray:
    """Rows of monomials for each (x, y); shape ``(len(x), n_coeffs(order))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    ax, ay, _ = _exp_arrays(order)
    xp = x[:, None] ** np.arange(order + 1)
    yp = y[:, None] ** np.arange(order + 1)
    return xp[:, ax] * yp[:, ay]


def design_derivatives(order: int, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the design rows with respect to x and y."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    ax, ay, _ = _exp_arrays(order)
    p = np.arange(order + 1)
    xp = x[:, None] ** p
    yp = y[:, None] ** p
    xm = np.zeros_like(xp)
    ym = np.zeros_like(yp)
    xm[:, 1:] = xp[:, :-1]
    ym[:, 1:] = yp[:, :-1]
    return ax * xm[:, ax] * yp[:, ay], ay * xp[:, ax] * ym[:, ay]


def monomial_row(order: int, x: float, y: float) -> np.ndarray:
    return design_matrix(order, x, y)[0]


@dataclass(frozen=True)
class JetCoefficients:
    order: int
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (n_coeffs(self.order),):
            raise ValueError(
                f"order {self.order} needs {n_coeffs(self.order)} coefficients, got {beta.shape}")
        object.__setattr__(self, "beta", beta)

    @property
    def slopes(self) -> tuple[float, float]:
        return float(self.beta[1]), float(self.beta[2])


@dataclass
class FitProblem:
    """Local points, per-point weights and offsets for one jet fit.

    ``points`` are (x, y, z) rows in the tangent frame; offsets are added
    before fitting. Missing weights mean uniform, missing offsets mean zero.
    """

    points: np.ndarray
    order: int = 3
    weights: np.ndarray | None = None
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.order = check_order(self.order)
        self.points = np.asarray(getattr(self.points, "coords", self.points), dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must have shape (P, 3), got {self.points.shape}")
        p = self.points.shape[0]
        if self.weights is None:
            self.weights = np.ones(p)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.offsets is None:
            self.offsets = np.zeros((p, 3))
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.weights.shape != (p,):
            raise ValueError(f"expected {p} weights, got shape {self.weights.shape}")
        if self.offsets.shape != (p, 3):
            raise ValueError(f"expected offsets of shape {(p, 3)}, got {self.offsets.shape}")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.all(np.isfinite(self.offsets)) or not np.all(np.isfinite(self.points)):
            raise ValueError("points and offsets must be finite")

    def __len__(self):
        return self.points.shape[0]

    @property
    def shifted(self) -> np.ndarray:
        return self.points + self.offsets


class WLSSystem:
    """The scaled, damped normal equations of one :class:`FitProblem`.

    x and y are divided by the patch radius (largest in-plane distance of
    a positively weighted point from the origin) and weights by their maximum
    before the system is formed. The matrix is Cholesky-factorised with
    ridge ``RIDGE * trace / n_coeffs`` on the diagonal; solutions are then
    refined against the undamped matrix, which keeps the ridge from biasing
    well-posed fits while still bounding near-singular ones.
    """

    def __init__(self, problem: FitProblem):
        self.problem = problem
        order = problem.order
        self.order = order
        ncoef = n_coeffs(order)
        w = problem.weights
        active = w > 0
        if np.count_nonzero(active) < ncoef:
            raise SingularFitError(
                f"order {order} needs {ncoef} positively weighted points, got {np.count_nonzero(active)}")
        base = problem.points[active, :2]
        radius = float(np.sqrt(np.max(np.einsum("ij,ij->i", base, base))))
        if not radius > 0:
            raise SingularFitError("all weighted points lie on the z-axis")
        self.radius = radius
        self.weight_scale = float(np.max(w))
        self.w = w / self.weight_scale

        pts = problem.shifted
        self.u = pts[:, 0] / radius
        self.v = pts[:, 1] / radius
        self.t = pts[:, 2]
        self.design = design_matrix(order, self.u, self.v)
        self.degrees = degrees(order)

        wm = self.w[:, None] * self.design
        self.matrix = self.design.T @ wm
        self.rhs = wm.T @ self.t
        self.ridge = RIDGE * np.trace(self.matrix) / ncoef
        damped = self.matrix + self.ridge * np.eye(ncoef)
        try:
            if not np.all(np.isfinite(damped)):
                raise np.linalg.LinAlgError("non-finite normal matrix")
            self._factor = cho_factor(damped)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularFitError(f"weighted normal equations are singular: {exc}") from exc
        self.beta_scaled = self.solve(self.rhs)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the (refined) inverse of the scaled normal matrix."""
        x = cho_solve(self._factor, rhs)
        for _ in range(REFINE_STEPS):
            x = x + cho_solve(self._factor, rhs - self.matrix @ x)
        return x

    @cached_property
    def coefficients(self) -> JetCoefficients:
        return JetCoefficients(self.order, self.beta_scaled / self.radius ** self.degrees)

    @cached_property
    def residuals(self) -> np.ndarray:
        """Target minus fitted height at every (offset) point."""
        return self.t - self.design @ self.beta_scaled

    @cached_property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix + self.ridge * np.eye(self.matrix.shape[0])))


def fit_system(problem: FitProblem) -> WLSSystem:
    return WLSSystem(problem)


def wls_fit(problem: FitProblem) -> JetCoefficients:
    """Weighted least-squares jet through the offset points of ``problem``."""
    return WLSSystem(problem).coefficients


def evaluate(coeffs: JetCoefficients, x, y):
    vals = design_matrix(coeffs.order, x, y) @ coeffs.beta
    return float(vals[0]) if np.ndim(x) == 0 and np.ndim(y) == 0 else vals


def normal_from_slopes(b1: float, b2: float) -> np.ndarray:
    n = np.array([-b1, -b2, 1.0])
    return n / np.sqrt(b1 * b1 + b2 * b2 + 1.0)


def normal_from_jet(coeffs: JetCoefficients) -> np.ndarray:
    """Unit normal of the jet at the origin, in the local frame (z > 0)."""
    return normal_from_slopes(*coeffs.slopes)


def normal_jacobian(b1: float, b2: float) -> np.ndarray:
    """d normal / d (beta_1, beta_2) as a 3x2 matrix."""
    s = np.sqrt(1.0 + b1 * b1 + b2 * b2)
    raw = np.array([-b1, -b2, 1.0])
    jac = np.zeros((3, 2))
    jac[0, 0] = -1.0 / s
    jac[1, 1] = -1.0 / s
    jac -= np.outer(raw, [b1, b2]) / s ** 3
    return jac
