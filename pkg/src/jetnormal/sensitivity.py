"""Derivatives of a weighted jet fit, and of its normal, with respect to point weights.

For the weighted normal equations ``A beta = M^T W z`` with ``A = M^T W M``,
differentiating in ``w_i`` gives

    d beta / d w_i = A^{-1} M_i^T (z_i - z_i'),     z_i' = J(beta; x_i, y_i)

so a point's leverage on the fit grows linearly with its distance from the
fitted surface. The normal derivative follows by the chain rule through
``(-b1, -b2, 1) / sqrt(1 + b1^2 + b2^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jet import (FitProblem, JetCoefficients, WLSSystem, evaluate, fit_system, normal_from_jet,
                  normal_jacobian, wls_fit)

DEFAULT_STEP = 1e-6


@dataclass(frozen=True)
class SensitivityReport:
    coefficients: JetCoefficients
    normal: np.ndarray
    dbeta_dw: np.ndarray  # (P, n_coeffs)
    dnormal_dw: np.ndarray  # (P, 3)
    residuals: np.ndarray  # (P,)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.dnormal_dw, axis=1)


def _residuals(problem: FitProblem, coeffs: JetCoefficients) -> np.ndarray:
    pts = problem.shifted
    return pts[:, 2] - evaluate(coeffs, pts[:, 0], pts[:, 1])


def _dbeta_columns(system: WLSSystem, residuals: np.ndarray, rows=None) -> np.ndarray:
    design = system.design if rows is None else system.design[rows]
    res = residuals if rows is None else residuals[rows]
    cols = system.solve(design.T)  # A'^{-1} M'_i^T, one column per point
    cols = cols / system.radius ** system.degrees[:, None]
    return (cols * (res / system.weight_scale)).T


def _check_index(problem: FitProblem, i: int) -> int:
    if not 0 <= i < len(problem):
        raise IndexError(f"point index {i} out of range for {len(problem)} points")
    return int(i)


def dbeta_dweight(problem: FitProblem, coeffs: JetCoefficients, i: int) -> np.ndarray:
    """Closed-form derivative of the coefficient vector in the weight of point ``i``."""
    i = _check_index(problem, i)
    system = fit_system(problem)
    return _dbeta_columns(system, _residuals(problem, coeffs), [i])[0]


def dnormal_dweight(problem: FitProblem, coeffs: JetCoefficients, i: int) -> np.ndarray:
    db = dbeta_dweight(problem, coeffs, i)
    return normal_jacobian(*coeffs.slopes) @ db[1:3]


def sensitivity_report(problem: FitProblem) -> SensitivityReport:
    """Weight derivatives for every point of ``problem`` at its own fit."""
    system = fit_system(problem)
    coeffs = system.coefficients
    res = _residuals(problem, coeffs)
    db = _dbeta_columns(system, res)
    dn = db[:, 1:3] @ normal_jacobian(*coeffs.slopes).T
    return SensitivityReport(coeffs, normal_from_jet(coeffs), db, dn, res)


def outlier_impact_ranking(problem: FitProblem) -> list[tuple[int, float]]:
    """Points ordered by how strongly their weight moves the normal, largest first."""
    mags = sensitivity_report(problem).magnitudes
    order = np.lexsort((np.arange(mags.size), -mags))
    return [(int(i), float(mags[i])) for i in order]


def _perturbed(problem: FitProblem, i: int, w: float) -> FitProblem:
    weights = problem.weights.copy()
    weights[i] = w
    return FitProblem(problem.points, problem.order, weights, problem.offsets)


def finite_difference_dbeta(problem: FitProblem, i: int, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central difference of the full damped solve; the lower step is clamped at zero weight."""
    i = _check_index(problem, i)
    w = problem.weights[i]
    hi, lo = w + h, max(w - h, 0.0)
    b_hi = wls_fit(_perturbed(problem, i, hi)).beta
    b_lo = wls_fit(_perturbed(problem, i, lo)).beta
    return (b_hi - b_lo) / (hi - lo)


def finite_difference_dnormal(problem: FitProblem, i: int, h: float = DEFAULT_STEP) -> np.ndarray:
    i = _check_index(problem, i)
    w = problem.weights[i]
    hi, lo = w + h, max(w - h, 0.0)
    n_hi = normal_from_jet(wls_fit(_perturbed(problem, i, hi)))
    n_lo = normal_from_jet(wls_fit(_perturbed(problem, i, lo)))
    return (n_hi - n_lo) / (hi - lo)
