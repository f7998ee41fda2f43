"""Fit jets of increasing order to a noisy bump and read off the normal.

Run: python demos/01_jet_fit.py
"""

import numpy as np

from jetnormal import FitProblem, normal_from_jet, wls_fit
from jetnormal.jet import design_matrix, n_coeffs


def main():
    rng = np.random.default_rng(0)
    xy = rng.uniform(-0.3, 0.3, size=(80, 2))
    # z = 0.2x + 0.1y + x^2 - 0.5y^2 + 0.3x^3, a cubic through the origin
    true = np.zeros(n_coeffs(3))
    true[[1, 2, 3, 5, 6]] = [0.2, 0.1, 1.0, -0.5, 0.3]
    z = design_matrix(3, xy[:, 0], xy[:, 1]) @ true
    n_true = np.array([-0.2, -0.1, 1.0]) / np.linalg.norm([-0.2, -0.1, 1.0])
    print("true normal:", np.round(n_true, 6))

    for noise in (0.0, 0.002):
        pts = np.column_stack([xy, z + noise * rng.normal(size=len(z))])
        print(f"\nheight noise {noise}")
        for order in (1, 2, 3, 4):
            fit = wls_fit(FitProblem(pts, order))
            n = normal_from_jet(fit)
            ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(n, n_true)), abs(n @ n_true)))
            print(f"  order {order}: slopes ({fit.beta[1]:+.5f}, {fit.beta[2]:+.5f})  "
                  f"angle error {ang:.2e} deg")

    # an order-3 fit of noise-free cubic data recovers the generator exactly
    fit = wls_fit(FitProblem(np.column_stack([xy, z]), 3))
    print("\nmax |beta - true| for order 3, no noise:", np.abs(fit.beta - true).max())

    # down-weighting changes the answer only through the relative weights
    w = rng.uniform(0.2, 1.0, len(z))
    a = wls_fit(FitProblem(pts, 2, w)).beta
    b = wls_fit(FitProblem(pts, 2, 1e6 * w)).beta
    print("weight scale invariance, max difference:", np.abs(a - b).max())


if __name__ == "__main__":
    main()
