"""How much does each point's weight move the fitted normal?

A patch of a plane with one point lifted far off the surface. The analytic
derivative dn/dw_i picks the outlier out; a finite difference agrees.

Run: python demos/02_weight_sensitivity.py
"""

import numpy as np

from jetnormal import (FitProblem, dnormal_dweight, normal_from_jet, sensitivity_report,
                       wls_fit)


def main():
    rng = np.random.default_rng(3)
    n = 40
    xy = rng.uniform(-1, 1, size=(n, 2))
    pts = np.column_stack([xy, 0.01 * rng.normal(size=n)])
    pts[17, 2] = 10.0
    problem = FitProblem(pts, 1)

    rep = sensitivity_report(problem)
    order = np.argsort(rep.magnitudes)[::-1]
    print("five most influential points (index, |dn/dw|, residual):")
    for i in order[:5]:
        print(f"  {i:3d}  {rep.magnitudes[i]:.3e}  {rep.residuals[i]:+.3f}")
    print("outlier is point 17; ranked first:", order[0] == 17)

    # check one column against a central difference
    h = 1e-6
    w = np.ones(n)
    wp, wm = w.copy(), w.copy()
    wp[17] += h
    wm[17] -= h
    fd = (normal_from_jet(wls_fit(FitProblem(pts, 1, wp)))
          - normal_from_jet(wls_fit(FitProblem(pts, 1, wm)))) / (2 * h)
    an = dnormal_dweight(problem, rep.coefficients, 17)
    print("\ndn/dw_17 analytic:", an)
    print("dn/dw_17 central  :", fd)

    # derivatives are tangent to the unit sphere
    print("max |n . dn/dw_i|:", np.abs(rep.dnormal_dw @ normal_from_jet(rep.coefficients)).max())


if __name__ == "__main__":
    main()
