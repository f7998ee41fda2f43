"""Normals for a whole synthetic scene under several estimator configurations.

Run: python demos/03_estimate_scene.py
"""

import numpy as np

from jetnormal import (IRLS, EstimatorConfig, GaussianDistance, IterativeReprojection, Uniform,
                       angle_error, auc_curve, build_index, estimate_normals, rmse)
from jetnormal import synth


def main():
    spec = synth.SceneSpec(synth.Quadric((0, 0, 0, 1.5, 0.5, -1.0)), n_points=5000,
                           noise_sigma=0.001, outlier_fraction=0.1, outlier_scale=0.02, seed=5)
    scene = synth.generate(spec)
    cloud = scene.cloud
    index = build_index(cloud)
    queries = scene.inliers
    print(f"{len(cloud)} points, {int(scene.outlier_mask.sum())} outliers")

    configs = {
        "order 1, uniform": EstimatorConfig(1, (64, 32, 16), Uniform()),
        "order 2, uniform": EstimatorConfig(2, (64, 32, 16), Uniform()),
        "order 2, gaussian": EstimatorConfig(2, (64, 32, 16), GaussianDistance()),
        "order 2, huber irls": EstimatorConfig(2, (64, 32, 16), IRLS("huber")),
        "order 2, huber + offsets": EstimatorConfig(2, (64, 32, 16), IRLS("huber"),
                                                    IterativeReprojection()),
    }
    for name, cfg in configs.items():
        normals, diag = estimate_normals(cloud, cfg, queries, index)
        err = angle_error(normals, cloud.gt_normals[queries])
        curve = auc_curve(err)
        within5 = curve.fractions[np.searchsorted(curve.thresholds, 5.0)]
        print(f"{name:26s} RMSE {rmse(err):6.3f} deg   within 5 deg {within5:.2f}"
              f"   AUC {curve.area():.3f}   fallbacks {sum(bool(d['fallback']) for d in diag)}")


if __name__ == "__main__":
    main()
