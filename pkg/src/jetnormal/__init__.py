"""Normal estimation on point clouds by weighted n-jet fitting."""

__version__ = "0.1.0"

from .cloud import (DEFAULT_SCALES, Neighborhood, PointCloud, ScaleChain, SpatialIndex,
                    build_index, nested_neighborhoods, neighborhood, scale_subset)
from .estimators import (IRLS, EstimatorConfig, GaussianDistance, IterativeReprojection, Learned,
                         NoOffset, NormalEstimate, Uniform, best_order_oracle, estimate_normal,
                         estimate_normals, irls_weights, reproject_offsets, truncate_weights)
from .evaluation import angle_error, auc_curve, error_map_export, rmse, scene_averaged_rmse
from .jet import (FitProblem, JetCoefficients, SingularFitError, normal_from_jet, wls_fit)
from .sensitivity import dbeta_dweight, dnormal_dweight, outlier_impact_ranking, sensitivity_report
from .tangent import DegenerateFrameError, TangentFrame, frame_from_points, pca_frame, to_local

__all__ = [
    "DEFAULT_SCALES", "Neighborhood", "PointCloud", "ScaleChain", "SpatialIndex", "build_index",
    "nested_neighborhoods", "neighborhood", "scale_subset",
    "IRLS", "EstimatorConfig", "GaussianDistance", "IterativeReprojection", "Learned", "NoOffset",
    "NormalEstimate", "Uniform", "best_order_oracle", "estimate_normal", "estimate_normals",
    "irls_weights", "reproject_offsets", "truncate_weights",
    "angle_error", "auc_curve", "error_map_export", "rmse", "scene_averaged_rmse",
    "FitProblem", "JetCoefficients", "SingularFitError", "normal_from_jet", "wls_fit",
    "dbeta_dweight", "dnormal_dweight", "outlier_impact_ranking", "sensitivity_report",
    "DegenerateFrameError", "TangentFrame", "frame_from_points", "pca_frame", "to_local",
]
