"""Soft-grasp benchmarking: deformation between pre-grasp and during-grasp point clouds,
measured with a density-aware Chamfer distance and folded into a grasp score."""

__version__ = "0.1.0"

from .alignment import (ICPParams, ICPResult, RigidTransform, apply_transform,
                        best_fit_transform, icp_align, pca_align)
from .metric import (DCDParams, Partial, Successful, Unsuccessful, dcd, grasp_score,
                     one_sided_dcd)
from .pipeline import (AggregateCell, PipelineConfig, ScoreRecord, TrialRecord, aggregate,
                       evaluate_trial, export_results, load_manifest, run_batch)
from .pointcloud import (NNIndex, PointCloud, SegmentationParams, build_index, centroid,
                         covariance, load_cloud, nearest, save_cloud, segment_by_color,
                         voxel_downsample)

__all__ = [
    "AggregateCell", "DCDParams", "ICPParams", "ICPResult", "NNIndex", "Partial",
    "PipelineConfig", "PointCloud", "RigidTransform", "ScoreRecord", "SegmentationParams",
    "Successful", "TrialRecord", "Unsuccessful", "aggregate", "apply_transform",
    "best_fit_transform", "build_index", "centroid", "covariance", "dcd", "evaluate_trial",
    "export_results", "grasp_score", "icp_align", "load_cloud", "load_manifest", "nearest",
    "one_sided_dcd", "pca_align", "run_batch", "save_cloud", "segment_by_color",
    "voxel_downsample",
]
