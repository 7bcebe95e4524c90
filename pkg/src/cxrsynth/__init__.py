"""Chest X-ray synthesis toolkit: anatomy-aware mask captioning, structured
prompt grammar, self-assessment validation, quality metrics, pipeline
orchestration, and a blinded reader-study service."""

__version__ = "0.1.0"

from .captioning import (
    Band,
    CtrBand,
    Finding,
    OverlapReport,
    Severity,
    SeverityPolicy,
    caption,
    cardiothoracic_ratio,
    compute_overlap_report,
    grade_severity,
    select_location,
)
from .grammar import PromptSpec, parse, render
from .masks import (
    BoundingBox,
    DiseaseClass,
    OrganMap,
    PathologyAnnotation,
    RasterMask,
    area,
    bounding_box,
    connected_components,
    intersect,
    load_organ_map,
    load_pathology_mask,
    normalize_geometry,
    union,
)
from .matching import (
    MatchPolicy,
    MatchReport,
    RetryResult,
    recaption_and_match,
    run_with_retries,
)
from .metrics import (
    AgreementStats,
    FeatureGaussian,
    RatingMatrix,
    binarize_realism,
    dice,
    fleiss_kappa,
    frechet_distance,
    gaussian_stats,
    icc_2_1,
    iou,
    ms_ssim,
)
from .pipeline import (
    Rejection,
    StubMaskToImage,
    StubTextToMask,
    build_dataset,
    run_pipeline,
    stub_text_to_mask,
)
from .zones import Location, ZoneMap, define_organ_parts

__all__ = [
    "AgreementStats",
    "Band",
    "BoundingBox",
    "CtrBand",
    "DiseaseClass",
    "FeatureGaussian",
    "Finding",
    "Location",
    "MatchPolicy",
    "MatchReport",
    "OrganMap",
    "OverlapReport",
    "PathologyAnnotation",
    "PromptSpec",
    "RasterMask",
    "RatingMatrix",
    "Rejection",
    "RetryResult",
    "Severity",
    "SeverityPolicy",
    "StubMaskToImage",
    "StubTextToMask",
    "ZoneMap",
    "area",
    "binarize_realism",
    "bounding_box",
    "build_dataset",
    "caption",
    "cardiothoracic_ratio",
    "compute_overlap_report",
    "connected_components",
    "define_organ_parts",
    "dice",
    "fleiss_kappa",
    "frechet_distance",
    "gaussian_stats",
    "grade_severity",
    "icc_2_1",
    "intersect",
    "iou",
    "load_organ_map",
    "load_pathology_mask",
    "ms_ssim",
    "normalize_geometry",
    "parse",
    "recaption_and_match",
    "render",
    "run_pipeline",
    "run_with_retries",
    "select_location",
    "stub_text_to_mask",
    "union",
]
