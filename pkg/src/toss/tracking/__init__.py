from .association import AssociationResult, associate_exhaustive, associate_hierarchical, greedy_match
from .boxes import fit_box, iou, pair_cost, pair_costs
from .kalman import KalmanState, NoiseConfig, kf_predict, kf_update
from .tracker import (
    Detection,
    MotionLabel,
    Track,
    Tracker,
    TrackerConfig,
    TrackStatus,
    classify_track,
    export_tracks_csv,
    tracker_step,
)

__all__ = [
    "AssociationResult",
    "Detection",
    "KalmanState",
    "MotionLabel",
    "NoiseConfig",
    "Track",
    "TrackStatus",
    "Tracker",
    "TrackerConfig",
    "associate_exhaustive",
    "associate_hierarchical",
    "classify_track",
    "export_tracks_csv",
    "fit_box",
    "greedy_match",
    "iou",
    "kf_predict",
    "kf_update",
    "pair_cost",
    "pair_costs",
    "tracker_step",
]
