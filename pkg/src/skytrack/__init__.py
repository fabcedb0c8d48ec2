"""Learned motion-map multi-object tracking on synthetic aerial scenes."""

from .marginloss import MarginConfig, mm_loss, motion_margin
from .metrics import TrajectorySet, clear_mota, idf1
from .motionnet import FeaturePyramid, MotionMap, MotionNet, MotionNetConfig
from .simworld import SceneConfig, generate_sequence, scenario_config
from .ssm import SsmParams, directional_ssm, motion_mamba_block, selective_scan
from .tensor import SgdConfig, Tape, Tensor, backward, grad_check, sgd_step
from .tracker import Detection, MotionTracker, TrackerConfig, track_sequence

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "FeaturePyramid",
    "MarginConfig",
    "MotionMap",
    "MotionNet",
    "MotionNetConfig",
    "MotionTracker",
    "SceneConfig",
    "SgdConfig",
    "SsmParams",
    "Tape",
    "Tensor",
    "TrackerConfig",
    "TrajectorySet",
    "backward",
    "clear_mota",
    "directional_ssm",
    "generate_sequence",
    "grad_check",
    "idf1",
    "mm_loss",
    "motion_mamba_block",
    "motion_margin",
    "scenario_config",
    "selective_scan",
    "sgd_step",
    "track_sequence",
    "__version__",
]
