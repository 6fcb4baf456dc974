"""Anchor-based face detection with a training-only feature-level SR branch."""

from .anchors import AnchorSet, Box, MatchResult, generate_anchors, iou, match_anchors, nms
from .config import ExperimentConfig
from .data import AugmentConfig, SynthConfig, TrainSample, augment, gaussian_blur, synth_dataset
from .detector import PyramidConfig, SRFaceNet, build_model, detect, model_forward
from .engine import TrainConfig, fit, lr_schedule_step, train_step
from .estimator import BlurDegrader, SRFaceDetector
from .losses import FocalParams, LossReport, focal_loss, smooth_l1, sr_l1, total_loss
from .sr_branch import SRBranch, SRBranchConfig

__version__ = "0.1.0"
