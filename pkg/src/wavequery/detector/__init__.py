"""Desk-scale detector harness: synthetic style-shift scenes, a tiny
detection transformer with hand-written gradients, Hungarian-matched set
loss, Adam training, and AP@0.5 evaluation."""

from .scenes import CLASS_NAMES, DomainSpec, SceneSample, generate_scene, standard_domains
from .matching import MatchResult, exhaustive_min_cost_match, hungarian_match
from .losses import LossBreakdown, detection_loss, match_batch
from .model import ModelConfig, ModelOutputs, init_params, model_backward, model_forward
from .train import TrainConfig, TrainResult, TrainingDivergedError, train
from .evaluate import average_precision, box_iou, evaluate_ap
from .checkpoint import load_checkpoint, save_checkpoint
