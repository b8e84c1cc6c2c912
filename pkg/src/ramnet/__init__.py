"""Recurrent asynchronous multimodal depth estimation from events and frames."""
from .events import EventStream, FrameSequence, SimulatorConfig, simulate_events
from .losses import gradient_matching_loss, metrics, scale_invariant_loss
from .model import FusionState, ModelConfig, RAMNet, RecurrentBaseline, build_model
from .representation import build_voxel_grid, depth_to_normalized, normalize_voxel
from .trainer import TrainConfig, eval_frame_index_curve, eval_rate_generalization, train

__version__ = "0.1.0"

__all__ = ["EventStream", "FrameSequence", "SimulatorConfig", "simulate_events", "gradient_matching_loss",
           "metrics", "scale_invariant_loss", "FusionState", "ModelConfig", "RAMNet", "RecurrentBaseline",
           "build_model", "build_voxel_grid", "depth_to_normalized", "normalize_voxel", "TrainConfig",
           "eval_frame_index_curve", "eval_rate_generalization", "train"]
