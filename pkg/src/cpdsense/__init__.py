"""Child presence detection from simulated WiFi channel state information."""

from .channel import CsiRecording, Label, ScenarioConfig, make_scenario_bank, synth_csi
from .features import AcfSample, FeatureConfig, acf, acf_matrix, extract_windows
from .model import ModelConfig, forward, init_params, predict_proba
from .training import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AcfSample", "CsiRecording", "FeatureConfig", "Label", "ModelConfig", "ScenarioConfig",
    "TrainConfig", "acf", "acf_matrix", "extract_windows", "forward", "init_params",
    "make_scenario_bank", "predict_proba", "synth_csi", "train_stage1", "train_stage2",
]
