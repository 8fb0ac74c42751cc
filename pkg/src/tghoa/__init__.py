"""Time-guided high-order attention for irregular multimodal visit sequences."""

from .attention import ABLATIONS, AblationConfig, ablation, decay
from .data import DatasetConfig, PatientRecord, SynthConfig, Visit, generate_synthetic, load_jsonl
from .sequence import ModelConfig, forward_patient, init_params, load_checkpoint, save_checkpoint
from .trainer import evaluate, explain, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "AblationConfig", "ablation", "decay",
    "DatasetConfig", "PatientRecord", "SynthConfig", "Visit", "generate_synthetic", "load_jsonl",
    "ModelConfig", "forward_patient", "init_params", "load_checkpoint", "save_checkpoint",
    "evaluate", "explain", "train",
]
