"""Multi-branch person re-identification on a small numpy autodiff engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Sample, load_dir, pk_sampler, synth_dataset
from .erasing import ero
from .errors import DeepMinerError
from .estimator import DeepMinerEmbedder
from .losses import id_loss, total_loss, triplet_loss
from .metrics import EvalResult, evaluate, pairwise_dist
from .model import DeepMiner, ModelConfig, build_model
from .training import TrainConfig, TrainingHistory, ablate_threshold, train

__version__ = "0.1.0"

__all__ = [
    "DeepMiner", "DeepMinerEmbedder", "DeepMinerError", "Dataset", "EvalResult", "ModelConfig", "Sample",
    "TrainConfig", "TrainingHistory", "ablate_threshold", "build_model", "ero", "evaluate", "id_loss",
    "load_checkpoint", "load_dir", "pairwise_dist", "pk_sampler", "save_checkpoint", "synth_dataset",
    "total_loss", "train", "triplet_loss",
]
