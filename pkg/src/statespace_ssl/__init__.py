"""Self-supervised pretraining of gated state-space image encoders, on a small numpy autodiff core."""

from .augment import LabeledDataset, ViewConfig, load_dataset, make_views, synth_dataset
from .encoder import EncoderConfig, EncoderParams, encode, param_count, ssm_scan
from .errors import StateSpaceSSLError
from .estimators import LinearProbe, StateSpaceSSL
from .evaluation import linear_probe, saliency_map, scaling_benchmark
from .head import HeadState, distill_loss
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "EncoderParams", "HeadState", "LabeledDataset", "LinearProbe", "StateSpaceSSL",
    "StateSpaceSSLError", "TrainConfig", "ViewConfig", "distill_loss", "encode", "linear_probe",
    "load_checkpoint", "load_dataset", "make_views", "param_count", "saliency_map", "save_checkpoint",
    "scaling_benchmark", "ssm_scan", "synth_dataset", "train",
]
