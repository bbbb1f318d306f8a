"""Lightweight multi-scale medical image segmentation on a small numpy
autograd core."""
from .autograd import GradCheckReport, backward, gradcheck, no_grad
from .counting import CountReport, count_params_flops
from .data import SegSample, augment, load_dataset, synth_dataset
from .model import ConfigError, ModelConfig, ParamStore, init_params, lgmsnet_forward
from .tensor import Rng, ShapeError, Tensor, tensor
from .train import Hyper, MetricReport, metrics, seg_loss, train_loop

__all__ = [
    "ConfigError",
    "CountReport",
    "GradCheckReport",
    "Hyper",
    "MetricReport",
    "ModelConfig",
    "ParamStore",
    "Rng",
    "SegSample",
    "ShapeError",
    "Tensor",
    "augment",
    "backward",
    "count_params_flops",
    "gradcheck",
    "init_params",
    "lgmsnet_forward",
    "load_dataset",
    "metrics",
    "no_grad",
    "seg_loss",
    "synth_dataset",
    "tensor",
    "train_loop",
]
__version__ = "0.1.0"
