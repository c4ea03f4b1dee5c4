"""Semi-supervised stereo matching with two mutually supervising branches.

Each branch pairs a disparity network (DEnet) with a confidence head
(Confnet). On unlabeled pairs the branches teach each other, weighting and
softening the pseudo-labels by the teacher's confidence.
"""

__version__ = "0.1.0"

from .data import Calibration, DataError, StereoSample, SynthSpec, generate_synthetic_pair, load_dataset
from .denet import DEnet, NetScale
from .confnet import Confnet
from .losses import Ablation, LossWeights
from .trainer import DualBranch, NumericError, TrainConfig, fit, infer, init_branches
from .metrics import EvalReport, evaluate, mae, outlier_pct, rmse, scu

__all__ = [
    "Ablation", "Calibration", "Confnet", "DEnet", "DataError", "DualBranch", "EvalReport", "LossWeights",
    "NetScale", "NumericError", "StereoSample", "SynthSpec", "TrainConfig", "evaluate", "fit",
    "generate_synthetic_pair", "infer", "init_branches", "load_dataset", "mae", "outlier_pct", "rmse", "scu",
]
