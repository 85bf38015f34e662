"""Cooperative image restoration with operational (polynomial) convolutions.

A restoration U-Net (AR) is trained together with a no-reference quality
regressor (MR) that learns to predict the PSNR of AR's outputs and in turn
pushes AR toward outputs it scores as clean. Everything runs on a small
numpy reverse-mode autodiff core.
"""

from .layers import count_params
from .losses import Hyperparams
from .networks import DESK_AR, DESK_MR, ARConfig, MRConfig, ar_forward, build_ar, build_mr, mr_forward
from .training import TrainState, evaluate, train, two_pass_restore

__all__ = [
    "ARConfig", "MRConfig", "DESK_AR", "DESK_MR", "Hyperparams", "TrainState",
    "ar_forward", "build_ar", "build_mr", "count_params", "evaluate", "mr_forward", "train", "two_pass_restore",
]
__version__ = "0.1.0"
