"""Normalization, PSNR, focal frequency loss and the two regressor objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

PEAK = 2.0  # normalized images span [-1, 1]


class DegenerateInputError(ValueError):
    pass


@dataclass
class Hyperparams:
    epsilon: float = 3.0
    beta: float = 0.05
    phi: float = 100.0
    target_psnr_db: float = 40.0
    lr: float = 1e-5
    max_iterations: int = 5000
    batch_size: int = 1
    seed: int = 0
    ffl_sign: float = 1.0
    mr_steps: int = 1
    ar_steps: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.epsilon, self.beta, self.phi) <= 0:
            raise ConfigurationError("epsilon, beta and phi must be positive")
        if self.target_psnr_db <= 0:
            raise ConfigurationError("target PSNR must be positive")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size != 1:
            raise ConfigurationError("only batch size 1 is supported")
        if self.ffl_sign not in (1.0, -1.0):
            raise ConfigurationError("ffl_sign must be +1 or -1")


def normalize(img) -> tuple[np.ndarray, float, float]:
    """Map an image linearly so its minimum becomes -1 and its maximum +1."""
    x = np.asarray(img, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateInputError("cannot normalize a constant image")
    return 2.0 * (x - lo) / (hi - lo) - 1.0, lo, hi


def denormalize(nimg, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise DegenerateInputError(f"denormalize needs max > min, got [{lo}, {hi}]")
    x = np.asarray(nimg, dtype=np.float64)
    return (x + 1.0) * ((hi - lo) / 2.0) + lo


def mse_floor(target_db: float) -> float:
    return PEAK**2 * 10.0 ** (-target_db / 10.0)


def psnr(x: Tensor, y, target_db: float = 40.0) -> Tensor:
    """PSNR in dB with peak 2, capped at ``target_db`` via an MSE floor."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.data.dtype))
    if x.dims != y.dims:
        raise ConfigurationError(f"psnr: shape mismatch {x.dims} vs {y.dims}")
    mse = T.mean_all(T.elementwise_pow(x - y, 2))
    mse = T.clamp(mse, lo=mse_floor(target_db))
    return T.neg(T.log10_apply(mse) - np.log10(PEAK**2)) * 10.0


def psnr_value(x, y, target_db: float = 40.0) -> float:
    """Plain float PSNR for evaluation; same formula as :func:`psnr`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = max(float(np.mean((x - y) ** 2)), mse_floor(target_db))
    return 10.0 * np.log10(PEAK**2 / mse)


def _ortho_spectrum(x: Tensor) -> Tensor:
    h, w = x.dims[-2:]
    return T.dft2d(x) * (1.0 / np.sqrt(h * w))


def ffl_weight(b, gt) -> np.ndarray:
    """Per-channel spectral weight |F(b) - F(gt)| / max, as a constant array."""
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    d = np.sqrt(T.abs2(_ortho_spectrum(Tensor(b - gt))).data)
    peak = d.max(axis=(-2, -1), keepdims=True)
    return np.divide(d, peak, out=np.zeros_like(d), where=peak > 0).astype(b.dtype)


def ffl(b: Tensor, gt, weight: np.ndarray | None = None) -> Tensor:
    """Focal frequency loss with a detached, max-normalized weight (exponent 1).

    Per channel: d = |F(b) - F(gt)| on orthonormal spectra, w = d / max(d),
    loss = mean over channels and bins of w * d**2. The weight never receives
    gradient; pass ``weight`` to pin it (e.g. for finite-difference checks).
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=b.data.dtype))
    if b.dims != gt.dims:
        raise ConfigurationError(f"ffl: shape mismatch {b.dims} vs {gt.dims}")
    # F is linear, so F(b) - F(gt) = F(b - gt)
    dist2 = T.abs2(_ortho_spectrum(b - gt))
    if weight is None:
        d = np.sqrt(dist2.data)
        peak = d.max(axis=(-2, -1), keepdims=True)
        weight = np.divide(d, peak, out=np.zeros_like(d), where=peak > 0).astype(b.data.dtype)
    elif weight.shape != b.dims:
        raise ConfigurationError(f"ffl: weight shape {weight.shape} does not match {b.dims}")
    return T.mean_all(dist2 * Tensor(weight))


def mr_loss(mr_of_b, mr_of_gt, alpha_db: float, target_db: float = 40.0):
    """L1 to the normalized PSNR label for B plus L1 to 1 for the ground truth."""
    label = min(float(alpha_db) / target_db, 1.0)
    if isinstance(mr_of_b, Tensor):
        return T.abs_apply(mr_of_b - label) + T.abs_apply(mr_of_gt - 1.0)
    return abs(mr_of_b - label) + abs(mr_of_gt - 1.0)


def ar_loss(mr_of_b, psnr_val, ffl_val, h: Hyperparams):
    """epsilon*|MR(B)-1| - beta*PSNR + sign*phi*FFL (sign +1 by default)."""
    phi = h.ffl_sign * h.phi
    if isinstance(mr_of_b, Tensor):
        return T.abs_apply(mr_of_b - 1.0) * h.epsilon - psnr_val * h.beta + ffl_val * phi
    return h.epsilon * abs(mr_of_b - 1.0) - h.beta * psnr_val + phi * ffl_val


PROB_CLAMP = 1e-7


def opgan_losses(d_of_gt, d_of_fake):
    """Discriminator and non-saturating generator losses of an operational GAN."""
    if isinstance(d_of_gt, Tensor):
        gt = T.clamp(d_of_gt, PROB_CLAMP, 1 - PROB_CLAMP)
        fake = T.clamp(d_of_fake, PROB_CLAMP, 1 - PROB_CLAMP)
        d_loss = T.neg(T.log_apply(gt)) - T.log_apply(1.0 - fake)
        return d_loss, T.neg(T.log_apply(fake))
    gt = float(np.clip(d_of_gt, PROB_CLAMP, 1 - PROB_CLAMP))
    fake = float(np.clip(d_of_fake, PROB_CLAMP, 1 - PROB_CLAMP))
    return -np.log(gt) - np.log(1 - fake), -np.log(fake)
