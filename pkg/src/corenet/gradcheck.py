"""Finite-difference verification suite run by ``corenet gradcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import DenseParams, DenseSpec, OpConvParams, OpConvSpec, dense_forward, init_params, opconv_block_up, opconv_forward
from .losses import Hyperparams, ar_loss, ffl, ffl_weight, psnr
from .networks import ARConfig, MRConfig, ar_forward, build_ar, build_mr, frozen, mr_forward
from .tensor import Tape, Tensor, finite_diff_check, numeric_grad, relative_error


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.error:.3e}\t{self.tol:.1e}\t{status}"


def check_parameters(params: Sequence[Tensor], loss_fn: Callable[[], Tensor],
                     max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error of the tape gradient w.r.t. every tensor in ``params``.

    ``loss_fn`` recomputes the scalar from the current parameter values. With
    ``max_entries`` a seeded subset of each tensor's entries is perturbed.
    """
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss, list(params))
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        original = p.data

        def f(arr, p=p):
            p.data = arr
            return float(loss_fn().data)

        idx = None
        if max_entries is not None and original.size > max_entries:
            idx = rng.choice(original.size, max_entries, replace=False)
        try:
            fd = numeric_grad(f, original.copy(), None, idx)
        finally:
            p.data = original
        worst = max(worst, relative_error(g, fd))
    return worst


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(y * Tensor(w))


def run_suite(tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    """All gradient checks at 64-bit precision; the deep AR composite uses 10*tol."""
    rng = np.random.default_rng(seed)
    hp = np.float64
    results: list[CheckResult] = []

    def record(name, fn, tolerance=tol):
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, tolerance, time.perf_counter() - t0))

    x = rng.uniform(-0.9, 0.9, size=(3, 8, 8))
    k = rng.normal(scale=0.3, size=(4, 3, 3, 3))
    w = rng.normal(size=(4, 4, 4))
    record("conv2d/x", lambda: finite_diff_check(lambda t: _weighted_sum(T.conv2d(t, Tensor(k), 2, 1), w), x))
    record("conv2d/kernel", lambda: finite_diff_check(lambda t: _weighted_sum(T.conv2d(Tensor(x), t, 2, 1), w), k))
    record("elementwise_pow/q3", lambda: finite_diff_check(lambda t: _weighted_sum(T.elementwise_pow(t, 3), x), x))
    record("tanh", lambda: finite_diff_check(lambda t: _weighted_sum(T.tanh_apply(t), x), x * 2))
    up_w = rng.normal(size=(3, 16, 16))
    record("upsample_nearest", lambda: finite_diff_check(lambda t: _weighted_sum(T.upsample_nearest(t, 2), up_w), x))
    spec_w = rng.uniform(size=(3, 8, 8))
    record("dft2d", lambda: finite_diff_check(lambda t: _weighted_sum(T.abs2(T.dft2d(t)), spec_w), x))

    layer: OpConvParams = init_params(OpConvSpec(3, 4, 3, 3, 1, 1), rng, hp)
    layer.bias.data[:] = rng.normal(scale=0.1, size=4)
    lw = rng.normal(size=(4, 8, 8))
    record("opconv/x", lambda: finite_diff_check(lambda t: _weighted_sum(opconv_forward(t, layer), lw), x))
    for q in range(layer.q):
        record(f"opconv/kernels[{q + 1}]",
               lambda q=q: check_parameters([layer.kernels[q]], lambda: _weighted_sum(opconv_forward(Tensor(x), layer), lw)))
    record("opconv/bias", lambda: check_parameters([layer.bias], lambda: _weighted_sum(opconv_forward(Tensor(x), layer), lw)))

    up_layer: OpConvParams = init_params(OpConvSpec(3, 2, 3, 3, 1, 1), rng, hp)
    uw = rng.normal(size=(2, 16, 16))
    record("opconv_block_up/x", lambda: finite_diff_check(lambda t: _weighted_sum(opconv_block_up(t, up_layer), uw), x))
    record("opconv_block_up/params",
           lambda: check_parameters(up_layer.parameters(), lambda: _weighted_sum(opconv_block_up(Tensor(x), up_layer), uw)))

    dense: DenseParams = init_params(DenseSpec(12, 5), rng, hp)
    dense.bias.data[:] = rng.normal(scale=0.1, size=5)
    dx = rng.normal(size=12)
    dw = rng.normal(size=5)
    record("dense/x", lambda: finite_diff_check(lambda t: _weighted_sum(dense_forward(t, dense), dw), dx))
    record("dense/params", lambda: check_parameters(dense.parameters(), lambda: _weighted_sum(dense_forward(Tensor(dx), dense), dw)))

    img = rng.uniform(-0.9, 0.9, size=(3, 32, 32))
    gt = np.clip(img + rng.normal(scale=0.2, size=img.shape), -1, 1)
    record("psnr/x", lambda: finite_diff_check(lambda t: psnr(t, gt), img))
    # the focal weight is detached, so the reference holds it at its base value
    w_img = ffl_weight(img, gt)
    record("ffl/b", lambda: finite_diff_check(lambda t: ffl(t, gt, w_img), img))

    mr = build_mr(MRConfig(widths=[3, 4, 4, 4, 4], strides=[2] * 5, dense_hidden=6), rng, hp)
    record("mr_forward/image", lambda: finite_diff_check(lambda t: mr_forward(mr, t), img))

    ar = build_ar(ARConfig(widths=[2, 2, 2, 2, 2]), rng, hp)
    # at init the bottleneck activations are tiny and their cubic terms drown in
    # difference noise; random biases move the check to a generic point
    for layer in ar.layers:
        layer.bias.data[:] = rng.normal(scale=0.5, size=layer.bias.dims)
    h = Hyperparams()
    a = Tensor(img)

    w_ar = ffl_weight(ar_forward(ar, a), gt)

    def l_ar():
        with frozen(mr):
            b = ar_forward(ar, a)
            return ar_loss(mr_forward(mr, b), psnr(b, gt, h.target_psnr_db), ffl(b, gt, w_ar), h)

    record("ar_loss/b", lambda: finite_diff_check(
        lambda t: ar_loss(mr_forward(mr, t), psnr(t, gt), ffl(t, gt, w_img), h), img))
    record("ar_loss/ar_params", lambda: check_parameters(ar.parameters(), l_ar), tolerance=10 * tol)
    return results
