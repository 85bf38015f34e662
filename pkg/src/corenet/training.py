"""Cooperative Apprentice/Master training, evaluation and 2-pass restoration."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DatasetError, FormatError, TrainSample
from .losses import Hyperparams, ar_loss, ffl, mr_loss, psnr, psnr_value
from .networks import (
    ARConfig,
    ARModel,
    MRConfig,
    MRModel,
    ar_forward,
    build_ar,
    build_mr,
    frozen,
    mr_forward,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              iteration: int | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            where = f" at iteration {iteration}" if iteration is not None else ""
            raise FloatingPointError(f"non-finite gradient for parameter {i}{where}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


@dataclass
class IterationMetrics:
    alpha_db: float
    l_mr: float
    l_ar: float
    # max |grad| leaking across networks; only filled when audited
    mr_grad_in_ar_step: float | None = None
    ar_grad_in_mr_step: float | None = None


def _max_abs(grads) -> float:
    return max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)


def _check_finite(value: float, what: str, iteration) -> float:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} is not finite at iteration {iteration}")
    return value


def mr_step(mr: MRModel, b_detached: Tensor, truth: Tensor, alpha_db: float, h: Hyperparams,
            opt: AdamState, lr: float, iteration=None, watch: Sequence[Tensor] = ()):
    with Tape() as tape:
        loss = mr_loss(mr_forward(mr, b_detached), mr_forward(mr, truth), alpha_db, h.target_psnr_db)
    params = mr.parameters()
    grads = tape.backward(loss, [*params, *watch])
    value = _check_finite(float(loss.data), "L_MR", iteration)
    adam_step(params, grads[: len(params)], opt, lr, iteration)
    return value, grads[len(params):]


def ar_objective(ar: ARModel, mr: MRModel, corrupted: Tensor, truth: Tensor, h: Hyperparams) -> Tensor:
    b = ar_forward(ar, corrupted)
    return ar_loss(mr_forward(mr, b), psnr(b, truth, h.target_psnr_db), ffl(b, truth), h)


def corenet_iteration(ar: ARModel, mr: MRModel, sample: TrainSample, h: Hyperparams,
                      ar_opt: AdamState, mr_opt: AdamState, lr: float | None = None,
                      iteration: int | None = None, audit: bool = False) -> IterationMetrics:
    """MR update on the detached restoration, then AR update through a frozen MR."""
    lr = h.lr if lr is None else lr
    dtype = ar.dtype
    a = Tensor(sample.corrupted.astype(dtype, copy=False))
    gt = Tensor(sample.truth.astype(dtype, copy=False))

    b = ar_forward(ar, a)
    alpha = psnr_value(b.data, gt.data, h.target_psnr_db)

    ar_params = ar.parameters()
    watch = ar_params if audit else ()
    b_det = b.detach()
    leaked_ar = 0.0
    for _ in range(h.mr_steps):
        l_mr, stray = mr_step(mr, b_det, gt, alpha, h, mr_opt, lr, iteration, watch)
        leaked_ar = max(leaked_ar, _max_abs(stray))

    mr_params = mr.parameters()
    leaked_mr = 0.0
    for _ in range(h.ar_steps):
        with frozen(mr):
            with Tape() as tape:
                loss = ar_objective(ar, mr, a, gt, h)
            grads = tape.backward(loss, [*ar_params, *(mr_params if audit else ())])
        l_ar = _check_finite(float(loss.data), "L_AR", iteration)
        leaked_mr = max(leaked_mr, _max_abs(grads[len(ar_params):]))
        adam_step(ar_params, grads[: len(ar_params)], ar_opt, lr, iteration)

    metrics = IterationMetrics(alpha, l_mr, l_ar)
    if audit:
        metrics.mr_grad_in_ar_step = leaked_mr
        metrics.ar_grad_in_mr_step = leaked_ar
    return metrics


@dataclass
class LogRecord:
    iteration: int
    alpha_db: float
    l_mr: float
    l_ar: float
    ms: float

    def line(self) -> str:
        return f"{self.iteration}\t{self.alpha_db:.6f}\t{self.l_mr:.6f}\t{self.l_ar:.6f}\t{self.ms:.3f}"


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("log iterations must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)


@dataclass
class TrainState:
    ar: ARModel
    mr: MRModel
    ar_opt: AdamState
    mr_opt: AdamState
    hyper: Hyperparams
    iteration: int = 0
    split_ratio: float = 0.9
    best_alpha: float = float("-inf")

    @classmethod
    def initial(cls, ar_cfg: ARConfig, mr_cfg: MRConfig, h: Hyperparams, dtype=T.STANDARD,
                split_ratio: float = 0.9) -> "TrainState":
        rng = np.random.default_rng(h.seed)
        ar = build_ar(ar_cfg, rng, dtype)
        mr = build_mr(mr_cfg, rng, dtype)
        return cls(ar, mr, AdamState.fresh(ar.parameters()), AdamState.fresh(mr.parameters()), h,
                   split_ratio=split_ratio)

    def to_checkpoint(self) -> Checkpoint:
        meta = {
            "ar_config": asdict(self.ar.config),
            "mr_config": asdict(self.mr.config),
            "hyper": asdict(self.hyper),
            "iteration": self.iteration,
            "split_ratio": self.split_ratio,
            "best_alpha": self.best_alpha if np.isfinite(self.best_alpha) else None,
            "dtype": np.dtype(self.ar.dtype).str,
            "ar_adam_t": self.ar_opt.t,
            "mr_adam_t": self.mr_opt.t,
            # sample order is a pure function of (seed, epoch); nothing else to restore
            "rng": {"seed": self.hyper.seed, "order": "permutation(seed, epoch)"},
        }
        tensors: dict[str, np.ndarray] = {}
        for prefix, model, opt in (("ar", self.ar, self.ar_opt), ("mr", self.mr, self.mr_opt)):
            for (name, p), m, v in zip(model.named_parameters(), opt.m, opt.v):
                tensors[f"{prefix}.{name}"] = p.data
                tensors[f"{prefix}.adam_m.{name}"] = m
                tensors[f"{prefix}.adam_v.{name}"] = v
        return Checkpoint(meta, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        meta = ckpt.meta
        try:
            ar_cfg = ARConfig(**meta["ar_config"])
            mr_cfg = MRConfig(**meta["mr_config"])
            h = Hyperparams(**meta["hyper"])
            dtype = np.dtype(meta["dtype"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint metadata incomplete: {exc}") from exc
        state = cls.initial(ar_cfg, mr_cfg, h, dtype.type, meta.get("split_ratio", 0.9))
        for prefix, model, opt in (("ar", state.ar, state.ar_opt), ("mr", state.mr, state.mr_opt)):
            for i, (name, p) in enumerate(model.named_parameters()):
                for key, target in ((f"{prefix}.{name}", p.data), (f"{prefix}.adam_m.{name}", opt.m[i]),
                                    (f"{prefix}.adam_v.{name}", opt.v[i])):
                    arr = ckpt.tensors.get(key)
                    if arr is None:
                        raise FormatError(f"checkpoint lacks entry {key!r}")
                    if arr.shape != target.shape or arr.dtype != target.dtype:
                        raise FormatError(
                            f"entry {key!r} is {arr.dtype}{list(arr.shape)}, config expects "
                            f"{target.dtype}{list(target.shape)}"
                        )
                    target[...] = arr
        state.ar_opt.t = int(meta.get("ar_adam_t", 0))
        state.mr_opt.t = int(meta.get("mr_adam_t", 0))
        state.iteration = int(meta.get("iteration", 0))
        best = meta.get("best_alpha")
        state.best_alpha = float("-inf") if best is None else float(best)
        return state


def sample_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(samples: Sequence[TrainSample], state: TrainState, iterations: int | None = None,
          lr_schedule: Callable[[int, float], float] | None = None,
          on_record: Callable[[LogRecord, IterationMetrics], None] | None = None,
          on_checkpoint: Callable[[TrainState, str], None] | None = None,
          audit: bool = False) -> TrainLog:
    """Run cooperative iterations until ``state.iteration`` reaches the budget.

    The budget is ``iterations`` (absolute) or ``state.hyper.max_iterations``.
    Samples are visited in a seeded permutation, reshuffled every pass.
    ``on_checkpoint(state, kind)`` fires every ``checkpoint_every`` iterations
    (kind "periodic", plus "best" when the window's mean alpha improved) and at the end ("final").
    """
    if not samples:
        raise DatasetError("training split is empty")
    h = state.hyper
    budget = h.max_iterations if iterations is None else iterations
    n = len(samples)
    log_ = TrainLog()
    order, order_epoch = None, -1
    window: list[float] = []
    while state.iteration < budget:
        it = state.iteration
        epoch, pos = divmod(it, n)
        if epoch != order_epoch:
            order, order_epoch = sample_order(n, h.seed, epoch), epoch
        lr = h.lr if lr_schedule is None else lr_schedule(it, h.lr)
        t0 = time.perf_counter()
        metrics = corenet_iteration(state.ar, state.mr, samples[order[pos]], h, state.ar_opt, state.mr_opt,
                                    lr=lr, iteration=it, audit=audit)
        state.iteration = it + 1
        rec = LogRecord(it, metrics.alpha_db, metrics.l_mr, metrics.l_ar, (time.perf_counter() - t0) * 1e3)
        log_.append(rec)
        window.append(metrics.alpha_db)
        if on_record is not None:
            on_record(rec, metrics)
        if h.checkpoint_every and state.iteration % h.checkpoint_every == 0 and on_checkpoint:
            mean_alpha = float(np.mean(window))
            window = []
            on_checkpoint(state, "periodic")
            if mean_alpha > state.best_alpha:
                state.best_alpha = mean_alpha
                on_checkpoint(state, "best")
    if on_checkpoint is not None:
        on_checkpoint(state, "final")
    return log_


@dataclass
class EvalReport:
    names: list[str]
    psnr: list[list[float]]  # one list per pass

    @property
    def means(self) -> list[float]:
        return [float(np.mean(p)) for p in self.psnr]

    @property
    def mean(self) -> float:
        return self.means[0]

    def text(self) -> str:
        passes = len(self.psnr)
        head = "image\t" + "\t".join(f"pass{k + 1}_psnr_db" for k in range(passes))
        rows = [head]
        for i, name in enumerate(self.names):
            rows.append(name + "\t" + "\t".join(f"{self.psnr[k][i]:.4f}" for k in range(passes)))
        rows.append("mean\t" + "\t".join(f"{m:.4f}" for m in self.means))
        return "\n".join(rows) + "\n"


def _restorer(ar) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(ar, ARModel):
        return lambda img: ar_forward(ar, img).data
    return ar


def two_pass_restore(ar, img) -> tuple[np.ndarray, np.ndarray]:
    """Apply the restorer to the image and again to its own output."""
    f = _restorer(ar)
    first = f(img)
    return first, f(first)


def evaluate(ar, samples: Sequence[TrainSample], passes: int = 1, target_db: float = 40.0) -> EvalReport:
    """Per-image PSNR of the restored outputs against ground truth, in input order.

    ``ar`` is an :class:`ARModel` or any callable mapping a normalized image
    to a normalized image (e.g. the identity for the do-nothing baseline).
    """
    if not samples:
        raise DatasetError("evaluation split is empty")
    if passes not in (1, 2):
        raise ValueError("passes must be 1 or 2")
    f = _restorer(ar)
    scores: list[list[float]] = [[] for _ in range(passes)]
    names = []
    for s in samples:
        out = f(s.corrupted)
        scores[0].append(psnr_value(out, s.truth, target_db))
        if passes == 2:
            scores[1].append(psnr_value(f(out), s.truth, target_db))
        names.append(s.source[1].rsplit("/", 1)[-1] if s.source[1] else str(len(names)))
    return EvalReport(names, scores)


def identity_baseline(samples: Sequence[TrainSample], target_db: float = 40.0) -> float:
    return evaluate(lambda x: x, samples, 1, target_db).mean
