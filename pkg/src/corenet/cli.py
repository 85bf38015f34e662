"""``corenet`` command-line interface.

Configuration precedence for ``train``: command-line flags override keys in the
JSON file given by ``--config``, which override the built-in defaults. The JSON
file is a flat object; see :class:`RunConfig` for the accepted keys.

Exit codes: 0 success, 1 numerical or verification failure, 2 usage or I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    DegradeParams,
    FormatError,
    build_dataset,
    discover_pairs,
    load_sample,
    make_dataset,
    read_ppm,
    write_ppm,
)
from .gradcheck import run_suite
from .layers import count_params
from .losses import DegenerateInputError, Hyperparams, denormalize, normalize
from .networks import AR_MULTIPLE, ARConfig, MRConfig, ar_forward, build_ar
from .tensor import ConfigurationError
from .training import TrainState, evaluate, train

log = logging.getLogger("corenet")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    """Flat run configuration; every key may appear in the JSON config file."""

    # optimisation and loss weights
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
    # restoration network
    ar_widths: list = field(default_factory=lambda: [32, 64, 128, 256, 256])
    ar_down_kernel: int = 5
    ar_up_kernel: int = 7
    ar_q: int = 3
    # quality regressor
    mr_widths: list = field(default_factory=lambda: [16, 32, 64, 64, 64])
    mr_kernel: int = 4
    mr_strides: list = field(default_factory=lambda: [4, 4, 4, 2, 2])
    mr_q: int = 2
    mr_dense_hidden: int = 64
    # data
    split_ratio: float = 0.9
    precision: str = "float32"
    degrade_gains: list = field(default_factory=lambda: [0.5, 1.0, 0.8])
    degrade_blur_radius: int = 1
    degrade_noise_sigma: float = 3.0
    degrade_contrast: float = 0.5
    degrade_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**d)

    def hyper(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in asdict(self).items() if k in names})

    def ar_config(self) -> ARConfig:
        return ARConfig(widths=self.ar_widths, down_kernel=self.ar_down_kernel, up_kernel=self.ar_up_kernel, q=self.ar_q)

    def mr_config(self) -> MRConfig:
        return MRConfig(widths=self.mr_widths, kernel=self.mr_kernel, strides=self.mr_strides, q=self.mr_q,
                        dense_hidden=self.mr_dense_hidden)

    def degrade(self) -> DegradeParams:
        return DegradeParams(tuple(self.degrade_gains), self.degrade_blur_radius, self.degrade_noise_sigma,
                             self.degrade_contrast, self.degrade_seed)

    def dtype(self):
        if self.precision not in ("float32", "float64"):
            raise UsageError(f"precision must be float32 or float64, got {self.precision!r}")
        return np.dtype(self.precision).type


def load_config(path, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError("config file must hold a JSON object")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(values)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# -- image helpers -------------------------------------------------------------


def _check_size(h: int, w: int) -> None:
    if h % AR_MULTIPLE or w % AR_MULTIPLE:
        raise UsageError(f"image size {h}x{w} is not divisible by {AR_MULTIPLE}")


def _read_input(path: Path, bounds):
    """Return (normalized image, lo, hi). ``.npy`` files are taken as already normalized."""
    if path.suffix == ".npy":
        img = np.load(path)
        if img.ndim != 3 or img.shape[0] != 3:
            raise UsageError(f"{path}: expected a 3xHxW array, got {img.shape}")
        lo, hi = bounds if bounds else (0.0, 255.0)
        return img, lo, hi
    raw = read_ppm(path)
    img, lo, hi = normalize(raw)
    if bounds:
        lo, hi = bounds
    return img, lo, hi


def _write_output(path: Path, img: np.ndarray, lo: float, hi: float) -> None:
    if path.suffix == ".npy":
        np.save(path, img)
    else:
        write_ppm(denormalize(img, lo, hi), path)


def _load_state(path) -> TrainState:
    try:
        return TrainState.from_checkpoint(load_checkpoint(path))
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc


# -- commands ------------------------------------------------------------------


def cmd_make_dataset(args) -> int:
    degrade = DegradeParams(tuple(args.gains), args.blur_radius, args.noise_sigma, args.contrast, args.degrade_seed)
    pairs = make_dataset(args.out, args.count, args.size, args.seed, degrade)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"max_iterations": args.iters, "seed": args.seed, "lr": args.lr}
    cfg = load_config(args.config, overrides)
    h = cfg.hyper()
    train_pairs, test_pairs = build_dataset(args.data, cfg.split_ratio, h.seed, args.manifest_dir)
    samples = [load_sample(p, cfg.dtype()) for p in train_pairs]
    _check_size(*samples[0].corrupted.shape[1:])
    if args.resume:
        state = _load_state(args.resume)
        state.hyper = h
    else:
        state = TrainState.initial(cfg.ar_config(), cfg.mr_config(), h, cfg.dtype(), cfg.split_ratio)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.tsv")
    log.info("training on %d pairs (%d held out) for %d iterations", len(train_pairs), len(test_pairs),
             h.max_iterations)

    with open(log_path, "a" if args.resume else "w") as fh:
        def on_record(rec, _metrics):
            fh.write(rec.line() + "\n")

        def on_checkpoint(state, kind):
            target = out.with_name(out.stem + "_best" + out.suffix) if kind == "best" else out
            save_checkpoint(state.to_checkpoint(), target)

        train(samples, state, on_record=on_record, on_checkpoint=on_checkpoint)
    print(f"checkpoint\t{out}\niterations\t{state.iteration}\nlog\t{log_path}")
    return EXIT_OK


def cmd_restore(args) -> int:
    state = _load_state(args.ckpt)
    src, dst = Path(args.inp), Path(args.out)
    img, lo, hi = _read_input(src, args.bounds)
    _check_size(*img.shape[1:])
    out = ar_forward(state.ar, img).data
    if args.passes == 2:
        # the pass-1 tensor feeds pass 2 directly, without renormalizing
        _write_output(dst.with_name(dst.stem + "_pass1" + dst.suffix), out, lo, hi)
        out = ar_forward(state.ar, out).data
    _write_output(dst, out, lo, hi)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args.ckpt) if args.ckpt else None
    if state is None and not args.baseline:
        raise UsageError("eval needs --ckpt unless --baseline is given")
    seed = args.seed if args.seed is not None else (state.hyper.seed if state else 0)
    ratio = args.split_ratio if args.split_ratio is not None else (state.split_ratio if state else 0.9)
    target = state.hyper.target_psnr_db if state else 40.0
    if args.split == "all":
        pairs = discover_pairs(args.data)
    else:
        train_pairs, test_pairs = build_dataset(args.data, ratio, seed)
        pairs = test_pairs if args.split == "test" else train_pairs
    dtype = state.ar.dtype if state else np.float32
    samples = [load_sample(p, dtype) for p in pairs]
    restorer = (lambda x: x) if args.baseline else state.ar
    report = evaluate(restorer, samples, args.passes, target)
    sys.stdout.write(report.text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.tol, args.seed)
    print("check\tmax_rel_error\ttol\tstatus")
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args) -> int:
    if args.size % AR_MULTIPLE:
        raise UsageError(f"size {args.size} is not divisible by {AR_MULTIPLE}")
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    ar = _load_state(args.ckpt).ar if args.ckpt else build_ar(ARConfig(), np.random.default_rng(0))
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, args.size, args.size)).astype(ar.dtype)
    ar_forward(ar, x)  # warm-up
    times = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        ar_forward(ar, x)
        times.append((time.perf_counter() - t0) * 1e3)
    print(f"params\t{count_params(ar.config.layer_specs())}")
    print(f"reps\t{args.reps}")
    if args.reps == 1:
        print(f"ms\t{times[0]:.3f}")
    else:
        print(f"min_ms\t{min(times):.3f}\nmedian_ms\t{float(np.median(times)):.3f}\nmean_ms\t{float(np.mean(times)):.3f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corenet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="synthesize clean/corrupted PPM pairs and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)
    d = DegradeParams()
    p.add_argument("--gains", type=_floats, default=list(d.gains), help="per-channel tint, e.g. 0.5,1.0,0.8")
    p.add_argument("--blur-radius", type=int, default=d.blur_radius)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--contrast", type=float, default=d.contrast)
    p.add_argument("--degrade-seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="cooperative training; flags > --config file > defaults")
    p.add_argument("--config", help="flat JSON object of RunConfig keys")
    p.add_argument("--data", required=True, help="dataset directory (clean/, corrupted/, optional manifest.tsv)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int, help="total iteration budget (overrides max_iterations)")
    p.add_argument("--seed", type=int, help="seed for init, split and sample order")
    p.add_argument("--lr", type=float)
    p.add_argument("--log", help="TSV log path (default: <out>.log.tsv)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--manifest-dir", help="also write train.tsv/test.tsv here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one image with 1 or 2 passes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True,
                   help=".ppm (normalized on read) or .npy (already normalized, used as is)")
    p.add_argument("--out", required=True, help=".ppm (denormalized) or .npy (normalized)")
    p.add_argument("--passes", type=int, choices=(1, 2), default=1)
    p.add_argument("--bounds", type=_floats, help="lo,hi used to denormalize (default: input range)")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="per-image and mean PSNR as TSV")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--passes", type=int, choices=(1, 2), default=1)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--seed", type=int, help="split seed (default: checkpoint seed)")
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--baseline", action="store_true", help="score the corrupted inputs themselves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite at 64-bit precision")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="single-image inference latency")
    p.add_argument("--ckpt", help="checkpoint (default: freshly initialized default network)")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DatasetError, FormatError, ConfigurationError, DegenerateInputError, OSError,
            ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
