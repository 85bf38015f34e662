"""PPM I/O, synthetic underwater-style degradation and dataset handling."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import normalize

MANIFEST = "manifest.tsv"
CLEAN_DIR = "clean"
CORRUPTED_DIR = "corrupted"


class FormatError(ValueError):
    """A file that does not follow the expected binary layout."""


class DatasetError(ValueError):
    pass


# -- PPM -------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    pos, tokens = 0, []
    while len(tokens) < count:
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    tokens, pos = _header_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"expected a binary P6 file, got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if width < 1 or height < 1:
        raise FormatError(f"bad PPM size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("missing whitespace after PPM header")
    pos += 1
    n = width * height * 3
    payload = buf[pos : pos + n]
    if len(payload) != n:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {n} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def encode_ppm(img) -> bytes:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.transpose(1, 2, 0).tobytes()


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a ``uint8`` array of shape (3, H, W)."""
    return decode_ppm(Path(path).read_bytes())


def write_ppm(img, path) -> None:
    """Write a (3, H, W) image; non-uint8 input is rounded and clipped to [0, 255]."""
    Path(path).write_bytes(encode_ppm(img))


# -- degradation -----------------------------------------------------------


@dataclass
class DegradeParams:
    gains: tuple[float, float, float] = (0.5, 1.0, 0.8)
    blur_radius: int = 1
    noise_sigma: float = 3.0
    contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.gains = tuple(float(g) for g in self.gains)
        if len(self.gains) != 3 or min(self.gains) <= 0:
            raise ValueError("channel gains must be three positive numbers")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError("blur radius and noise sigma must be non-negative")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast factor must lie in (0, 1]")


NEUTRAL = dict(gains=(1.0, 1.0, 1.0), blur_radius=0, noise_sigma=0.0, contrast=1.0)


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window with edge replication."""
    if radius == 0:
        return img
    size = 2 * radius + 1
    padded = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    return win.sum(axis=(-2, -1)) / (size * size)


def synth_degrade(clean, p: DegradeParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """tint -> box blur -> contrast compression -> Gaussian noise -> clamp.

    Returns float64 values in [0, 255]; ``rng`` defaults to one seeded by ``p.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(p.seed)
    x = np.asarray(clean, dtype=np.float64)
    x = np.clip(x * np.asarray(p.gains).reshape(3, 1, 1), 0, 255)
    x = box_blur(x, p.blur_radius)
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = p.contrast * x + (1.0 - p.contrast) * mean
    x = x + rng.normal(0.0, p.noise_sigma, size=x.shape)
    return np.clip(x, 0, 255)


# -- procedural clean corpus --------------------------------------------------


def make_clean_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """A random scene of smooth gradients, filled shapes and sinusoidal texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(30, 220, size=(3, 1, 1))
    tilt = rng.uniform(-80, 80, size=(3, 2))
    img = base + tilt[:, :1, None] * yy + tilt[:, 1:, None] * xx
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 255, size=(3, 1, 1))
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.1, 0.35)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.08, 0.3, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img = np.where(mask, color, img)
    freq = rng.uniform(2, 6)
    angle = rng.uniform(0, np.pi)
    amp = rng.uniform(5, 25)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img = img + amp * wave
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class Pair:
    corrupted: Path
    clean: Path

    @property
    def key(self) -> str:
        return self.clean.name


@dataclass
class TrainSample:
    """A normalized (corrupted, ground truth) pair."""

    corrupted: np.ndarray
    truth: np.ndarray
    source: tuple[str, str] = ("", "")
    bounds: tuple[float, float] = field(default=(0.0, 255.0))

    def __post_init__(self):
        if self.corrupted.shape != self.truth.shape:
            raise DatasetError(f"pair shapes differ: {self.corrupted.shape} vs {self.truth.shape}")


def load_sample(pair: Pair, dtype=np.float32) -> TrainSample:
    try:
        a, lo, hi = normalize(read_ppm(pair.corrupted))
        gt, _, _ = normalize(read_ppm(pair.clean))
    except OSError as exc:
        raise DatasetError(f"cannot read sample {pair.clean.name}: {exc}") from exc
    return TrainSample(a.astype(dtype), gt.astype(dtype), (str(pair.corrupted), str(pair.clean)), (lo, hi))


def make_dataset(out_dir, count: int, size: int, seed: int, degrade: DegradeParams | None = None) -> list[Pair]:
    """Write ``count`` clean/corrupted PPM pairs plus a manifest; image i uses seed+i."""
    if size % 32:
        raise DatasetError(f"image size must be a multiple of 32, got {size}")
    if count < 1:
        raise DatasetError("count must be positive")
    degrade = degrade or DegradeParams()
    out = Path(out_dir)
    (out / CLEAN_DIR).mkdir(parents=True, exist_ok=True)
    (out / CORRUPTED_DIR).mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        rng = np.random.default_rng(seed + i)
        clean = make_clean_image(size, rng)
        corrupted = synth_degrade(clean, degrade, np.random.default_rng([degrade.seed, seed + i]))
        name = f"{i:04d}.ppm"
        pair = Pair(out / CORRUPTED_DIR / name, out / CLEAN_DIR / name)
        write_ppm(clean, pair.clean)
        write_ppm(corrupted, pair.corrupted)
        pairs.append(pair)
    write_manifest(pairs, out / MANIFEST, relative_to=out)
    return pairs


def write_manifest(pairs: list[Pair], path, relative_to=None) -> None:
    lines = []
    for p in pairs:
        a, b = p.corrupted, p.clean
        if relative_to is not None:
            a, b = os.path.relpath(a, relative_to), os.path.relpath(b, relative_to)
        lines.append(f"{a}\t{b}\n")
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[Pair]:
    path = Path(path)
    pairs = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{n}: expected corrupted<TAB>clean")
        a, b = (Path(os.path.normpath(path.parent / part)) for part in parts)
        pairs.append(Pair(a, b))
    return pairs


def discover_pairs(source_dir) -> list[Pair]:
    """Pair ``corrupted/X.ppm`` with ``clean/X.ppm`` (manifest order when present)."""
    src = Path(source_dir)
    if not src.is_dir():
        raise DatasetError(f"no such data directory: {src}")
    if (src / MANIFEST).exists():
        pairs = read_manifest(src / MANIFEST)
    else:
        clean = {p.name for p in (src / CLEAN_DIR).glob("*.ppm")}
        corrupted = {p.name for p in (src / CORRUPTED_DIR).glob("*.ppm")}
        if clean ^ corrupted:
            raise DatasetError(f"unpaired files: {sorted(clean ^ corrupted)[:5]}")
        pairs = [Pair(src / CORRUPTED_DIR / n, src / CLEAN_DIR / n) for n in sorted(clean)]
    if not pairs:
        raise DatasetError(f"no image pairs found in {src}")
    for p in pairs:
        if not (p.clean.exists() and p.corrupted.exists()):
            raise DatasetError(f"unpaired or missing file for {p.clean.name}")
    return pairs


def split_pairs(pairs: list[Pair], ratio: float, seed: int) -> tuple[list[Pair], list[Pair]]:
    if len(pairs) < 2:
        raise DatasetError("need at least 2 pairs to split")
    if not 0 < ratio < 1:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = min(max(int(round(len(pairs) * ratio)), 1), len(pairs) - 1)
    return [pairs[i] for i in order[:n_train]], [pairs[i] for i in order[n_train:]]


def build_dataset(source_dir, ratio: float = 0.9, seed: int = 0, manifest_dir=None):
    """Seeded train/test split of the pairs in ``source_dir``.

    Writes ``train.tsv`` and ``test.tsv`` manifests into ``manifest_dir`` when given.
    """
    train, test = split_pairs(discover_pairs(source_dir), ratio, seed)
    if manifest_dir is not None:
        mdir = Path(manifest_dir)
        mdir.mkdir(parents=True, exist_ok=True)
        write_manifest(train, mdir / "train.tsv", relative_to=mdir)
        write_manifest(test, mdir / "test.tsv", relative_to=mdir)
    return train, test
