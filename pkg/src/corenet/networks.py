"""Apprentice (restoration U-Net) and Master (quality regressor) networks."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    DenseParams,
    DenseSpec,
    OpConvParams,
    OpConvSpec,
    count_params,
    dense_forward,
    init_params,
    opconv_block_up,
    opconv_forward,
)
from .tensor import ConfigurationError, Tensor

N_STAGES = 5
AR_MULTIPLE = 2**N_STAGES


@dataclass
class ARConfig:
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 256])
    down_kernel: int = 5
    up_kernel: int = 7
    down_stride: int = 2
    q: int = 3
    in_channels: int = 3

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) != N_STAGES:
            raise ConfigurationError(f"AR needs {N_STAGES} encoder widths, got {self.widths}")
        if self.down_stride != 2:
            raise ConfigurationError("AR downsampling stride must be 2 to mirror the x2 upsampling")
        if self.up_kernel % 2 == 0:
            raise ConfigurationError("upsampling-side kernel must be odd to preserve size")
        if self.q < 1 or min(self.widths) < 1:
            raise ConfigurationError("Q and widths must be positive")

    def layer_specs(self) -> list[OpConvSpec]:
        w = self.widths
        specs = []
        c_in = self.in_channels
        for i in range(N_STAGES):
            specs.append(OpConvSpec(c_in, w[i], self.down_kernel, self.q, self.down_stride,
                                    (self.down_kernel - 1) // 2))
            c_in = w[i]
        # decoder stage j lands on the resolution of encoder stage 3-j
        for j in range(N_STAGES):
            c_out = w[N_STAGES - 2 - j] if j < N_STAGES - 1 else self.in_channels
            specs.append(OpConvSpec(c_in, c_out, self.up_kernel, self.q, 1, self.up_kernel // 2))
            c_in = c_out
        return specs


DESK_AR = dict(widths=[4, 8, 16, 16, 16])


@dataclass
class MRConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    kernel: int = 4
    strides: list[int] = field(default_factory=lambda: [4, 4, 4, 2, 2])
    q: int = 2
    dense_hidden: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.strides = [int(s) for s in self.strides]
        if len(self.widths) != N_STAGES or len(self.strides) != N_STAGES:
            raise ConfigurationError("MR needs 5 widths and 5 strides")

    def pad_for(self, stride: int) -> int:
        return max(0, (self.kernel - stride) // 2)

    def layer_specs(self) -> list:
        specs: list = []
        c_in = self.in_channels
        for w, s in zip(self.widths, self.strides):
            specs.append(OpConvSpec(c_in, w, self.kernel, self.q, s, self.pad_for(s)))
            c_in = w
        specs.append(DenseSpec(self.widths[-1], self.dense_hidden, "tanh"))
        specs.append(DenseSpec(self.dense_hidden, 1, "none"))
        return specs

    def feature_size(self, n: int) -> int:
        """Spatial extent after the operational stack for an ``n``-pixel side."""
        for s in self.strides:
            n = T.conv_out_size(n, self.kernel, s, self.pad_for(s))
            if n < 1:
                return 0
        return n

    def input_size(self) -> int:
        return int(np.prod(self.strides))


DESK_MR = dict(widths=[8, 16, 16, 32, 32], strides=[2, 2, 2, 2, 2], dense_hidden=32)


class _Model:
    config: ARConfig | MRConfig
    layers: list

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, OpConvParams):
                for q, k in enumerate(layer.kernels, start=1):
                    out.append((f"layer{i}.w{q}", k))
                out.append((f"layer{i}.bias", layer.bias))
            else:
                out.append((f"layer{i}.weight", layer.weight))
                out.append((f"layer{i}.bias", layer.bias))
        return out

    def layer_specs(self):
        return self.config.layer_specs()

    def num_params(self) -> int:
        return count_params(self.config.layer_specs())

    @property
    def dtype(self):
        return self.layers[0].parameters()[0].data.dtype

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]


class ARModel(_Model):
    def __init__(self, config: ARConfig, layers: list[OpConvParams]):
        self.config = config
        self.layers = layers

    @property
    def encoder(self) -> list[OpConvParams]:
        return self.layers[:N_STAGES]

    @property
    def decoder(self) -> list[OpConvParams]:
        return self.layers[N_STAGES:]


class MRModel(_Model):
    def __init__(self, config: MRConfig, layers: list):
        self.config = config
        self.layers = layers

    @property
    def conv_layers(self) -> list[OpConvParams]:
        return self.layers[:N_STAGES]

    @property
    def head(self) -> list[DenseParams]:
        return self.layers[N_STAGES:]


def build_ar(cfg: ARConfig, rng: np.random.Generator, dtype=T.STANDARD) -> ARModel:
    return ARModel(cfg, [init_params(s, rng, dtype) for s in cfg.layer_specs()])


def build_mr(cfg: MRConfig, rng: np.random.Generator, dtype=T.STANDARD) -> MRModel:
    return MRModel(cfg, [init_params(s, rng, dtype) for s in cfg.layer_specs()])


def _as_input(img, dtype) -> Tensor:
    if isinstance(img, Tensor):
        return img
    return Tensor(np.asarray(img, dtype=dtype))


def ar_forward(m: ARModel, img) -> Tensor:
    """Restore a normalized ``3xHxW`` image; H and W must be multiples of 32."""
    x = _as_input(img, m.dtype)
    if x.data.ndim != 3 or x.dims[0] != m.config.in_channels:
        raise ConfigurationError(f"AR expects [{m.config.in_channels},H,W], got {x.dims}")
    _, h, w = x.dims
    if h % AR_MULTIPLE or w % AR_MULTIPLE:
        raise ConfigurationError(f"AR input sides must be multiples of {AR_MULTIPLE}, got {h}x{w}")
    if not np.all(np.abs(x.data) <= 1 + 1e-6):
        raise ConfigurationError("AR input must be normalized to [-1, 1]")
    skips = []
    for layer in m.encoder:
        x = opconv_forward(x, layer)
        skips.append(x)
    x = skips.pop()
    for layer in m.decoder:
        x = opconv_block_up(x, layer)
        if skips:
            x = x + skips.pop()
    return x


def mr_forward(m: MRModel, img) -> Tensor:
    """Scalar quality score (unbounded, trained toward [0, 1] labels)."""
    x = _as_input(img, m.dtype)
    if x.data.ndim != 3 or x.dims[0] != m.config.in_channels:
        raise ConfigurationError(f"MR expects [{m.config.in_channels},H,W], got {x.dims}")
    for layer in m.conv_layers:
        x = opconv_forward(x, layer)
    if x.dims[1:] != (1, 1):
        raise ConfigurationError(
            f"MR stride chain leaves a {x.dims[1]}x{x.dims[2]} map; input must be "
            f"{m.config.input_size()}x{m.config.input_size()}"
        )
    x = T.flatten(x)
    for layer in m.head:
        x = dense_forward(x, layer)
    return T.reshape(x, ())


@contextmanager
def frozen(*models: _Model):
    """Temporarily stop gradient tracking for the models' parameters."""
    params = [p for m in models for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def config_dict(cfg) -> dict:
    return asdict(cfg)
