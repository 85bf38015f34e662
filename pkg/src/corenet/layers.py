"""Operational (polynomial-kernel) convolution layers and dense layers.

A generative-neuron layer replaces the linear kernel response with a
degree-Q polynomial of the input map::

    y = act(bias + sum_{q=1..Q} conv2d(x**q, kernels[q-1]))

so Q=1 is exactly a convolution layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

ACTIVATIONS = ("tanh", "none")


@dataclass
class OpConvParams:
    kernels: list[Tensor]
    bias: Tensor
    stride: int = 1
    pad: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if not self.kernels:
            raise ConfigurationError("operational layer needs at least one kernel bank")
        shape = self.kernels[0].dims
        if len(shape) != 4 or any(k.dims != shape for k in self.kernels):
            raise ConfigurationError("all kernel banks must share one [C_out, C_in, k, k] shape")
        if self.bias.dims != (shape[0],):
            raise ConfigurationError(f"bias {self.bias.dims} does not match C_out={shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def q(self) -> int:
        return len(self.kernels)

    @property
    def c_out(self) -> int:
        return self.kernels[0].dims[0]

    @property
    def c_in(self) -> int:
        return self.kernels[0].dims[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels[0].dims[2]

    def parameters(self) -> list[Tensor]:
        return [*self.kernels, self.bias]


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weight.dims) != 2 or self.bias.dims != (self.weight.dims[0],):
            raise ConfigurationError(f"dense weight {self.weight.dims} vs bias {self.bias.dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _activate(x: Tensor, activation: str) -> Tensor:
    return T.tanh_apply(x) if activation == "tanh" else x


def opconv_forward(x: Tensor, p: OpConvParams) -> Tensor:
    if x.dims[0] != p.c_in:
        raise ConfigurationError(f"layer expects {p.c_in} input channels, got {x.dims[0]}")
    acc = T.conv2d(T.elementwise_pow(x, 1), p.kernels[0], p.stride, p.pad)
    for q in range(2, p.q + 1):
        acc = acc + T.conv2d(T.elementwise_pow(x, q), p.kernels[q - 1], p.stride, p.pad)
    return _activate(T.add_channel_bias(acc, p.bias), p.activation)


def opconv_block_up(x: Tensor, p: OpConvParams) -> Tensor:
    """Nearest x2 upsampling followed by a stride-1 operational layer."""
    if p.stride != 1:
        raise ConfigurationError("upsampling block needs a stride-1 layer")
    return opconv_forward(T.upsample_nearest(x, 2), p)


def dense_forward(x: Tensor, p: DenseParams) -> Tensor:
    if x.data.ndim != 1 or x.dims[0] != p.weight.dims[1]:
        raise ConfigurationError(f"dense layer expects {p.weight.dims[1]} inputs, got {x.dims}")
    return _activate(T.matvec(p.weight, x) + p.bias, p.activation)


@dataclass(frozen=True)
class OpConvSpec:
    """Shape description of one operational layer."""

    c_in: int
    c_out: int
    kernel: int
    q: int = 1
    stride: int = 1
    pad: int = 0
    activation: str = "tanh"


@dataclass(frozen=True)
class DenseSpec:
    n_in: int
    n_out: int
    activation: str = "tanh"


def init_opconv(spec: OpConvSpec, rng: np.random.Generator, dtype=T.STANDARD) -> OpConvParams:
    """Uniform fan-in init; bank q is drawn with bound sqrt(1/fan_in) / q, bias zero."""
    fan_in = spec.c_in * spec.kernel * spec.kernel
    bound = np.sqrt(1.0 / fan_in)
    shape = (spec.c_out, spec.c_in, spec.kernel, spec.kernel)
    kernels = [
        Tensor(rng.uniform(-bound / q, bound / q, size=shape).astype(dtype), requires_grad=True)
        for q in range(1, spec.q + 1)
    ]
    bias = Tensor(np.zeros(spec.c_out, dtype=dtype), requires_grad=True)
    return OpConvParams(kernels, bias, spec.stride, spec.pad, spec.activation)


def init_dense(spec: DenseSpec, rng: np.random.Generator, dtype=T.STANDARD) -> DenseParams:
    bound = np.sqrt(1.0 / spec.n_in)
    weight = rng.uniform(-bound, bound, size=(spec.n_out, spec.n_in)).astype(dtype)
    return DenseParams(
        Tensor(weight, requires_grad=True),
        Tensor(np.zeros(spec.n_out, dtype=dtype), requires_grad=True),
        spec.activation,
    )


def init_params(spec, rng: np.random.Generator, dtype=T.STANDARD):
    if isinstance(spec, OpConvSpec):
        return init_opconv(spec, rng, dtype)
    if isinstance(spec, DenseSpec):
        return init_dense(spec, rng, dtype)
    raise TypeError(f"no initializer for {type(spec).__name__}")


def count_params(layer) -> int:
    """Closed-form parameter count for a layer spec, allocated layer or list of either."""
    if isinstance(layer, (list, tuple)):
        return sum(count_params(item) for item in layer)
    if isinstance(layer, OpConvSpec):
        return layer.q * layer.c_out * layer.c_in * layer.kernel**2 + layer.c_out
    if isinstance(layer, OpConvParams):
        return layer.q * layer.c_out * layer.c_in * layer.kernel_size**2 + layer.c_out
    if isinstance(layer, DenseSpec):
        return layer.n_out * layer.n_in + layer.n_out
    if isinstance(layer, DenseParams):
        n_out, n_in = layer.weight.dims
        return n_out * n_in + n_out
    if hasattr(layer, "layer_specs"):
        return count_params(list(layer.layer_specs()))
    raise TypeError(f"cannot count parameters of {type(layer).__name__}")


def allocated_size(params: list[Tensor]) -> int:
    return int(sum(p.data.size for p in params))
