"""Dense blocks, multi-scale dense blocks and transition layers."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import AvgPool1D, BatchNorm1D, Conv1D, Layer, ReLU, Sequential


class Ordering(str, enum.Enum):
    BN_RELU_CONV = "BN_RELU_CONV"
    CONV_BN_RELU = "CONV_BN_RELU"


@dataclass(frozen=True)
class DensePartSpec:
    """One repeated part of a dense block.

    ``multiscale`` parts wire every conv to the concatenation of the block
    input and all earlier outputs, and export every conv output; kernel
    lengths must strictly decrease. Standard parts are a chain (bottleneck
    first) that reads the running concatenation and exports only its last
    conv.
    """

    layers: tuple[tuple[int, int], ...]  # (filters, kernel_length)
    ordering: Ordering = Ordering.BN_RELU_CONV
    multiscale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(f), int(k)) for f, k in self.layers))
        object.__setattr__(self, "ordering", Ordering(self.ordering))
        if not self.layers:
            raise ConfigurationError("a dense part needs at least one conv layer")
        for f, k in self.layers:
            if f < 1 or k < 1:
                raise ConfigurationError(f"filters and kernel length must be >= 1, got ({f}, {k})")
        if self.multiscale:
            ks = [k for _, k in self.layers]
            if any(a <= b for a, b in zip(ks, ks[1:])):
                raise ConfigurationError(f"multi-scale kernel lengths must strictly decrease, got {ks}")

    @property
    def growth(self) -> int:
        """Channels a single part appends to the running concatenation."""
        if self.multiscale:
            return sum(f for f, _ in self.layers)
        return self.layers[-1][0]


@dataclass(frozen=True)
class DenseBlockSpec:
    parts: int
    part: DensePartSpec

    def __post_init__(self):
        if self.parts < 0:
            raise ConfigurationError("part count must be >= 0")

    @property
    def conv_layers(self) -> int:
        return self.parts * len(self.part.layers)

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.parts * self.part.growth


@dataclass(frozen=True)
class TransitionSpec:
    compression: float = 0.5
    pool_stride: int = 1

    def __post_init__(self):
        if not 0 < self.compression <= 1:
            raise ConfigurationError("transition compression must lie in (0, 1]")
        if self.pool_stride < 1:
            raise ConfigurationError("pool_stride must be >= 1")

    def out_channels(self, in_channels: int) -> int:
        return math.ceil(self.compression * in_channels - 1e-9)


def standard_part(bottleneck=128, growth=32, ordering=Ordering.BN_RELU_CONV) -> DensePartSpec:
    return DensePartSpec(((bottleneck, 1), (growth, 3)), ordering, multiscale=False)


def multiscale_part(filters=(64, 48, 40, 32), kernels=(30, 14, 7, 3), ordering=Ordering.CONV_BN_RELU) -> DensePartSpec:
    if len(filters) != len(kernels):
        raise ConfigurationError("filters and kernels must have equal length")
    return DensePartSpec(tuple(zip(filters, kernels)), ordering, multiscale=True)


class ConvUnit(Sequential):
    """Conv with its batch norm and ReLU, in either order."""

    def __init__(self, in_channels, filters, kernel_length, ordering, rng, dtype=np.float32):
        conv = Conv1D(in_channels, filters, kernel_length, rng, dtype)
        if Ordering(ordering) is Ordering.CONV_BN_RELU:
            layers = [conv, BatchNorm1D(filters, dtype), ReLU()]
        else:
            layers = [BatchNorm1D(in_channels, dtype), ReLU(), conv]
        super().__init__(layers)
        self.conv = conv
        self.in_channels, self.out_channels = in_channels, filters


@dataclass(frozen=True)
class Wire:
    part: int
    index: int
    in_channels: int
    reads_all: bool  # False: reads the previous unit's (unexported) output
    exports: bool
    offset: int  # channel offset of the exported output in the block output


def wiring_table(in_channels: int, spec: DenseBlockSpec) -> list[Wire]:
    wires = []
    total = in_channels
    for p in range(spec.parts):
        prev_out = None
        last = len(spec.part.layers) - 1
        for i, (filters, _) in enumerate(spec.part.layers):
            reads_all = spec.part.multiscale or i == 0
            exports = spec.part.multiscale or i == last
            cin = total if reads_all else prev_out
            wires.append(Wire(p, i, cin, reads_all, exports, total if exports else -1))
            if exports:
                total += filters
            prev_out = filters
    return wires


class DenseBlock(Layer):
    """Densely connected block; covers both standard and multi-scale parts.

    Exported feature maps are written into one preallocated buffer, so the
    input of a ``reads_all`` unit is a channel prefix of that buffer, i.e. the
    concatenation of the block input and every earlier exported output.
    """

    name = "dense_block"

    def __init__(self, in_channels: int, spec: DenseBlockSpec, rng, dtype=np.float32):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels(in_channels)
        self.wires = wiring_table(in_channels, spec)
        self.units = [
            ConvUnit(w.in_channels, spec.part.layers[w.index][0], spec.part.layers[w.index][1],
                     spec.part.ordering, rng, dtype)
            for w in self.wires
        ]
        if self.wires and max(w.offset + u.out_channels for w, u in zip(self.wires, self.units) if w.exports) != self.out_channels:
            raise ConfigurationError("dense block channel bookkeeping mismatch")

    @property
    def conv_layers(self) -> int:
        return len(self.units)

    def forward(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(f"dense block expects {self.in_channels} channels, got {x.shape[1]}")
        if not self.units:
            return x
        b, _, length = x.shape
        buf = np.empty((b, self.out_channels, length), dtype=x.dtype)
        buf[:, :self.in_channels] = x
        prev = None
        for wire, unit in zip(self.wires, self.units):
            inp = buf[:, :wire.in_channels] if wire.reads_all else prev
            out = unit.forward(inp, training)
            if wire.exports:
                buf[:, wire.offset:wire.offset + unit.out_channels] = out
            prev = out
        return buf

    def backward(self, grad):
        if not self.units:
            return grad
        gbuf = np.array(grad, copy=True)
        pending = None
        for wire, unit in zip(reversed(self.wires), reversed(self.units)):
            g = pending
            if wire.exports:
                own = gbuf[:, wire.offset:wire.offset + unit.out_channels]
                g = own if g is None else g + own
            g_in = unit.backward(g)
            if wire.reads_all:
                gbuf[:, :wire.in_channels] += g_in
                pending = None
            else:
                pending = g_in
        return gbuf[:, :self.in_channels]

    def children(self):
        return self.units


class Transition(Sequential):
    """BN -> ReLU -> width-1 conv to the compressed channel count, optional average pooling."""

    name = "transition"

    def __init__(self, in_channels: int, spec: TransitionSpec, rng, dtype=np.float32):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels(in_channels)
        layers = [BatchNorm1D(in_channels, dtype), ReLU(), Conv1D(in_channels, self.out_channels, 1, rng, dtype)]
        if spec.pool_stride > 1:
            layers.append(AvgPool1D(spec.pool_stride, spec.pool_stride))
        super().__init__(layers)


def dense_block_forward(x, spec: DenseBlockSpec, block: DenseBlock | None = None, rng=None, training=False):
    """Functional entry point; builds a fresh block when ``block`` is not given."""
    if block is None:
        block = DenseBlock(x.shape[1], spec, rng or np.random.default_rng(0), x.dtype)
    if block.spec != spec:
        raise ConfigurationError("block parameters were built for a different spec")
    return block.forward(x, training)


def multiscale_block_forward(x, spec: DenseBlockSpec, block: DenseBlock | None = None, rng=None, training=False):
    if not spec.part.multiscale:
        raise ConfigurationError("multiscale_block_forward needs a multi-scale part spec")
    return dense_block_forward(x, spec, block, rng, training)


def transition_forward(x, spec: TransitionSpec, layer: Transition | None = None, rng=None, training=False):
    if layer is None:
        layer = Transition(x.shape[1], spec, rng or np.random.default_rng(0), x.dtype)
    return layer.forward(x, training)
