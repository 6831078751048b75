"""Model configs, builders for the three network families, and checkpoints.

Config files are flat ``key = value`` text, one pair per line, lists comma
separated, ``#`` starts a comment. Block and transition specs use indexed keys::

    name = ms-densenet
    architecture = MULTISCALE_DENSENET
    stem_filters = 16
    block.0.parts = 6
    block.0.filters = 64, 48, 40, 32
    block.0.kernels = 30, 14, 7, 3
    block.0.ordering = CONV_BN_RELU
    block.0.multiscale = true
    transition.0.compression = 0.5
    ...

Keys belonging to other components (``train.*``, ``rf.*``, ``gbm.*``) are
carried through untouched in ``ModelConfig.extra``.
"""
from __future__ import annotations

import enum
import io
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import (
    DenseBlock,
    DenseBlockSpec,
    DensePartSpec,
    Ordering,
    Transition,
    TransitionSpec,
    multiscale_part,
    standard_part,
)
from .errors import ConfigurationError, ParseError, ShapeError
from .tensor import (
    AvgPool1D,
    Conv1D,
    Flatten,
    FullyConnected,
    GlobalAvgPool,
    Layer,
    ReLU,
    Sequential,
    sigmoid,
)

SERIES_LENGTH = 365
CHECKPOINT_MAGIC = b"THEFTNET"
CHECKPOINT_VERSION = 1


class Architecture(str, enum.Enum):
    CLASSICAL_CNN = "CLASSICAL_CNN"
    DENSENET_1D = "DENSENET_1D"
    MULTISCALE_DENSENET = "MULTISCALE_DENSENET"


@dataclass
class ModelConfig:
    name: str
    architecture: Architecture
    blocks: list[DenseBlockSpec] = field(default_factory=list)
    transitions: list[TransitionSpec] = field(default_factory=list)
    head: list[int] = field(default_factory=lambda: [1])
    input_length: int = SERIES_LENGTH
    input_channels: int = 1
    stem_filters: int = 16
    stem_kernel: int = 7
    stem_pool: int = 1  # average-pool stride after the stem conv; 1 = none
    # classical CNN only
    conv_filters: list[int] = field(default_factory=lambda: [32, 32])
    conv_kernel: int = 7
    pool: int = 2
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)

    def validate(self):
        if self.input_length < 1 or self.input_channels < 1:
            raise ConfigurationError("input length and channels must be positive")
        if not self.head or self.head[-1] != 1 or min(self.head) < 1:
            raise ConfigurationError(f"head must end in a single output unit, got {self.head}")
        if self.architecture is Architecture.CLASSICAL_CNN:
            if self.blocks:
                raise ConfigurationError("classical CNN takes no dense blocks")
            if not self.conv_filters or min(self.conv_filters) < 1 or self.conv_kernel < 1 or self.pool < 1:
                raise ConfigurationError("invalid classical CNN conv stack")
            return
        if not self.blocks:
            raise ConfigurationError(f"{self.architecture.value} needs at least one dense block")
        if len(self.transitions) != len(self.blocks) - 1:
            raise ConfigurationError("need exactly one transition between consecutive blocks")
        want_ms = self.architecture is Architecture.MULTISCALE_DENSENET
        for spec in self.blocks:
            if spec.part.multiscale != want_ms:
                raise ConfigurationError(f"{self.architecture.value} blocks must have multiscale={want_ms}")
        if self.stem_filters < 1 or self.stem_kernel < 1 or self.stem_pool < 1:
            raise ConfigurationError("invalid stem conv")


# ---------------------------------------------------------------------------
# stock configs


def classical_cnn_config(**overrides) -> ModelConfig:
    cfg = ModelConfig("cnn", Architecture.CLASSICAL_CNN, head=[64, 32, 1])
    return replace(cfg, **overrides)


def densenet1d_config(n_blocks=2, parts=6, **overrides) -> ModelConfig:
    """Two dense blocks of 6 parts, each part conv(128, k=1) -> conv(32, k=3).

    A 3-block variant builds, but overfits on year-long series.
    """
    block = DenseBlockSpec(parts, standard_part(128, 32))
    cfg = ModelConfig(
        "densenet1d",
        Architecture.DENSENET_1D,
        blocks=[block] * n_blocks,
        transitions=[TransitionSpec(0.5, 1)] * (n_blocks - 1),
    )
    return replace(cfg, **overrides)


def multiscale_densenet_config(n_blocks=2, parts=6, filters=(64, 48, 40, 32), kernels=(30, 14, 7, 3),
                               **overrides) -> ModelConfig:
    block = DenseBlockSpec(parts, multiscale_part(filters, kernels))
    cfg = ModelConfig(
        "ms-densenet",
        Architecture.MULTISCALE_DENSENET,
        blocks=[block] * n_blocks,
        transitions=[TransitionSpec(0.5, 1)] * (n_blocks - 1),
    )
    return replace(cfg, **overrides)


def desk_configs() -> dict[str, ModelConfig]:
    """Reduced-width configs used by the cross-model benchmark.

    Same topology as the full configs (stem, two blocks, part structure,
    orderings, kernel lengths) with 3 parts per block, narrow filters and the
    dense variants running at half temporal resolution (quarter resolution in
    the second block), so a five-fold, three-seed comparison finishes on a
    single CPU core.
    """
    half = TransitionSpec(0.5, 2)
    return {
        "cnn": classical_cnn_config(conv_filters=[16, 16], head=[64, 32, 1]),
        "densenet1d": replace(
            densenet1d_config(),
            blocks=[DenseBlockSpec(3, standard_part(16, 4))] * 2,
            transitions=[half],
            stem_filters=8,
            stem_pool=2,
        ),
        "ms-densenet": replace(
            multiscale_densenet_config(),
            blocks=[DenseBlockSpec(3, multiscale_part((2, 2, 2, 2), (30, 14, 7, 3)))] * 2,
            transitions=[half],
            stem_filters=8,
            stem_pool=2,
        ),
    }


# ---------------------------------------------------------------------------
# model


class Model(Sequential):
    """Network emitting one logit per row; ``predict_proba`` applies the sigmoid."""

    def __init__(self, config: ModelConfig, layers, dtype):
        super().__init__(layers)
        self.config = config
        self.dtype = np.dtype(dtype)

    @property
    def dense_blocks(self) -> list[DenseBlock]:
        return [m for m in self.layers if isinstance(m, DenseBlock)]

    @property
    def conv_layers(self) -> list[Conv1D]:
        return [m for m in self.modules() if isinstance(m, Conv1D)]

    @property
    def fc_widths(self) -> list[int]:
        return [m.p.out_features for m in self.modules() if isinstance(m, FullyConnected)]

    def n_parameters(self) -> int:
        return sum(v.size for _, v, _ in self.slots())

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every learnable array and buffer in declaration order."""
        out = []
        for i, layer in enumerate(self.layers):
            out += _state(layer, f"{i}.")
        return out

    def check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[:, None, :]
        c, length = self.config.input_channels, self.config.input_length
        if x.ndim != 3 or x.shape[1:] != (c, length):
            raise ShapeError(f"expected input [batch, {c}, {length}], got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def predict_proba(self, x, batch_size=256) -> np.ndarray:
        """Theft probability per row, batch norm in inference mode. Mutates nothing."""
        x = self.check_input(x)
        out = [self.forward(x[i:i + batch_size], training=False).ravel() for i in range(0, len(x), batch_size)]
        z = np.concatenate(out) if out else np.zeros(0, self.dtype)
        return sigmoid(z)


def _state(layer: Layer, prefix: str):
    out = [(prefix + n, v) for n, v, _ in layer.own_slots()]
    out += [(prefix + n, v) for n, v in layer.own_buffers()]
    for i, child in enumerate(layer.children()):
        out += _state(child, f"{prefix}{i}.")
    return out


def _head(in_features, widths, rng, dtype):
    layers = []
    for i, w in enumerate(widths):
        layers.append(FullyConnected(in_features, w, rng, dtype))
        if i < len(widths) - 1:
            layers.append(ReLU())
        in_features = w
    return layers


def build_classical_cnn(cfg: ModelConfig, rng, dtype=np.float32) -> Model:
    if cfg.architecture is not Architecture.CLASSICAL_CNN:
        raise ConfigurationError("build_classical_cnn needs a CLASSICAL_CNN config")
    cfg.validate()
    layers = []
    channels, length = cfg.input_channels, cfg.input_length
    for filters in cfg.conv_filters:
        layers += [Conv1D(channels, filters, cfg.conv_kernel, rng, dtype), ReLU(), AvgPool1D(cfg.pool, cfg.pool)]
        channels = filters
        length = (length - cfg.pool) // cfg.pool + 1
        if length < 1:
            raise ConfigurationError("input too short for the pooling stack")
    layers.append(Flatten())
    layers += _head(channels * length, cfg.head, rng, dtype)
    return Model(cfg, layers, dtype)


def _build_dense(cfg: ModelConfig, rng, dtype) -> Model:
    cfg.validate()
    layers = [Conv1D(cfg.input_channels, cfg.stem_filters, cfg.stem_kernel, rng, dtype)]
    if cfg.stem_pool > 1:
        layers.append(AvgPool1D(cfg.stem_pool, cfg.stem_pool))
    channels = cfg.stem_filters
    for i, spec in enumerate(cfg.blocks):
        block = DenseBlock(channels, spec, rng, dtype)
        layers.append(block)
        channels = block.out_channels
        if i < len(cfg.transitions):
            tr = Transition(channels, cfg.transitions[i], rng, dtype)
            layers.append(tr)
            channels = tr.out_channels
    layers.append(GlobalAvgPool())
    layers += _head(channels, cfg.head, rng, dtype)
    return Model(cfg, layers, dtype)


def build_densenet1d(cfg: ModelConfig, rng, dtype=np.float32) -> Model:
    if cfg.architecture is not Architecture.DENSENET_1D:
        raise ConfigurationError("build_densenet1d needs a DENSENET_1D config")
    if len(cfg.blocks) >= 3:
        warnings.warn("1D-DenseNet with 3 or more dense blocks tends to overfit", UserWarning, stacklevel=2)
    return _build_dense(cfg, rng, dtype)


def build_multiscale_densenet(cfg: ModelConfig, rng, dtype=np.float32) -> Model:
    if cfg.architecture is not Architecture.MULTISCALE_DENSENET:
        raise ConfigurationError("build_multiscale_densenet needs a MULTISCALE_DENSENET config")
    if len(cfg.blocks) == 1:
        warnings.warn("a single multi-scale dense block underfits; use two", UserWarning, stacklevel=2)
    return _build_dense(cfg, rng, dtype)


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32) -> Model:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    builder = {
        Architecture.CLASSICAL_CNN: build_classical_cnn,
        Architecture.DENSENET_1D: build_densenet1d,
        Architecture.MULTISCALE_DENSENET: build_multiscale_densenet,
    }[cfg.architecture]
    return builder(cfg, rng, dtype)


def predict_proba(model: Model, x) -> np.ndarray:
    return model.predict_proba(x)


# ---------------------------------------------------------------------------
# config text format


def _ints(v: str) -> list[int]:
    return [int(s) for s in v.split(",") if s.strip()]


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_kv(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        if key in pairs:
            raise ParseError(f"duplicate key {key!r}", lineno)
        pairs[key] = value
    return pairs


_FOREIGN_PREFIXES = ("train.", "rf.", "gbm.")


def config_from_text(text: str) -> ModelConfig:
    kv = parse_kv(text)
    extra = {k: kv.pop(k) for k in list(kv) if k.startswith(_FOREIGN_PREFIXES)}
    try:
        arch = Architecture(kv.pop("architecture").upper())
        cfg = ModelConfig(kv.pop("name", arch.value.lower()), arch, extra=extra)
        scalar = {"input_length": int, "input_channels": int, "stem_filters": int, "stem_kernel": int,
                  "stem_pool": int, "conv_kernel": int, "pool": int}
        for key, conv in scalar.items():
            if key in kv:
                setattr(cfg, key, conv(kv.pop(key)))
        for key in ("head", "conv_filters"):
            if key in kv:
                setattr(cfg, key, _ints(kv.pop(key)))
        n_blocks = int(kv.pop("n_blocks", 0))
        for i in range(n_blocks):
            p = f"block.{i}."
            part = DensePartSpec(
                tuple(zip(_ints(kv.pop(p + "filters")), _ints(kv.pop(p + "kernels")), strict=True)),
                Ordering(kv.pop(p + "ordering", "BN_RELU_CONV").upper()),
                _bool(kv.pop(p + "multiscale", "false")),
            )
            cfg.blocks.append(DenseBlockSpec(int(kv.pop(p + "parts")), part))
        for i in range(max(n_blocks - 1, 0)):
            p = f"transition.{i}."
            cfg.transitions.append(TransitionSpec(float(kv.pop(p + "compression", "0.5")),
                                                  int(kv.pop(p + "pool_stride", "1"))))
    except KeyError as e:
        raise ConfigurationError(f"missing config key {e.args[0]}") from None
    except ValueError as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"bad config value: {e}") from None
    if kv:
        raise ConfigurationError(f"unknown config keys: {sorted(kv)}")
    cfg.validate()
    return cfg


def _join(xs) -> str:
    return ", ".join(str(x) for x in xs)


def config_to_text(cfg: ModelConfig) -> str:
    lines = [
        f"name = {cfg.name}",
        f"architecture = {cfg.architecture.value}",
        f"input_length = {cfg.input_length}",
        f"input_channels = {cfg.input_channels}",
        f"head = {_join(cfg.head)}",
    ]
    if cfg.architecture is Architecture.CLASSICAL_CNN:
        lines += [f"conv_filters = {_join(cfg.conv_filters)}", f"conv_kernel = {cfg.conv_kernel}", f"pool = {cfg.pool}"]
    else:
        lines += [f"stem_filters = {cfg.stem_filters}", f"stem_kernel = {cfg.stem_kernel}", f"stem_pool = {cfg.stem_pool}",
                  f"n_blocks = {len(cfg.blocks)}"]
        for i, spec in enumerate(cfg.blocks):
            lines += [
                f"block.{i}.parts = {spec.parts}",
                f"block.{i}.filters = {_join(f for f, _ in spec.part.layers)}",
                f"block.{i}.kernels = {_join(k for _, k in spec.part.layers)}",
                f"block.{i}.ordering = {spec.part.ordering.value}",
                f"block.{i}.multiscale = {str(spec.part.multiscale).lower()}",
            ]
        for i, tr in enumerate(cfg.transitions):
            lines += [f"transition.{i}.compression = {tr.compression!r}", f"transition.{i}.pool_stride = {tr.pool_stride}"]
    lines += [f"{k} = {v}" for k, v in sorted(cfg.extra.items())]
    return "\n".join(lines) + "\n"


def load_config(path) -> ModelConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: ModelConfig, path) -> None:
    atomic_write(path, config_to_text(cfg).encode("utf-8"))


# ---------------------------------------------------------------------------
# checkpoints


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: Model) -> bytes:
    """Magic, version, config echo, then float32 arrays in declaration order."""
    buf = io.BytesIO()
    cfg = config_to_text(model.config).encode("utf-8")
    state = model.state()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<HB", len(raw), arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, n_cfg = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    cfg = config_from_text(data[pos:pos + n_cfg].decode("utf-8"))
    pos += n_cfg
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = build_model(cfg, seed=0, dtype=np.float32)
    state = model.state()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if count != len(state):
        raise ParseError(f"{path}: checkpoint holds {count} arrays, model declares {len(state)}")
    for name, target in state:
        n_name, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        got = data[pos:pos + n_name].decode("utf-8")
        pos += n_name
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        if got != name or tuple(shape) != target.shape:
            raise ParseError(f"{path}: array {got} {shape} does not match {name} {target.shape}")
        size = int(np.prod(shape)) * 4
        target[...] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
        pos += size
    return model
