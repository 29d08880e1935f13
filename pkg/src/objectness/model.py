"""Network assembly, checkpoint persistence and head swapping.

A network is a trunk of :class:`~objectness.nn.LayerSpec` layers ending in a
``feature_dim`` vector, followed by one dense head: either class logits or
logits over the cells of a :class:`~objectness.bbox.BBoxGrid`.

Checkpoint layout (little-endian)::

    b"OBJN" | u32 version | u8 head kind (0 classification, 1 bbox)
    | u32 len + UTF-8 JSON config
    | u32 tensor count
    | per tensor: u16 len + UTF-8 name, u8 rank, u32 dims..., float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .bbox import BBoxGrid
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    IncompatibleTrunkError,
    MissingParameterError,
    ParameterShapeError,
    TruncatedCheckpointError,
    UnexpectedParameterError,
    UnsupportedVersionError,
)
from .nn import Dense, LayerSpec, ShapeError, make_layer

MAGIC = b"OBJN"
FORMAT_VERSION = 1
HEAD_KINDS = {"classification": 0, "bbox": 1}


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    num_classes: Optional[int] = None
    grid: Optional[BBoxGrid] = None

    def __post_init__(self):
        if self.kind == "classification":
            if not self.num_classes or self.num_classes < 2:
                raise ConfigError(f"classification head needs num_classes >= 2, got {self.num_classes}")
        elif self.kind == "bbox":
            if self.grid is None:
                raise ConfigError("bbox head needs a grid")
        else:
            raise ConfigError(f"unknown head kind {self.kind!r}")

    @property
    def out_features(self) -> int:
        return self.num_classes if self.kind == "classification" else self.grid.size

    def to_dict(self) -> dict:
        if self.kind == "classification":
            return {"kind": self.kind, "num_classes": self.num_classes}
        return {"kind": self.kind, "grid": self.grid.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        if d.get("kind") == "bbox":
            return cls("bbox", grid=BBoxGrid.from_dict(d["grid"]))
        return cls(d.get("kind"), num_classes=d.get("num_classes"))


def classification_head(num_classes: int) -> HeadSpec:
    return HeadSpec("classification", num_classes=num_classes)


def bbox_head(grid: Optional[BBoxGrid] = None) -> HeadSpec:
    return HeadSpec("bbox", grid=grid or BBoxGrid())


def default_trunk(feature_dim: int = 128) -> tuple:
    return (
        LayerSpec("conv", out_channels=16, kernel_size=5, stride=1, pad=2),
        LayerSpec("relu"),
        LayerSpec("lrn"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("conv", out_channels=32, kernel_size=5, stride=1, pad=2),
        LayerSpec("relu"),
        LayerSpec("lrn"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("conv", out_channels=32, kernel_size=3, stride=1, pad=1),
        LayerSpec("relu"),
        LayerSpec("dense", out_features=feature_dim),
        LayerSpec("relu"),
    )


@dataclass(frozen=True)
class NetworkConfig:
    input_dims: tuple = (3, 32, 32)
    trunk: tuple = field(default_factory=default_trunk)
    feature_dim: int = 128
    head: HeadSpec = field(default_factory=bbox_head)
    init_seed: int = 0
    init_std: float = 0.01
    init_scheme: str = "he"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"input_dims must be (C, H, W), got {self.input_dims}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be > 0, got {self.init_std}")
        if self.init_scheme not in ("he", "gaussian"):
            raise ConfigError(f"init_scheme must be 'he' or 'gaussian', got {self.init_scheme!r}")

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "trunk": [s.to_dict() for s in self.trunk],
            "feature_dim": self.feature_dim,
            "head": self.head.to_dict(),
            "init_seed": self.init_seed,
            "init_std": self.init_std,
            "init_scheme": self.init_scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            return cls(
                input_dims=tuple(d["input_dims"]),
                trunk=tuple(LayerSpec.from_dict(s) for s in d["trunk"]),
                feature_dim=int(d["feature_dim"]),
                head=HeadSpec.from_dict(d["head"]),
                init_seed=int(d.get("init_seed", 0)),
                init_std=float(d.get("init_std", 0.01)),
                init_scheme=d.get("init_scheme", "he"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid network config: {exc}") from exc


class Model:
    """A built network: trunk layers plus a dense head.

    ``forward`` caches activations for ``backward``; after ``backward``,
    :meth:`named_grads` holds the gradients matching :meth:`named_params`.
    """

    def __init__(self, config: NetworkConfig, layers: list, head: Dense):
        self.config = config
        self.layers = layers
        self.head = head

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return self.head.forward(x)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.head.backward(dlogits)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def predict_logits(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.head.out_features), np.float32)

    def _named(self, attr: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, value in getattr(layer, attr).items():
                out[f"trunk.{i}.{key}"] = value
        for key, value in getattr(self.head, attr).items():
            out[f"head.{key}"] = value
        return out

    def named_params(self) -> dict:
        """Live references to every parameter array, keyed by checkpoint name."""
        return self._named("params")

    def named_grads(self) -> dict:
        return self._named("grads")

    def set_params(self, tensors: dict) -> None:
        """Copy ``tensors`` into the model, validating names and shapes."""
        params = self.named_params()
        for name in params:
            if name not in tensors:
                raise MissingParameterError(f"missing parameter {name!r}")
        for name, value in tensors.items():
            if name not in params:
                raise UnexpectedParameterError(f"unexpected parameter {name!r}")
            if tuple(value.shape) != params[name].shape:
                raise ParameterShapeError(
                    f"parameter {name!r} has shape {tuple(value.shape)}, config expects {params[name].shape}"
                )
        for name, value in tensors.items():
            params[name][...] = value

    def to_checkpoint(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.named_params().items()})


def _trunk_shapes(config: NetworkConfig) -> list:
    """Instantiate the trunk layers and return ``(layers, output shape)``."""
    shape = config.input_dims
    layers = []
    for i, spec in enumerate(config.trunk):
        try:
            layer = make_layer(spec, shape)
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"trunk layer {i} ({spec.kind}): {exc}") from exc
        layers.append(layer)
    return layers, shape


def build(config: NetworkConfig) -> Model:
    """Build and initialize a network.

    Biases start at zero. Head weights are drawn from N(0, init_std); trunk
    weights too under the ``gaussian`` scheme, or from N(0, 2/fan_in) under
    ``he``. The trunk and the head draw from separate streams of
    ``init_seed`` so a head can be re-initialized without disturbing the
    trunk.
    """
    layers, shape = _trunk_shapes(config)
    if int(np.prod(shape)) != config.feature_dim:
        last = len(config.trunk) - 1
        kind = config.trunk[last].kind if config.trunk else "input"
        raise ConfigError(
            f"trunk layer {last} ({kind}): outputs {int(np.prod(shape))} features, feature_dim is {config.feature_dim}"
        )
    head = Dense(config.feature_dim, config.head.out_features)
    model = Model(config, layers, head)
    trunk_std = None if config.init_scheme == "he" else config.init_std
    _init_layers(layers, np.random.default_rng([config.init_seed, 0]), trunk_std)
    _init_layers([head], np.random.default_rng([config.init_seed, 1]), config.init_std)
    return model


def _init_layers(layers, rng, std):
    for layer in layers:
        for key, value in layer.params.items():
            if key == "weight":
                fan_in = value.shape[0] if value.ndim == 2 else int(np.prod(value.shape[1:]))
                value[...] = rng.normal(0.0, std or np.sqrt(2.0 / fan_in), size=value.shape)
            else:
                value[...] = 0.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: dict
    version: int = FORMAT_VERSION

    @property
    def head_kind(self) -> str:
        return self.config.head.kind


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IB", ckpt.version, HEAD_KINDS[ckpt.head_kind]),
             struct.pack("<I", len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic in {path}: not an OBJN checkpoint")
    version, kind_tag = r.unpack("<IB", "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} in {path}")
    (blob_len,) = r.unpack("<I", "config length")
    try:
        config = NetworkConfig.from_dict(json.loads(r.take(blob_len, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"invalid embedded config in {path}: {exc}") from exc
    if HEAD_KINDS.get(config.head.kind) != kind_tag:
        raise CheckpointError(f"head kind tag {kind_tag} disagrees with embedded config in {path}")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"data of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r} in {path}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor in {path}")
    return Checkpoint(config, tensors, version)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build(ckpt.config)
    model.set_params(ckpt.tensors)
    return model


def save(model: Model, path) -> None:
    write_checkpoint(model.to_checkpoint(), path)


def load(path) -> Model:
    return model_from_checkpoint(read_checkpoint(path))


def head_swap(source: Union[Checkpoint, Model, str, Path], new: Union[HeadSpec, NetworkConfig],
              init_seed: Optional[int] = None) -> Model:
    """New model whose trunk is copied from ``source`` and whose head is fresh.

    ``new`` is either a head spec (the source trunk is reused) or a full
    network config whose trunk must match the source shape-for-shape. The
    source is never modified; nothing is frozen.
    """
    if isinstance(source, Model):
        source = source.to_checkpoint()
    elif not isinstance(source, Checkpoint):
        source = read_checkpoint(source)
    if isinstance(new, HeadSpec):
        config = replace(source.config, head=new)
    else:
        config = new
        if config.input_dims != source.config.input_dims or config.trunk != source.config.trunk:
            raise IncompatibleTrunkError("trunk of the new config does not match the checkpoint trunk")
    if init_seed is not None:
        config = replace(config, init_seed=init_seed)
    model = build(config)
    params = model.named_params()
    for name, value in params.items():
        if not name.startswith("trunk."):
            continue
        if name not in source.tensors:
            raise IncompatibleTrunkError(f"checkpoint lacks trunk parameter {name!r}")
        if source.tensors[name].shape != value.shape:
            raise IncompatibleTrunkError(
                f"trunk parameter {name!r}: checkpoint {source.tensors[name].shape} vs new {value.shape}"
            )
        value[...] = source.tensors[name]
    return model
