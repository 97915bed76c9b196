"""3D ResNet- and DenseNet-style super-resolution networks.

Both networks map a single-channel volume on the HR grid (the zero-filled
LR input) to a prediction of the same shape: ``prediction = input + residual``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CorruptionError, FormatError, ValidationError

CKPT_MAGIC = b"CKPT"
ARCHITECTURES = ("resnet", "densenet")
TAIL_INIT_SCALE = 1e-2


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "resnet"
    channels: int = 32
    blocks: int = 16
    growth: int = 16
    initial_channels: int = 32
    dense_blocks: int = 4
    layers_per_dense_block: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        for name in ("channels", "blocks", "growth", "initial_channels", "dense_blocks", "layers_per_dense_block"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _conv(name, cin, cout, k=3):
    return [(f"{name}.weight", (cout, cin, k, k, k)), (f"{name}.bias", (cout,))]


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list of every trainable tensor."""
    layout = []
    if config.architecture == "resnet":
        c = config.channels
        layout += _conv("head", 1, c)
        for i in range(config.blocks):
            layout += _conv(f"block{i}.conv1", c, c)
            layout += _conv(f"block{i}.conv2", c, c)
        layout += _conv("tail", c, 1)
    else:
        c0, g = config.initial_channels, config.growth
        layout += _conv("head", 1, c0)
        for b in range(config.dense_blocks):
            for i in range(config.layers_per_dense_block):
                layout += _conv(f"dense{b}.layer{i}", c0 + i * g, g)
            layout += _conv(f"dense{b}.transition", c0 + config.layers_per_dense_block * g, c0, k=1)
        layout += _conv("tail", c0, 1)
    return layout


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: list[tuple[str, np.ndarray]]  # float32 arrays in layout order
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        layout = parameter_layout(self.config)
        if [n for n, _ in layout] != [n for n, _ in self.parameters]:
            raise ValidationError("checkpoint parameter names do not match the config layout")
        fixed = []
        for (name, shape), (_, arr) in zip(layout, self.parameters):
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != shape:
                raise ValidationError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            fixed.append((name, arr))
        self.parameters = fixed

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.parameters)

    def to_bytes(self) -> bytes:
        table = []
        offset = 0
        for name, arr in self.parameters:
            nbytes = arr.size * 4
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        manifest = json.dumps(
            {"config": asdict(self.config), "parameters": table, "metadata": self.metadata},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in self.parameters)
        return CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest + payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if len(buf) < 8 or buf[:4] != CKPT_MAGIC:
            raise FormatError("missing CKPT magic")
        (mlen,) = struct.unpack("<I", buf[4:8])
        try:
            manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"malformed CKPT manifest: {exc}") from exc
        payload = buf[8 + mlen :]
        params = []
        for entry in manifest["parameters"]:
            lo, nbytes = entry["offset"], entry["nbytes"]
            if lo + nbytes > len(payload):
                raise CorruptionError(f"parameter {entry['name']} runs past the end of the payload")
            arr = np.frombuffer(payload[lo : lo + nbytes], dtype="<f4").reshape(entry["shape"])
            params.append((entry["name"], arr.astype(np.float32)))
        total = sum(e["nbytes"] for e in manifest["parameters"])
        if total != len(payload):
            raise CorruptionError(f"CKPT payload has {len(payload)} bytes, manifest lists {total}")
        return cls(ModelConfig.from_dict(manifest["config"]), params, manifest.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def init_parameters(config: ModelConfig) -> ModelCheckpoint:
    """Fan-in scaled normal weights (std ``sqrt(2 / fan_in)``), zero biases.

    The tail conv is scaled down by ``TAIL_INIT_SCALE`` so an untrained network
    returns almost exactly its input; at full fan-in scale the residual stack's
    variance swamps the skip path and early training is wasted undoing it.
    """
    rng = np.random.default_rng(config.seed)
    params = []
    for name, shape in parameter_layout(config):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            if name.startswith("tail."):
                arr *= TAIL_INIT_SCALE
        else:
            arr = np.zeros(shape)
        params.append((name, arr.astype(np.float32)))
    return ModelCheckpoint(config, params, {"epoch": 0, "best_val_ssim": None, "seed": config.seed})


# ---------------------------------------------------------------------------
# networks


class Network:
    """A built model: named parameter tensors plus a forward function."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray] | None = None, trainable=True):
        self.config = config
        if arrays is None:
            arrays = init_parameters(config).arrays()
        self.params: dict[str, ad.Tensor] = {}
        for name, shape in parameter_layout(config):
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = ad.Tensor(arr.copy(), requires_grad=trainable, name=name)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def conv(self, name, x, padding=1):
        return ad.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.value.ndim != 5 or x.shape[1] != 1:
            raise ValidationError(f"network input must be (N, 1, D, H, W), got {x.shape}")
        if self.config.architecture == "resnet":
            residual = self._resnet_body(x)
        else:
            residual = self._densenet_body(x)
        return ad.global_skip_add(x, residual)

    __call__ = forward

    def _resnet_body(self, x):
        h = self.conv("head", x)
        for i in range(self.config.blocks):
            r = self.conv(f"block{i}.conv2", ad.relu(self.conv(f"block{i}.conv1", h)))
            h = ad.add(h, r)
        return self.conv("tail", h)

    def _densenet_body(self, x):
        h = self.conv("head", x)
        for b in range(self.config.dense_blocks):
            stack = h
            for i in range(self.config.layers_per_dense_block):
                new = self.conv(f"dense{b}.layer{i}", ad.relu(stack))
                stack = ad.concat_channels(stack, new)
            h = self.conv(f"dense{b}.transition", stack, padding=0)
        return self.conv("tail", h)

    def to_checkpoint(self, metadata=None) -> ModelCheckpoint:
        params = [(n, t.value.astype(np.float32)) for n, t in self.params.items()]
        return ModelCheckpoint(self.config, params, dict(metadata or {}))


def build_resnet(config: ModelConfig, arrays=None) -> Network:
    if config.architecture != "resnet":
        raise ValidationError("build_resnet needs architecture='resnet'")
    return Network(config, arrays)


def build_densenet(config: ModelConfig, arrays=None) -> Network:
    if config.architecture != "densenet":
        raise ValidationError("build_densenet needs architecture='densenet'")
    return Network(config, arrays)


def build(config: ModelConfig, arrays=None, trainable=True) -> Network:
    return Network(config, arrays, trainable)


def from_checkpoint(ckpt: ModelCheckpoint, trainable=False) -> Network:
    return Network(ckpt.config, ckpt.arrays(), trainable)


def count_parameters(config: ModelConfig) -> int:
    """Exact count, enumerated from the built network's parameter tensors."""
    net = Network(config, {n: np.zeros(s) for n, s in parameter_layout(config)}, trainable=False)
    return int(sum(p.size for p in net.parameters()))


def resnet_parameter_formula(channels: int, blocks: int) -> int:
    c = channels
    return 2 * blocks * (c * c * 27 + c) + (c * 27 + c) + (c * 27 + 1)


def densenet_parameter_formula(initial_channels, growth, dense_blocks, layers) -> int:
    c0, g = initial_channels, growth
    block = sum((c0 + i * g) * g * 27 + g for i in range(layers))
    block += (c0 + layers * g) * c0 + c0
    return (c0 * 27 + c0) + dense_blocks * block + (c0 * 27 + 1)
