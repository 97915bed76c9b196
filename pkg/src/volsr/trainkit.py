"""Datasets, augmentation, Adam, and the early-stopped training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .errors import DivergenceError, ValidationError
from .fourier import truncate_array, zerofill_array
from .losses import LossSpec, make_loss
from .quality import ssim
from .volgrid import Volume, resample_array, zscore_normalize

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    model: models.ModelConfig = field(default_factory=models.ModelConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    learning_rate: float = 1e-4
    batch_size: int = 4
    patch_dims: tuple[int, int, int] = (64, 64, 16)
    patience: int = 100
    max_epochs: int = 10_000
    batches_per_epoch: int = 32
    augment_flip: bool = True
    augment_rotate: bool = True
    max_inplane_deg: float = 15.0
    max_throughplane_deg: float = 5.0
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_dims", tuple(int(n) for n in self.patch_dims))
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if len(self.patch_dims) != 3 or min(self.patch_dims) < 1:
            raise ValidationError(f"patch dims must be three positive integers, got {self.patch_dims}")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.max_epochs < 1:
            raise ValidationError("batch size, batches per epoch and max epochs must be >= 1")
        if self.patience < 0:
            raise ValidationError("patience must be >= 0")
        if not self.learning_rate >= 0:
            raise ValidationError("learning rate must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_dims"] = list(self.patch_dims)
        d["split_ratios"] = list(self.split_ratios)
        d["loss"]["layer_weights"] = list(self.loss.layer_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = models.ModelConfig.from_dict(d["model"])
        if "loss" in d:
            d["loss"] = LossSpec.from_dict(d["loss"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# splits and pairs


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValidationError("split partitions overlap")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "ratios": list(self.ratios),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]),
                   tuple(d.get("ratios", (0.6, 0.2, 0.2))), int(d.get("seed", 0)))


def split_subjects(subject_ids, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitAssignment:
    """Subject-level split: seeded shuffle, then contiguous train/validation/test runs.

    Validation and test get ``floor(ratio * n)`` subjects (at least one each);
    the remainder goes to training.
    """
    ids = sorted(set(int(s) for s in subject_ids))
    n = len(ids)
    if n < 3:
        raise ValidationError(f"need at least 3 subjects for a 3-way split, got {n}")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = max(1, int(np.floor(ratios[1] * n + 1e-9)))
    n_test = max(1, int(np.floor(ratios[2] * n + 1e-9)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValidationError(f"split of {n} subjects leaves no training subjects")
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    return SplitAssignment(
        tuple(sorted(perm[:n_train])),
        tuple(sorted(perm[n_train : n_train + n_val])),
        tuple(sorted(perm[n_train + n_val :])),
        tuple(float(r) for r in ratios),
        int(seed),
    )


@dataclass(frozen=True)
class SamplePair:
    input: Volume  # zero-filled LR on the HR grid, in the HR's z-score units
    target: Volume  # z-scored HR
    subject: int
    echo: int


def make_pair(hr: Volume, subject: int = 0, echo: int = 0) -> SamplePair:
    target, _ = zscore_normalize(hr)
    lr = truncate_array(target.data)
    inp = zerofill_array(lr)
    return SamplePair(Volume(inp, target.spacing), target, subject, echo)


def make_pairs(records) -> list[SamplePair]:
    """``records``: iterable of ``(subject, echo, hr_volume)`` or phantom records."""
    pairs = []
    for r in records:
        if hasattr(r, "volume"):
            pairs.append(make_pair(r.volume, r.subject, r.echo))
        else:
            subject, echo, vol = r
            pairs.append(make_pair(vol, subject, echo))
    return pairs


# ---------------------------------------------------------------------------
# augmentation


def sample_patch(pair: SamplePair, rng: np.random.Generator, patch_dims=(64, 64, 16), flip=True, rotate=True,
                 max_inplane_deg=15.0, max_throughplane_deg=5.0):
    """Aligned random crop, per-axis flips and one small rotation, applied identically to both volumes.

    The random stream is consumed in the same order whatever the toggles are.
    """
    dims = pair.target.dims
    patch_dims = tuple(int(p) for p in patch_dims)
    if any(p > n for p, n in zip(patch_dims, dims)):
        raise ValidationError(f"patch {patch_dims} larger than volume {dims}")
    offsets = [int(rng.integers(0, n - p + 1)) for n, p in zip(dims, patch_dims)]
    flips = rng.random(3) < 0.5
    angles = (rng.uniform(-max_inplane_deg, max_inplane_deg), rng.uniform(-max_throughplane_deg, max_throughplane_deg))

    window = tuple(slice(o, o + p) for o, p in zip(offsets, patch_dims))
    x = pair.input.data[window]
    y = pair.target.data[window]
    if flip:
        axes = tuple(int(a) for a in np.flatnonzero(flips))
        if axes:
            x = np.flip(x, axis=axes)
            y = np.flip(y, axis=axes)
    if rotate:
        x = resample_array(x, patch_dims, pair.target.spacing, angles)
        y = resample_array(y, patch_dims, pair.target.spacing, angles)
    return np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        shapes = [np.shape(p.value if isinstance(p, ad.Tensor) else p) for p in params]
        return cls([np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes])


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` (Tensors or arrays)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        value = p.value if isinstance(p, ad.Tensor) else p
        g = np.zeros(value.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != value.shape or state.m[i].shape != value.shape:
            raise ValidationError(f"Adam shape mismatch: param {value.shape}, grad {g.shape}, state {state.m[i].shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        value -= update


# ---------------------------------------------------------------------------
# training


class EarlyStopper:
    """Tracks the best validation score; ``stop`` once ``patience`` epochs pass without a strict improvement.

    With ``patience = 0`` training stops at the first non-improving epoch.
    """

    def __init__(self, patience: int):
        self.patience = int(patience)
        self.best_score = -np.inf
        self.best_epoch = 0
        self.stop = False

    def update(self, epoch: int, score: float) -> bool:
        improved = score > self.best_score
        if improved:
            self.best_score = float(score)
            self.best_epoch = epoch
        elif epoch - self.best_epoch >= max(self.patience, 1):
            self.stop = True
        return improved


def predict_array(net: models.Network, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        out = net(ad.Tensor(np.asarray(x, dtype=np.float64)[None, None]))
    return out.value[0, 0]


MIN_PREDICT_DIM = 3


def predict_volume(checkpoint: models.ModelCheckpoint, volume: Volume) -> Volume:
    """Full-volume forward pass (no patching)."""
    if min(volume.dims) < MIN_PREDICT_DIM:
        raise ValidationError(f"volume {volume.dims} too small; every dim must be >= {MIN_PREDICT_DIM}")
    net = models.from_checkpoint(checkpoint)
    return Volume(predict_array(net, volume.data), volume.spacing)


def validation_ssim(net: models.Network, pairs, window: int = 7) -> float:
    return float(np.mean([ssim(p.target, predict_array(net, p.input.data), window) for p in pairs]))


@dataclass
class TrainResult:
    checkpoint: models.ModelCheckpoint
    log: list[dict]
    steps: int


def train(config: TrainConfig, pairs, split: SplitAssignment, log_path=None) -> TrainResult:
    """Patch-based training with full-volume validation SSIM and early stopping.

    Returns the checkpoint of the best validation epoch. Deterministic for a
    fixed config and seed.
    """
    train_pairs = [p for p in pairs if p.subject in split.train]
    val_pairs = [p for p in pairs if p.subject in split.validation]
    if not train_pairs or not val_pairs:
        raise ValidationError("training and validation partitions must both be non-empty")

    rng = np.random.default_rng(config.seed)
    net = models.build(config.model, models.init_parameters(config.model).arrays())
    params = net.parameters()
    state = AdamState.for_params(params)
    loss_fn = make_loss(config.loss)
    stopper = EarlyStopper(config.patience)
    history = []
    best = None
    steps = 0
    if log_path is not None:
        Path(log_path).write_text("")

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(config.batches_per_epoch):
            xs, ys = [], []
            for _ in range(config.batch_size):
                pair = train_pairs[int(rng.integers(len(train_pairs)))]
                x, y = sample_patch(pair, rng, config.patch_dims, config.augment_flip, config.augment_rotate,
                                    config.max_inplane_deg, config.max_throughplane_deg)
                xs.append(x)
                ys.append(y)
            inp = ad.Tensor(np.stack(xs)[:, None])
            tgt = ad.Tensor(np.stack(ys)[:, None])
            loss = loss_fn(net(inp), tgt)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, step {steps + 1}", epoch)
            net.zero_grad()
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, config.learning_rate)
            losses.append(value)
            steps += 1

        val = validation_ssim(net, val_pairs, config.loss.ssim_window)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation SSIM at epoch {epoch}", epoch)
        if stopper.update(epoch, val):
            best = net.to_checkpoint({
                "epoch": epoch,
                "best_val_ssim": val,
                "seed": config.seed,
                "split": split.to_dict(),
                "train_config": config.to_dict(),
            })
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_ssim": val,
                  "best_epoch": stopper.best_epoch}
        history.append(record)
        log.info("epoch %d loss %.5f val_ssim %.4f best %d", epoch, record["train_loss"], val, stopper.best_epoch)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if stopper.stop:
            break
    return TrainResult(best, history, steps)
