"""Training objectives: MSE, windowed SSIM loss, and a feature-space (perceptual) loss.

The perceptual loss compares feature maps of a fixed, seeded 3D conv stack
rather than an ImageNet-pretrained 2D network; no pretrained weights ship
with this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError

LOSS_KINDS = ("mse", "ssim", "perceptual")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    ssim_window: int = 7
    extractor_seed: int = 0
    layer_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValidationError("ssim_window must be odd and positive")
        object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")


def mse_loss(pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
    _same_shape(pred, target)
    return ad.mean(ad.square(ad.sub(pred, target)))


def ssim_loss(pred: ad.Tensor, target: ad.Tensor, window: int = 7, k1=0.01, k2=0.03) -> ad.Tensor:
    """``1 - mean SSIM`` with uniform cubic windows, valid positions only.

    The dynamic range is taken from the target batch and held constant.
    """
    _same_shape(pred, target)
    if pred.value.ndim != 5 or pred.shape[1] != 1:
        raise ShapeError(f"ssim_loss expects (N, 1, D, H, W), got {pred.shape}")
    if any(n < window for n in pred.shape[2:]):
        raise ShapeError(f"spatial dims {pred.shape[2:]} smaller than window {window}")
    L = float(target.value.max() - target.value.min())
    if not L > 0:
        raise ValidationError("ssim_loss target is constant")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    kernel = ad.Tensor(np.full((1, 1, window, window, window), 1.0 / window**3))

    def box(t):
        return ad.conv3d(t, kernel, None, 0)

    x, y = pred, target
    mx, my = box(x), box(y)
    mxx, myy, mxy = ad.mul(mx, mx), ad.mul(my, my), ad.mul(mx, my)
    sxx = ad.sub(box(ad.square(x)), mxx)
    syy = ad.sub(box(ad.square(y)), myy)
    sxy = ad.sub(box(ad.mul(x, y)), mxy)
    num = ad.mul(ad.add(ad.scale(mxy, 2.0), c1), ad.add(ad.scale(sxy, 2.0), c2))
    den = ad.mul(ad.add(ad.add(mxx, myy), c1), ad.add(ad.add(sxx, syy), c2))
    return ad.sub(1.0, ad.mean(ad.div(num, den)))


class FeatureExtractor:
    """Fixed 3-stage conv stack (1 -> 8 -> 16 -> 16), relu, stride-2 decimation per stage."""

    channels = (1, 8, 16, 16)

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weights = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 27)), size=(cout, cin, 3, 3, 3))
            b = rng.normal(0.0, 0.1, size=(cout,))
            self.weights.append((ad.Tensor(w), ad.Tensor(b)))

    def features(self, x: ad.Tensor) -> list[ad.Tensor]:
        if any(n < 8 for n in x.shape[2:]):
            raise ValidationError(f"perceptual loss needs >= 8 voxels per axis, got {x.shape[2:]}")
        out = []
        h = x
        for w, b in self.weights:
            h = ad.subsample2(ad.relu(ad.conv3d(h, w, b, 1)))
            out.append(ad.channel_unit_normalize(h))
        return out


def perceptual_loss(pred: ad.Tensor, target: ad.Tensor, extractor: FeatureExtractor | None = None,
                    layer_weights=(1 / 3, 1 / 3, 1 / 3)) -> ad.Tensor:
    """Weighted sum over stages of the mean squared distance of normalized features."""
    _same_shape(pred, target)
    extractor = extractor or FeatureExtractor(0)
    fp = extractor.features(pred)
    with ad.no_grad():
        ft = extractor.features(target)
    total = None
    for w, a, b in zip(layer_weights, fp, ft):
        term = ad.scale(ad.mean(ad.square(ad.sub(a, b))), w)
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class Loss:
    """Callable wrapper that keeps a single extractor instance per spec."""

    spec: LossSpec
    extractor: FeatureExtractor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.spec.kind == "perceptual" and self.extractor is None:
            self.extractor = FeatureExtractor(self.spec.extractor_seed)

    def __call__(self, pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
        if self.spec.kind == "mse":
            return mse_loss(pred, target)
        if self.spec.kind == "ssim":
            return ssim_loss(pred, target, self.spec.ssim_window)
        return perceptual_loss(pred, target, self.extractor, self.spec.layer_weights)


def make_loss(spec: LossSpec) -> Loss:
    return Loss(spec)
