"""Training-time augmentation built around anchor-based crop sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

CROP_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)
CROP_MODE = "anchor_sampling_v1"


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) floats in [0, 1]
    boxes: np.ndarray  # (N, 4) normalised corners
    labels: np.ndarray  # (N,)
    history: tuple = ()

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if len(self.labels) != len(self.boxes):
            raise ValueError("labels and boxes differ in length")

    def logged(self, op: str, **info) -> "Sample":
        return replace(self, history=self.history + ((op, info),))


@dataclass
class AugmentConfig:
    crop_prob: float = 0.6
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    blur_sigma: tuple[float, float] = (1.0, 3.0)
    crop_ratios: tuple[float, ...] = CROP_RATIOS
    crop_mode: str = CROP_MODE
    out_size: int = 512
    brightness: float = 0.2
    contrast: float = 0.5
    saturation: float = 0.5

    def __post_init__(self):
        for name in ("crop_prob", "flip_prob", "jitter_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.crop_mode != CROP_MODE:
            raise ValueError(f"unsupported crop mode {self.crop_mode!r}")


def _placement(lo_box, hi_box, centre, side, limit, rng) -> int:
    """Integer crop origin in [0, limit - side] holding the box, else its centre."""
    lo = max(0, math.ceil(hi_box - side))
    hi = min(limit - side, math.floor(lo_box))
    if lo > hi:
        lo = max(0, math.ceil(centre - side))
        hi = min(limit - side, math.floor(centre))
    if lo > hi:
        return int(np.clip(round(centre - side / 2), 0, limit - side))
    return int(rng.integers(lo, hi + 1))


def anchor_based_crop(sample: Sample, rng: np.random.Generator, ratios=CROP_RATIOS, size_ratio: float | None = None) -> Sample:
    """Crop a square around one random drone so that, once the crop is
    resized to the network input, the drone's longer side is ``size_ratio`` of it."""
    if len(sample.boxes) == 0:
        raise ValueError("anchor-based crop needs at least one ground-truth box")
    _, H, W = sample.image.shape
    gi = int(rng.integers(len(sample.boxes)))
    if size_ratio is None:
        size_ratio = float(ratios[int(rng.integers(len(ratios)))])
    px = sample.boxes * [W, H, W, H]
    x1, y1, x2, y2 = px[gi]
    longer = max(x2 - x1, y2 - y1)
    side = int(round(longer / size_ratio))
    side = max(1, min(side, W, H))
    x0 = _placement(x1, x2, (x1 + x2) / 2, side, W, rng)
    y0 = _placement(y1, y2, (y1 + y2) / 2, side, H, rng)

    image = sample.image[:, y0 : y0 + side, x0 : x0 + side]
    cx = (px[:, 0] + px[:, 2]) / 2
    cy = (px[:, 1] + px[:, 3]) / 2
    keep = (cx >= x0) & (cx <= x0 + side) & (cy >= y0) & (cy <= y0 + side)
    keep[gi] = True
    boxes = np.clip((px[keep] - [x0, y0, x0, y0]) / side, 0.0, 1.0)
    out = Sample(image, boxes, sample.labels[keep], sample.history)
    return out.logged("crop", size_ratio=size_ratio, gt=gi, side=side, x0=x0, y0=y0, selected=int(np.sum(keep[:gi])))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(sample: Sample, sigma: float, rng: np.random.Generator | None = None) -> Sample:
    """Separable Gaussian blur with half-sample symmetric padding; boxes untouched."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    k = gaussian_kernel(sigma)
    img = ndimage.convolve1d(sample.image, k, axis=1, mode="reflect")
    img = ndimage.convolve1d(img, k, axis=2, mode="reflect")
    return replace(sample, image=img).logged("blur", sigma=float(sigma))


def horizontal_flip(sample: Sample) -> Sample:
    boxes = sample.boxes.copy()
    boxes[:, 0] = 1.0 - sample.boxes[:, 2]
    boxes[:, 2] = 1.0 - sample.boxes[:, 0]
    return replace(sample, image=sample.image[:, :, ::-1].copy(), boxes=boxes).logged("flip")


_LUMA = np.array([0.299, 0.587, 0.114])


def color_jitter(sample: Sample, rng: np.random.Generator, brightness=0.2, contrast=0.5, saturation=0.5) -> Sample:
    """Photometric jitter; each factor is drawn from [1 - a, 1 + a] for its amplitude a."""
    fb = rng.uniform(1 - brightness, 1 + brightness)
    fc = rng.uniform(1 - contrast, 1 + contrast)
    fs = rng.uniform(1 - saturation, 1 + saturation)
    img = np.clip(sample.image * fb, 0.0, 1.0)
    gray = np.tensordot(_LUMA, img, axes=(0, 0))
    img = np.clip((img - gray.mean()) * fc + gray.mean(), 0.0, 1.0)
    gray = np.tensordot(_LUMA, img, axes=(0, 0))
    img = np.clip((img - gray) * fs + gray, 0.0, 1.0)
    return replace(sample, image=img).logged("jitter", brightness=fb, contrast=fc, saturation=fs)


def resize(sample: Sample, size: int) -> Sample:
    """Bilinear resize to size x size with pixel-centre alignment."""
    _, h, w = sample.image.shape
    if (h, w) == (size, size):
        return sample
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.stack([ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in sample.image])
    return replace(sample, image=img)


def pipeline(sample: Sample, rng: np.random.Generator, config: AugmentConfig | None = None) -> Sample:
    """Crop with probability crop_prob (blur otherwise) and resize the result.

    Flip and jitter follow as independent coin flips.
    """
    cfg = config or AugmentConfig()
    if rng.random() < cfg.crop_prob:
        s = anchor_based_crop(sample, rng, cfg.crop_ratios)
    else:
        s = gaussian_blur(sample, rng.uniform(*cfg.blur_sigma))
    s = resize(s, cfg.out_size)
    if rng.random() < cfg.flip_prob:
        s = horizontal_flip(s)
    if rng.random() < cfg.jitter_prob:
        s = color_jitter(s, rng, cfg.brightness, cfg.contrast, cfg.saturation)
    return s


def branch(sample: Sample) -> str:
    """Which of crop/blur the pipeline took for an augmented sample."""
    for op, _ in sample.history:
        if op in ("crop", "blur"):
            return op
    return "none"
