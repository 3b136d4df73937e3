"""Default-box generation from linear scale schedules with per-level decay weights.

Boxes are normalised (x_min, y_min, x_max, y_max) in [0, 1]. Enumeration
order is layer-major, then row-major over cells (i = row, j = column), then
ratio-minor with the extra sqrt(min * max) square last in each cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return max(self.width, 0.0) * max(self.height, 0.0)


S_MIN, S_MAX = 0.15, 0.95
IMAGE_SIZE = 512
# per-level min sizes in pixels; the decay weights below are chosen to hit these exactly
LEVEL_MIN_SIZES = (28, 56, 118, 176, 232, 326, 408, 484)
LEVEL_MAX_SIZES = (56, 118, 176, 232, 326, 408, 484, 526)
LEVEL_STRIDES = (4, 8, 16, 32, 64, 128, 256, 512)
LEVEL_GRIDS = (128, 64, 32, 16, 8, 4, 2, 1)
RATIOS_3 = (1.0, 0.5, 2.0)
RATIOS_5 = (1.0, 0.5, 1.0 / 3.0, 2.0, 3.0)
LEVEL_RATIOS = (RATIOS_3, RATIOS_5, RATIOS_5, RATIOS_5, RATIOS_5, RATIOS_5, RATIOS_3, RATIOS_3)


@dataclass(frozen=True)
class LayerAnchorConfig:
    name: str
    stride: float
    grid: tuple[int, int]
    min_size: float
    max_size: float
    ratios: tuple[float, ...]

    @property
    def per_cell(self) -> int:
        return len(self.ratios) + 1

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1] * self.per_cell


def scale_schedule(s_min: float = S_MIN, s_max: float = S_MAX, levels: int = 8) -> list[float]:
    """``levels`` evenly spaced scales running from s_min to s_max inclusive."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if not 0 < s_min < s_max <= 1:
        raise ValueError(f"need 0 < s_min < s_max <= 1, got {s_min}, {s_max}")
    step = (s_max - s_min) / (levels - 1)
    return [s_min + step * (k - 1) for k in range(1, levels + 1)]


def weighted_scales(schedule, decay) -> list[float]:
    """Multiply each scale by its per-level decay weight."""
    schedule, decay = list(schedule), list(decay)
    if len(schedule) != len(decay):
        raise ValueError(f"decay has {len(decay)} entries, schedule has {len(schedule)}")
    if any(not 0 < w <= 1 for w in decay):
        raise ValueError(f"decay weights must lie in (0, 1], got {decay}")
    return [w * s for w, s in zip(decay, schedule)]


def default_decay(image_size: int = IMAGE_SIZE, sizes=LEVEL_MIN_SIZES, s_min=S_MIN, s_max=S_MAX) -> list[float]:
    """Decay weights that map the linear schedule onto the tabulated min sizes."""
    sched = scale_schedule(s_min, s_max, len(sizes))
    return [size / (image_size * s) for size, s in zip(sizes, sched)]


def default_configs(decay=None, s_min=S_MIN, s_max=S_MAX, image_size: int = IMAGE_SIZE) -> list[LayerAnchorConfig]:
    """The eight-level tailored layout for 512x512 input.

    Min sizes come from round(image_size * decay * scale) per level; each level's max
    size is the next level's min size, with 526 for the top level.
    """
    if decay is None:
        decay = default_decay(image_size, s_min=s_min, s_max=s_max)
    scales = weighted_scales(scale_schedule(s_min, s_max, len(LEVEL_GRIDS)), decay)
    mins = [round(image_size * s) for s in scales]
    maxs = mins[1:] + [LEVEL_MAX_SIZES[-1]]
    return [
        LayerAnchorConfig(f"of_{k + 1}", LEVEL_STRIDES[k], (LEVEL_GRIDS[k],) * 2, mins[k], maxs[k], LEVEL_RATIOS[k])
        for k in range(len(LEVEL_GRIDS))
    ]


def ssd300_configs() -> list[LayerAnchorConfig]:
    """Classic SSD300 layout (VGG16 feature maps 38..1)."""
    grids = (38, 19, 10, 5, 3, 1)
    steps = (8, 16, 32, 64, 100, 300)
    mins = (30, 60, 111, 162, 213, 264)
    maxs = (60, 111, 162, 213, 264, 315)
    ratios = (RATIOS_3, RATIOS_5, RATIOS_5, RATIOS_5, RATIOS_3, RATIOS_3)
    return [
        LayerAnchorConfig(f"ssd_{k + 1}", steps[k], (grids[k],) * 2, mins[k], maxs[k], ratios[k])
        for k in range(len(grids))
    ]


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (N, 4) clipped normalised corners
    raw: np.ndarray  # (N, 4) before clipping
    layer: np.ndarray  # (N,) level index
    cell: np.ndarray  # (N, 2) (row, col)
    ratio_tag: list[str]
    configs: list[LayerAnchorConfig]
    layer_offsets: list[tuple[int, int]]

    def __len__(self):
        return len(self.boxes)

    def box(self, i: int) -> Box:
        return Box(*map(float, self.boxes[i]))


def ratio_tags(ratios) -> list[str]:
    tags = []
    for a in ratios:
        if a >= 1:
            tags.append(f"{round(a):d}:1" if abs(a - round(a)) < 1e-9 else f"{a:g}:1")
        else:
            tags.append(f"1:{round(1 / a):d}")
    return tags + ["extra"]


def generate(configs, image_size: float = IMAGE_SIZE) -> AnchorSet:
    """Enumerate default boxes for each level config."""
    raws, layers, cells, tags, offsets = [], [], [], [], []
    start = 0
    for li, cfg in enumerate(configs):
        h, w = cfg.grid
        sides = []
        for a in cfg.ratios:
            ra = math.sqrt(a)
            sides.append((cfg.min_size * ra, cfg.min_size / ra))
        extra = math.sqrt(cfg.min_size * cfg.max_size)
        sides.append((extra, extra))
        sides = np.array(sides) / image_size  # (A, 2) as (w, h)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (jj.ravel() + 0.5) * cfg.stride / image_size
        cy = (ii.ravel() + 0.5) * cfg.stride / image_size
        a = len(sides)
        cx = np.repeat(cx, a)
        cy = np.repeat(cy, a)
        bw = np.tile(sides[:, 0], h * w)
        bh = np.tile(sides[:, 1], h * w)
        raws.append(np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1))
        layers.append(np.full(h * w * a, li))
        cells.append(np.repeat(np.stack([ii.ravel(), jj.ravel()], axis=1), a, axis=0))
        tags.extend(ratio_tags(cfg.ratios) * (h * w))
        offsets.append((start, start + h * w * a))
        start += h * w * a
    raw = np.concatenate(raws) if raws else np.zeros((0, 4))
    return AnchorSet(
        boxes=np.clip(raw, 0.0, 1.0),
        raw=raw,
        layer=np.concatenate(layers) if layers else np.zeros(0, int),
        cell=np.concatenate(cells) if cells else np.zeros((0, 2), int),
        ratio_tag=tags,
        configs=list(configs),
        layer_offsets=offsets,
    )


def summary_rows(configs) -> list[dict]:
    rows = []
    for cfg in configs:
        ratio_str = ",".join(_fmt_ratio(a) for a in cfg.ratios)
        rows.append({
            "feature": cfg.name,
            "stride": cfg.stride,
            "size": f"{cfg.grid[0]}*{cfg.grid[1]}",
            "scale": f"{cfg.min_size:g}({cfg.max_size:g})",
            "ratio": f"1:({ratio_str})",
            "count": cfg.count,
        })
    return rows


def _fmt_ratio(a: float) -> str:
    if abs(a - round(a)) < 1e-9:
        return f"{round(a):d}"
    if abs(1 / a - round(1 / a)) < 1e-9 and a < 0.5:
        return f"1/{round(1 / a):d}"
    return f"{a:g}"
