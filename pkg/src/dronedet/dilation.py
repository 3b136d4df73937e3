"""Serial dilated-convolution planning with gridding checks and coverage maps."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

DEFAULT_RATES = (1, 2, 3)


def _validate(rates, kernel):
    rates = tuple(int(r) for r in rates)
    if not rates:
        raise ValueError("rates must be non-empty")
    if any(r < 1 for r in rates):
        raise ValueError(f"all rates must be >= 1, got {rates}")
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    return rates


def hdc_distances(rates, kernel: int = 3) -> list[int]:
    """Maximum nonzero tap spacing seen by each layer of a serial stack.

    The last layer's spacing equals its rate; each earlier layer takes
    max(next - 2 * rate, next - 2 * (next - rate), rate) from the layer above.
    """
    rates = _validate(rates, kernel)
    spacing = [0] * len(rates)
    spacing[-1] = rates[-1]
    for i in range(len(rates) - 2, -1, -1):
        nxt, rate = spacing[i + 1], rates[i]
        spacing[i] = max(nxt - 2 * rate, nxt - 2 * (nxt - rate), rate)
    return spacing


@dataclass(frozen=True)
class HdcResult:
    passed: bool
    second_spacing: int | None
    kernel: int
    first_rate: int
    reason: str

    def __bool__(self):
        return self.passed


def hdc_check(rates, kernel: int = 3) -> HdcResult:
    """Check a serial rate sequence for gridding.

    Passes iff the second layer's spacing is at most the kernel size and
    the first layer is dense (rate 1). The spacing bound alone lets
    sequences such as (3, 3, 3) through even though every tap lands on a
    multiple of 3; the dense first layer is the part of the HDC design that
    fills the remaining gaps. Length-1 sequences pass vacuously because
    there is no second layer.
    """
    rates = _validate(rates, kernel)
    if len(rates) == 1:
        return HdcResult(True, None, kernel, rates[0], "single layer")
    second = hdc_distances(rates, kernel)[1]
    if second > kernel:
        return HdcResult(False, second, kernel, rates[0], f"second_spacing={second} > kernel={kernel}")
    if rates[0] != 1:
        return HdcResult(False, second, kernel, rates[0], f"first_rate={rates[0]} != 1")
    return HdcResult(True, second, kernel, rates[0], f"second_spacing={second} <= kernel={kernel}")


def receptive_extent(rates, kernel: int = 3) -> int:
    """Side length of the stacked receptive field."""
    return sum((kernel - 1) * r for r in rates) + 1


def coverage_map(rates, kernel: int = 3, grid_size: int | None = None) -> np.ndarray:
    """Tap-path counts from the centre output cell back onto the input.

    Cell (y, x) holds the number of distinct tap paths through the serial
    stride-1 dilated convolutions that land on it. The counts sum to
    kernel ** (2 * len(rates)).
    """
    rates = _validate(rates, kernel)
    extent = receptive_extent(rates, kernel)
    if grid_size is None:
        grid_size = extent
    if grid_size < extent:
        raise ValueError(f"grid_size {grid_size} smaller than receptive field {extent}")
    counts = np.zeros((grid_size, grid_size), dtype=np.int64)
    c = grid_size // 2
    counts[c, c] = 1
    for r in rates:
        taps = np.zeros(((kernel - 1) * r + 1,) * 2, dtype=np.int64)
        taps[::r, ::r] = 1
        counts = convolve2d(counts, taps, mode="same")
    return counts


def find_holes(counts: np.ndarray) -> list[tuple[int, int]]:
    """Zero cells inside the bounding box of the nonzero cells."""
    ys, xs = np.nonzero(counts)
    if ys.size == 0:
        return []
    box = counts[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    hy, hx = np.nonzero(box == 0)
    return [(int(y + ys.min()), int(x + xs.min())) for y, x in zip(hy, hx)]


def has_holes(counts: np.ndarray) -> bool:
    return bool(find_holes(counts))


def plan_rates(depth: int, kernel: int = 3, max_rate: int | None = None) -> list[int]:
    """Lexicographically smallest strictly increasing rate sequence that is gridding-free."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth == 1:
        return [1]
    max_rate = max_rate or max(depth, 5)
    for rates in itertools.combinations(range(1, max_rate + 1), depth):
        if hdc_check(rates, kernel) and not has_holes(coverage_map(rates, kernel)):
            return list(rates)
    raise ValueError(f"no gridding-free sequence of depth {depth} with rates <= {max_rate}")
