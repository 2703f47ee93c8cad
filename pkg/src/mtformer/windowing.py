"""Window geometry: partitioning, cyclic shifts, attention masks, position bias.

All functions act on token maps laid out [H, W, C] (row major).  Windows are
enumerated row major over the window grid and tokens row major inside each
window, so window k of a [H, W, C] map covers rows [win*(k // (W//win)) ...]
and never mixes rows from two window bands.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, reshape, roll, take_rows, transpose

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowGrid:
    """Token grid extent plus the window/shift geometry used on it."""

    h: int
    w: int
    win: int
    shift: int = 0

    def __post_init__(self):
        if self.win < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.win}")
        if self.h % self.win or self.w % self.win:
            raise ConfigurationError(
                f"window {self.win} must divide grid {self.h}x{self.w}")
        if not 0 <= self.shift < self.win:
            raise ConfigurationError(
                f"shift must satisfy 0 <= shift < window, got shift {self.shift} window {self.win}")

    @property
    def windows(self) -> int:
        return (self.h // self.win) * (self.w // self.win)

    @property
    def tokens_per_window(self) -> int:
        return self.win * self.win


def window_partition(x: Tensor, win: int) -> Tensor:
    """[H, W, C] -> [num_windows, win*win, C], windows and tokens row major."""
    h, w, c = x.shape
    if h % win or w % win:
        raise DimensionError(f"window {win} does not divide map {h}x{w}")
    t = reshape(x, (h // win, win, w // win, win, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, ((h // win) * (w // win), win * win, c))


def window_reverse(wins: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition` back to [H, W, C]."""
    n, t, c = wins.shape
    win = int(round(t ** 0.5))
    if win * win != t or n * t != h * w:
        raise DimensionError(
            f"cannot reassemble {n} windows of {t} tokens into {h}x{w}")
    x = reshape(wins, (h // win, w // win, win, win, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, (h, w, c))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll the map up and left: output[i, j] = input[(i+shift) % H, (j+shift) % W]."""
    return roll(x, (-shift, -shift), (0, 1))


def cyclic_unshift(x: Tensor, shift: int) -> Tensor:
    return roll(x, (shift, shift), (0, 1))


def _partition_array(arr: np.ndarray, win: int) -> np.ndarray:
    h, w = arr.shape
    return (arr.reshape(h // win, win, w // win, win)
               .transpose(0, 2, 1, 3)
               .reshape(-1, win * win))


@lru_cache(maxsize=None)
def _mask_array(h: int, w: int, win: int, shift: int):
    # label contiguous pre-shift regions; pairs with different labels may not attend
    labels = np.zeros((h, w))
    spans = (slice(0, -win), slice(-win, -shift), slice(-shift, None))
    region = 0
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = region
            region += 1
    windowed = _partition_array(labels, win)
    diff = windowed[:, :, None] - windowed[:, None, :]
    mask = np.where(diff != 0, MASK_VALUE, 0.0)
    mask.flags.writeable = False
    return mask


def shift_mask(grid: WindowGrid) -> Tensor:
    """Additive attention mask [num_windows, T, T]; 0 allowed, -1e9 masked.

    With shift 0 the mask is identically zero.
    """
    return Tensor(_mask_array(grid.h, grid.w, grid.win, grid.shift))


@lru_cache(maxsize=None)
def rel_pos_index(win: int):
    """[T, T] table rows keyed by token displacement (dy, dx), T = win*win."""
    coords = np.stack(np.meshgrid(np.arange(win), np.arange(win), indexing="ij"))
    coords = coords.reshape(2, -1)
    delta = coords[:, :, None] - coords[:, None, :]
    idx = (delta[0] + win - 1) * (2 * win - 1) + (delta[1] + win - 1)
    idx.flags.writeable = False
    return idx


def rel_pos_bias(table: Tensor, win: int) -> Tensor:
    """Expand a [(2*win-1)^2, heads] table into an additive [heads, T, T] bias."""
    rows = (2 * win - 1) ** 2
    if table.shape[0] != rows:
        raise DimensionError(
            f"bias table has {table.shape[0]} rows, window {win} needs {rows}")
    t = win * win
    gathered = take_rows(table, np.asarray(rel_pos_index(win)).reshape(-1))
    return transpose(reshape(gathered, (t, t, table.shape[1])), (2, 0, 1))
