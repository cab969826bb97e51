"""Rasterize world states into RGB frames.

Four view modes are supported:

* ``allocentric_fixed``: the whole grid, fixed, one block per cell.
* ``egocentric_partial``: a small window that scrolls with the agent.
* ``egocentric_full``: a scrolling window large enough that the whole room
  stays visible from any agent position.
* ``allocentric_large``: the room centred, fixed, in a canvas of the same
  size as the full egocentric window.

Cells outside the grid render as wall.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .core import AGENT_RGB, BACKGROUND_RGB, BED_RGB, GRID_SIZE, WALL_RGB, Color, Shape
from .world import WorldState


class ViewMode(str, Enum):
    ALLOCENTRIC_FIXED = "allocentric_fixed"
    EGOCENTRIC_PARTIAL = "egocentric_partial"
    EGOCENTRIC_FULL = "egocentric_full"
    ALLOCENTRIC_LARGE = "allocentric_large"


# (window cells, px per cell) defaults; None window means "the whole grid"
VIEW_DEFAULTS = {
    ViewMode.ALLOCENTRIC_FIXED: (None, 9),
    ViewMode.EGOCENTRIC_PARTIAL: (5, 9),
    ViewMode.EGOCENTRIC_FULL: (21, 7),
    ViewMode.ALLOCENTRIC_LARGE: (21, 7),
}


@dataclass(frozen=True)
class ViewConfig:
    mode: ViewMode = ViewMode.ALLOCENTRIC_FIXED
    window_cells: int = GRID_SIZE
    px_per_cell: int = 9
    agent_visible_when_carrying: bool = False

    @classmethod
    def default(cls, mode, grid_size: int = GRID_SIZE, **overrides) -> "ViewConfig":
        mode = ViewMode(mode)
        window, px = VIEW_DEFAULTS[mode]
        if window is None:
            window = grid_size
        if mode is ViewMode.EGOCENTRIC_FULL or mode is ViewMode.ALLOCENTRIC_LARGE:
            window = max(window, 2 * grid_size - 1)
        kw = dict(mode=mode, window_cells=window, px_per_cell=px)
        kw.update(overrides)
        return cls(**kw)

    def frame_shape(self) -> tuple[int, int, int]:
        side = self.window_cells * self.px_per_cell
        return side, side, 3

    def problems(self, grid_size: int = GRID_SIZE) -> list[str]:
        """Return a list of human-readable invariant violations (empty when valid)."""
        out = []
        w = self.window_cells
        if self.px_per_cell not in _SUPPORTED_PX:
            out.append(f"px_per_cell must be one of {_SUPPORTED_PX}, got {self.px_per_cell}")
        if self.mode is ViewMode.ALLOCENTRIC_FIXED:
            if w != grid_size:
                out.append(f"allocentric_fixed window must cover the grid ({grid_size} cells), got {w}")
        else:
            if w < 1 or w % 2 == 0:
                out.append(f"window_cells must be a positive odd number, got {w}")
            if self.mode is ViewMode.EGOCENTRIC_PARTIAL and w > grid_size:
                out.append(
                    f"egocentric_partial window ({w}) larger than the grid ({grid_size}); "
                    "use egocentric_full for a fully observable window"
                )
            if self.mode in (ViewMode.EGOCENTRIC_FULL, ViewMode.ALLOCENTRIC_LARGE) and w < 2 * grid_size - 1:
                out.append(f"{self.mode.value} window must be at least {2 * grid_size - 1} cells, got {w}")
        return out


_SUPPORTED_PX = (3, 7, 9)


@dataclass(frozen=True)
class Frame:
    width: int
    height: int
    data: bytes

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Frame":
        h, w, _ = arr.shape
        return cls(w, h, np.ascontiguousarray(arr, dtype=np.uint8).tobytes())

    def array(self) -> np.ndarray:
        return np.frombuffer(self.data, np.uint8).reshape(self.height, self.width, 3)

    def to_ppm(self) -> bytes:
        return b"P6\n%d %d\n255\n" % (self.width, self.height) + self.data

    @classmethod
    def from_ppm(cls, blob: bytes) -> "Frame":
        # header: four whitespace-separated tokens, then exactly one whitespace byte
        fields, pos = [], 0
        while len(fields) < 4:
            while pos < len(blob) and blob[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ValueError("truncated PPM header")
            fields.append(blob[start:pos])
        if fields[0] != b"P6" or fields[3] != b"255":
            raise ValueError("not a P6 PPM with maxval 255")
        w, h = int(fields[1]), int(fields[2])
        data = blob[pos + 1:]
        if len(data) != w * h * 3:
            raise ValueError("truncated PPM payload")
        return cls(w, h, data)


def rasterize_glyph(shape: Shape, color: Color, px: int, background=BACKGROUND_RGB) -> np.ndarray:
    """px x px x 3 block: mask pixels in the object color, the rest background."""
    return _glyph_block(shape, color.rgb, px, tuple(background)).copy()


@lru_cache(maxsize=4096)
def _glyph_block(shape: Shape, rgb, px: int, background) -> np.ndarray:
    mask = shape.mask(px)
    block = np.empty((px, px, 3), np.uint8)
    block[:] = background
    block[mask] = rgb
    block.setflags(write=False)
    return block


@lru_cache(maxsize=None)
def _bed_block(px: int) -> np.ndarray:
    y, x = np.mgrid[0:px, 0:px]
    block = np.empty((px, px, 3), np.uint8)
    block[:] = BACKGROUND_RGB
    block[(x - y) % 3 == 0] = BED_RGB
    block.setflags(write=False)
    return block


@lru_cache(maxsize=None)
def _base_canvas(grid_size: int, px: int, pad: int) -> np.ndarray:
    """Empty room (walls + floor) surrounded by ``pad`` cells of wall."""
    n = grid_size + 2 * pad
    img = np.empty((n * px, n * px, 3), np.uint8)
    img[:] = WALL_RGB
    lo, hi = (pad + 1) * px, (pad + grid_size - 1) * px
    img[lo:hi, lo:hi] = BACKGROUND_RGB
    img.setflags(write=False)
    return img


def _paint(img, row, col, px, block):
    img[row * px:(row + 1) * px, col * px:(col + 1) * px] = block


def render_array(state: WorldState, view: ViewConfig) -> np.ndarray:
    spec = state.spec
    g = spec.grid_size
    px = view.px_per_cell
    w = view.window_cells
    mode = view.mode
    if mode is ViewMode.ALLOCENTRIC_FIXED:
        pad = 0
    elif mode is ViewMode.ALLOCENTRIC_LARGE:
        pad = (w - g) // 2
    else:
        pad = (w - 1) // 2
    img = _base_canvas(g, px, pad).copy()

    if spec.bed is not None:
        _paint(img, spec.bed.row + pad, spec.bed.col + pad, px, _bed_block(px))
    for i, p in enumerate(state.object_pos):
        if p is not None:
            obj = spec.objects[i]
            _paint(img, p.row + pad, p.col + pad, px, _glyph_block(obj.shape, obj.color.rgb, px, BACKGROUND_RGB))
    ar, ac = state.agent.row + pad, state.agent.col + pad
    if state.carried is None:
        block = np.empty((px, px, 3), np.uint8)
        block[:] = AGENT_RGB
    else:
        obj = spec.objects[state.carried]
        bg = AGENT_RGB if view.agent_visible_when_carrying else BACKGROUND_RGB
        block = _glyph_block(obj.shape, obj.color.rgb, px, bg)
    _paint(img, ar, ac, px, block)

    if mode is ViewMode.ALLOCENTRIC_FIXED:
        return img
    if mode is ViewMode.ALLOCENTRIC_LARGE:
        return img[: w * px, : w * px]
    half = (w - 1) // 2
    r0, c0 = (ar - half) * px, (ac - half) * px
    return img[r0:r0 + w * px, c0:c0 + w * px]


def render(state: WorldState, view: ViewConfig) -> Frame:
    return Frame.from_array(render_array(state, view))
