"""Shared vocabulary of the grid world: colors, shapes, positions, actions and RNG streams."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from typing import NamedTuple

import numpy as np

GRID_SIZE = 11
TIME_LIMIT = 40

BACKGROUND_RGB = (96, 96, 96)
WALL_RGB = (32, 32, 32)
AGENT_RGB = (255, 255, 255)
BED_RGB = (255, 255, 255)


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


N_ACTIONS = len(Action)

# (drow, dcol), row-major with origin at top-left
ACTION_DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


class Position(NamedTuple):
    row: int
    col: int

    def moved(self, action: int) -> "Position":
        dr, dc = ACTION_DELTAS[Action(action)]
        return Position(self.row + dr, self.col + dc)


def is_interior(pos: Position, grid_size: int = GRID_SIZE) -> bool:
    return 1 <= pos.row <= grid_size - 2 and 1 <= pos.col <= grid_size - 2


def interior_cells(grid_size: int = GRID_SIZE) -> list[Position]:
    return [Position(r, c) for r in range(1, grid_size - 1) for c in range(1, grid_size - 1)]


@dataclass(frozen=True)
class Color:
    name: str
    rgb: tuple[int, int, int]


PALETTE: dict[str, Color] = {
    c.name: c
    for c in (
        Color("black", (0, 0, 0)),
        Color("magenta", (255, 0, 255)),
        Color("blue", (0, 0, 255)),
        Color("cyan", (0, 255, 255)),
        Color("yellow", (255, 255, 0)),
        Color("gray", (160, 160, 160)),
        Color("pink", (255, 128, 180)),
        Color("orange", (255, 128, 0)),
        Color("red", (255, 0, 0)),
        Color("green", (0, 200, 0)),
    )
}
TRAIN_COLORS = ("black", "magenta", "blue", "cyan", "yellow", "gray", "pink", "orange")
TEST_COLORS = ("red", "green")

# Shape words of the color-shape task, each bound to one drawing procedure.
SHAPE_GLYPHS = {
    "tv": "square",
    "ball": "circle",
    "balloon": "diamond",
    "cake": "triangle",
    "can": "v-bar",
    "cassette": "h-bar",
    "chair": "corner-L",
    "guitar": "x",
    "hat": "plus",
    "ice_lolly": "ring",
}
TRAIN_SHAPES = ("tv", "ball", "balloon", "cake", "can", "cassette", "chair", "guitar")
TEST_SHAPES = ("hat", "ice_lolly")

GLYPH_RESOLUTIONS = (3, 7, 9)
# minimum pairwise Hamming distance of the named glyph table, per resolution
GLYPH_MIN_HAMMING = {3: 2, 7: 3, 9: 8}

# Hand-drawn glyph tables. At 7 and 9 px the drawing fills the cell interior
# and leaves a 1 px background border; at 3 px there is no room for a border
# and every mask has odd weight, so any two differ in at least 2 pixels.
_GLYPH_TABLES = {
    9: {
        "square": "####### ####### ####### ####### ####### ####### #######",
        "circle": "..###.. .#####. ####### ####### ####### .#####. ..###..",
        "ring": "..###.. .#####. ##...## ##...## ##...## .#####. ..###..",
        "triangle": "...#... ...#... ..###.. ..###.. .#####. .#####. #######",
        "plus": "...#... ...#... ..###.. ####### ..###.. ...#... ...#...",
        "x": "##...## ###.### .#####. ..###.. .#####. ###.### ##...##",
        "diamond": "...#... ..###.. .#####. ####### .#####. ..###.. ...#...",
        "h-bar": "....... ....... ####### ####### ####### ....... .......",
        "v-bar": "..###.. ..###.. ..###.. ..###.. ..###.. ..###.. ..###..",
        "corner-L": "##..... ##..... ##..... ##..... ##..... ####### #######",
    },
    7: {
        "square": "##### ##### ##### ##### #####",
        "circle": ".###. ##### ##### ##### .###.",
        "ring": ".###. #...# #...# #...# .###.",
        "triangle": "..#.. ..#.. .###. .###. #####",
        "plus": "..#.. .###. ##### .###. ..#..",
        "x": "##.## .###. ..#.. .###. ##.##",
        "diamond": "..#.. .#.#. ##.## .#.#. ..#..",
        "h-bar": "..... ##### ##### ##### .....",
        "v-bar": ".###. .###. .###. .###. .###.",
        "corner-L": "##... ##... ##... ##### #####",
    },
    3: {
        "square": "### ### ###",
        "plus": ".#. ### .#.",
        "x": "#.# .#. #.#",
        "h-bar": "... ### ...",
        "v-bar": ".#. .#. .#.",
        "triangle": ".#. ### ###",
        "ring": "### #.. ###",
        "circle": ".## ### ##.",
        "diamond": "##. ### .##",
        "corner-L": "#.. #.. ###",
    },
}


def _parse_rows(rows: str) -> np.ndarray:
    return np.array([[ch == "#" for ch in row] for row in rows.split()], bool)


@lru_cache(maxsize=None)
def _named_mask(glyph: str, px: int) -> np.ndarray:
    if px not in GLYPH_RESOLUTIONS:
        raise ValueError(f"unsupported glyph resolution {px}; expected one of {GLYPH_RESOLUTIONS}")
    table = _GLYPH_TABLES[px]
    if glyph not in table:
        raise KeyError(f"unknown glyph procedure {glyph!r}")
    drawing = _parse_rows(table[glyph])
    if px == 3:
        m = drawing
    else:
        m = np.zeros((px, px), bool)
        m[1:-1, 1:-1] = drawing
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class Shape:
    """A shape word plus the glyph used to draw it.

    ``glyph`` names one of the drawing procedures. Procedurally generated
    shapes instead carry a fixed 7x7 ``pattern`` (row-major bit string).
    """

    name: str
    glyph: str = ""
    pattern: str = field(default="", repr=False)

    def mask(self, px: int) -> np.ndarray:
        if not self.pattern:
            return _named_mask(self.glyph, px)
        return _pattern_mask(self.pattern, px)


@lru_cache(maxsize=None)
def _pattern_mask(pattern: str, px: int) -> np.ndarray:
    k = int(round(len(pattern) ** 0.5))
    base = np.array([ch == "1" for ch in pattern], bool).reshape(k, k)
    if px < k:
        raise ValueError(f"pattern glyphs need at least {k} px per cell, got {px}")
    m = np.zeros((px, px), bool)
    off = (px - k) // 2
    m[off:off + k, off:off + k] = base
    m.setflags(write=False)
    return m


SHAPES: dict[str, Shape] = {name: Shape(name, glyph) for name, glyph in SHAPE_GLYPHS.items()}


@dataclass(frozen=True)
class ObjectSpec:
    shape: Shape
    color: Color

    @property
    def label(self) -> str:
        return f"{self.color.name} {self.shape.name}"


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def stream_id(*labels) -> int:
    """Stable 64-bit id for a tuple of labels (str/int)."""
    h = hashlib.blake2b("\x1f".join(map(str, labels)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so each key selects an independent stream and the
    position within it is an explicit counter. Streams are single-owner:
    share with :meth:`clone`, never by reference.
    """

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    @property
    def counter(self) -> int:
        ctr = self.gen.bit_generator.state["state"]["counter"]
        return int(ctr[0]) | (int(ctr[1]) << 64)

    def clone(self) -> "RngStream":
        other = RngStream.__new__(RngStream)
        other.seed, other.stream_id = self.seed, self.stream_id
        bg = np.random.Philox(key=[self.seed, self.stream_id])
        bg.state = self.gen.bit_generator.state
        other.gen = np.random.Generator(bg)
        return other

    def child(self, *labels) -> "RngStream":
        return derive_stream(self.seed, stream_id(self.stream_id, *labels))

    # thin conveniences over the generator
    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, seq, size=None, replace=True, p=None):
        return self.gen.choice(seq, size=size, replace=replace, p=p)

    def pick(self, seq):
        """Uniformly pick one element of a sequence."""
        return seq[int(self.gen.integers(len(seq)))]

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


def derive_stream(seed: int, stream_id: int) -> RngStream:
    return RngStream(seed, stream_id)
