"""Train/test splits and episode sampling for the task families.

A split partitions the *instructions* a task can issue into a training set
and a held-out test set such that every word of a test instruction also
occurs in training; only the combinations are new.

Families:

``find``      color-shape finding (two objects, distractor shares exactly one
              attribute with the target).
``put``       lift trials over all objects, put trials over a few of them;
              tested on putting the rest.
``negation``  "find a x" for every shape, "find a not x" for a subset;
              tested on negating the rest. Shapes are procedural glyphs.
``collect``   eight objects of two types; +1 per correct pickup.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (
    GRID_SIZE,
    PALETTE,
    SHAPES,
    TEST_COLORS,
    TEST_SHAPES,
    TIME_LIMIT,
    TRAIN_COLORS,
    TRAIN_SHAPES,
    Color,
    ObjectSpec,
    Position,
    RngStream,
    Shape,
    derive_stream,
    stream_id,
)
from .language import Vocab, instruction_for, instruction_text
from .world import COLLECT_TARGETS, EpisodeSpec, TaskKind, bfs_path

FAMILIES = ("find", "put", "negation", "collect")
PUT_TRAIN_OBJECTS = 3
PUT_OBJECT_COLOR = "red"
NEG_X1_SIZES = (6, 40, 100)


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Target:
    """An instruction target: what the instruction names."""

    kind: TaskKind
    shape: Shape
    color: Optional[Color] = None
    negated: bool = False

    def instruction(self, with_language: bool = True) -> str:
        return instruction_text(self.kind, self.shape.name, self.color.name if self.color else None,
                                negated=self.negated, with_language=with_language)

    @property
    def obj(self) -> ObjectSpec:
        return ObjectSpec(self.shape, self.color)


@dataclass(frozen=True)
class SplitSpec:
    family: str
    train: tuple[Target, ...]
    test: tuple[Target, ...]
    colors: tuple[Color, ...]
    shapes: tuple[Shape, ...]
    # objects allowed to appear in training episodes (targets or distractors)
    train_objects: frozenset[ObjectSpec] = field(default_factory=frozenset)
    mode: str = "standard"
    neg_negative_ratio: float = 0.5
    put_lift_ratio: float = 0.5
    collect_language: bool = True
    grid_size: int = GRID_SIZE
    time_limit: int = TIME_LIMIT

    def phase_targets(self, phase: str) -> tuple[Target, ...]:
        if phase == "train":
            return self.train
        if phase == "test":
            return self.test
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")

    def instructions(self, phase: str) -> list[str]:
        return sorted({t.instruction(self.collect_language) for t in self.phase_targets(phase)})

    def vocab(self) -> Vocab:
        return Vocab.from_instructions(self.instructions("train") + self.instructions("test"))

    def to_json(self) -> dict:
        def row(t: Target):
            d = {"kind": t.kind.value, "shape": t.shape.name, "instruction": t.instruction(self.collect_language)}
            if t.color is not None:
                d["color"] = t.color.name
            if t.negated:
                d["negated"] = True
            return d

        return {
            "family": self.family,
            "mode": self.mode,
            "colors": [c.name for c in self.colors],
            "shapes": [s.name for s in self.shapes],
            "train": [row(t) for t in self.train],
            "test": [row(t) for t in self.test],
        }


# ---------------------------------------------------------------------------
# procedural glyph universes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlyphUniverse:
    n: int
    masks: tuple[str, ...]  # 49-char bit strings, row-major 7x7
    names: tuple[str, ...]

    def shapes(self) -> tuple[Shape, ...]:
        return tuple(Shape(name, pattern=m) for name, m in zip(self.names, self.masks))

    def arrays(self) -> np.ndarray:
        return np.array([[ch == "1" for ch in m] for m in self.masks], bool).reshape(self.n, 7, 7)


GLYPH_SIDE = 7
GLYPH_MIN_SET, GLYPH_MAX_SET = 12, 37
GLYPH_UNIVERSE_MIN_HAMMING = 8
GLYPH_UNIVERSE_MAX = 512


def glyph_universe(n: int, seed: int, max_attempts: int | None = None) -> GlyphUniverse:
    """Draw ``n`` mirror-symmetric 7x7 glyphs with pairwise Hamming distance >= 8.

    Generation is sequential, so the first k glyphs of a universe do not
    depend on ``n``.
    """
    if not 1 <= n <= GLYPH_UNIVERSE_MAX:
        raise SplitError(f"glyph universe size must be in [1, {GLYPH_UNIVERSE_MAX}], got {n}")
    rng = derive_stream(seed, stream_id("glyph-universe"))
    budget = max_attempts if max_attempts is not None else 200 * n + 1000
    half = (GLYPH_SIDE + 1) // 2
    kept = np.zeros((0, GLYPH_SIDE * GLYPH_SIDE), bool)
    for _ in range(budget):
        left = rng.random((GLYPH_SIDE, half)) < rng.random()
        mask = np.concatenate([left, left[:, :GLYPH_SIDE - half][:, ::-1]], axis=1).reshape(-1)
        if not GLYPH_MIN_SET <= mask.sum() <= GLYPH_MAX_SET:
            continue
        if len(kept) and (kept != mask).sum(axis=1).min() < GLYPH_UNIVERSE_MIN_HAMMING:
            continue
        kept = np.vstack([kept, mask])
        if len(kept) == n:
            masks = tuple("".join("1" if b else "0" for b in row) for row in kept)
            return GlyphUniverse(n, masks, tuple(f"g{i}" for i in range(n)))
    raise SplitError(f"could not place {n} glyphs within {budget} attempts (got {len(kept)})")


# ---------------------------------------------------------------------------
# split construction
# ---------------------------------------------------------------------------

def build_split(family: str, rng: RngStream, *, mode: str = "standard", typical_color: str = "yellow",
                neg_x1_size: int = 6, neg_x2_size: int = 8, neg_negative_ratio: float = 0.5,
                put_lift_ratio: float = 0.5, collect_language: bool = True,
                train_colors=TRAIN_COLORS, test_colors=TEST_COLORS,
                train_shapes=TRAIN_SHAPES, test_shapes=TEST_SHAPES,
                grid_size: int = GRID_SIZE, time_limit: int = TIME_LIMIT) -> SplitSpec:
    common = dict(grid_size=grid_size, time_limit=time_limit)
    if family == "find":
        split = _find_split(rng, mode, typical_color, train_colors, test_colors, train_shapes, test_shapes, common)
    elif family == "put":
        split = _put_split(rng, put_lift_ratio, list(train_shapes) + list(test_shapes), common)
    elif family == "negation":
        split = _negation_split(rng, neg_x1_size, neg_x2_size, neg_negative_ratio, common)
    elif family == "collect":
        split = _collect_split(rng, collect_language, list(train_colors) + list(test_colors),
                               list(train_shapes) + list(test_shapes), common)
    else:
        raise SplitError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    check_split(split)
    return split


def _colors(names) -> tuple[Color, ...]:
    try:
        return tuple(PALETTE[n] for n in names)
    except KeyError as e:
        raise SplitError(f"unknown color {e.args[0]!r}") from None


def _shapes(names) -> tuple[Shape, ...]:
    try:
        return tuple(SHAPES[n] for n in names)
    except KeyError as e:
        raise SplitError(f"unknown shape {e.args[0]!r}") from None


def _find_split(rng, mode, typical_color, train_colors, test_colors, train_shapes, test_shapes, common):
    c, c_hat = _colors(train_colors), _colors(test_colors)
    s, s_hat = _shapes(train_shapes), _shapes(test_shapes)
    if not (c and c_hat and s and s_hat):
        raise SplitError(
            f"color-shape split needs non-empty c, c_hat, s, s_hat; got sizes "
            f"{len(c)}, {len(c_hat)}, {len(s)}, {len(s_hat)}"
        )
    T = TaskKind.FIND
    if mode == "standard":
        train = [Target(T, sh, co) for co, sh in itertools.chain(
            itertools.product(c, s), itertools.product(c_hat, s), itertools.product(c, s_hat))]
        test = [Target(T, sh, co) for co, sh in itertools.product(c_hat, s_hat)]
        colors, shapes = c + c_hat, s + s_hat
    elif mode == "typical_color":
        if typical_color not in train_colors:
            raise SplitError(f"typical color {typical_color!r} must be one of the training colors")
        if len(c) < 2:
            raise SplitError("typical-color split needs at least 2 training colors")
        c0 = PALETTE[typical_color]
        train = [Target(T, sh, co) for co, sh in itertools.product(c, s)]
        train += [Target(T, sh, c0) for sh in s_hat]
        test = [Target(T, sh, co) for co, sh in itertools.product(c, s_hat) if co != c0]
        colors, shapes = c, s + s_hat
    else:
        raise SplitError(f"unknown split mode {mode!r}")
    return SplitSpec("find", tuple(train), tuple(test), colors, shapes,
                     train_objects=frozenset(t.obj for t in train), mode=mode, **common)


def _put_split(rng, lift_ratio, shape_names, common):
    shapes = _shapes(shape_names)
    if len(shapes) < PUT_TRAIN_OBJECTS + 1:
        raise SplitError(f"put split needs at least {PUT_TRAIN_OBJECTS + 1} objects, got {len(shapes)}")
    red = PALETTE[PUT_OBJECT_COLOR]
    order = [shapes[i] for i in rng.permutation(len(shapes))]
    put_train, put_test = order[:PUT_TRAIN_OBJECTS], order[PUT_TRAIN_OBJECTS:]
    train = [Target(TaskKind.LIFT, sh, red) for sh in shapes]
    train += [Target(TaskKind.PUT, sh, red) for sh in put_train]
    test = [Target(TaskKind.PUT, sh, red) for sh in put_test]
    return SplitSpec("put", tuple(train), tuple(test), (red,), shapes,
                     train_objects=frozenset(ObjectSpec(sh, red) for sh in shapes),
                     put_lift_ratio=lift_ratio, **common)


def _negation_split(rng, x1_size, x2_size, negative_ratio, common):
    if x1_size < 1 or x2_size < 1:
        raise SplitError(f"negation split needs |X1| >= 1 and |X2| >= 1, got {x1_size}, {x2_size}")
    # X2 takes the first glyphs so it is identical across |X1| conditions
    universe = glyph_universe(x1_size + x2_size, rng.seed).shapes()
    x2, x1 = universe[:x2_size], universe[x2_size:]
    N = TaskKind.NEGFIND
    train = [Target(N, sh) for sh in universe]
    train += [Target(N, sh, negated=True) for sh in x1]
    test = [Target(N, sh, negated=True) for sh in x2]
    colors = tuple(PALETTE.values())
    return SplitSpec("negation", tuple(train), tuple(test), colors, universe,
                     neg_negative_ratio=negative_ratio, **common)


def _collect_split(rng, with_language, color_names, shape_names, common):
    colors, shapes = _colors(color_names), _shapes(shape_names)
    if len(colors) < 2 or len(shapes) < 2:
        raise SplitError("collect split needs at least 2 colors and 2 shapes")
    combos = [ObjectSpec(sh, co) for co in colors for sh in shapes]
    for _ in range(1000):
        perm = rng.permutation(len(combos))
        half = len(combos) // 2
        train_c = [combos[i] for i in sorted(perm[:half])]
        test_c = [combos[i] for i in sorted(perm[half:])]
        if _collect_half_ok(train_c) and _collect_half_ok(test_c) and _covers(train_c, test_c):
            break
    else:
        raise SplitError("could not partition collect combinations with partners in each half")
    C = TaskKind.COLLECT
    train = tuple(Target(C, o.shape, o.color) for o in train_c)
    test = tuple(Target(C, o.shape, o.color) for o in test_c)
    return SplitSpec("collect", train, test, colors, shapes, train_objects=frozenset(train_c),
                     collect_language=with_language, **common)


def _one_shared(a: ObjectSpec, b: ObjectSpec) -> bool:
    return (a.color == b.color) != (a.shape == b.shape)


def _collect_half_ok(half) -> bool:
    return all(any(_one_shared(a, b) for b in half) for a in half)


def _covers(train, test) -> bool:
    return ({o.color for o in test} <= {o.color for o in train}
            and {o.shape for o in test} <= {o.shape for o in train})


def check_split(split: SplitSpec) -> None:
    """Raise SplitError unless train/test instructions are disjoint and test words all occur in train."""
    tr = set(split.instructions("train"))
    te = set(split.instructions("test"))
    if not split.train or not split.test:
        raise SplitError("both phases need at least one target")
    if split.family == "collect" and not split.collect_language:
        # without language every instruction is empty; disjointness is on object types instead
        if {t.obj for t in split.train} & {t.obj for t in split.test}:
            raise SplitError("collect train/test object types overlap")
        return
    if tr & te:
        raise SplitError(f"train/test instructions overlap: {sorted(tr & te)[:3]}")
    train_words = {w for s in tr for w in s.split()}
    missing = {w for s in te for w in s.split()} - train_words
    if missing:
        raise SplitError(f"test words never seen in training: {sorted(missing)}")


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def sample_episode(split: SplitSpec, phase: str, rng: RngStream) -> EpisodeSpec:
    for _ in range(1000):
        spec = _draw(split, phase, rng)
        if solvable(spec):
            return spec
    raise RuntimeError("sampler failed to produce a solvable layout")


def _draw(split: SplitSpec, phase: str, rng: RngStream) -> EpisodeSpec:
    fam = split.family
    targets = split.phase_targets(phase)
    if fam == "find":
        return _draw_find(split, phase, rng.pick(targets), rng)
    if fam == "put":
        if phase == "train":
            kind = TaskKind.LIFT if rng.random() < split.put_lift_ratio else TaskKind.PUT
            targets = tuple(t for t in targets if t.kind is kind)
        return _draw_put(split, rng.pick(targets), rng)
    if fam == "negation":
        if phase == "train":
            negated = bool(rng.random() < split.neg_negative_ratio)
            targets = tuple(t for t in targets if t.negated == negated)
        return _draw_negation(split, rng.pick(targets), rng)
    if fam == "collect":
        return _draw_collect(split, phase, rng.pick(targets), rng)
    raise SplitError(f"unknown family {fam!r}")


def _place(n_cells: int, rng: RngStream, grid_size: int) -> list[Position]:
    side = grid_size - 2
    idx = rng.choice(side * side, size=n_cells, replace=False)
    return [Position(1 + int(i) // side, 1 + int(i) % side) for i in idx]


def _shuffled(objs, correct_flags, rng):
    order = rng.permutation(len(objs))
    objects = tuple(objs[i] for i in order)
    correct = frozenset(k for k, i in enumerate(order) if correct_flags[i])
    return objects, correct


def _finish(split, kind, objs, flags, named, rng, *, negated=False, with_language=True, bed=False):
    objects, correct = _shuffled(objs, flags, rng)
    cells = _place(len(objects) + 1 + int(bed), rng, split.grid_size)
    spec = EpisodeSpec(
        kind=kind,
        objects=objects,
        positions=tuple(cells[:len(objects)]),
        agent=cells[-1],
        correct=correct,
        named=named,
        negated=negated,
        with_language=with_language,
        bed=cells[len(objects)] if bed else None,
        time_limit=split.time_limit,
        grid_size=split.grid_size,
    )
    return _with_instruction(spec)


def _with_instruction(spec: EpisodeSpec) -> EpisodeSpec:
    return replace(spec, instruction=instruction_for(spec))


def _distractor_pool(split: SplitSpec, phase: str):
    if phase == "train":
        return sorted(split.train_objects, key=lambda o: (o.color.name, o.shape.name))
    return [ObjectSpec(sh, co) for co in split.colors for sh in split.shapes]


def _one_attribute_distractor(target: ObjectSpec, pool, rng: RngStream) -> ObjectSpec:
    same_color = [o for o in pool if o.color == target.color and o.shape != target.shape]
    same_shape = [o for o in pool if o.shape == target.shape and o.color != target.color]
    options = [g for g in (same_color, same_shape) if g]
    if not options:
        raise SplitError(f"no distractor shares exactly one attribute with {target.label}")
    group = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
    return rng.pick(group)


def _draw_find(split, phase, target: Target, rng) -> EpisodeSpec:
    tgt = target.obj
    distractor = _one_attribute_distractor(tgt, _distractor_pool(split, phase), rng)
    return _finish(split, TaskKind.FIND, [tgt, distractor], [True, False], tgt, rng)


def _draw_put(split, target: Target, rng) -> EpisodeSpec:
    tgt = target.obj
    others = [sh for sh in split.shapes if sh != target.shape]
    distractor = ObjectSpec(rng.pick(others), target.color)
    return _finish(split, target.kind, [tgt, distractor], [True, False], tgt, rng,
                   bed=target.kind is TaskKind.PUT)


def _draw_negation(split, target: Target, rng) -> EpisodeSpec:
    others = [sh for sh in split.shapes if sh != target.shape]
    named = ObjectSpec(target.shape, rng.pick(split.colors))
    other = ObjectSpec(rng.pick(others), rng.pick(split.colors))
    flags = [not target.negated, target.negated]
    return _finish(split, TaskKind.NEGFIND, [named, other], flags, named, rng, negated=target.negated)


def _draw_collect(split, phase, target: Target, rng) -> EpisodeSpec:
    tgt = target.obj
    pool = [t.obj for t in split.phase_targets(phase)]
    other = _one_attribute_distractor(tgt, pool, rng)
    objs = [tgt] * COLLECT_TARGETS + [other] * COLLECT_TARGETS
    flags = [True] * COLLECT_TARGETS + [False] * COLLECT_TARGETS
    return _finish(split, TaskKind.COLLECT, objs, flags, tgt, rng, with_language=split.collect_language)


def solvable(spec: EpisodeSpec) -> bool:
    """True when a privileged policy can earn the maximal return within the time limit."""
    g = spec.grid_size
    correct = [spec.positions[i] for i in sorted(spec.correct)]
    wrong = frozenset(p for i, p in enumerate(spec.positions) if i not in spec.correct)
    if spec.kind is TaskKind.PUT:
        first = bfs_path(spec.agent, correct, wrong, g)
        if first is None:
            return False
        second = bfs_path(correct[0], [spec.bed], wrong, g)
        return second is not None and len(first) + len(second) <= spec.time_limit
    if spec.kind is TaskKind.COLLECT:
        return collect_tour_length(spec.agent, correct, wrong, g) <= spec.time_limit
    path = bfs_path(spec.agent, correct, wrong, g)
    return path is not None and len(path) <= spec.time_limit


def collect_tour_length(start: Position, targets, blocked, grid_size: int) -> float:
    """Length of the greedy nearest-target tour (inf if some target is unreachable)."""
    remaining = set(targets)
    pos, total = start, 0
    while remaining:
        path = bfs_path(pos, remaining, blocked, grid_size)
        if path is None:
            return float("inf")
        for a in path:
            pos = pos.moved(a)
        total += len(path)
        remaining.discard(pos)
    return total
