"""Discrete-time grid simulator: movement, carrying, reward and termination."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .core import ACTION_DELTAS, GRID_SIZE, TIME_LIMIT, ObjectSpec, Position, is_interior


class TaskKind(str, Enum):
    FIND = "find"
    LIFT = "lift"
    PUT = "put"
    NEGFIND = "negfind"
    COLLECT = "collect"


class Event(str, Enum):
    NONE = "none"
    CORRECT_PICKUP = "correct_pickup"
    WRONG_PICKUP = "wrong_pickup"
    CORRECT_FIND = "correct_find"
    WRONG_FIND = "wrong_find"
    CORRECT_PUT = "correct_put"
    WRONG_PUT = "wrong_put"
    TIMEOUT = "timeout"


# object count mandated per task kind
OBJECT_COUNTS = {
    TaskKind.FIND: 2,
    TaskKind.LIFT: 2,
    TaskKind.NEGFIND: 2,
    TaskKind.PUT: 2,
    TaskKind.COLLECT: 8,
}
COLLECT_TARGETS = 4


class SpecError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    """Raised when stepping a finished episode."""


@dataclass(frozen=True)
class EpisodeSpec:
    """One sampled episode: layout, instruction and which objects are correct.

    ``named`` is the object description used by the instruction (the shape
    alone matters for lift/put/negfind). For negated instructions the named
    object is the *incorrect* one.
    """

    kind: TaskKind
    objects: tuple[ObjectSpec, ...]
    positions: tuple[Position, ...]
    agent: Position
    correct: frozenset[int]
    named: ObjectSpec
    instruction: str = ""
    negated: bool = False
    with_language: bool = True
    bed: Optional[Position] = None
    time_limit: int = TIME_LIMIT
    grid_size: int = GRID_SIZE

    def validate(self) -> None:
        n = OBJECT_COUNTS[self.kind]
        if len(self.objects) != n or len(self.positions) != n:
            raise SpecError(f"{self.kind.value} episode needs {n} objects, got {len(self.objects)}")
        if (self.bed is not None) != (self.kind is TaskKind.PUT):
            raise SpecError("a bed is present exactly in put episodes")
        cells = list(self.positions) + ([self.bed] if self.bed is not None else [])
        if len(set(cells)) != len(cells):
            raise SpecError("object/bed placements overlap")
        for p in cells + [self.agent]:
            if not is_interior(p, self.grid_size):
                raise SpecError(f"position {tuple(p)} is not an interior cell")
        if self.agent in cells:
            raise SpecError("agent starts on an occupied cell")
        if not self.correct or not all(0 <= i < n for i in self.correct):
            raise SpecError("correct set must name existing objects")
        if self.kind is TaskKind.COLLECT and len(self.correct) != COLLECT_TARGETS:
            raise SpecError(f"collect episodes have {COLLECT_TARGETS} correct objects")
        if self.time_limit < 1:
            raise SpecError("time limit must be positive")


@dataclass(frozen=True)
class StepResult:
    reward: float
    done: bool
    event: Event


@dataclass(frozen=True)
class WorldState:
    spec: EpisodeSpec
    agent: Position
    # grid cell per object; None while carried or after collection
    object_pos: tuple[Optional[Position], ...]
    carried: Optional[int] = None
    collected: frozenset[int] = field(default_factory=frozenset)
    step_count: int = 0
    done: bool = False
    accumulated_return: float = 0.0

    @property
    def bed(self) -> Optional[Position]:
        return self.spec.bed

    def object_at(self, pos: Position) -> Optional[int]:
        for i, p in enumerate(self.object_pos):
            if p == pos:
                return i
        return None

    def occupancy(self) -> dict[Position, object]:
        """Sparse grid occupancy: cell -> object id or ``"bed"``. Walls are implicit."""
        occ: dict[Position, object] = {}
        if self.spec.bed is not None:
            occ[self.spec.bed] = "bed"
        for i, p in enumerate(self.object_pos):
            if p is not None:
                occ[p] = i
        return occ

    def cell(self, pos: Position):
        if not is_interior(pos, self.spec.grid_size):
            return "wall"
        i = self.object_at(pos)
        if i is not None:
            return i
        if pos == self.spec.bed:
            return "bed"
        return "empty"


def reset(spec: EpisodeSpec) -> WorldState:
    spec.validate()
    return WorldState(spec=spec, agent=spec.agent, object_pos=tuple(spec.positions))


_FIND_EVENTS = {
    TaskKind.FIND: (Event.CORRECT_FIND, Event.WRONG_FIND),
    TaskKind.NEGFIND: (Event.CORRECT_FIND, Event.WRONG_FIND),
    TaskKind.LIFT: (Event.CORRECT_PICKUP, Event.WRONG_PICKUP),
}


def step(state: WorldState, action: int) -> tuple[WorldState, StepResult]:
    """Advance one step. Pure: the input state is never modified."""
    if state.done:
        raise EpisodeDone("episode already finished")
    spec = state.spec
    kind = spec.kind
    target = state.agent.moved(action)
    steps = state.step_count + 1
    reward, done, event = 0.0, False, Event.NONE
    changes: dict = {}

    if not is_interior(target, spec.grid_size):
        target = state.agent
    else:
        hit = state.object_at(target)
        if kind in _FIND_EVENTS:
            if hit is not None:
                ok = hit in spec.correct
                reward, done = (1.0 if ok else 0.0), True
                event = _FIND_EVENTS[kind][0 if ok else 1]
        elif kind is TaskKind.PUT:
            if hit is not None:
                pos = list(state.object_pos)
                pos[hit] = None
                if state.carried is not None:
                    pos[state.carried] = state.agent
                changes.update(object_pos=tuple(pos), carried=hit)
            elif target == spec.bed and state.carried is not None:
                ok = state.carried in spec.correct
                reward, done = (1.0 if ok else 0.0), True
                event = Event.CORRECT_PUT if ok else Event.WRONG_PUT
        elif kind is TaskKind.COLLECT:
            if hit is not None:
                if hit in spec.correct:
                    pos = list(state.object_pos)
                    pos[hit] = None
                    collected = state.collected | {hit}
                    changes.update(object_pos=tuple(pos), collected=collected)
                    reward, event = 1.0, Event.CORRECT_PICKUP
                    done = collected >= spec.correct
                else:
                    done, event = True, Event.WRONG_PICKUP

    if not done and steps >= spec.time_limit:
        done = True
        if event is Event.NONE:
            event = Event.TIMEOUT
    new = replace(
        state,
        agent=target,
        step_count=steps,
        done=done,
        accumulated_return=state.accumulated_return + reward,
        **changes,
    )
    return new, StepResult(reward, done, event)


def gridded_object_count(state: WorldState) -> int:
    return sum(p is not None for p in state.object_pos)


def bfs_path(start: Position, goals, blocked=frozenset(), grid_size: int = GRID_SIZE) -> list[int] | None:
    """Shortest action sequence from ``start`` to any cell in ``goals``.

    ``blocked`` cells are never entered (goal cells are always enterable).
    Returns ``None`` when no goal is reachable.
    """
    goals = set(goals)
    if start in goals:
        return []
    hi = grid_size - 2
    moves = [(int(a), dr, dc) for a, (dr, dc) in ACTION_DELTAS.items()]
    # plain (row, col) tuples hash and compare equal to Position
    prev = {tuple(start): None}
    queue = deque([tuple(start)])
    while queue:
        cur = queue.popleft()
        r, c = cur
        for a, dr, dc in moves:
            nxt = (r + dr, c + dc)
            if nxt in prev or not (1 <= nxt[0] <= hi and 1 <= nxt[1] <= hi):
                continue
            if nxt in goals:
                path = [a]
                while prev[cur] is not None:
                    cur, a = prev[cur]
                    path.append(a)
                return path[::-1]
            if nxt in blocked:
                continue
            prev[nxt] = (cur, a)
            queue.append(nxt)
    return None
