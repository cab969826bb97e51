"""Batched agent rollouts over sampled episodes, used for evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import agent as ag
from .core import RngStream
from .language import Vocab, tokenize_encode
from .render import ViewConfig, render_array
from .tasks import SplitSpec, sample_episode
from .world import COLLECT_TARGETS, EpisodeSpec, Event, TaskKind, reset, step


@dataclass(frozen=True)
class EpisodeRecord:
    ret: float
    length: int
    success: bool
    # collect: whether the first object touched was correct (None if nothing was touched)
    first_correct: Optional[bool] = None


def episode_score(kind: TaskKind, ret: float) -> float:
    return ret / COLLECT_TARGETS if kind is TaskKind.COLLECT else ret


def is_success(kind: TaskKind, ret: float) -> bool:
    return ret >= (COLLECT_TARGETS if kind is TaskKind.COLLECT else 1.0)


# first object the agent reached or picked: event -> whether it was a correct one
_CONTACT = {Event.CORRECT_PICKUP: True, Event.WRONG_PICKUP: False, Event.CORRECT_FIND: True,
            Event.WRONG_FIND: False, Event.CORRECT_PUT: True, Event.WRONG_PUT: False}


def sample_specs(split: SplitSpec, phase: str, n: int, rng: RngStream) -> list[EpisodeSpec]:
    return [sample_episode(split, phase, rng) for _ in range(n)]


def run_agent(acfg: ag.AgentConfig, params: dict[str, np.ndarray], specs: list[EpisodeSpec], view: ViewConfig,
              vocab: Vocab, greedy: bool = True, rng: Optional[RngStream] = None,
              batch: int = 32) -> list[EpisodeRecord]:
    """Play every episode in ``specs`` with the agent, up to ``batch`` at a time.

    Parameters are only read. Records come back in the order of ``specs``.
    """
    if not greedy and rng is None:
        raise ValueError("sampled rollouts need an RngStream")
    records: list[Optional[EpisodeRecord]] = [None] * len(specs)
    pending = list(range(len(specs)))[::-1]
    slots: list[dict] = []
    dtype = next(iter(params.values())).dtype

    def start(i):
        spec = specs[i]
        return {"i": i, "state": reset(spec), "ids": tokenize_encode(spec.instruction, vocab),
                "prev_r": 0.0, "h": np.zeros(acfg.lstm_hidden, dtype), "c": np.zeros(acfg.lstm_hidden, dtype),
                "first": None}

    while pending or slots:
        while pending and len(slots) < batch:
            slots.append(start(pending.pop()))
        frames = np.stack([render_array(s["state"], view) for s in slots])
        ids = ag.pad_instructions([s["ids"] for s in slots])
        st = ag.AgentState(np.stack([s["h"] for s in slots]), np.stack([s["c"] for s in slots]))
        out, _ = ag.agent_step_batch(acfg, params, frames, ids, np.array([s["prev_r"] for s in slots]), st)
        if greedy:
            actions = out.policy.argmax(axis=1)
        else:
            actions = ag.act_batch(out.policy, rng)
        keep = []
        for k, s in enumerate(slots):
            s["state"], res = step(s["state"], int(actions[k]))
            s["prev_r"] = res.reward
            s["h"], s["c"] = out.state.h[k], out.state.c[k]
            if s["first"] is None and res.event in _CONTACT:
                s["first"] = _CONTACT[res.event]
            if res.done:
                st_ = s["state"]
                kind = st_.spec.kind
                records[s["i"]] = EpisodeRecord(st_.accumulated_return, st_.step_count,
                                                is_success(kind, st_.accumulated_return), s["first"])
            else:
                keep.append(s)
        slots = keep
    return records


def accuracy(records: list[EpisodeRecord], collect: bool = False) -> float:
    """Success fraction; for collect, mean normalized return over episodes whose first pick was correct."""
    if collect:
        kept = [r for r in records if r.first_correct]
        if not kept:
            return 0.0
        return float(np.mean([r.ret / COLLECT_TARGETS for r in kept]))
    if not records:
        return 0.0
    return float(np.mean([r.success for r in records]))
