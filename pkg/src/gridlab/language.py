"""Instruction templates, whitespace tokenization and vocabulary indexing."""
from __future__ import annotations

from typing import Iterable

from .world import EpisodeSpec, TaskKind

PAD = "<pad>"


class OutOfVocabulary(KeyError):
    pass


def instruction_text(kind: TaskKind, shape: str, color: str | None = None,
                     negated: bool = False, with_language: bool = True) -> str:
    if kind is TaskKind.FIND:
        return f"find a {color} {shape}"
    if kind is TaskKind.LIFT:
        return f"lift a {shape}"
    if kind is TaskKind.PUT:
        return f"put a {shape} on the bed"
    if kind is TaskKind.NEGFIND:
        return f"find a not {shape}" if negated else f"find a {shape}"
    if kind is TaskKind.COLLECT:
        return f"{color} {shape}" if with_language else ""
    raise ValueError(f"no template for {kind!r}")


def instruction_for(spec: EpisodeSpec) -> str:
    named = spec.named
    return instruction_text(spec.kind, named.shape.name, named.color.name,
                            negated=spec.negated, with_language=spec.with_language)


class Vocab:
    """Dense token ids; id 0 is reserved for padding."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = [PAD]
        self.stoi = {PAD: 0}
        for t in sorted(set(tokens)):
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def from_instructions(cls, instructions: Iterable[str]) -> "Vocab":
        return cls(tok for s in instructions for tok in s.split())

    @property
    def size(self) -> int:
        return len(self.itos)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids)


def tokenize_encode(s: str, vocab: Vocab) -> list[int]:
    ids = []
    for tok in s.split():
        try:
            ids.append(vocab.stoi[tok])
        except KeyError:
            raise OutOfVocabulary(f"token {tok!r} not in vocabulary") from None
    return ids
