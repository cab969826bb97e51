"""The language-conditioned agent and its still-image classifier variant.

Pipeline per timestep: residual conv encoder over the frame, word LSTM over
the instruction (final hidden state), concatenation (plus the previous reward
when enabled), a memory LSTM, then linear policy and value heads. The
classifier keeps everything up to the memory LSTM and swaps the heads for a
single 2-way linear layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .core import N_ACTIONS, RngStream
from .nn import LayerSpec, Tape, Var
from .render import Frame

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class AgentConfig:
    frame_hw: tuple[int, int] = (99, 99)
    vocab_size: int = 1
    n_actions: int = N_ACTIONS
    conv_channels: tuple[int, ...] = (64, 64, 32)
    res_blocks: int = 2
    lstm_hidden: int = 128
    lang_hidden: int = 128
    embed_dim: int = 32
    prev_reward: bool = False
    # recompute the instruction encoding every step (False caches it; outputs are identical)
    recompute_language: bool = True

    def vision_hw(self) -> tuple[int, int]:
        h, w = self.frame_hw
        for _ in self.conv_channels:
            h, w = nn.pool_out(h), nn.pool_out(w)
        return h, w

    @property
    def vision_dim(self) -> int:
        h, w = self.vision_hw()
        return h * w * self.conv_channels[-1]

    @property
    def memory_in(self) -> int:
        return self.vision_dim + self.lang_hidden + (1 if self.prev_reward else 0)


def layer_specs(cfg: AgentConfig, classifier: bool = False) -> list[LayerSpec]:
    specs = []
    cin = 3
    for s, ch in enumerate(cfg.conv_channels):
        specs.append(LayerSpec("conv2d", f"vision.{s}.conv", dict(in_ch=cin, out_ch=ch, k=3)))
        specs.append(LayerSpec("maxpool", f"vision.{s}.pool"))
        for r in range(cfg.res_blocks):
            specs.append(LayerSpec("residual_block", f"vision.{s}.res{r}", dict(ch=ch, k=3)))
        cin = ch
    specs.append(LayerSpec("embedding", "lang.embed", dict(vocab=cfg.vocab_size, dim=cfg.embed_dim)))
    specs.append(LayerSpec("lstm", "lang.lstm", dict(in_dim=cfg.embed_dim, hidden=cfg.lang_hidden)))
    specs.append(LayerSpec("lstm", "memory.lstm", dict(in_dim=cfg.memory_in, hidden=cfg.lstm_hidden)))
    if classifier:
        specs.append(LayerSpec("linear", "classifier", dict(in_dim=cfg.lstm_hidden, out_dim=2)))
    else:
        specs.append(LayerSpec("linear", "policy", dict(in_dim=cfg.lstm_hidden, out_dim=cfg.n_actions)))
        specs.append(LayerSpec("linear", "value", dict(in_dim=cfg.lstm_hidden, out_dim=1)))
    return specs


def init_agent(cfg: AgentConfig, seed: int, classifier: bool = False, dtype=np.float32) -> dict[str, np.ndarray]:
    """Parameters keyed by name. Tensors shared with the other head variant are identical for a given seed."""
    params = {}
    for spec in layer_specs(cfg, classifier):
        params.update(nn.init_params(spec, seed, dtype))
    return params


def zero_params(cfg: AgentConfig, classifier: bool = False, dtype=np.float32) -> dict[str, np.ndarray]:
    return {k: np.zeros(shp, dtype) for spec in layer_specs(cfg, classifier)
            for k, shp in spec.param_shapes().items()}


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def check_params(cfg: AgentConfig, params: dict[str, np.ndarray], classifier: bool = False) -> None:
    for spec in layer_specs(cfg, classifier):
        for k, shp in spec.param_shapes().items():
            if k not in params:
                raise nn.ShapeError(f"missing parameter {k}")
            if params[k].shape != shp:
                raise nn.ShapeError(f"parameter {k} has shape {params[k].shape}, expected {shp}")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def encode_frames(cfg: AgentConfig, p: dict[str, Var], frames: np.ndarray, tape: Optional[Tape] = None,
                  dtype=None) -> Var:
    """uint8 frames (N, H, W, 3) -> (N, vision_dim)."""
    if frames.shape[1:] != (*cfg.frame_hw, 3):
        raise nn.ShapeError(f"frame shape {frames.shape[1:]} does not match configured {(*cfg.frame_hw, 3)}")
    dtype = np.dtype(dtype or p["vision.0.conv.w"].value.dtype)
    x = Var(frames.astype(dtype) / dtype.type(255))
    for s in range(len(cfg.conv_channels)):
        x = nn.conv2d(x, p[f"vision.{s}.conv.w"], p[f"vision.{s}.conv.b"], tape)
        x = nn.maxpool(x, tape)
        for r in range(cfg.res_blocks):
            x = nn.residual_block(x, p, f"vision.{s}.res{r}", tape)
    x = nn.relu(x, tape)
    return nn.reshape(x, (frames.shape[0], cfg.vision_dim), tape)


def pad_instructions(instrs: list) -> np.ndarray:
    """List of id sequences -> (N, L) int array padded with id 0."""
    L = max((len(s) for s in instrs), default=0)
    out = np.zeros((len(instrs), L), np.int64)
    for i, s in enumerate(instrs):
        out[i, :len(s)] = s
    return out


def encode_instructions(cfg: AgentConfig, p: dict[str, Var], ids: np.ndarray, tape: Optional[Tape] = None) -> Var:
    """Padded ids (N, L) -> final word-LSTM hidden state (N, lang_hidden). Empty instructions give zeros."""
    ids = np.asarray(ids, np.int64)
    if ids.size and ids.max() >= cfg.vocab_size:
        raise nn.ShapeError(f"instruction id {int(ids.max())} outside vocabulary of size {cfg.vocab_size}")
    dt = p["lang.lstm.w"].value.dtype
    emb = nn.embedding(ids, p["lang.embed.table"], tape)
    n = ids.shape[0]
    z = Var(np.zeros((n, cfg.lang_hidden), dt))
    _, h, _ = nn.lstm(emb, z, Var(np.zeros((n, cfg.lang_hidden), dt)), p["lang.lstm.w"], p["lang.lstm.b"],
                      mask=ids > 0, tape=tape)
    return h


# ---------------------------------------------------------------------------
# acting
# ---------------------------------------------------------------------------

@dataclass
class AgentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, cfg: AgentConfig, n: int = 1, dtype=np.float32) -> "AgentState":
        return cls(np.zeros((n, cfg.lstm_hidden), dtype), np.zeros((n, cfg.lstm_hidden), dtype))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class StepOutput:
    policy: np.ndarray   # (N, A)
    value: np.ndarray    # (N,)
    state: AgentState
    logits: np.ndarray = field(repr=False, default=None)


def agent_step_batch(cfg: AgentConfig, params: dict[str, np.ndarray], frames: np.ndarray, ids: np.ndarray,
                     prev_reward: Optional[np.ndarray], state: AgentState,
                     lang_cache: Optional[np.ndarray] = None) -> tuple[StepOutput, np.ndarray]:
    """One step for N environments. Returns the output and the instruction encoding used."""
    p = nn.bind_const(params)
    vis = encode_frames(cfg, p, frames)
    if lang_cache is None or cfg.recompute_language:
        lang = encode_instructions(cfg, p, ids).value
    else:
        lang = lang_cache
    parts = [vis.value, lang]
    if cfg.prev_reward:
        pr = np.zeros(frames.shape[0]) if prev_reward is None else np.asarray(prev_reward)
        parts.append(pr.reshape(-1, 1).astype(vis.value.dtype))
    x = np.concatenate(parts, axis=1)[:, None, :]
    _, h, c = nn.lstm(Var(x), Var(state.h), Var(state.c), p["memory.lstm.w"], p["memory.lstm.b"])
    logits = nn.linear(h, p["policy.w"], p["policy.b"]).value
    value = nn.linear(h, p["value.w"], p["value.b"]).value[:, 0]
    return StepOutput(softmax(logits), value, AgentState(h.value, c.value), logits), lang


def agent_step(cfg: AgentConfig, params, frame: Frame | np.ndarray, instr, prev_reward: float,
               state: AgentState) -> tuple[np.ndarray, float, AgentState]:
    """Single-environment step: (policy over A actions, value, next state)."""
    arr = frame.array() if isinstance(frame, Frame) else np.asarray(frame)
    out, _ = agent_step_batch(cfg, params, arr[None], pad_instructions([list(instr)]),
                              np.array([prev_reward]), state)
    return out.policy[0], float(out.value[0]), out.state


def act(policy: np.ndarray, rng: Optional[RngStream] = None, greedy: bool = False) -> int:
    """Argmax when greedy, otherwise a draw from ``policy`` using ``rng``."""
    policy = np.asarray(policy, dtype=np.float64)
    if greedy:
        return int(np.argmax(policy))
    if rng is None:
        raise ValueError("sampling requires an RngStream")
    u = rng.random()
    cdf = np.cumsum(policy)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(policy) - 1))


def act_batch(policies: np.ndarray, rng: RngStream) -> np.ndarray:
    cdf = np.cumsum(policies.astype(np.float64), axis=1)
    u = rng.random(len(policies))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), policies.shape[1] - 1)


# ---------------------------------------------------------------------------
# learner-side unroll
# ---------------------------------------------------------------------------

def unroll(cfg: AgentConfig, p: dict[str, Var], frames: np.ndarray, ids: np.ndarray, prev_rewards: np.ndarray,
           mask: np.ndarray, h0: np.ndarray, c0: np.ndarray, tape: Optional[Tape] = None) -> tuple[Var, Var]:
    """Replay B trajectories of up to T steps.

    frames (B, T, H, W, 3); ids (B, L); prev_rewards and mask (B, T).
    Returns logits (B, T, A) and values (B, T, 1) as Vars on ``tape``.
    """
    b, t = frames.shape[:2]
    vis = encode_frames(cfg, p, frames.reshape(b * t, *frames.shape[2:]), tape)
    vis = nn.reshape(vis, (b, t, cfg.vision_dim), tape)
    lang = nn.repeat_time(encode_instructions(cfg, p, ids, tape), t, tape)
    parts = [vis, lang]
    if cfg.prev_reward:
        parts.append(Var(np.asarray(prev_rewards, vis.value.dtype).reshape(b, t, 1)))
    x = nn.concat(parts, axis=-1, tape=tape)
    hs, _, _ = nn.lstm(x, Var(h0), Var(c0), p["memory.lstm.w"], p["memory.lstm.b"], mask=mask, tape=tape)
    logits = nn.linear(hs, p["policy.w"], p["policy.b"], tape)
    values = nn.linear(hs, p["value.w"], p["value.b"], tape)
    return logits, values


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def classifier_logits(cfg: AgentConfig, p: dict[str, Var], frames: np.ndarray, ids: np.ndarray,
                      tape: Optional[Tape] = None) -> Var:
    """Still-image logits over (left, right) from one memory-LSTM step out of the zero state."""
    n = frames.shape[0]
    vis = encode_frames(cfg, p, frames, tape)
    lang = encode_instructions(cfg, p, ids, tape)
    parts = [vis, lang]
    dt = vis.value.dtype
    if cfg.prev_reward:
        parts.append(Var(np.zeros((n, 1), dt)))
    x = nn.reshape(nn.concat(parts, axis=-1, tape=tape), (n, 1, cfg.memory_in), tape)
    zero = np.zeros((n, cfg.lstm_hidden), dt)
    _, h, _ = nn.lstm(x, Var(zero), Var(zero.copy()), p["memory.lstm.w"], p["memory.lstm.b"], tape=tape)
    return nn.linear(h, p["classifier.w"], p["classifier.b"], tape)


def classifier_forward(cfg: AgentConfig, params, frame: Frame | np.ndarray, instr) -> np.ndarray:
    arr = frame.array() if isinstance(frame, Frame) else np.asarray(frame)
    logits = classifier_logits(cfg, nn.bind_const(params), arr[None], pad_instructions([list(instr)]))
    return softmax(logits.value)[0]
