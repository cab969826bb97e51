"""Importance-weighted actor-critic training (V-trace) with an in-process actor pool.

Actors and the learner talk only through a bounded FIFO of :class:`Trajectory`
records and a :class:`SnapshotBoard` holding the latest immutable parameter
version. ``deterministic=True`` runs actors and learner interleaved in one
thread, which makes runs bit-reproducible.
"""
from __future__ import annotations

import csv
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import agent as ag
from . import nn
from .config import ExperimentConfig, ValidatedConfig, validate_config
from .core import RngStream, derive_stream, stream_id
from .language import tokenize_encode
from .render import render_array
from .rollout import accuracy, episode_score, is_success, run_agent, sample_specs
from .tasks import sample_episode
from .world import TaskKind, reset, step

METRIC_COLUMNS = ("step", "frames", "mean_return_train", "train_acc", "test_acc", "loss", "entropy",
                  "value_error", "params_version")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# V-trace
# ---------------------------------------------------------------------------

@dataclass
class VTraceOutput:
    vs: np.ndarray
    pg_adv: np.ndarray
    rhos: np.ndarray


def vtrace(rewards, values, bootstrap_value, target_log_probs, behavior_log_probs, gamma: float = 0.99,
           rho_bar: float = 1.0, c_bar: float = 1.0, dones=None) -> VTraceOutput:
    """V-trace targets along axis 0 (time). Extra trailing axes are batch dims.

    The discount is zeroed after a step with ``done`` set.
    """
    r = np.asarray(rewards, np.float64)
    v = np.asarray(values, np.float64)
    tl = np.asarray(target_log_probs, np.float64)
    bl = np.asarray(behavior_log_probs, np.float64)
    boot = np.asarray(bootstrap_value, np.float64)
    if not (r.shape == v.shape == tl.shape == bl.shape):
        raise ValueError(f"vtrace inputs must share a shape; got {r.shape}, {v.shape}, {tl.shape}, {bl.shape}")
    if not rho_bar >= c_bar >= 0:
        raise ValueError("vtrace requires rho_bar >= c_bar >= 0")
    for name, a in (("rewards", r), ("values", v), ("target_log_probs", tl), ("behavior_log_probs", bl),
                    ("bootstrap_value", boot)):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite {name}")
    disc = np.full(r.shape, gamma)
    if dones is not None:
        disc = disc * (1.0 - np.asarray(dones, np.float64))
    ratio = np.exp(tl - bl)
    rho = np.minimum(rho_bar, ratio)
    c = np.minimum(c_bar, ratio)
    v_next = np.concatenate([v[1:], boot[None]], axis=0)
    delta = rho * (r + disc * v_next - v)
    T = r.shape[0]
    acc = np.zeros_like(boot)
    vs_minus_v = np.empty_like(v)
    for t in reversed(range(T)):
        acc = delta[t] + disc[t] * c[t] * acc
        vs_minus_v[t] = acc
    vs = v + vs_minus_v
    vs_next = np.concatenate([vs[1:], boot[None]], axis=0)
    pg_adv = rho * (r + disc * vs_next - v)
    return VTraceOutput(vs, pg_adv, rho)


def n_step_returns(rewards, bootstrap_value, gamma: float, dones=None) -> np.ndarray:
    """Discounted return from each step to the end of the segment, bootstrapped."""
    r = np.asarray(rewards, np.float64)
    disc = np.full(r.shape, gamma) * (1.0 - (np.asarray(dones, np.float64) if dones is not None else 0.0))
    out = np.empty_like(r)
    g = np.asarray(bootstrap_value, np.float64)
    for t in reversed(range(len(r))):
        g = r[t] + disc[t] * g
        out[t] = g
    return out


# ---------------------------------------------------------------------------
# trajectories and loss
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """T steps of one episode segment. ``frames`` and ``prev_rewards`` carry one
    extra entry: the observation after the last step, used for the bootstrap value."""

    frames: np.ndarray          # (T+1, H, W, 3) uint8
    instr: tuple
    actions: np.ndarray         # (T,)
    behavior_logp: np.ndarray   # (T,)
    rewards: np.ndarray         # (T,)
    dones: np.ndarray           # (T,) bool, at most the last one set
    prev_rewards: np.ndarray    # (T+1,)
    h0: np.ndarray
    c0: np.ndarray
    params_version: int = 0

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class LossHyper:
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.01

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LossHyper":
        return cls(cfg.gamma, cfg.rho_bar, cfg.c_bar, cfg.value_coef, cfg.entropy_coef)


def _collate(batch: list[Trajectory]):
    b = len(batch)
    tmax = max(len(tr) for tr in batch)
    hw = batch[0].frames.shape[1:]
    frames = np.zeros((b, tmax + 1, *hw), np.uint8)
    prev = np.zeros((b, tmax + 1))
    mask = np.zeros((b, tmax + 1))
    for i, tr in enumerate(batch):
        n = len(tr)
        frames[i, :n + 1] = tr.frames
        prev[i, :n + 1] = tr.prev_rewards
        mask[i, :n + 1] = 1.0
    ids = ag.pad_instructions([list(tr.instr) for tr in batch])
    h0 = np.stack([tr.h0 for tr in batch])
    c0 = np.stack([tr.c0 for tr in batch])
    return frames, ids, prev, mask, h0, c0


def compute_loss(acfg: ag.AgentConfig, params: dict[str, np.ndarray], batch: list[Trajectory],
                 hyper: LossHyper = LossHyper()) -> tuple[float, dict[str, np.ndarray], dict]:
    """loss = -sum(pg_adv * log pi(a)) + value_coef * 0.5 * sum((vs - V)^2) - entropy_coef * sum(H(pi)).

    V-trace targets and advantages are constants. Returns (loss, gradients, metrics).
    """
    if not batch:
        raise ValueError("empty batch")
    frames, ids, prev, mask, h0, c0 = _collate(batch)
    tape = nn.Tape()
    p = tape.bind(params)
    logits_v, values_v = ag.unroll(acfg, p, frames, ids, prev, mask, h0.astype(np.float32),
                                   c0.astype(np.float32), tape)
    logits = logits_v.value.astype(np.float64)
    values = values_v.value[..., 0].astype(np.float64)
    logp_all = ag.log_softmax(logits)
    pi = np.exp(logp_all)
    ent = -(pi * logp_all).sum(-1)

    g_logits = np.zeros_like(logits)
    g_values = np.zeros_like(values)
    pg_loss = v_loss = ent_sum = 0.0
    n_steps = 0
    max_rho = 0.0
    verr = 0.0
    for i, tr in enumerate(batch):
        n = len(tr)
        a = tr.actions.astype(np.int64)
        tlp = logp_all[i, np.arange(n), a]
        vt = vtrace(tr.rewards, values[i, :n], values[i, n], tlp, tr.behavior_logp,
                    hyper.gamma, hyper.rho_bar, hyper.c_bar, tr.dones)
        max_rho = max(max_rho, float(vt.rhos.max()))
        pg_loss -= float(np.sum(vt.pg_adv * tlp))
        diff = vt.vs - values[i, :n]
        v_loss += 0.5 * float(np.sum(diff ** 2))
        verr += float(np.sum(diff ** 2))
        ent_sum += float(ent[i, :n].sum())
        n_steps += n
        onehot = np.zeros((n, logits.shape[-1]))
        onehot[np.arange(n), a] = 1.0
        pii, lpi, ei = pi[i, :n], logp_all[i, :n], ent[i, :n]
        g_logits[i, :n] = (-vt.pg_adv[:, None] * (onehot - pii)
                           + hyper.entropy_coef * pii * (lpi + ei[:, None]))
        g_values[i, :n] = -hyper.value_coef * diff
    loss = pg_loss + hyper.value_coef * v_loss - hyper.entropy_coef * ent_sum
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    dt = logits_v.value.dtype
    grads = nn.backward(tape, {logits_v: g_logits.astype(dt), values_v: g_values[..., None].astype(dt)})
    metrics = {"loss": loss, "entropy": ent_sum / n_steps, "value_error": verr / n_steps,
               "max_rho": max_rho, "steps": n_steps}
    return loss, grads, metrics


# ---------------------------------------------------------------------------
# snapshots, actors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    version: int
    params: dict


class SnapshotBoard:
    """Holds the latest published parameters. Publication swaps one reference."""

    def __init__(self, params: dict[str, np.ndarray]):
        self._snap = Snapshot(0, _frozen(params))
        self._lock = threading.Lock()

    def publish(self, params: dict[str, np.ndarray]) -> int:
        with self._lock:
            self._snap = Snapshot(self._snap.version + 1, _frozen(params))
            return self._snap.version

    def latest(self) -> Snapshot:
        return self._snap


def _frozen(params):
    out = {}
    for k, v in params.items():
        a = np.array(v, copy=True)
        a.setflags(write=False)
        out[k] = a
    return out


@dataclass
class EpisodeStat:
    ret: float
    score: float
    success: bool


class Actor:
    """Steps ``n_envs`` environments in lockstep with one parameter snapshot.

    Each environment keeps its own trajectory buffer; a trajectory is emitted
    when its episode ends or it reaches ``unroll`` steps. A newer snapshot is
    picked up whenever some environment starts a new episode.
    """

    def __init__(self, index: int, vcfg: ValidatedConfig, acfg: ag.AgentConfig, board: SnapshotBoard, seed: int):
        cfg = vcfg.cfg
        self.index = index
        self.cfg, self.vcfg, self.acfg, self.board = cfg, vcfg, acfg, board
        self.split = vcfg.split
        self.vocab = self.split.vocab()
        self.view = vcfg.view
        self.snap = board.latest()
        self.rng = derive_stream(seed, stream_id("actor", index, "policy"))
        self.envs = [self._new_env(derive_stream(seed, stream_id("actor", index, "env", j)))
                     for j in range(cfg.envs_per_actor)]
        self.frames_produced = 0

    def _new_env(self, rng: RngStream) -> dict:
        e = {"rng": rng, "h": np.zeros(self.acfg.lstm_hidden, np.float32),
             "c": np.zeros(self.acfg.lstm_hidden, np.float32)}
        self._reset_env(e)
        return e

    def _reset_env(self, e: dict) -> None:
        spec = sample_episode(self.split, "train", e["rng"])
        e["state"] = reset(spec)
        e["ids"] = tuple(tokenize_encode(spec.instruction, self.vocab))
        e["prev_r"] = 0.0
        e["h"] = np.zeros(self.acfg.lstm_hidden, np.float32)
        e["c"] = np.zeros(self.acfg.lstm_hidden, np.float32)
        e["frame"] = render_array(e["state"], self.view)
        self._open(e)

    def _open(self, e: dict) -> None:
        e["buf"] = {"frames": [e["frame"]], "actions": [], "logp": [], "rewards": [], "dones": [],
                    "prev": [e["prev_r"]], "h0": e["h"].copy(), "c0": e["c"].copy(),
                    "version": self.snap.version}

    def step(self) -> tuple[list[Trajectory], list[EpisodeStat]]:
        """Advance every environment one step; return finished trajectories and episodes."""
        envs = self.envs
        frames = np.stack([e["frame"] for e in envs])
        ids = ag.pad_instructions([list(e["ids"]) for e in envs])
        st = ag.AgentState(np.stack([e["h"] for e in envs]), np.stack([e["c"] for e in envs]))
        out, _ = ag.agent_step_batch(self.acfg, self.snap.params, frames, ids,
                                     np.array([e["prev_r"] for e in envs]), st)
        actions = ag.act_batch(out.policy, self.rng)
        logp = np.log(np.maximum(out.policy[np.arange(len(envs)), actions], 1e-30))
        trajs, stats = [], []
        restarted = False
        for k, e in enumerate(envs):
            e["state"], res = step(e["state"], int(actions[k]))
            e["h"], e["c"] = out.state.h[k], out.state.c[k]
            e["prev_r"] = res.reward
            e["frame"] = render_array(e["state"], self.view)
            buf = e["buf"]
            buf["actions"].append(int(actions[k]))
            buf["logp"].append(float(logp[k]))
            buf["rewards"].append(res.reward)
            buf["dones"].append(res.done)
            buf["frames"].append(e["frame"])
            buf["prev"].append(res.reward)
            self.frames_produced += 1
            if res.done or len(buf["actions"]) >= self.cfg.unroll:
                trajs.append(Trajectory(
                    np.stack(buf["frames"]), e["ids"], np.array(buf["actions"], np.int64),
                    np.array(buf["logp"]), np.array(buf["rewards"]), np.array(buf["dones"], bool),
                    np.array(buf["prev"]), buf["h0"], buf["c0"], buf["version"]))
                if res.done:
                    s = e["state"]
                    stats.append(EpisodeStat(s.accumulated_return, episode_score(s.spec.kind, s.accumulated_return),
                                             is_success(s.spec.kind, s.accumulated_return)))
                    restarted = True
                    e["needs_reset"] = True
                else:
                    self._open(e)
        if restarted:
            self.snap = self.board.latest()
            for e in envs:
                if e.pop("needs_reset", False):
                    self._reset_env(e)
        return trajs, stats


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingResult:
    params: dict
    metrics: list[dict]
    frames: int
    steps: int
    version: int
    output_dir: Optional[Path] = None
    wall_seconds: float = 0.0
    max_rho: float = 0.0
    actor_frames: int = 0       # environment steps taken by actors, consumed or not


def agent_config_for(vcfg: ValidatedConfig) -> ag.AgentConfig:
    cfg = vcfg.cfg
    h, w, _ = vcfg.frame_shape
    return ag.AgentConfig(frame_hw=(h, w), vocab_size=vcfg.vocab_size, n_actions=vcfg.n_actions,
                          conv_channels=tuple(cfg.conv_channels), lstm_hidden=cfg.lstm_hidden,
                          lang_hidden=cfg.lang_hidden, embed_dim=cfg.embed_dim, prev_reward=cfg.prev_reward)


class _MetricsSink:
    def __init__(self, path: Optional[Path]):
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.w = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
            self.w.writeheader()

    def write(self, row):
        if self.fh is not None:
            self.w.writerow({k: row[k] for k in METRIC_COLUMNS})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def run_training(cfg: ExperimentConfig | ValidatedConfig, *, output_dir: Optional[str | Path] = None,
                 init_params: Optional[dict] = None, on_step: Optional[Callable[[dict], None]] = None,
                 learner_delay: float = 0.0) -> TrainingResult:
    """Train one agent. Writes metrics.csv and checkpoints under ``output_dir`` when given.

    ``learner_delay`` sleeps before each learner update (for back-pressure tests).
    """
    vcfg = cfg if isinstance(cfg, ValidatedConfig) else validate_config(cfg)
    cfg = vcfg.cfg
    acfg = agent_config_for(vcfg)
    params = init_params if init_params is not None else ag.init_agent(acfg, cfg.seed)
    ag.check_params(acfg, params)
    params = {k: np.array(v, np.float32) for k, v in params.items()}
    board = SnapshotBoard(params)
    opt = nn.RMSProp(cfg.lr, cfg.rms_decay, cfg.rms_eps)
    hyper = LossHyper.from_config(cfg)
    out_dir = Path(output_dir) if output_dir is not None else None
    sink = _MetricsSink(out_dir / "metrics.csv" if out_dir else None)
    actors = [Actor(i, vcfg, acfg, board, cfg.seed) for i in range(cfg.n_actors)]
    recent: deque[EpisodeStat] = deque(maxlen=200)
    eval_rng = derive_stream(cfg.seed, stream_id("in-run-eval"))
    test_acc = float("nan")
    metrics_rows: list[dict] = []
    state = {"frames": 0, "steps": 0, "next_ckpt": cfg.checkpoint_frames, "max_rho": 0.0}
    t0 = time.time()

    def finished():
        if cfg.max_learner_steps and state["steps"] >= cfg.max_learner_steps:
            return True
        return state["frames"] >= cfg.total_frames

    def learn(batch: list[Trajectory]):
        nonlocal params, test_acc
        if learner_delay:
            time.sleep(learner_delay)
        loss, grads, m = compute_loss(acfg, params, batch, hyper)
        if cfg.grad_clip > 0:
            grads, _ = nn.clip_by_global_norm(grads, cfg.grad_clip)
        params = opt.step(params, grads)
        state["steps"] += 1
        state["frames"] += sum(len(tr) for tr in batch)
        state["max_rho"] = max(state["max_rho"], m["max_rho"])
        if state["steps"] % cfg.snapshot_interval == 0:
            board.publish(params)
        if cfg.eval_interval and state["steps"] % cfg.eval_interval == 0:
            specs = sample_specs(vcfg.split, "test", cfg.eval_episodes, eval_rng)
            recs = run_agent(acfg, params, specs, vcfg.view, vcfg.split.vocab())
            test_acc = accuracy(recs, collect=vcfg.split.family == "collect")
        row = {
            "step": state["steps"], "frames": state["frames"],
            "mean_return_train": float(np.mean([s.ret for s in recent])) if recent else float("nan"),
            "train_acc": float(np.mean([s.score for s in recent])) if recent else float("nan"),
            "test_acc": test_acc, "loss": m["loss"], "entropy": m["entropy"],
            "value_error": m["value_error"], "params_version": board.latest().version,
        }
        metrics_rows.append(row)
        sink.write(row)
        if on_step is not None:
            on_step(row)
        if out_dir is not None and state["frames"] >= state["next_ckpt"]:
            (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            nn.save_checkpoint(params, out_dir / "checkpoints" / f"params_{state['frames']:010d}.ckpt")
            while state["next_ckpt"] <= state["frames"]:
                state["next_ckpt"] += cfg.checkpoint_frames

    try:
        if cfg.deterministic:
            pending: deque[Trajectory] = deque()
            while not finished():
                for actor in actors:
                    trajs, stats = actor.step()
                    pending.extend(trajs)
                    recent.extend(stats)
                while len(pending) >= cfg.batch_size and not finished():
                    learn([pending.popleft() for _ in range(cfg.batch_size)])
        else:
            _run_threaded(cfg, actors, recent, learn, finished)
    finally:
        sink.close()
    if out_dir is not None:
        nn.save_checkpoint(params, out_dir / "params.ckpt")
        (out_dir / "config.txt").write_text(cfg.to_text())
    return TrainingResult(params, metrics_rows, state["frames"], state["steps"], board.latest().version,
                          out_dir, time.time() - t0, state["max_rho"],
                          sum(a.frames_produced for a in actors))


def _run_threaded(cfg, actors, recent, learn, finished):
    q: queue.Queue = queue.Queue(maxsize=cfg.queue_capacity)
    stats_q: queue.SimpleQueue = queue.SimpleQueue()
    stop = threading.Event()
    errors: list[tuple[int, BaseException]] = []

    def actor_loop(actor: Actor):
        try:
            while not stop.is_set():
                trajs, stats = actor.step()
                for st in stats:
                    stats_q.put(st)
                for tr in trajs:
                    while not stop.is_set():
                        try:
                            q.put(tr, timeout=0.05)
                            break
                        except queue.Full:
                            continue
        except BaseException as e:  # reported by the learner
            errors.append((actor.index, e))
            stop.set()

    threads = [threading.Thread(target=actor_loop, args=(a,), daemon=True, name=f"actor-{a.index}")
               for a in actors]
    for t in threads:
        t.start()
    try:
        while not finished():
            batch = []
            while len(batch) < cfg.batch_size:
                if errors:
                    idx, err = errors[0]
                    raise TrainingError(f"actor {idx} failed: {err!r}") from err
                try:
                    batch.append(q.get(timeout=0.05))
                except queue.Empty:
                    continue
            while not stats_q.empty():
                recent.append(stats_q.get())
            learn(batch)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5)
