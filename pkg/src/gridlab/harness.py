"""Experiment orchestration: scripted oracles, evaluation, t-tests, the
still-image classifier regime and multi-replica experiments with reports."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import agent as ag
from . import nn
from .config import ExperimentConfig, ValidatedConfig, build_split_for, validate_config
from .core import RngStream, derive_stream, stream_id
from .language import tokenize_encode
from .learner import agent_config_for, run_training
from .render import ViewConfig, render, render_array
from .rollout import accuracy, run_agent, sample_specs
from .tasks import SplitSpec, sample_episode
from .world import EpisodeSpec, TaskKind, WorldState, bfs_path, reset, step

ORACLE_MODES = ("optimal_bfs", "random_first_pick", "color_only", "shape_only")


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

@dataclass
class OraclePolicy:
    """Scripted policy with full access to the world state.

    optimal_bfs        shortest path to a correct object (then to the bed when putting);
                       collect visits correct objects nearest-first
    random_first_pick  collect: choose one of the two object types at random, gather that type
    color_only         find: head for an object with the target's color, ignoring shape
    shape_only         find: head for an object with the target's shape, ignoring color
    Ties among equally admissible objects are broken uniformly at random.
    """

    kind: TaskKind
    mode: str

    def __post_init__(self):
        if self.mode not in ORACLE_MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.mode == "random_first_pick" and self.kind is not TaskKind.COLLECT:
            raise OracleError("random_first_pick applies to the collect task")
        if self.mode in ("color_only", "shape_only") and self.kind is not TaskKind.FIND:
            raise OracleError(f"{self.mode} applies to the find task")

    def begin(self, spec: EpisodeSpec, rng: RngStream) -> None:
        """Fix the per-episode goal set."""
        objs = spec.objects
        if self.mode == "optimal_bfs":
            self.goals = set(spec.correct)
        elif self.mode == "random_first_pick":
            types = sorted({o.label for o in objs})
            pick = types[int(rng.integers(len(types)))]
            self.goals = {i for i, o in enumerate(objs) if o.label == pick}
        else:
            attr = "color" if self.mode == "color_only" else "shape"
            want = getattr(spec.named, attr)
            cands = [i for i, o in enumerate(objs) if getattr(o, attr) == want]
            self.goals = {cands[int(rng.integers(len(cands)))]}

    def act(self, state: WorldState) -> int:
        spec = state.spec
        g = spec.grid_size
        if spec.kind is TaskKind.PUT and state.carried is not None and state.carried in self.goals:
            blocked = {p for p in state.object_pos if p is not None}
            path = bfs_path(state.agent, {spec.bed}, blocked, g)
        else:
            live = {i for i in self.goals if state.object_pos[i] is not None}
            goal_cells = {state.object_pos[i] for i in live}
            blocked = {p for i, p in enumerate(state.object_pos) if p is not None and i not in live}
            if spec.kind is TaskKind.PUT and state.carried is not None:
                # carrying a wrong object: never step onto the bed
                blocked.add(spec.bed)
            path = bfs_path(state.agent, goal_cells, blocked, g) if goal_cells else None
            if not path and goal_cells and self.mode != "optimal_bfs":
                # walled in by other objects: go anyway, touching whatever is in the way
                path = bfs_path(state.agent, goal_cells | blocked, set(), g)
        if not path:
            raise OracleError(f"no path from {tuple(state.agent)} under mode {self.mode}")
        return path[0]


@dataclass(frozen=True)
class OracleResult:
    mean_return: float
    mean_length: float
    accuracy: float
    returns: tuple = field(repr=False, default=())
    lengths: tuple = field(repr=False, default=())


def oracle_run(task: SplitSpec | str, mode: str, n_episodes: int, rng: RngStream, phase: str = "test",
               kind: Optional[TaskKind] = None) -> OracleResult:
    """Play ``n_episodes`` with a scripted oracle; ``task`` is a split or a task family name.

    For the put family ``kind`` picks lift or put episodes (default: whatever the phase samples).
    """
    split = task if isinstance(task, SplitSpec) else build_split_for(ExperimentConfig(task=task))
    if kind is not None and all(t.kind is not kind for t in split.phase_targets(phase)):
        raise ValueError(f"the {phase} phase of {split.family} has no {kind.value} episodes")
    rets, lens, succ = [], [], []
    for _ in range(n_episodes):
        spec = sample_episode(split, phase, rng)
        while kind is not None and spec.kind is not kind:
            spec = sample_episode(split, phase, rng)
        pol = OraclePolicy(spec.kind, mode)
        pol.begin(spec, rng)
        state = reset(spec)
        while not state.done:
            state, _ = step(state, pol.act(state))
        rets.append(state.accumulated_return)
        lens.append(state.step_count)
        succ.append(state.accumulated_return >= len(spec.correct))
    return OracleResult(float(np.mean(rets)), float(np.mean(lens)), float(np.mean(succ)),
                        tuple(rets), tuple(lens))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(params: dict, split: SplitSpec, phase: str, n_episodes: int, rng: RngStream,
             acfg: ag.AgentConfig, view: ViewConfig, greedy: bool = True) -> float:
    """Greedy accuracy over fresh episodes (collect: conditioned normalized return). Parameters are read only."""
    specs = sample_specs(split, phase, n_episodes, rng)
    recs = run_agent(acfg, params, specs, view, split.vocab(), greedy=greedy,
                     rng=None if greedy else rng.child("actions"))
    return accuracy(recs, collect=split.family == "collect")


def evaluate_detailed(params, split, phase, n_episodes, rng, acfg, view) -> dict:
    specs = sample_specs(split, phase, n_episodes, rng)
    recs = run_agent(acfg, params, specs, view, split.vocab())
    collect = split.family == "collect"
    out = {"accuracy": accuracy(recs, collect=collect), "episodes": len(recs),
           "mean_return": float(np.mean([r.ret for r in recs])),
           "mean_length": float(np.mean([r.length for r in recs]))}
    if collect:
        out["conditioned_episodes"] = int(sum(bool(r.first_correct) for r in recs))
        out["unconditioned_normalized_return"] = float(np.mean([r.ret / 4 for r in recs]))
    return out


def param_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 10000, eps: float = 1e-16) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        de = d * c
        h *= de
        if abs(de - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided p-value P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    zero_variance: bool = False


def ttest(group_a, group_b) -> TTestResult:
    """Two-sample pooled-variance Student t-test, two-sided."""
    a = np.asarray(group_a, np.float64)
    b = np.asarray(group_b, np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 samples")
    df = na + nb - 2
    diff = a.mean() - b.mean()
    pooled = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / df
    if pooled == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0, zero_variance=True)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0, zero_variance=True)
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    return TTestResult(float(t), df, student_t_sf2(t, df))


def mean_sd(xs) -> tuple[float, float]:
    xs = np.asarray(xs, np.float64)
    sd = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
    return float(xs.mean()), sd


# ---------------------------------------------------------------------------
# classifier regime
# ---------------------------------------------------------------------------

def side_label(spec: EpisodeSpec) -> Optional[int]:
    """LEFT when the correct object is in a column left of the other object, RIGHT when right, None when aligned."""
    (t,) = [spec.positions[i] for i in spec.correct]
    (o,) = [p for i, p in enumerate(spec.positions) if i not in spec.correct]
    if t.col == o.col:
        return None
    return ag.LEFT if t.col < o.col else ag.RIGHT


def classifier_dataset(split: SplitSpec, phase: str, n: int, rng: RngStream, view: ViewConfig):
    """First frames and left/right labels; layouts with both objects in one column are skipped."""
    vocab = split.vocab()
    frames, ids, labels = [], [], []
    while len(labels) < n:
        spec = sample_episode(split, phase, rng)
        lab = side_label(spec)
        if lab is None:
            continue
        frames.append(render_array(reset(spec), view))
        ids.append(tokenize_encode(spec.instruction, vocab))
        labels.append(lab)
    return np.stack(frames), ag.pad_instructions(ids), np.array(labels, np.int64)


def classifier_loss(acfg, params, frames, ids, labels):
    tape = nn.Tape()
    logits = ag.classifier_logits(acfg, tape.bind(params), frames, ids, tape)
    lp = ag.log_softmax(logits.value.astype(np.float64))
    n = len(labels)
    loss = -float(lp[np.arange(n), labels].sum())
    g = np.exp(lp)
    g[np.arange(n), labels] -= 1.0
    grads = nn.backward(tape, {logits: g.astype(logits.value.dtype)})
    return loss, grads


def classifier_accuracy(acfg, params, frames, ids, labels, batch: int = 256) -> float:
    p = nn.bind_const(params)
    hits = 0
    for s in range(0, len(labels), batch):
        lg = ag.classifier_logits(acfg, p, frames[s:s + batch], ids[s:s + batch]).value
        hits += int((lg.argmax(1) == labels[s:s + batch]).sum())
    return hits / max(1, len(labels))


@dataclass
class ClassifierReport:
    train_acc: float
    test_acc: float
    train_fresh_acc: float
    examples: int
    steps: int
    final_loss: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def train_classifier(cfg: ExperimentConfig | ValidatedConfig, *, dataset=None, batch_size: int = 32,
                     eval_examples: int = 1000) -> tuple[dict, ClassifierReport]:
    """Supervised left/right training on first frames of the color-shape task.

    ``dataset`` (frames, ids, labels) overrides the sampled training set.
    """
    vcfg = cfg if isinstance(cfg, ValidatedConfig) else validate_config(cfg)
    cfg = vcfg.cfg
    if vcfg.split.family != "find":
        raise ValueError("the classifier regime uses the color-shape (find) task")
    acfg = agent_config_for(vcfg)
    params = ag.init_agent(acfg, cfg.seed, classifier=True)
    rng = derive_stream(cfg.seed, stream_id("classifier"))
    if dataset is None:
        dataset = classifier_dataset(vcfg.split, "train", cfg.classifier_examples, rng.child("train"), vcfg.view)
    frames, ids, labels = dataset
    opt = nn.RMSProp(cfg.lr, cfg.rms_decay, cfg.rms_eps)
    order_rng = rng.child("order")
    loss = float("nan")
    n = len(labels)
    for it in range(cfg.classifier_steps):
        idx = order_rng.integers(n, size=min(batch_size, n))
        loss, grads = classifier_loss(acfg, params, frames[idx], ids[idx], labels[idx])
        if cfg.grad_clip > 0:
            grads, _ = nn.clip_by_global_norm(grads, cfg.grad_clip)
        params = opt.step(params, grads)
    test = classifier_dataset(vcfg.split, "test", eval_examples, rng.child("test"), vcfg.view)
    fresh = classifier_dataset(vcfg.split, "train", eval_examples, rng.child("fresh"), vcfg.view)
    report = ClassifierReport(classifier_accuracy(acfg, params, frames, ids, labels),
                              classifier_accuracy(acfg, params, *test),
                              classifier_accuracy(acfg, params, *fresh),
                              n, cfg.classifier_steps, loss / min(batch_size, n))
    return params, report


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ReplicaResult:
    seed: int
    train_acc: float
    test_acc: float
    frames: int = 0
    steps: int = 0
    train_episodes: int = 0
    test_episodes: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    condition: str
    replicas: list[ReplicaResult]
    failed: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        tr = [r.train_acc for r in self.replicas]
        te = [r.test_acc for r in self.replicas]
        out = {"condition": self.condition, "n": len(self.replicas)}
        if self.replicas:
            out["train_mean"], out["train_sd"] = mean_sd(tr)
            out["test_mean"], out["test_sd"] = mean_sd(te)
        return out

    def to_json(self) -> dict:
        return {**self.summary(), "replicas": [dataclasses.asdict(r) for r in self.replicas],
                "failed": self.failed}


def replica_seed(base: int, r: int) -> int:
    return int(derive_stream(base, stream_id("replica", r)).integers(0, 2 ** 31 - 1))


def run_condition(cfg: ExperimentConfig, name: str, out_dir: Optional[Path]) -> EvalReport:
    report = EvalReport(name, [])
    for r in range(cfg.replicas):
        seed = replica_seed(cfg.seed, r)
        rdir = out_dir / f"replica_{r}" if out_dir else None
        try:
            vcfg = validate_config(cfg.replace(seed=seed))
            res = run_training(vcfg, output_dir=rdir)
            acfg = agent_config_for(vcfg)
            erng = derive_stream(seed, stream_id("final-eval"))
            tr = evaluate_detailed(res.params, vcfg.split, "train", cfg.eval_episodes, erng.child("train"),
                                   acfg, vcfg.view)
            te = evaluate_detailed(res.params, vcfg.split, "test", cfg.eval_episodes, erng.child("test"),
                                   acfg, vcfg.view)
            report.replicas.append(ReplicaResult(seed, tr["accuracy"], te["accuracy"], res.frames, res.steps,
                                                 tr["episodes"], te["episodes"], {"train": tr, "test": te}))
        except Exception as e:  # keep going; listed in the report
            report.failed.append({"replica": r, "seed": seed, "error": repr(e)})
    return report


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None) -> dict:
    """Train and evaluate ``cfg.replicas`` replicas; with ``compare_view`` also a second view condition
    on the same seeds, plus a t-test on test accuracy. Writes report.json when ``out_dir`` is given."""
    validate_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    main = run_condition(cfg, cfg.view, out / cfg.view if out else None)
    report = {"conditions": [main.to_json()]}
    if cfg.compare_view:
        other_cfg = cfg.replace(view=cfg.compare_view, window_cells=0, compare_view="")
        other = run_condition(other_cfg, cfg.compare_view, out / cfg.compare_view if out else None)
        report["conditions"].append(other.to_json())
        a = [r.test_acc for r in main.replicas]
        b = [r.test_acc for r in other.replicas]
        if len(a) >= 2 and len(b) >= 2:
            tt = ttest(a, b)
            report["ttest"] = {"a": cfg.view, "b": cfg.compare_view, "metric": "test_acc",
                               **dataclasses.asdict(tt)}
    if out is not None:
        (out / "report.json").write_text(json.dumps(_finite(report), indent=2, sort_keys=True,
                                                    default=_json_default))
    return report


def _finite(o):
    """Replace inf/nan floats by their string names so the output stays strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return str(float(o))
    return o


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def dump_episode_ppm(spec: EpisodeSpec, view: ViewConfig, actions, out_dir: Path) -> list[Path]:
    """Write one PPM per frame of an action sequence (debugging aid)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    state = reset(spec)
    paths = []
    for t in range(len(actions) + 1):
        p = out_dir / f"frame_{t:03d}.ppm"
        p.write_bytes(render(state, view).to_ppm())
        paths.append(p)
        if t < len(actions) and not state.done:
            state, _ = step(state, actions[t])
    return paths
