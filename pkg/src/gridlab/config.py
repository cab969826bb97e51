"""Experiment configuration: a flat ``key = value`` file with validation.

Every field of :class:`ExperimentConfig` is a key. Lines starting with ``#``
are comments. Unknown keys, duplicate keys and unparsable values are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .core import GRID_SIZE, N_ACTIONS, TIME_LIMIT, TRAIN_COLORS, derive_stream, stream_id
from .render import ViewConfig, ViewMode
from .tasks import SplitError, SplitSpec, build_split

TASKS = ("find", "put", "negation", "collect")
SPLIT_MODES = ("standard", "typical_color")


@dataclass(frozen=True)
class ExperimentConfig:
    # task and split
    task: str = "find"
    split_mode: str = "standard"
    typical_color: str = "yellow"
    neg_x1_size: int = 6
    neg_x2_size: int = 8
    neg_negative_ratio: float = 0.5
    put_lift_ratio: float = 0.5
    collect_language: bool = True
    split_seed: int = 0
    # environment and view
    grid_size: int = GRID_SIZE
    time_limit: int = TIME_LIMIT
    view: str = "allocentric_fixed"
    window_cells: int = 0          # 0: the view mode's default
    px_per_cell: int = 0           # 0: the view mode's default
    agent_visible_when_carrying: bool = False
    # network
    conv_channels: tuple = (64, 64, 32)
    lstm_hidden: int = 128
    lang_hidden: int = 128
    embed_dim: int = 32
    prev_reward: bool = False
    # learner
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    unroll: int = 20
    batch_size: int = 16
    lr: float = 2e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    grad_clip: float = 40.0
    n_actors: int = 4
    envs_per_actor: int = 4
    queue_capacity: int = 64
    snapshot_interval: int = 1
    deterministic: bool = False
    total_frames: int = 1_000_000
    max_learner_steps: int = 0     # 0: no limit besides total_frames
    checkpoint_frames: int = 250_000
    # evaluation and replicas
    eval_interval: int = 0         # learner steps between in-run evaluations; 0 disables
    eval_episodes: int = 1000
    replicas: int = 5
    seed: int = 0
    output_dir: str = "runs/default"
    compare_view: str = ""         # optional second view condition for a paired comparison
    # classifier regime
    classifier_examples: int = 20000
    classifier_steps: int = 20000  # the loss plateaus at ln 2 for about 5000 steps

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def view_config(self) -> ViewConfig:
        over = {"agent_visible_when_carrying": self.agent_visible_when_carrying}
        if self.window_cells:
            over["window_cells"] = self.window_cells
        if self.px_per_cell:
            over["px_per_cell"] = self.px_per_cell
        return ViewConfig.default(self.view, self.grid_size, **over)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


class ConfigError(ValueError):
    """Carries every violation as (field path, message)."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.errors))


@dataclass(frozen=True)
class ValidatedConfig:
    cfg: ExperimentConfig
    view: ViewConfig
    frame_shape: tuple[int, int, int]
    vocab_size: int
    n_actions: int
    split: object = field(repr=False, default=None)


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    default = getattr(ExperimentConfig(), name)
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    errors = []
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append((f"line {lineno}", f"expected 'key = value', got {line!r}"))
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_NAMES:
            errors.append((key, "unknown key"))
            continue
        if key in values:
            errors.append((key, f"duplicate key (line {lineno})"))
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            errors.append((key, str(e)))
    if errors:
        raise ConfigError(errors)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    cfg = parse_config_text(Path(path).read_text())
    if overrides:
        cfg = parse_config_text("\n".join(overrides), cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> ValidatedConfig:
    """Check every constraint; raise ConfigError listing all violations, else attach derived values."""
    errs: list[tuple[str, str]] = []
    defaults = ExperimentConfig()
    for f in fields(cfg):
        want = type(getattr(defaults, f.name))
        got = getattr(cfg, f.name)
        ok = isinstance(got, want) and not (want is int and isinstance(got, bool))
        if want is float and isinstance(got, int) and not isinstance(got, bool):
            ok = True
        if want is tuple and ok:
            ok = all(isinstance(x, int) and not isinstance(x, bool) for x in got)
        if not ok:
            errs.append((f.name, f"expected {want.__name__}, got {type(got).__name__}"))
    if errs:
        raise ConfigError(errs)

    def need(cond, path, msg):
        if not cond:
            errs.append((path, msg))

    need(cfg.task in TASKS, "task", f"must be one of {TASKS}")
    need(cfg.split_mode in SPLIT_MODES, "split_mode", f"must be one of {SPLIT_MODES}")
    need(cfg.split_mode == "standard" or cfg.task == "find", "split_mode", "typical_color applies to the find task only")
    need(cfg.typical_color in TRAIN_COLORS, "typical_color", f"must be a training color {TRAIN_COLORS}")
    need(cfg.neg_x1_size >= 1, "neg_x1_size", "must be >= 1")
    need(cfg.neg_x2_size >= 1, "neg_x2_size", "must be >= 1")
    need(cfg.neg_x1_size + cfg.neg_x2_size <= 512, "neg_x1_size", "glyph universe is limited to 512 shapes")
    need(0.0 <= cfg.neg_negative_ratio <= 1.0, "neg_negative_ratio", "must lie in [0, 1]")
    need(0.0 <= cfg.put_lift_ratio < 1.0, "put_lift_ratio", "must lie in [0, 1)")
    need(cfg.grid_size >= 4, "grid_size", "must be >= 4 (walls plus at least a 2x2 interior)")
    need(cfg.time_limit >= 1, "time_limit", "must be >= 1")
    if cfg.grid_size >= 4 and cfg.task == "collect":
        need((cfg.grid_size - 2) ** 2 >= 9, "grid_size", "collect needs room for 8 objects and the agent")

    view = None
    try:
        mode = ViewMode(cfg.view)
    except ValueError:
        errs.append(("view", f"must be one of {[m.value for m in ViewMode]}"))
        mode = None
    if mode is not None:
        view = cfg.view_config()
        for msg in view.problems(cfg.grid_size):
            errs.append(("view", msg))
        if cfg.task == "negation" and view.px_per_cell < 7:
            errs.append(("px_per_cell", "procedural negation glyphs need at least 7 px per cell"))
    if cfg.compare_view:
        try:
            ViewMode(cfg.compare_view)
        except ValueError:
            errs.append(("compare_view", f"must be empty or one of {[m.value for m in ViewMode]}"))

    need(len(cfg.conv_channels) >= 1 and all(c >= 1 for c in cfg.conv_channels),
         "conv_channels", "must be a non-empty list of positive ints")
    for name in ("lstm_hidden", "lang_hidden", "embed_dim", "unroll", "batch_size", "n_actors",
                 "envs_per_actor", "queue_capacity", "snapshot_interval", "total_frames", "replicas",
                 "eval_episodes", "checkpoint_frames", "classifier_examples", "classifier_steps"):
        need(getattr(cfg, name) >= 1, name, "must be >= 1")
    need(cfg.max_learner_steps >= 0, "max_learner_steps", "must be >= 0")
    need(cfg.eval_interval >= 0, "eval_interval", "must be >= 0")
    need(0.0 <= cfg.gamma <= 1.0, "gamma", "must lie in [0, 1]")
    need(cfg.rho_bar >= cfg.c_bar >= 0, "rho_bar", "requires rho_bar >= c_bar >= 0")
    need(cfg.lr > 0, "lr", "must be > 0")
    need(0.0 <= cfg.rms_decay < 1.0, "rms_decay", "must lie in [0, 1)")
    need(cfg.rms_eps > 0, "rms_eps", "must be > 0")
    need(cfg.value_coef >= 0, "value_coef", "must be >= 0")
    need(cfg.entropy_coef >= 0, "entropy_coef", "must be >= 0")
    need(cfg.grad_clip >= 0, "grad_clip", "must be >= 0 (0 disables clipping)")
    need(not cfg.prev_reward or cfg.task == "collect", "prev_reward", "the reward input is used by the collect task only")
    need(bool(cfg.output_dir), "output_dir", "must be non-empty")

    split = None
    if not errs:
        try:
            split = build_split_for(cfg)
        except SplitError as e:
            errs.append(("task", str(e)))
    if errs:
        raise ConfigError(errs)
    return ValidatedConfig(cfg, view, view.frame_shape(), split.vocab().size, N_ACTIONS, split)


def build_split_for(cfg: ExperimentConfig) -> SplitSpec:
    rng = derive_stream(cfg.split_seed, stream_id("split", cfg.task))
    return build_split(cfg.task, rng, mode=cfg.split_mode, typical_color=cfg.typical_color,
                       neg_x1_size=cfg.neg_x1_size, neg_x2_size=cfg.neg_x2_size,
                       neg_negative_ratio=cfg.neg_negative_ratio, put_lift_ratio=cfg.put_lift_ratio,
                       collect_language=cfg.collect_language, grid_size=cfg.grid_size,
                       time_limit=cfg.time_limit)

