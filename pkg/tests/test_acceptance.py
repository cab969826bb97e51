"""Acceptance criteria, one test per criterion.

Each test runs every check of its criterion, records a one-line verdict
(shown inline and again in the terminal summary) and then asserts.
Criteria 5 and 6 train agents for hours and only run with GRIDLAB_SLOW=1.
"""
import base64
import json
import math
import socket
import threading
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from gridlab import agent as ag
from gridlab import harness as hs
from gridlab import nn
from gridlab.config import ExperimentConfig, load_config, validate_config
from gridlab.core import ACTION_DELTAS, N_ACTIONS, Action, derive_stream, is_interior, stream_id
from gridlab.envd import make_server
from gridlab.language import tokenize_encode
from gridlab.learner import Trajectory, compute_loss, n_step_returns, vtrace
from gridlab.nn import LayerSpec, Var
from gridlab.render import ViewConfig, render
from gridlab.tasks import sample_episode
from gridlab.world import EpisodeDone, Event, TaskKind, gridded_object_count, reset, step

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
FAMILIES = ("find", "put", "negation", "collect")


class Checks:
    """Collects named boolean checks and turns them into one verdict line."""

    def __init__(self, number: int, budget_s: float | None = None):
        self.number, self.budget = number, budget_s
        self.total, self.failed, self.notes = 0, [], []
        self.t0 = time.perf_counter()

    def __call__(self, name: str, ok, detail="") -> bool:
        self.total += 1
        if not ok:
            self.failed.append(f"{name} ({detail})" if detail != "" else name)
        return bool(ok)

    def note(self, text: str):
        self.notes.append(text)

    def finish(self, verdict):
        elapsed = time.perf_counter() - self.t0
        if self.budget is not None:
            self(f"within {self.budget:.0f} s budget", elapsed <= self.budget, f"{elapsed:.0f} s")
        head = "PASS" if not self.failed else "FAIL"
        line = f"{head} {self.total - len(self.failed)}/{self.total} checks in {elapsed:.1f} s"
        if self.notes:
            line += "; " + "; ".join(self.notes)
        if self.failed:
            line += "; failed: " + ", ".join(self.failed)
        verdict(self.number, line)
        assert not self.failed, line


# ---------------------------------------------------------------------------
# 1. environment and properties
# ---------------------------------------------------------------------------

def _disjointness(checks, split, n_train: int, n_test: int):
    lang = split.collect_language
    phase_sets = {ph: {(t.kind, t.instruction(lang)) for t in split.phase_targets(ph)} for ph in ("train", "test")}
    kinds = set()
    for phase, n in (("train", n_train), ("test", n_test)):
        other = "test" if phase == "train" else "train"
        rng = derive_stream(11, stream_id("acceptance-disjoint", split.family, phase))
        leaks = strays = foreign_objects = 0
        for _ in range(n):
            spec = sample_episode(split, phase, rng)
            key = (spec.kind, spec.instruction)
            kinds.add(spec.kind)
            leaks += key in phase_sets[other]
            strays += key not in phase_sets[phase]
            if split.family == "find" and phase == "train":
                foreign_objects += any(o not in split.train_objects for o in spec.objects)
        checks(f"{split.family}/{phase} never draws {other} instructions", leaks == 0, leaks)
        checks(f"{split.family}/{phase} draws only its own instructions", strays == 0, strays)
        if split.family == "find" and phase == "train":
            checks("find/train objects come from the training pool", foreign_objects == 0, foreign_objects)
    return kinds


def _random_play(checks, splits, episodes_per_family: int):
    bad = {"conservation": 0, "distinct cells": 0, "wall blocking": 0, "carry swap": 0, "timeout": 0,
           "terminal step": 0, "reward range": 0}
    swaps = 0
    for fam in FAMILIES:
        split = splits[fam]
        rng = derive_stream(5, stream_id("acceptance-play", fam))
        for _ in range(episodes_per_family):
            spec = sample_episode(split, "train", rng)
            s = reset(spec)
            n = len(spec.objects)
            while not s.done:
                a = int(rng.integers(N_ACTIONS))
                dr, dc = ACTION_DELTAS[Action(a)]
                target = type(s.agent)(s.agent.row + dr, s.agent.col + dc)
                before = s
                s, r = step(s, a)
                held = (s.carried is not None) + len(s.collected)
                bad["conservation"] += gridded_object_count(s) + held != n
                cells = [p for p in s.object_pos if p is not None]
                bad["distinct cells"] += len(cells) != len(set(cells))
                bad["reward range"] += r.reward not in (0.0, 1.0)
                if not is_interior(target, spec.grid_size):
                    bad["wall blocking"] += s.agent != before.agent or s.step_count != before.step_count + 1
                if before.carried is not None and s.carried not in (None, before.carried):
                    swaps += 1
                    bad["carry swap"] += s.object_pos[before.carried] != before.agent
                if s.step_count >= spec.time_limit:
                    bad["timeout"] += not s.done
                if s.done and r.event is Event.TIMEOUT:
                    bad["timeout"] += s.step_count != spec.time_limit
            try:
                step(s, 0)
                bad["terminal step"] += 1
            except EpisodeDone:
                pass
    for name, count in bad.items():
        checks(f"random play: {name}", count == 0, count)
    checks("random play exercised carry swaps", swaps > 0, swaps)


def test_criterion_1_environment(splits, verdict):
    checks = Checks(1, budget_s=300)
    kinds = set()
    for fam in FAMILIES:
        kinds |= _disjointness(checks, splits[fam], 100_000, 10_000)
    checks("all five task kinds sampled", kinds == set(TaskKind), sorted(k.value for k in kinds))

    _random_play(checks, splits, 500)

    for mode, side in (("allocentric_fixed", 99), ("egocentric_partial", 45), ("egocentric_full", 147),
                       ("allocentric_large", 147)):
        view = ViewConfig.default(mode)
        rng = derive_stream(3, stream_id("acceptance-render", mode))
        same = True
        for _ in range(50):
            spec = sample_episode(splits["put"], "train", rng)
            s = reset(spec)
            for a in rng.integers(N_ACTIONS, size=6):
                if not s.done:
                    s, _ = step(s, int(a))
            fr = render(s, view)
            same &= fr == render(s, view)
            same &= (fr.height, fr.width, len(fr.data)) == (side, side, side * side * 3)
        checks(f"{mode} renders {side}x{side} deterministically", same)

    for fam in FAMILIES:
        split = splits[fam]
        v = split.vocab()
        round_trip = all(v.decode(tokenize_encode(s, v)) == s
                         for ph in ("train", "test") for s in split.instructions(ph))
        train_words = {w for s in split.instructions("train") for w in s.split()}
        test_words = {w for s in split.instructions("test") for w in s.split()}
        checks(f"{fam} vocabulary round trip", round_trip)
        checks(f"{fam} test words all seen in training", test_words <= train_words, test_words - train_words)

    def draws(seed, sid):
        rng = derive_stream(seed, sid)
        return [sample_episode(splits["collect"], "train", rng) for _ in range(200)]

    checks("same seed and stream give identical episodes", draws(9, 1) == draws(9, 1))
    checks("different streams give different episodes", draws(9, 1) != draws(9, 2))
    base = derive_stream(9, 1)
    checks("child streams are reproducible",
           np.array_equal(base.child("x").integers(0, 10 ** 9, 64), derive_stream(9, 1).child("x").integers(0, 10 ** 9, 64)))
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 2. numerics
# ---------------------------------------------------------------------------

def _layer_grad_errors():
    g = np.random.default_rng(0)
    conv = LayerSpec("conv2d", "c", dict(in_ch=3, out_ch=4, k=3))
    res = LayerSpec("residual_block", "r", dict(ch=3, k=3))
    lin = LayerSpec("linear", "l", dict(in_dim=6, out_dim=5))
    emb = LayerSpec("embedding", "e", dict(vocab=7, dim=4))
    lstm = LayerSpec("lstm", "m", dict(in_dim=4, hidden=5))
    img, seq, flat = g.standard_normal((2, 7, 6, 3)), g.standard_normal((3, 5, 4)), g.standard_normal((4, 6))
    ids = np.array([[1, 2, 3, 0], [4, 5, 6, 6], [0, 0, 0, 0]])
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], bool)

    def params(spec):
        return nn.init_params(spec, 1, np.float64)

    cases = {
        "conv2d": (conv, lambda p, t: nn.forward(conv, p, Var(img), t)),
        "maxpool": (conv, lambda p, t: nn.maxpool(nn.forward(conv, p, Var(img), t), t)),
        "relu": (conv, lambda p, t: nn.relu(nn.forward(conv, p, Var(img), t), t)),
        "residual_block": (res, lambda p, t: nn.forward(res, p, Var(img), t)),
        "linear": (lin, lambda p, t: nn.forward(lin, p, Var(flat), t)),
        "embedding": (emb, lambda p, t: nn.forward(emb, p, ids, t)),
        "lstm": (lstm, lambda p, t: nn.forward(lstm, p, Var(seq), t)[0]),
        "lstm_masked": (lstm, lambda p, t: nn.forward(lstm, p, Var(seq), t, mask=mask)[1]),
    }
    out = {name: nn.grad_check(net, params(spec), n_samples=200) for name, (spec, net) in cases.items()}

    acfg = ag.AgentConfig(frame_hw=(9, 9), vocab_size=6, conv_channels=(3, 2), lstm_hidden=4, lang_hidden=3,
                          embed_dim=3, prev_reward=True)
    frames = g.integers(0, 256, (2, 3, 9, 9, 3)).astype(np.uint8)
    aids = np.array([[1, 4, 2], [5, 3, 0]])
    amask = np.array([[1, 1, 1], [1, 1, 0]], bool)
    prev = g.standard_normal((2, 3))

    def agent_net(p, tape):
        lg, v = ag.unroll(acfg, p, frames, aids, prev, amask, np.zeros((2, 4)), np.zeros((2, 4)), tape)
        return nn.concat([lg, v], axis=-1, tape=tape)

    out["full agent"] = nn.grad_check(agent_net, ag.init_agent(acfg, 1, dtype=np.float64))
    still = frames[:, 0]
    out["classifier"] = nn.grad_check(lambda p, t: ag.classifier_logits(acfg, p, still, aids, t),
                                      ag.init_agent(acfg, 2, classifier=True, dtype=np.float64))
    return out


def test_criterion_2_numerics(verdict, tmp_path):
    checks = Checks(2, budget_s=300)
    errors = _layer_grad_errors()
    for name, err in errors.items():
        checks(f"grad check {name}", err < 1e-4, f"{err:.2e}")
    checks.note(f"worst relative gradient error {max(errors.values()):.1e}")

    g = np.random.default_rng(7)
    worst = 0.0
    for _ in range(300):
        T = int(g.integers(1, 30))
        gamma = float(g.choice([0.0, 0.5, 0.9, 0.99, 1.0]))
        r = g.integers(0, 2, T).astype(float)
        lp = -g.exponential(1, T)
        dones = g.random(T) < 0.1
        boot = float(g.standard_normal())
        out = vtrace(r, g.standard_normal(T), boot, lp, lp, gamma, dones=dones)
        worst = max(worst, float(np.max(np.abs(out.vs - n_step_returns(r, boot, gamma, dones)))))
    checks("on-policy V-trace equals n-step returns", worst <= 1e-6, f"{worst:.1e}")

    small = ag.AgentConfig(frame_hw=(9, 9), vocab_size=6, conv_channels=(2,), lstm_hidden=4, lang_hidden=3,
                           embed_dim=2)
    batch = []
    for T in (5, 3):
        dones = np.zeros(T, bool)
        dones[-1] = True
        batch.append(Trajectory(g.integers(0, 256, (T + 1, 9, 9, 3)).astype(np.uint8), (1, 3, 2),
                                g.integers(0, 4, T), np.full(T, math.log(0.25)), np.zeros(T), dones,
                                np.zeros(T + 1), np.zeros(4), np.zeros(4)))
    _, _, m = compute_loss(small, ag.zero_params(small), batch)
    checks("uniform policy entropy is ln 4", abs(m["entropy"] - math.log(4)) <= 1e-6, m["entropy"])

    params = ag.init_agent(ag.AgentConfig(frame_hw=(33, 33), vocab_size=40, conv_channels=(16, 16, 8),
                                          lstm_hidden=64, lang_hidden=64), 3)
    params["scalar"] = np.array(np.float32(-0.0))
    params["odd"] = g.standard_normal((3, 1, 2)).astype(np.float32)
    nn.save_checkpoint(params, tmp_path / "p.ckpt")
    back = nn.load_checkpoint(tmp_path / "p.ckpt")
    exact = back.keys() == params.keys() and all(
        back[k].shape == params[k].shape and back[k].dtype == params[k].dtype
        and back[k].tobytes() == params[k].tobytes() for k in params)
    checks("checkpoint round trip is bit exact", exact)
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 3. oracles
# ---------------------------------------------------------------------------

def test_criterion_3_oracles(splits, verdict):
    checks = Checks(3, budget_s=600)
    n = 10_000
    rng = derive_stream(21, stream_id("acceptance-oracles"))
    runs = {
        "find": [hs.oracle_run(splits["find"], "optimal_bfs", n // 2, rng.child("find", ph), phase=ph)
                 for ph in ("train", "test")],
        "lift": [hs.oracle_run(splits["put"], "optimal_bfs", n, rng.child("lift"), phase="train",
                               kind=TaskKind.LIFT)],
        "put": [hs.oracle_run(splits["put"], "optimal_bfs", n // 2, rng.child("put", ph), phase=ph,
                              kind=TaskKind.PUT) for ph in ("train", "test")],
    }
    for name, results in runs.items():
        returns = np.concatenate([r.returns for r in results])
        checks(f"BFS oracle scores 1.0 on {len(returns)} {name} episodes", np.all(returns == 1.0),
               float(returns.mean()))
    find_len = float(np.mean(np.concatenate([r.lengths for r in runs["find"]])))
    checks("find oracle mean length in [4, 8]", 4 <= find_len <= 8, f"{find_len:.2f}")
    checks.note(f"find length {find_len:.2f}")

    collect = hs.oracle_run(splits["collect"], "random_first_pick", n, rng.child("collect"))
    checks("collect random first pick returns 2.0 +- 0.1", abs(collect.mean_return - 2.0) <= 0.1,
           f"{collect.mean_return:.3f}")
    checks.note(f"collect {collect.mean_return:.3f}")

    # the cap is an expectation; allow three standard errors of sampling noise
    cap = 0.75 + 3 * math.sqrt(0.75 * 0.25 / n)
    for mode in ("color_only", "shape_only"):
        res = hs.oracle_run(splits["find"], mode, n, rng.child(mode))
        checks(f"{mode} oracle at most 0.75", res.mean_return <= cap, f"{res.mean_return:.4f}")
        checks.note(f"{mode} {res.mean_return:.3f}")
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 4. statistics
# ---------------------------------------------------------------------------

def _moment_matched(mean, sd, n=5):
    z = np.arange(n) - (n - 1) / 2
    return mean + sd * z / z.std(ddof=1)


def _two_sided_tail(t, df):
    with mpmath.workdps(50):
        nu = mpmath.mpf(df)
        c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
        pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
        return float(2 * mpmath.quad(pdf, [abs(t), abs(t) + 10, mpmath.inf]))


def test_criterion_4_statistics(verdict):
    checks = Checks(4)
    r = hs.ttest(_moment_matched(0.63, 0.06), _moment_matched(0.40, 0.14))
    checks("moment-matched t within 3.48 +- 0.15", abs(r.t - 3.48) <= 0.15, f"{r.t:.4f}")
    checks("pooled degrees of freedom 8", r.df == 8, r.df)
    checks.note(f"t = {r.t:.4f}, p = {r.p:.4g}")
    for t, df in [(3.48, 8), (2.35, 8), (0.0, 8), (1.0, 1), (-2.0, 3), (0.5, 4), (4.0, 10), (12.0, 8),
                  (1.96, 1000), (-0.7, 30)]:
        got, want = hs.student_t_sf2(t, df), _two_sided_tail(t, df)
        checks(f"p-value t={t} df={df}", abs(got - want) <= 1e-6, f"{got:.10f} vs {want:.10f}")
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 5 and 6. long training runs (opt-in)
# ---------------------------------------------------------------------------

def _condition(report, name):
    return next(c for c in report["conditions"] if c["condition"] == name)


@pytest.mark.slow
def test_criterion_5_desk_scale_learning(verdict):
    checks = Checks(5)
    cfg = load_config(CONFIGS / "desk_colorshape.txt")
    report = hs.run_experiment(cfg, Path(cfg.output_dir))
    cond = report["conditions"][0]
    checks("three replicas finished", cond["n"] == 3 and not cond["failed"], cond["failed"])
    if cond["n"]:
        checks("mean train accuracy >= 0.95", cond["train_mean"] >= 0.95, f"{cond['train_mean']:.3f}")
        checks("mean test accuracy >= 0.75", cond["test_mean"] >= 0.75, f"{cond['test_mean']:.3f}")
        checks.note(f"train {cond['train_mean']:.3f} test {cond['test_mean']:.3f}")
    checks.finish(verdict)


@pytest.mark.slow
def test_criterion_6_view_direction_of_effect(verdict):
    checks = Checks(6)
    cfg = load_config(CONFIGS / "desk_putting_views.txt")
    report = hs.run_experiment(cfg, Path(cfg.output_dir))
    ego, allo = _condition(report, cfg.view), _condition(report, cfg.compare_view)
    checks("all replicas finished", ego["n"] == allo["n"] == 3, (ego["failed"], allo["failed"]))
    pairs = list(zip(ego["replicas"], allo["replicas"]))
    wins = sum(e["test_acc"] > a["test_acc"] for e, a in pairs)
    checks("egocentric test accuracy higher in >= 2 of 3 pairs", wins >= 2, wins)
    for c in (ego, allo):
        if c["n"]:
            checks(f"{c['condition']} mean train accuracy >= 0.9", c["train_mean"] >= 0.9, f"{c['train_mean']:.3f}")
    checks.note(f"egocentric wins {wins}/{len(pairs)}")
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 7. negation and classifier end to end
# ---------------------------------------------------------------------------

SMOKE = dict(conv_channels=(4, 4, 2), lstm_hidden=16, lang_hidden=16, embed_dim=8, unroll=5, batch_size=4,
             n_actors=1, envs_per_actor=2, deterministic=True, max_learner_steps=8, checkpoint_frames=10 ** 9,
             eval_episodes=30, replicas=2)


def test_criterion_7_negation_and_classifier(verdict, tmp_path):
    checks = Checks(7)
    test_means = {}
    for x1 in (6, 40, 100):
        cfg = ExperimentConfig(task="negation", neg_x1_size=x1, **SMOKE)
        report = hs.run_experiment(cfg, tmp_path / f"negation_{x1}")
        on_disk = json.loads((tmp_path / f"negation_{x1}" / "report.json").read_text())
        cond = on_disk["conditions"][0]
        checks(f"negation |X1|={x1} report written", cond["n"] == 2 and not cond["failed"], cond["failed"])
        accs = [r["test_acc"] for r in cond["replicas"]] + [r["train_acc"] for r in cond["replicas"]]
        checks(f"negation |X1|={x1} accuracies are proportions", all(0.0 <= a <= 1.0 for a in accs), accs)
        test_means[x1] = report["conditions"][0].get("test_mean", float("nan"))

    vcfg = validate_config(ExperimentConfig(px_per_cell=3, conv_channels=(4, 4, 2), lstm_hidden=16,
                                            lang_hidden=16, embed_dim=8, classifier_examples=64,
                                            classifier_steps=20))
    _, rep = hs.train_classifier(vcfg, eval_examples=64)
    (tmp_path / "classifier.json").write_text(json.dumps(rep.to_json()))
    fields = rep.to_json()
    checks("classifier report has finite accuracies",
           all(0.0 <= fields[k] <= 1.0 for k in ("train_acc", "test_acc", "train_fresh_acc")), fields)
    checks("classifier loss is finite", math.isfinite(rep.final_loss), rep.final_loss)

    # exploratory only: the trend is reported, never asserted
    ordered = [test_means[k] for k in sorted(test_means)]
    trend = all(b >= a for a, b in zip(ordered, ordered[1:]))
    checks.note("test accuracy by |X1| " + ", ".join(f"{k}: {v:.2f}" for k, v in sorted(test_means.items())))
    checks.note(f"non-decreasing trend {'observed' if trend else 'not observed'} (exploratory, non-gating)")
    checks.note(f"classifier test {rep.test_acc:.2f}")
    checks.finish(verdict)


# ---------------------------------------------------------------------------
# 8. wire service
# ---------------------------------------------------------------------------

class _Client:
    def __init__(self, address):
        self.sock = socket.create_connection(address, timeout=10)
        self.f = self.sock.makefile("rwb")

    def send(self, msg: dict) -> bytes:
        self.f.write(json.dumps(msg).encode() + b"\n")
        self.f.flush()
        return self.f.readline()

    def close(self):
        self.f.close()
        self.sock.close()


def _scripted_session(address, n_episodes: int) -> list[bytes]:
    c = _Client(address)
    lines = []
    for ep in range(n_episodes):
        rng = derive_stream(ep, stream_id("acceptance-script"))
        rep = c.send({"cmd": "reset", "seed": ep, "phase": "train" if ep % 2 else "test"})
        lines.append(rep)
        while not json.loads(rep)["done"]:
            rep = c.send({"cmd": "step", "action": int(rng.integers(N_ACTIONS))})
            lines.append(rep)
    c.close()
    return lines


def test_criterion_8_wire_service(verdict):
    checks = Checks(8)
    vcfg = validate_config(ExperimentConfig())
    srv = make_server(("127.0.0.1", 0), vcfg)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    try:
        first = _scripted_session(srv.server_address, 100)
        second = _scripted_session(srv.server_address, 100)
        checks("transcripts of two 100-episode sessions are byte identical", first == second)

        mismatches = 0
        replies = iter(first)
        for ep in range(100):
            phase = "train" if ep % 2 else "test"
            rng = derive_stream(ep, stream_id("acceptance-script"))
            state = reset(sample_episode(vcfg.split, phase, derive_stream(ep, stream_id("envd", phase))))
            reward = 0.0
            while True:
                fr = render(state, vcfg.view)
                expect = {"ok": True, "obs": base64.b64encode(fr.data).decode("ascii"), "width": fr.width,
                          "height": fr.height, "instruction": state.spec.instruction, "reward": reward,
                          "done": state.done}
                line = next(replies)
                mismatches += line != (json.dumps(expect, sort_keys=True, separators=(",", ":")) + "\n").encode()
                if state.done:
                    break
                state, res = step(state, int(rng.integers(N_ACTIONS)))
                reward = res.reward
        checks("direct stepping reproduces every service reply byte for byte", mismatches == 0, mismatches)
        checks("service transcript fully consumed", next(replies, None) is None)
        checks.note(f"{len(first)} replies compared")
    finally:
        srv.graceful_shutdown()
        thread.join(timeout=5)
    checks.finish(verdict)
