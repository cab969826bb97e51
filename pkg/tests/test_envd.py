import base64
import json
import socket
import threading

import numpy as np
import pytest

from gridlab.config import ExperimentConfig, validate_config
from gridlab.core import N_ACTIONS, derive_stream, stream_id
from gridlab.envd import Session, encode_reply, make_server
from gridlab.render import render
from gridlab.tasks import sample_episode
from gridlab.world import reset, step

VCFG = validate_config(ExperimentConfig())


@pytest.fixture
def server():
    srv = make_server(("127.0.0.1", 0), VCFG)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    if not srv.shutting_down.is_set():
        srv.graceful_shutdown()
    t.join(timeout=5)


class Client:
    def __init__(self, srv):
        self.sock = socket.create_connection(srv.server_address, timeout=10)
        self.f = self.sock.makefile("rwb")

    def raw(self, line: bytes) -> bytes:
        self.f.write(line)
        self.f.flush()
        return self.f.readline()

    def call(self, **msg) -> dict:
        return json.loads(self.raw(json.dumps(msg).encode() + b"\n"))

    def close(self):
        self.f.close()
        self.sock.close()


def _session():
    return Session(VCFG.split, VCFG.view)


def test_reset_reply_dimensions():
    rep = _session().handle({"cmd": "reset", "seed": 1, "phase": "train"})
    assert rep["ok"] and rep["width"] == 99 and rep["height"] == 99
    assert len(base64.b64decode(rep["obs"], validate=True)) == 29403
    assert rep["reward"] == 0.0 and rep["done"] is False and rep["instruction"]


def test_step_reply_and_errors():
    s = _session()
    assert s.handle({"cmd": "step", "action": 0})["code"] == "E_STATE"
    s.handle({"cmd": "reset", "seed": 5})
    rep = s.handle({"cmd": "step", "action": 2})
    assert rep["ok"] and rep["reward"] in (0.0, 1.0) and isinstance(rep["done"], bool)
    assert s.handle({"cmd": "step", "action": 9})["code"] == "E_RANGE"
    assert s.handle({"cmd": "step", "action": -1})["code"] == "E_RANGE"
    assert s.handle({"cmd": "step", "action": "up"})["code"] == "E_PARSE"
    assert s.handle({"cmd": "step", "action": True})["code"] == "E_PARSE"
    assert s.handle({"cmd": "reset", "seed": 1, "phase": "dev"})["code"] == "E_RANGE"
    assert s.handle({"cmd": "reset", "seed": -3})["code"] == "E_PARSE"
    assert s.handle({"cmd": "fly"})["code"] == "E_PARSE"
    assert s.handle([1, 2])["code"] == "E_PARSE"
    for _ in range(60):
        rep = s.handle({"cmd": "step", "action": 0})
        if not rep["ok"]:
            break
    assert rep["code"] == "E_STATE"


def test_hello_and_close():
    s = _session()
    hello = s.handle({"cmd": "hello"})
    assert hello["ok"] and hello["actions"] == N_ACTIONS and hello["task"] == "find"
    assert s.handle({"cmd": "close"}) == {"ok": True, "bye": True} and s.closed


def test_replies_are_canonical_json():
    line = encode_reply({"b": 1, "a": [True, None]})
    assert line == b'{"a":[true,null],"b":1}\n'


def test_malformed_line_keeps_session(server):
    c = Client(server)
    bad = json.loads(c.raw(b"{not json\n"))
    assert bad["ok"] is False and bad["code"] == "E_PARSE"
    assert c.call(cmd="reset", seed=3)["ok"]
    assert c.call(cmd="step", action=1)["ok"]
    c.close()


def _script(seed: int):
    """Deterministic request lines for one episode: reset then seeded actions until done."""
    rng = derive_stream(seed, stream_id("envd-script"))
    return [{"cmd": "reset", "seed": seed, "phase": "train" if seed % 2 else "test"}], rng


def _transcript(srv, n_episodes=100):
    c = Client(srv)
    out = []
    for ep in range(n_episodes):
        msgs, rng = _script(ep)
        rep = c.raw(json.dumps(msgs[0]).encode() + b"\n")
        out.append(rep)
        while not json.loads(rep)["done"]:
            rep = c.raw(json.dumps({"cmd": "step", "action": int(rng.integers(N_ACTIONS))}).encode() + b"\n")
            out.append(rep)
    c.close()
    return out


def test_transcript_determinism(server):
    first = _transcript(server)
    second = _transcript(server)
    assert len(first) > 200 and first == second


def test_direct_and_service_agree(server):
    c = Client(server)
    for ep in range(100):
        phase = "train" if ep % 2 else "test"
        rng = derive_stream(ep, stream_id("envd-script"))
        state = reset(sample_episode(VCFG.split, phase, derive_stream(ep, stream_id("envd", phase))))
        rep = c.call(cmd="reset", seed=ep, phase=phase)
        while True:
            fr = render(state, VCFG.view)
            assert base64.b64decode(rep["obs"]) == fr.data
            assert (rep["width"], rep["height"], rep["instruction"]) == (fr.width, fr.height, state.spec.instruction)
            assert rep["done"] == state.done
            if state.done:
                break
            a = int(rng.integers(N_ACTIONS))
            state, res = step(state, a)
            rep = c.call(cmd="step", action=a)
            assert rep["reward"] == res.reward
    c.close()


def test_concurrent_sessions_are_isolated(server):
    results = {}

    def run(name):
        c = Client(server)
        lines = [c.raw(b'{"cmd":"reset","seed":77}\n')]
        for a in [0, 1, 2, 3, 3, 2, 1, 0]:
            lines.append(c.raw(json.dumps({"cmd": "step", "action": a}).encode() + b"\n"))
        c.raw(b'{"cmd":"hello"}\n')
        results[name] = lines
        c.close()

    threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    assert len(results) == 4 and all(r == results[0] for r in results.values())


def test_graceful_shutdown_says_bye(server):
    clients = [Client(server) for _ in range(2)]
    for c in clients:
        assert c.call(cmd="reset", seed=1)["ok"]
    server.graceful_shutdown()
    for c in clients:
        bye = json.loads(c.f.readline())
        assert bye["ok"] and bye["bye"]
        assert c.f.readline() == b""
        c.close()
