"""Environment service: newline-delimited JSON over TCP, one session per connection.

Requests::

    {"cmd": "hello"}
    {"cmd": "reset", "seed": <int>, "phase": "train" | "test"}
    {"cmd": "step", "action": <int>}
    {"cmd": "close"}

Success replies carry ``"ok": true`` plus the observation (base64 of raw RGB
bytes, row-major), its width and height, the instruction, the last reward and
the done flag. Errors are ``{"ok": false, "code": ..., "msg": ...}`` with
codes E_PARSE, E_STATE and E_RANGE. Replies are serialized with sorted keys so
transcripts are byte-stable.
"""
from __future__ import annotations

import base64
import json
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Optional

from .config import ExperimentConfig, ValidatedConfig, validate_config
from .core import N_ACTIONS, RngStream, derive_stream, stream_id
from .render import ViewConfig, render
from .tasks import SplitSpec, sample_episode
from .world import WorldState, reset, step

PROTOCOL_VERSION = 1


def encode_reply(obj: dict) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _err(code: str, msg: str) -> dict:
    return {"ok": False, "code": code, "msg": msg}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


@dataclass
class Session:
    """One client's environment. Sessions share only the immutable split and view."""

    split: SplitSpec
    view: ViewConfig
    session_id: int = 0
    state: Optional[WorldState] = None
    rng: Optional[RngStream] = None
    closed: bool = False
    _last_reward: float = field(default=0.0, repr=False)

    def _obs(self, reward: float) -> dict:
        fr = render(self.state, self.view)
        return {"ok": True, "obs": base64.b64encode(fr.data).decode("ascii"), "width": fr.width,
                "height": fr.height, "instruction": self.state.spec.instruction, "reward": reward,
                "done": self.state.done}

    def handle(self, msg) -> dict:
        if not isinstance(msg, dict) or not isinstance(msg.get("cmd"), str):
            return _err("E_PARSE", "request must be a JSON object with a string 'cmd'")
        cmd = msg["cmd"]
        if cmd == "hello":
            return {"ok": True, "protocol": PROTOCOL_VERSION, "session": self.session_id,
                    "task": self.split.family, "view": self.view.mode.value, "actions": N_ACTIONS}
        if cmd == "reset":
            seed, phase = msg.get("seed"), msg.get("phase", "train")
            if not _is_int(seed) or not 0 <= seed < 2 ** 63:
                return _err("E_PARSE", "reset needs an integer 'seed' in [0, 2^63)")
            if phase not in ("train", "test"):
                return _err("E_RANGE", f"phase must be 'train' or 'test', got {phase!r}")
            self.rng = derive_stream(seed, stream_id("envd", phase))
            self.state = reset(sample_episode(self.split, phase, self.rng))
            return self._obs(0.0)
        if cmd == "step":
            action = msg.get("action")
            if not _is_int(action):
                return _err("E_PARSE", "step needs an integer 'action'")
            if not 0 <= action < N_ACTIONS:
                return _err("E_RANGE", f"action must be in [0, {N_ACTIONS}), got {action}")
            if self.state is None:
                return _err("E_STATE", "no active episode; send reset first")
            if self.state.done:
                return _err("E_STATE", "episode finished; send reset")
            self.state, res = step(self.state, action)
            return self._obs(res.reward)
        if cmd == "close":
            self.closed = True
            return {"ok": True, "bye": True}
        return _err("E_PARSE", f"unknown cmd {cmd!r}")

    def handle_line(self, line: bytes | str) -> bytes:
        try:
            msg = json.loads(line)
        except (ValueError, UnicodeDecodeError) as e:
            return encode_reply(_err("E_PARSE", f"invalid JSON: {e}"))
        return encode_reply(self.handle(msg))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: EnvServer = self.server  # type: ignore[assignment]
        sess = srv.new_session()
        lock = srv.register(self)
        if lock is None:  # arrived during shutdown
            self.say_bye()
            return
        try:
            while True:
                try:
                    line = self.rfile.readline(srv.max_line)
                except (OSError, ValueError):
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                reply = sess.handle_line(line)
                with lock:
                    # once shutdown begins the server owns the socket and has said bye
                    if srv.shutting_down.is_set():
                        break
                    try:
                        self.wfile.write(reply)
                        self.wfile.flush()
                    except OSError:
                        break
                if sess.closed:
                    break
        finally:
            srv.unregister(self)

    def say_bye(self):
        try:
            self.wfile.write(encode_reply({"ok": True, "bye": True, "msg": "server shutting down"}))
            self.wfile.flush()
        except OSError:
            pass


class EnvServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    max_line = 1 << 20

    def __init__(self, address, vcfg: ValidatedConfig):
        self.vcfg = vcfg
        self.split = vcfg.split
        self.view = vcfg.view
        self.shutting_down = threading.Event()
        self._lock = threading.Lock()
        self._handlers: dict = {}
        self._next_id = 0
        super().__init__(address, _Handler)

    def new_session(self) -> Session:
        with self._lock:
            self._next_id += 1
            return Session(self.split, self.view, self._next_id)

    def register(self, h) -> Optional[threading.Lock]:
        """Track an open connection; returns its write lock, or None once shutdown has begun."""
        with self._lock:
            if self.shutting_down.is_set():
                return None
            lock = self._handlers[h] = threading.Lock()
            return lock

    def unregister(self, h):
        with self._lock:
            self._handlers.pop(h, None)

    def graceful_shutdown(self):
        """Stop accepting, send "bye" to every open session and close it."""
        with self._lock:
            self.shutting_down.set()
            handlers = list(self._handlers.items())
        self.shutdown()
        for h, lock in handlers:
            with lock:
                h.say_bye()
                try:
                    h.connection.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        self.server_close()


def make_server(address: tuple[str, int], cfg: ExperimentConfig | ValidatedConfig) -> EnvServer:
    vcfg = cfg if isinstance(cfg, ValidatedConfig) else validate_config(cfg)
    return EnvServer(address, vcfg)


def serve(address: tuple[str, int], cfg: ExperimentConfig | ValidatedConfig,
          ready: Optional[threading.Event] = None) -> None:
    """Run until interrupted (Ctrl-C triggers a graceful shutdown)."""
    srv = make_server(address, cfg)
    t = threading.Thread(target=srv.serve_forever, name="envd", daemon=True)
    t.start()
    if ready is not None:
        ready.set()
    try:
        t.join()
    except KeyboardInterrupt:
        pass
    finally:
        if not srv.shutting_down.is_set():
            srv.graceful_shutdown()
