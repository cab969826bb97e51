"""A small reverse-mode autodiff library over numpy arrays.

Only the layers the agent needs are provided: 3x3 "same" convolution,
3x3/2 max-pooling, residual blocks, linear, embedding and a (masked) LSTM
over sequences. Every op takes and returns :class:`Var`; when a
:class:`Tape` is supplied and an input requires a gradient, the op appends a
closure that propagates the output gradient to its inputs. ``backward``
replays the closures in reverse order.

Arrays are plain row-major numpy arrays (float32 for training, float64 for
gradient checks). Layout for images is NHWC.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import RngStream, derive_stream, stream_id


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool = False):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, needs_grad={self.needs_grad})"


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self.ops: list[Callable[[], None]] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(value, needs_grad=True)
        self.params[name] = v
        return v

    def bind(self, params: dict[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def record(self, fn: Callable[[], None]) -> None:
        self.ops.append(fn)


def const(value) -> Var:
    return Var(np.asarray(value))


def bind_const(params: dict[str, np.ndarray]) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def _track(tape: Optional[Tape], *inputs: Var) -> bool:
    return tape is not None and any(v.needs_grad for v in inputs)


def _acc(v: Var, g: np.ndarray) -> None:
    if v.needs_grad:
        v.grad = g if v.grad is None else v.grad + g


def backward(tape: Tape, seeds: dict | list) -> dict[str, np.ndarray]:
    """Propagate seed gradients through the tape; return gradients of every bound parameter.

    ``seeds`` maps output Vars to their loss gradients (a list of pairs is
    also accepted). Parameters the loss does not reach get zero gradients.
    """
    items = seeds.items() if isinstance(seeds, dict) else seeds
    for v, g in items:
        if v.value.shape != np.shape(g):
            raise ShapeError(f"seed gradient shape {np.shape(g)} does not match output {v.value.shape}")
        _acc(v, np.asarray(g, dtype=v.value.dtype))
    for fn in reversed(tape.ops):
        fn()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in tape.params.items()}


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


# When not None, piecewise ops append a fingerprint of their active region
# (relu signs, pool argmax). grad_check uses it to spot kink crossings.
_region_log: Optional[list] = None


def _log_region(a: np.ndarray) -> None:
    if _region_log is not None:
        _region_log.append(a.tobytes())


@contextmanager
def record_regions():
    """Yield a list that collects one fingerprint per relu or max-pool evaluated
    inside the block. Two forward passes with equal lists are in the same
    linear piece of the network."""
    global _region_log
    prev = _region_log
    _region_log = log = []
    try:
        yield log
    finally:
        _region_log = prev


def relu(x: Var, tape: Optional[Tape] = None) -> Var:
    out = Var(np.maximum(x.value, 0))
    _log_region(np.packbits(x.value > 0))
    if _track(tape, x):
        out.needs_grad = True
        tape.record(lambda: out.grad is not None and _acc(x, _relu_grad(x.value, out.grad)))
    return out


def add(a: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    out = Var(a.value + b.value)
    if _track(tape, a, b):
        out.needs_grad = True

        def bw():
            if out.grad is not None:
                _acc(a, out.grad)
                _acc(b, out.grad)
        tape.record(bw)
    return out


def reshape(x: Var, shape, tape: Optional[Tape] = None) -> Var:
    out = Var(x.value.reshape(shape))
    if _track(tape, x):
        out.needs_grad = True
        tape.record(lambda: out.grad is not None and _acc(x, out.grad.reshape(x.value.shape)))
    return out


def concat(xs: list[Var], axis: int = -1, tape: Optional[Tape] = None) -> Var:
    out = Var(np.concatenate([x.value for x in xs], axis=axis))
    if _track(tape, *xs):
        out.needs_grad = True
        sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

        def bw():
            if out.grad is None:
                return
            for x, g in zip(xs, np.split(out.grad, sizes, axis=axis)):
                _acc(x, g)
        tape.record(bw)
    return out


def repeat_time(x: Var, steps: int, tape: Optional[Tape] = None) -> Var:
    """(N, D) -> (N, steps, D) by repetition; the gradient sums over time."""
    out = Var(np.repeat(x.value[:, None, :], steps, axis=1))
    if _track(tape, x):
        out.needs_grad = True
        tape.record(lambda: out.grad is not None and _acc(x, out.grad.sum(axis=1)))
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Var, w: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    if x.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(f"linear: input {x.value.shape} incompatible with weight {w.value.shape}")
    out = Var(x.value @ w.value + b.value)
    if _track(tape, x, w, b):
        out.needs_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            x2 = x.value.reshape(-1, x.value.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            _acc(w, x2.T @ g2)
            _acc(b, g2.sum(0))
            if x.needs_grad:
                _acc(x, g @ w.value.T)
        tape.record(bw)
    return out


# im2col buffers above this many elements are rebuilt in backward instead of kept
_COLS_KEEP_LIMIT = 16_000_000


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    return np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-1)


def conv2d(x: Var, w: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    """Stride-1 'same' convolution. x: (N, H, W, C); w: (k, k, C, O); b: (O,)."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.value.shape}")
    k, k2, cin, cout = w.value.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {w.value.shape}")
    if x.value.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.value.shape} has {x.value.shape[-1]} channels, weight {w.value.shape} expects {cin}")
    n, h, wd, _ = x.value.shape
    p = k // 2
    xp = np.pad(x.value, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, k, h, wd).reshape(n * h * wd, k * k * cin)
    w2 = w.value.reshape(k * k * cin, cout)
    out = Var((cols @ w2 + b.value).reshape(n, h, wd, cout))
    if _track(tape, x, w, b):
        out.needs_grad = True
        kept = cols if cols.size <= _COLS_KEEP_LIMIT else None

        def bw():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(-1, cout)
            c = kept if kept is not None else _im2col(xp, k, h, wd).reshape(n * h * wd, k * k * cin)
            _acc(w, (c.T @ g2).reshape(w.value.shape))
            _acc(b, g2.sum(0))
            if x.needs_grad:
                dcols = (g2 @ w2.T).reshape(n, h, wd, k * k, cin)
                dxp = np.zeros_like(xp)
                for idx in range(k * k):
                    i, j = divmod(idx, k)
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, idx, :]
                _acc(x, dxp[:, p:p + h, p:p + wd, :])
        tape.record(bw)
    return out


def pool_out(size: int) -> int:
    """Spatial size after 3x3/2 max-pooling with padding 1 (= ceil(size / 2))."""
    return (size + 1) // 2


def maxpool(x: Var, tape: Optional[Tape] = None) -> Var:
    """3x3 max-pooling, stride 2, padding 1. Halves spatial dims, rounding up."""
    n, h, w, c = x.value.shape
    ho, wo = pool_out(h), pool_out(w)
    xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    windows = [xp[:, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2, :] for i in range(3) for j in range(3)]
    stack = np.stack(windows, axis=-1)
    arg = stack.argmax(axis=-1)
    _log_region(arg.astype(np.uint8))
    out = Var(np.take_along_axis(stack, arg[..., None], axis=-1)[..., 0])
    if _track(tape, x):
        out.needs_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            dxp = np.zeros_like(xp)
            for idx in range(9):
                i, j = divmod(idx, 3)
                dxp[:, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2, :] += g * (arg == idx)
            _acc(x, dxp[:, 1:1 + h, 1:1 + w, :])
        tape.record(bw)
    return out


def embedding(ids: np.ndarray, table: Var, tape: Optional[Tape] = None) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {table.value.shape[0]} rows")
    out = Var(table.value[ids])
    if _track(tape, table):
        out.needs_grad = True

        def bw():
            if out.grad is None:
                return
            g = np.zeros_like(table.value)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.value.shape[1]))
            _acc(table, g)
        tape.record(bw)
    return out


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm(x: Var, h0: Var, c0: Var, w: Var, b: Var, mask: Optional[np.ndarray] = None,
         tape: Optional[Tape] = None) -> tuple[Var, Var, Var]:
    """Run an LSTM over ``x`` of shape (N, L, D).

    ``w`` has shape (D + H, 4H) with rows [input; recurrent] and gate columns
    ordered (input, forget, cell, output). Where ``mask[n, t] == 0`` the state
    is carried through unchanged (used for padding).
    Returns (all hidden states (N, L, H), final h, final c).
    """
    xs = x.value
    n, L, d = xs.shape
    hdim = h0.value.shape[-1]
    if w.value.shape != (d + hdim, 4 * hdim):
        raise ShapeError(f"lstm: weight {w.value.shape} incompatible with input dim {d} and hidden {hdim}")
    dt = xs.dtype
    wx, wh = w.value[:d], w.value[d:]
    m = None if mask is None else np.asarray(mask, dtype=dt)
    zx = (xs.reshape(n * L, d) @ wx).reshape(n, L, 4 * hdim) + b.value
    h, c = h0.value, c0.value
    hs = np.empty((n, L, hdim), dt)
    cache = []
    for t in range(L):
        z = zx[:, t] + h @ wh
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = _sigmoid(z[:, 3 * hdim:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((h, c, i, f, g, o, tc))
        if m is not None:
            mt = m[:, t:t + 1]
            h_new = mt * h_new + (1 - mt) * h
            c_new = mt * c_new + (1 - mt) * c
        h, c = h_new, c_new
        hs[:, t] = h
    out_hs, out_h, out_c = Var(hs), Var(h), Var(c)
    if _track(tape, x, h0, c0, w, b):
        for v in (out_hs, out_h, out_c):
            v.needs_grad = True

        def bw():
            if out_hs.grad is None and out_h.grad is None and out_c.grad is None:
                return
            dhs = out_hs.grad
            dh = out_h.grad if out_h.grad is not None else np.zeros((n, hdim), dt)
            dc = out_c.grad if out_c.grad is not None else np.zeros((n, hdim), dt)
            dz_all = np.empty((n, L, 4 * hdim), dt)
            dwh = np.zeros_like(wh)
            for t in reversed(range(L)):
                h_prev, c_prev, i, f, g, o, tc = cache[t]
                if dhs is not None:
                    dh = dh + dhs[:, t]
                if m is not None:
                    mt = m[:, t:t + 1]
                    dh_skip, dc_skip = (1 - mt) * dh, (1 - mt) * dc
                    dh, dc = mt * dh, mt * dc
                do = dh * tc
                dc = dc + dh * o * (1 - tc * tc)
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
                dz_all[:, t] = dz
                dwh += h_prev.T @ dz
                dh = dz @ wh.T
                dc = dc * f
                if m is not None:
                    dh, dc = dh + dh_skip, dc + dc_skip
            dz2 = dz_all.reshape(n * L, 4 * hdim)
            dwx = xs.reshape(n * L, d).T @ dz2
            _acc(w, np.concatenate([dwx, dwh], axis=0))
            _acc(b, dz2.sum(0))
            if x.needs_grad:
                _acc(x, (dz2 @ wx.T).reshape(n, L, d))
            _acc(h0, dh)
            _acc(c0, dc)
        tape.record(bw)
    return out_hs, out_h, out_c


def residual_block(x: Var, p: dict[str, Var], prefix: str, tape: Optional[Tape] = None) -> Var:
    """x + conv(relu(conv(relu(x))))."""
    y = relu(x, tape)
    y = conv2d(y, p[f"{prefix}.conv0.w"], p[f"{prefix}.conv0.b"], tape)
    y = relu(y, tape)
    y = conv2d(y, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], tape)
    return add(x, y, tape)


# ---------------------------------------------------------------------------
# layer specs and initialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One parameterized layer: ``kind`` plus its dimensions.

    kinds and their dims:
      conv2d          in_ch, out_ch, k
      maxpool         (none)
      residual_block  ch, k
      linear          in_dim, out_dim
      embedding       vocab, dim
      lstm            in_dim, hidden
    """

    kind: str
    name: str
    dims: dict = field(default_factory=dict)
    init: str = "default"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, n = self.dims, self.name
        if self.kind == "conv2d":
            return {f"{n}.w": (d["k"], d["k"], d["in_ch"], d["out_ch"]), f"{n}.b": (d["out_ch"],)}
        if self.kind == "residual_block":
            ch, k = d["ch"], d["k"]
            return {f"{n}.conv{i}.{s}": shp for i in (0, 1)
                    for s, shp in (("w", (k, k, ch, ch)), ("b", (ch,)))}
        if self.kind == "linear":
            return {f"{n}.w": (d["in_dim"], d["out_dim"]), f"{n}.b": (d["out_dim"],)}
        if self.kind == "embedding":
            return {f"{n}.table": (d["vocab"], d["dim"])}
        if self.kind == "lstm":
            return {f"{n}.w": (d["in_dim"] + d["hidden"], 4 * d["hidden"]), f"{n}.b": (4 * d["hidden"],)}
        if self.kind == "maxpool":
            return {}
        raise ValueError(f"unknown layer kind {self.kind!r}")


def _fan_in_uniform(rng: RngStream, shape, fan_in, scale=1.0):
    bound = scale * np.sqrt(3.0 / fan_in)
    return rng.gen.uniform(-bound, bound, size=shape)


def _orthogonal(rng: RngStream, rows, cols):
    a = rng.gen.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(spec: LayerSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Initialize one layer. Every tensor draws from its own stream keyed by its name."""
    out = {}
    for name, shape in spec.param_shapes().items():
        rng = derive_stream(seed, stream_id("init", name))
        if spec.init == "zeros" or name.endswith(".b"):
            arr = np.zeros(shape)
        elif spec.kind == "lstm":
            d, hdim = spec.dims["in_dim"], spec.dims["hidden"]
            wx = _fan_in_uniform(rng, (d, 4 * hdim), d)
            wh = np.concatenate([_orthogonal(rng, hdim, hdim) for _ in range(4)], axis=1)
            arr = np.concatenate([wx, wh], axis=0)
        elif spec.kind == "embedding":
            arr = rng.gen.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            scale = spec.dims.get("init_scale", 1.0)
            arr = _fan_in_uniform(rng, shape, fan_in, scale)
        out[name] = arr.astype(dtype)
    return out


def forward(spec: LayerSpec, params: dict[str, Var], x: Var, tape: Optional[Tape] = None, **kw):
    n = spec.name
    if spec.kind == "conv2d":
        return conv2d(x, params[f"{n}.w"], params[f"{n}.b"], tape)
    if spec.kind == "maxpool":
        return maxpool(x, tape)
    if spec.kind == "residual_block":
        return residual_block(x, params, n, tape)
    if spec.kind == "linear":
        return linear(x, params[f"{n}.w"], params[f"{n}.b"], tape)
    if spec.kind == "embedding":
        return embedding(x, params[f"{n}.table"], tape)
    if spec.kind == "lstm":
        hdim = spec.dims["hidden"]
        nb = x.value.shape[0]
        h0 = kw.get("h0") or Var(np.zeros((nb, hdim), x.value.dtype))
        c0 = kw.get("c0") or Var(np.zeros((nb, hdim), x.value.dtype))
        return lstm(x, h0, c0, params[f"{n}.w"], params[f"{n}.b"], kw.get("mask"), tape)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(network: Callable[[dict[str, Var], Optional[Tape]], Var], params: dict[str, np.ndarray],
               eps: float = 1e-3, n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``network(param_vars, tape)`` must return a single output Var. The scalar
    checked is ``sum(output * R)`` for a fixed random ``R``. Runs in float64.
    Every parameter tensor contributes samples; at least ``n_samples`` in total.
    """
    return grad_check_report(network, params, eps, n_samples, seed)["max_rel_error"]


def grad_check_report(network, params, eps: float = 1e-3, n_samples: int = 200, seed: int = 0) -> dict:
    """As :func:`grad_check`, with sample counts.

    A coordinate whose +/-eps perturbation moves any relu or max-pool into a
    different linear piece is not differentiable across the stencil; it is
    replaced by another draw from the same tensor and counted in ``skipped``.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = derive_stream(seed, stream_id("grad-check"))

    tape = Tape()
    with record_regions() as base_regions:
        out = network(tape.bind(p64), tape)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("network output is not finite")
    proj = rng.gen.standard_normal(out.value.shape)
    grads = backward(tape, {out: proj})

    def loss(p):
        with record_regions() as regions:
            val = float(np.sum(network(bind_const(p), None).value * proj))
        return val, regions == base_regions

    total = sum(v.size for v in p64.values())
    worst, checked, skipped = 0.0, 0, 0
    for name, arr in p64.items():
        want = min(arr.size, max(2, int(np.ceil(n_samples * arr.size / total))))
        order = rng.gen.permutation(arr.size)
        g = grads[name].reshape(-1)
        flat = arr.reshape(-1)
        got = 0
        for j in order:
            if got >= want:
                break
            orig = flat[j]
            flat[j] = orig + eps
            up, same_up = loss(p64)
            flat[j] = orig - eps
            down, same_down = loss(p64)
            flat[j] = orig
            if not (same_up and same_down):
                skipped += 1
                continue
            num = (up - down) / (2 * eps)
            ana = g[j]
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise NonFiniteError(f"non-finite gradient for {name}[{j}]")
            worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
            got += 1
        checked += got
    return {"max_rel_error": worst, "checked": checked, "skipped": skipped}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class RMSProp:
    """acc <- decay * acc + (1 - decay) * g^2;  p <- p - lr * g / sqrt(acc + eps)."""

    def __init__(self, lr: float = 2e-4, decay: float = 0.99, eps: float = 1e-5):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.acc: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters (new arrays; inputs are not modified)."""
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {k}")
            acc = self.acc.get(k)
            if acc is None:
                acc = np.zeros_like(p)
            acc = self.decay * acc + (1 - self.decay) * g * g
            self.acc[k] = acc
            out[k] = (p - self.lr * g / np.sqrt(acc + self.eps)).astype(p.dtype)
        return out


def optimizer_step(params, grads, opt: RMSProp):
    return opt.step(params, grads)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GLNN"
CKPT_VERSION = 1


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))


def dump_checkpoint(params: dict[str, np.ndarray]) -> bytes:
    """Binary layout (little-endian): magic, u32 version, u32 count, then per
    tensor u32 name length, utf-8 name, u32 rank, u32 dims..., float32 data."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4", order="C")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return out
