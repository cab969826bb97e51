import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlab import nn
from gridlab.nn import LayerSpec, Tape, Var

RNG = np.random.default_rng(0)


def _params(*specs, dtype=np.float64, seed=1):
    out = {}
    for s in specs:
        out.update(nn.init_params(s, seed, dtype))
    return out


CONV = LayerSpec("conv2d", "c", dict(in_ch=3, out_ch=4, k=3))
RES = LayerSpec("residual_block", "r", dict(ch=3, k=3))
RES4 = LayerSpec("residual_block", "r", dict(ch=4, k=3))
LIN = LayerSpec("linear", "l", dict(in_dim=6, out_dim=5))
EMB = LayerSpec("embedding", "e", dict(vocab=7, dim=4))
LSTM = LayerSpec("lstm", "m", dict(in_dim=4, hidden=5))
X_IMG = RNG.standard_normal((2, 7, 6, 3))
X_SEQ = RNG.standard_normal((3, 5, 4))
X_FLAT = RNG.standard_normal((4, 6))
SEQ_MASK = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], bool)
IDS = np.array([[1, 2, 3, 0], [4, 5, 6, 6], [0, 0, 0, 0]])


@pytest.mark.parametrize("name,specs,net", [
    ("conv2d", [CONV], lambda p, t: nn.forward(CONV, p, Var(X_IMG), t)),
    ("maxpool", [CONV], lambda p, t: nn.maxpool(nn.forward(CONV, p, Var(X_IMG), t), t)),
    ("residual_block", [RES], lambda p, t: nn.forward(RES, p, Var(X_IMG), t)),
    ("linear", [LIN], lambda p, t: nn.forward(LIN, p, Var(X_FLAT), t)),
    ("embedding", [EMB], lambda p, t: nn.forward(EMB, p, IDS, t)),
    ("lstm", [LSTM], lambda p, t: nn.forward(LSTM, p, Var(X_SEQ), t)[0]),
    ("lstm_masked_final", [LSTM], lambda p, t: nn.forward(LSTM, p, Var(X_SEQ), t, mask=SEQ_MASK)[1]),
])
def test_layer_gradients(name, specs, net):
    assert nn.grad_check(net, _params(*specs), n_samples=200) < 1e-4


def test_tiny_conv_lstm_net_any_seed():
    specs = [CONV, LayerSpec("linear", "proj", dict(in_dim=4 * 4 * 3, out_dim=4)), LSTM]
    x = RNG.standard_normal((3, 2, 7, 6, 3))
    for seed in (0, 1, 2):
        def net(p, t):
            h = nn.forward(CONV, p, Var(x.reshape(6, 7, 6, 3)), t)
            h = nn.relu(nn.maxpool(h, t), t)
            h = nn.forward(specs[1], p, nn.reshape(h, (6, -1), t), t)
            return nn.forward(LSTM, p, nn.reshape(h, (3, 2, 4), t), t)[0]
        assert nn.grad_check(net, _params(*specs, seed=seed), seed=seed) < 1e-4


def test_pure_linear_is_exact():
    x = RNG.standard_normal((4, 6))
    r = nn.grad_check_report(lambda p, t: nn.forward(LIN, p, Var(x), t), _params(LIN))
    assert r["max_rel_error"] < 1e-7 and r["checked"] >= 30


def test_corrupted_backward_is_caught(monkeypatch):
    monkeypatch.setattr(nn, "_relu_grad", lambda x, g: g)  # forgets the mask
    err = nn.grad_check(lambda p, t: nn.forward(RES, p, Var(X_IMG), t), _params(RES))
    assert err > 1e-2


def test_grad_check_samples_at_least_200():
    res = LayerSpec("residual_block", "r", dict(ch=6, k=3))
    x = RNG.standard_normal((1, 5, 5, 6))
    r = nn.grad_check_report(lambda p, t: nn.forward(res, p, Var(x), t), _params(res), n_samples=200)
    assert r["checked"] >= 200


def test_conv_identity_kernel():
    w = np.zeros((3, 3, 3, 1))
    w[1, 1, :, 0] = 1.0
    out = nn.conv2d(Var(X_IMG), Var(w), Var(np.zeros(1))).value
    assert np.allclose(out[..., 0], X_IMG.sum(-1))


def test_lstm_zero_params_give_zero_state():
    p = {k: np.zeros_like(v) for k, v in _params(LSTM).items()}
    hs, h, c = nn.forward(LSTM, nn.bind_const(p), Var(np.ones((1, 1, 4))))
    # with zero weights the cell input tanh(0) is 0, so c' = 0.5*0 + 0.5*0
    assert np.all(h.value == 0) and np.all(c.value == 0)


def test_linear_128_to_4():
    spec = LayerSpec("linear", "pi", dict(in_dim=128, out_dim=4))
    out = nn.forward(spec, nn.bind_const(_params(spec)), Var(np.ones((1, 128))))
    assert out.value.shape == (1, 4)


def test_linear_sum_gradient_is_outer():
    x = RNG.standard_normal((1, 6))
    tape = Tape()
    p = tape.bind(_params(LIN))
    out = nn.forward(LIN, p, Var(x), tape)
    g = nn.backward(tape, {out: np.ones_like(out.value)})
    assert np.allclose(g["l.w"], np.outer(x[0], np.ones(5)))
    assert np.allclose(g["l.b"], np.ones(5))


def test_disconnected_parameter_zero_gradient():
    tape = Tape()
    p = tape.bind({**_params(LIN), "unused": np.ones(3)})
    out = nn.forward(LIN, p, Var(np.ones((2, 6))), tape)
    g = nn.backward(tape, {out: np.ones_like(out.value)})
    assert np.all(g["unused"] == 0)


def test_gradients_accumulate_over_reuse():
    tape = Tape()
    w = tape.param("w", np.array([[2.0]]))
    b = tape.param("b", np.zeros(1))
    x = Var(np.array([[3.0]]))
    y = nn.add(nn.linear(x, w, b, tape), nn.linear(x, w, b, tape), tape)
    g = nn.backward(tape, {y: np.ones((1, 1))})
    assert g["w"][0, 0] == 6.0


def test_shape_errors_name_both_shapes():
    with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(6, 5\)"):
        nn.forward(LIN, nn.bind_const(_params(LIN)), Var(np.ones((2, 3))))
    with pytest.raises(nn.ShapeError):
        nn.conv2d(Var(np.ones((1, 4, 4, 2))), Var(np.ones((3, 3, 3, 1))), Var(np.zeros(1)))


@pytest.mark.parametrize("size,expected", [(99, 50), (50, 25), (25, 13), (33, 17), (17, 9), (9, 5), (45, 23), (147, 74)])
def test_pool_halves_with_ceil(size, expected):
    assert nn.pool_out(size) == expected
    assert nn.maxpool(Var(np.zeros((1, size, size, 1)))).value.shape[1] == expected


def test_forward_backward_bit_stable():
    def run():
        tape = Tape()
        p = tape.bind(_params(CONV, RES4, dtype=np.float32))
        y = nn.forward(RES4, p, nn.relu(nn.forward(CONV, p, Var(X_IMG.astype(np.float32)), tape), tape), tape)
        g = nn.backward(tape, {y: np.ones_like(y.value)})
        return y.value.tobytes(), {k: v.tobytes() for k, v in g.items()}
    assert run() == run()


def test_rmsprop_zero_gradient_keeps_params():
    opt = nn.RMSProp()
    p = {"a": np.array([1.0, -2.0], np.float32)}
    assert np.array_equal(opt.step(p, {"a": np.zeros(2, np.float32)})["a"], p["a"])


def test_rmsprop_first_step():
    opt = nn.RMSProp(lr=0.1, decay=0.99, eps=1e-5)
    g = np.array([0.5, -2.0])
    out = opt.step({"a": np.zeros(2)}, {"a": g})["a"]
    assert np.allclose(out, -0.1 * g / np.sqrt(0.01 * g * g + 1e-5))


def test_rmsprop_constant_gradient_tends_to_sign():
    opt = nn.RMSProp(lr=0.01)
    p = {"a": np.zeros(3)}
    g = {"a": np.array([3.0, -0.5, 10.0])}
    for _ in range(3000):
        new = opt.step(p, g)
        delta = new["a"] - p["a"]
        p = new
    assert np.allclose(delta, -0.01 * np.sign(g["a"]), rtol=1e-3)


def test_rmsprop_rejects_non_finite():
    with pytest.raises(nn.NonFiniteError):
        nn.RMSProp().step({"a": np.zeros(1)}, {"a": np.array([np.nan])})


def test_clip_by_global_norm():
    g, n = nn.clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert n == 5.0 and np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abc.xyz_0123", min_size=1, max_size=12),
                       st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=5))
def test_checkpoint_round_trip(shapes):
    rng = np.random.default_rng(len(shapes))
    params = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    blob = nn.dump_checkpoint(params)
    back = nn.parse_checkpoint(blob)
    assert set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes()
    assert nn.dump_checkpoint(back) == blob


def test_checkpoint_file_and_header(tmp_path):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    nn.save_checkpoint(params, tmp_path / "p.ckpt")
    raw = (tmp_path / "p.ckpt").read_bytes()
    assert raw[:4] == b"GLNN" and int.from_bytes(raw[4:8], "little") == 1
    assert np.array_equal(nn.load_checkpoint(tmp_path / "p.ckpt")["w"], params["w"])
    with pytest.raises(ValueError):
        nn.parse_checkpoint(b"XXXX" + raw[4:])
