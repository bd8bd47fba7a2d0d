"""Denoiser network tests: initialization, timestep embedding, forward
semantics, hand-checked gradients, optimizer arithmetic, EMA, checkpoints."""

import numpy as np
import pytest

from vadiff.errors import FormatError, InvalidInputError, NumericError
from vadiff.net import (
    AdamOptimizer,
    DenoiserNet,
    NetConfig,
    OptimizerConfig,
    load_checkpoint,
    save_checkpoint,
    scoring_params,
)

TINY = NetConfig(f=4, c=3, emb_dim=8, enc_widths=(6, 4), seed=0)


def tiny_net(dtype=np.float64, seed=0):
    return DenoiserNet(NetConfig(f=4, c=3, emb_dim=8, enc_widths=(6, 4), seed=seed),
                       dtype=dtype)


# -- initialization -------------------------------------------------------------


def test_init_deterministic():
    a, b = tiny_net(seed=5), tiny_net(seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    np.testing.assert_array_equal(a.freqs, b.freqs)


def test_init_weight_range_follows_fan_in():
    net = DenoiserNet(NetConfig(f=4, c=3, emb_dim=8, enc_widths=(4, 4), seed=1))
    w = net.params["enc0.w"]  # fan_in = 4 -> bound 0.5
    assert np.all(np.abs(w) <= 0.5)
    assert w.max() > 0.3  # the draw actually fills the range


def test_init_zero_biases_and_projections():
    net = tiny_net()
    for k, v in net.params.items():
        if k.endswith(".b") or "film" in k or k in ("p_enc", "p_dec"):
            assert np.all(v == 0.0), k


def test_conditioning_is_noop_at_init():
    net = tiny_net()
    x = np.random.default_rng(0).normal(size=(5, 4))
    cond = np.random.default_rng(1).normal(size=(5, 3))
    a = net.forward(x, 0.3)
    b = net.forward(x, 0.3, cond=cond)
    np.testing.assert_array_equal(a, b)


def test_cond_zero_vector_equals_absent_even_after_training_step():
    net = tiny_net()
    for k in ("p_enc", "p_dec"):
        net.params[k] = np.random.default_rng(2).normal(size=net.params[k].shape)
    x = np.random.default_rng(3).normal(size=(2, 4))
    a = net.forward(x, 0.5)
    b = net.forward(x, 0.5, cond=np.zeros((2, 3)))
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- timestep embedding -----------------------------------------------------------


def test_embed_at_zero():
    net = tiny_net()
    emb = net.embed_timestep(0.0)
    half = TINY.emb_dim // 2
    np.testing.assert_array_equal(emb[0, :half], 1.0)
    np.testing.assert_array_equal(emb[0, half:], 0.0)


def test_embed_bounded_and_deterministic():
    net = tiny_net()
    c = np.linspace(-3, 3, 11)
    a = net.embed_timestep(c)
    b = net.embed_timestep(c)
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, b)


def test_embed_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        tiny_net().embed_timestep(np.nan)


# -- forward semantics ------------------------------------------------------------


def test_forward_hand_computed_single_linear_path():
    # f=2, one encoder width 2: with FiLM zeroed the net is
    # out = W_out silu(W_dec silu(W_enc x + b)) + b_out; set weights to
    # identities and biases zero, so out = silu(silu(x))
    net = DenoiserNet(NetConfig(f=2, c=2, emb_dim=4, enc_widths=(2,), seed=0),
                      dtype=np.float64)
    for name in ("enc0", "dec0"):
        net.params[f"{name}.w"] = np.eye(2)
        net.params[f"{name}.b"] = np.zeros(2)
    net.params["out.w"] = np.eye(2)
    net.params["out.b"] = np.zeros(2)
    x = np.array([0.7, -1.3])
    silu = lambda v: v / (1.0 + np.exp(-v))
    np.testing.assert_allclose(net.forward(x, 0.0), silu(silu(x)), rtol=1e-12)


def test_forward_squeeze_matches_batch():
    net = tiny_net()
    x = np.random.default_rng(4).normal(size=4)
    single = net.forward(x, 0.2)
    batch = net.forward(x[None, :], 0.2)
    np.testing.assert_array_equal(single, batch[0])


def test_forward_rejects_wrong_dims():
    net = tiny_net()
    with pytest.raises(Exception):
        net.forward(np.zeros((2, 5)), 0.1)
    with pytest.raises(Exception):
        net.forward(np.zeros((2, 4)), 0.1, cond=np.zeros((2, 7)))


# -- gradients ---------------------------------------------------------------------


def loss_of(net, x, c_noise, cond, dout):
    return float(np.sum(dout * net.forward(x, c_noise, cond=cond)))


def test_backward_zero_upstream_gradient():
    net = tiny_net()
    cache = {}
    x = np.random.default_rng(5).normal(size=(3, 4))
    net.forward(x, 0.4, cond=np.random.default_rng(6).normal(size=(3, 3)), cache=cache)
    grads = net.backward(cache, np.zeros((3, 4)))
    for k, g in grads.items():
        assert np.all(g == 0.0), k


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = tiny_net()
    # randomize every parameter so FiLM and condition paths carry signal
    for k in net.params:
        net.params[k] = rng.normal(0, 0.3, size=net.params[k].shape)
    x = rng.normal(size=(3, 4))
    cond = rng.normal(size=(3, 3))
    dout = rng.normal(size=(3, 4))
    c_noise = 0.37
    cache = {}
    net.forward(x, c_noise, cond=cond, cache=cache)
    grads = net.backward(cache, dout)
    h = 1e-5
    worst = 0.0
    for k in net.params:
        flat = net.params[k].reshape(-1)
        idxs = range(len(flat)) if len(flat) <= 40 else \
            rng.choice(len(flat), 40, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_of(net, x, c_noise, cond, dout)
            flat[i] = orig - h
            dn = loss_of(net, x, c_noise, cond, dout)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            an = grads[k].reshape(-1)[i]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    assert worst < 1e-4


# -- optimizer ----------------------------------------------------------------------


def test_adam_zero_gradient_noop():
    net = tiny_net(dtype=np.float32)
    before = {k: v.copy() for k, v in net.params.items()}
    opt = AdamOptimizer(net, OptimizerConfig(weight_decay=0.0))
    opt.step({k: np.zeros_like(v) for k, v in net.params.items()})
    assert opt.step_count == 1
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_adam_first_step_is_signed_lr():
    net = tiny_net(dtype=np.float64)
    opt = AdamOptimizer(net, OptimizerConfig(lr=1e-3, weight_decay=0.0,
                                             inv_gamma=1e12, eps=0.0))
    before = {k: v.copy() for k, v in net.params.items()}
    grads = {k: np.random.default_rng(8).normal(size=v.shape) + 0.5
             for k, v in net.params.items()}
    opt.step(grads)
    for k in net.params:
        delta = net.params[k] - before[k]
        np.testing.assert_allclose(delta, -1e-3 * np.sign(grads[k]), rtol=1e-9)


def test_lr_schedule_halves_at_inv_gamma():
    net = tiny_net(dtype=np.float32)
    opt = AdamOptimizer(net, OptimizerConfig(lr=2e-4, inv_gamma=100.0, power=1.0))
    opt.step_count = 100
    assert opt.current_lr() == pytest.approx(1e-4, rel=1e-12)


def test_adam_rejects_non_finite_gradients():
    net = tiny_net(dtype=np.float32)
    opt = AdamOptimizer(net)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    grads["out.b"] = np.full_like(grads["out.b"], np.nan)
    with pytest.raises(NumericError):
        opt.step(grads)


def test_ema_decays_toward_params_under_zero_gradients():
    net = tiny_net(dtype=np.float64)
    opt = AdamOptimizer(net, OptimizerConfig(weight_decay=0.0, ema_decay=0.999))
    # displace the shadow, then run zero-gradient steps; the gap must shrink
    # by exactly the decay factor per step
    opt.ema = {k: v + 1.0 for k, v in net.params.items()}
    zeros = {k: np.zeros_like(v) for k, v in net.params.items()}
    m = 100
    for _ in range(m):
        opt.step(zeros)
    for k in net.params:
        gap = opt.ema[k] - net.params[k]
        np.testing.assert_allclose(gap, 0.999 ** m, rtol=1e-6)


def test_training_is_deterministic():
    def run():
        net = tiny_net(dtype=np.float64, seed=11)
        opt = AdamOptimizer(net, OptimizerConfig())
        rng = np.random.default_rng(12)
        for _ in range(5):
            cache = {}
            x = rng.normal(size=(4, 4))
            net.forward(x, 0.1, cache=cache)
            opt.step(net.backward(cache, rng.normal(size=(4, 4))))
        return net.params
    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net(dtype=np.float32, seed=3)
    rng = np.random.default_rng(9)
    ema = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in net.params.items()}
    save_checkpoint(tmp_path / "c.vadw", net, ema=ema, step=42,
                    extra={"note": "x"})
    got, got_ema, header = load_checkpoint(tmp_path / "c.vadw")
    assert header["step"] == 42 and header["extra"]["note"] == "x"
    for k in net.params:
        np.testing.assert_array_equal(got.params[k], net.params[k])
        np.testing.assert_array_equal(got_ema[k], ema[k])
    np.testing.assert_array_equal(got.freqs, net.freqs)


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    net = tiny_net(dtype=np.float32)
    p = tmp_path / "c.vadw"
    save_checkpoint(p, net, ema=None)
    raw = p.read_bytes()
    (tmp_path / "t.vadw").write_bytes(raw[:-17])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.vadw")
    (tmp_path / "m.vadw").write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.vadw")


def test_scoring_params_honors_ema_flag(tmp_path):
    net = tiny_net(dtype=np.float32)
    ema = {k: v + 1.0 for k, v in net.params.items()}
    save_checkpoint(tmp_path / "a.vadw", net, ema=ema, use_ema=True)
    save_checkpoint(tmp_path / "b.vadw", net, ema=ema, use_ema=False)
    n1, e1, h1 = load_checkpoint(tmp_path / "a.vadw")
    n2, e2, h2 = load_checkpoint(tmp_path / "b.vadw")
    assert scoring_params(n1, e1, h1) is e1
    assert scoring_params(n2, e2, h2) is n2.params
