import numpy as np
import pytest

from riskdrive.nn import layers as L
from riskdrive.nn.network import (
    LifecycleError,
    Network,
    NetworkConfig,
    StateError,
    actor_forward,
    channel_attention,
    channel_attention_forward,
    conv_forward,
    critic_forward,
    init_params,
    softmax,
    spatial_attention,
)
from riskdrive.nn.optim import Adam

from helpers import finite_difference, rel_error

TINY = NetworkConfig(in_channels=2, height=8, width=8, conv1=(2, 4, 3), conv2=(4, 4, 3),
                     mlp_hidden=4, rnn_hidden=8, spatial_mid=2, head_hidden=8)


def zero_params(cfg, out_dim, extra_dim=0):
    return {k: np.zeros_like(v) for k, v in init_params(cfg, out_dim, extra_dim, np.random.default_rng(0)).items()}


# ---------------------------------------------------------------- convolution


def naive_conv(x, w, b):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            y, x_ = i + di - p, j + dj - p
                            if 0 <= y < h and 0 <= x_ < wd:
                                acc += w[o, c, di, dj] * x[c, y, x_]
                out[o, i, j] = acc
    return out


def test_conv_identity_kernel_is_relu(rng):
    x = rng.normal(size=(1, 5, 6))
    out = conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, np.maximum(x, 0.0))


def test_conv_zero_input_is_relu_bias():
    b = np.array([0.3, -0.2])
    out = conv_forward(np.zeros((3, 4, 4)), np.ones((2, 3, 3, 3)), b)
    assert np.array_equal(out[0], np.full((4, 4), 0.3)) and not out[1].any()


@pytest.mark.parametrize("cin,k", [(1, 3), (3, 3), (2, 5)])
def test_conv_matches_nested_loops(rng, cin, k):
    x = rng.normal(size=(cin, 4, 4))
    w, b = rng.normal(size=(2, cin, k, k)), rng.normal(size=2)
    assert np.allclose(conv_forward(x, w, b, activation=False), naive_conv(x, w, b), atol=1e-12, rtol=0)


def test_conv_shape_errors():
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))


def test_layer_backward_against_finite_differences(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    proj = rng.normal(size=(2, 4, 5, 4))

    def loss():
        return float((L.conv2d_forward(x, w, b)[0] * proj).sum())

    _, cache = L.conv2d_forward(x, w, b)
    dx, dw, db = L.conv2d_backward(proj, cache)
    num = finite_difference(loss, {"x": x, "w": w, "b": b})
    for name, ana in (("x", dx), ("w", dw), ("b", db)):
        assert rel_error(ana, num[name]).max() < 1e-6


def test_gru_backward_against_finite_differences(rng):
    x, h = rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
    wx, wh = rng.normal(size=(4, 15)) * 0.5, rng.normal(size=(5, 15)) * 0.5
    bx, bh = rng.normal(size=15), rng.normal(size=15)
    proj = rng.normal(size=(3, 5))

    def loss():
        return float((L.gru_forward(x, h, wx, wh, bx, bh)[0] * proj).sum())

    _, cache = L.gru_forward(x, h, wx, wh, bx, bh)
    grads = L.gru_backward(proj, cache)
    num = finite_difference(loss, {"x": x, "h": h, "wx": wx, "wh": wh, "bx": bx, "bh": bh})
    for ana, name in zip(grads, ("x", "h", "wx", "wh", "bx", "bh")):
        assert rel_error(ana, num[name]).max() < 1e-6


def test_scalar_network_hand_derivative(rng):
    x, w = rng.normal(size=(1, 6)), rng.normal(size=(6, 1))
    f, cache = L.linear_forward(x, w, np.zeros(1))
    _, dw, _ = L.linear_backward(2 * f, cache)  # loss = f^2
    assert np.allclose(dw[:, 0], 2 * f[0, 0] * x[0], rtol=0, atol=1e-14)


def test_sigmoid_is_stable():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = L.sigmoid(z)
    assert np.all(np.isfinite(s)) and s[2] == 0.5
    assert np.all((s >= 0) & (s <= 1))


# ---------------------------------------------------------------- attention blocks


def reference_channel_attention(f, h, p):
    """Straight-line restatement of the channel-attention dataflow."""
    c = f.shape[0]
    mx = np.array([f[i].max() for i in range(c)])
    av = np.array([f[i].mean() for i in range(c)])

    def mlp(v):
        hidden = np.maximum(v @ p["ca.mlp1.w"] + p["ca.mlp1.b"], 0)
        return hidden @ p["ca.mlp2.w"] + p["ca.mlp2.b"]

    s = mlp(mx) + mlp(av)
    n = h.size
    gx, gh = s @ p["ca.gru.wx"] + p["ca.gru.bx"], h @ p["ca.gru.wh"] + p["ca.gru.bh"]
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    r = sig(gx[:n] + gh[:n])
    z = sig(gx[n:2 * n] + gh[n:2 * n])
    cand = np.tanh(gx[2 * n:] + r * gh[2 * n:])
    h_new = (1 - z) * cand + z * h
    weights = sig(h_new @ p["ca.out.w"] + p["ca.out.b"])
    return f * weights[:, None, None], h_new


def reference_spatial_attention(f, p):
    pooled = np.stack([f.max(axis=0), f.mean(axis=0)])
    a = np.maximum(naive_conv(pooled, p["sa.conv1.w"], p["sa.conv1.b"]), 0)
    mask = 1 / (1 + np.exp(-naive_conv(a, p["sa.conv2.w"], p["sa.conv2.b"])))
    return f * mask


def test_channel_attention_constant_channels_pool_equally():
    f = np.ones((4, 8, 8)) * np.arange(4)[:, None, None]
    mx, av, _ = L.global_pool_forward(f[None])
    assert np.array_equal(mx, av)


def test_channel_attention_zero_weights_halves(rng):
    p = zero_params(TINY, 5)
    f = rng.normal(size=(4, 8, 8))
    out, h = channel_attention(f, np.zeros(8), p)
    assert np.array_equal(out, 0.5 * f) and not h.any()


def test_channel_attention_matches_reference(rng):
    p = init_params(TINY, 5, 0, rng)
    for _ in range(5):
        f, h = rng.normal(size=(4, 8, 8)), rng.normal(size=8)
        out, h_new = channel_attention(f, h, p)
        ref_out, ref_h = reference_channel_attention(f, h, p)
        assert np.allclose(out, ref_out, atol=1e-12, rtol=0)
        assert np.allclose(h_new, ref_h, atol=1e-12, rtol=0)


def test_channel_attention_rejects_bad_state(rng):
    p = init_params(TINY, 5, 0, rng)
    with pytest.raises(StateError):
        channel_attention_forward(np.zeros((1, 4, 8, 8)), np.zeros((1, 3)), p)


def test_spatial_attention_single_channel_pooling(rng):
    f = rng.normal(size=(1, 1, 6, 6))
    pooled, _ = L.channel_pool_forward(f)
    assert np.array_equal(pooled[0, 0], f[0, 0]) and np.array_equal(pooled[0, 1], f[0, 0])


def test_spatial_attention_zero_weights_halves(rng):
    f = rng.normal(size=(4, 8, 8))
    assert np.array_equal(spatial_attention(f, zero_params(TINY, 5)), 0.5 * f)


def test_spatial_attention_matches_reference(rng):
    p = init_params(TINY, 5, 0, rng)
    for _ in range(5):
        f = rng.normal(size=(4, 8, 8))
        assert np.allclose(spatial_attention(f, p), reference_spatial_attention(f, p), atol=1e-12, rtol=0)


def test_attention_weights_in_open_unit_interval_and_mask_bounds(rng):
    p = init_params(TINY, 5, 0, rng)
    for _ in range(20):
        f = rng.normal(size=(4, 8, 8)) * rng.uniform(0.1, 10)
        out, _, cache = channel_attention_forward(f[None], rng.normal(size=(1, 8)), p)
        weights = cache[1]
        assert np.all((weights > 0) & (weights < 1))
        assert np.all(np.abs(out[0]) <= np.abs(f))
        assert np.all(np.abs(spatial_attention(f, p)) <= np.abs(f))


# ---------------------------------------------------------------- heads


def test_actor_outputs_distribution(rng):
    net = Network(TINY, 5, rng=rng)
    for _ in range(20):
        logits, _ = actor_forward(rng.normal(size=(2, 8, 8)), net, np.zeros(8))
        assert abs(softmax(logits).sum() - 1.0) < 1e-12


def test_zero_weights_uniform_policy_and_zero_value(rng):
    actor = Network(TINY, 5, params=zero_params(TINY, 5))
    critic = Network(TINY, 1, extra_dim=5, params=zero_params(TINY, 1, 5))
    obs = rng.normal(size=(2, 8, 8))
    logits, _ = actor_forward(obs, actor, np.zeros(8))
    assert np.array_equal(softmax(logits), np.full(5, 0.2))
    value, _ = critic_forward(obs, critic, np.zeros(8), policy=np.full(5, 0.2))
    assert value == 0.0


def test_critic_finite_on_random_inputs(rng):
    critic = Network(TINY, 1, extra_dim=5, rng=rng)
    obs = rng.normal(size=(1000, 1, 2, 8, 8)) * 5
    extra = softmax(rng.normal(size=(1000, 1, 5)))
    values, _ = critic.forward(obs, critic.initial_state(1000), extra=extra)
    assert np.all(np.isfinite(values))


def test_forward_backward_bit_reproducible(rng):
    obs, h0 = rng.normal(size=(2, 3, 2, 8, 8)), rng.normal(size=(2, 8))
    dout = rng.normal(size=(2, 3, 5))
    runs = []
    for _ in range(2):
        net = Network(TINY, 5, rng=np.random.default_rng(7))
        out, h = net.forward(obs, h0)
        grads, dh0 = net.backward(dout)
        runs.append((out, h, grads, dh0))
    (o1, h1, g1, d1), (o2, h2, g2, d2) = runs
    assert np.array_equal(o1, o2) and np.array_equal(h1, h2) and np.array_equal(d1, d2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_recurrent_reset_forgets_history(rng):
    net = Network(TINY, 5, rng=rng)
    current = rng.normal(size=(2, 8, 8))
    history = rng.normal(size=(4, 2, 8, 8))
    starts = np.array([[False, False, False, False, True]])
    outs = []
    for perm in (np.arange(4), np.array([3, 1, 0, 2]), np.array([2, 3, 1, 0])):
        seq = np.concatenate([history[perm], current[None]])[None]
        out, _ = net.forward(seq, rng.normal(size=(1, 8)), starts)
        outs.append(out[0, -1])
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_state_carries_information(rng):
    net = Network(TINY, 5, rng=rng)
    obs = rng.normal(size=(1, 1, 2, 8, 8))
    a, _ = net.forward(obs, np.zeros((1, 8)))
    b, _ = net.forward(obs, rng.normal(size=(1, 8)))
    assert not np.array_equal(a, b)


def test_unused_output_gets_exactly_zero_gradient(rng):
    net = Network(TINY, 5, rng=rng)
    net.forward(rng.normal(size=(1, 2, 2, 8, 8)))
    dout = np.zeros((1, 2, 5))
    dout[..., 0] = 1.0
    grads, _ = net.backward(dout)
    assert not grads["out.w"][:, 1:].any() and not grads["out.b"][1:].any()


def test_backward_without_forward_raises(rng):
    net = Network(TINY, 5, rng=rng)
    with pytest.raises(LifecycleError):
        net.backward(np.zeros((1, 1, 5)))
    net.forward(np.zeros((1, 1, 2, 8, 8)))
    net.backward(np.zeros((1, 1, 5)))
    with pytest.raises(LifecycleError):
        net.backward(np.zeros((1, 1, 5)))


def test_tiny_network_gradient_check(rng):
    net = Network(TINY, 3, extra_dim=2, rng=rng)
    obs, extra = rng.normal(size=(1, 2, 2, 8, 8)), rng.normal(size=(1, 2, 2))
    h0, starts = rng.normal(size=(1, 8)) * 0.5, np.zeros((1, 2), dtype=bool)
    proj = rng.normal(size=(1, 2, 3))

    def loss():
        return float((net.forward(obs, h0, starts, extra)[0] * proj).sum())

    loss()
    grads, _ = net.backward(proj)
    # a representative subset; the full sweep runs in the acceptance suite
    subset = {k: v for k, v in net.params.items() if k in ("conv1.w", "ca.gru.wh", "sa.conv1.w", "head.b", "out.w")}
    num = finite_difference(loss, subset)
    for k in subset:
        assert rel_error(grads[k], num[k]).max() < 1e-4, k


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1, max_grad_norm=None)
    opt.step({"w": np.array([3.0, -0.5])})
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-7)


def test_adam_clips_gradient_norm():
    p = {"w": np.zeros(2)}
    opt = Adam(p, lr=0.1, max_grad_norm=0.5)
    assert opt.step({"w": np.array([3.0, 4.0])}) == 5.0
    assert np.allclose(opt.m["w"], 0.1 * np.array([0.3, 0.4]))
