"""Convolutional actor/critic with channel (recurrent) and spatial attention.

Data flow for one observation::

    conv1 -> relu -> conv2 -> relu
      -> channel attention: global max/avg pool -> shared MLP (summed)
                            -> GRU cell (state carried across timesteps)
                            -> linear -> sigmoid -> per-channel scaling
      -> spatial attention: channel max/mean -> conv -> relu -> conv
                            -> sigmoid -> per-position scaling
      -> flatten [++ extra inputs] -> linear -> relu -> output linear

Inputs are batched as (B, L, C, H, W): B independent sequences of L steps.
The recurrent state is zeroed wherever ``starts[b, t]`` is true and is
otherwise threaded through the sequence, so gradients flow back through
time within each sequence and stop at its first step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L


class LifecycleError(RuntimeError):
    pass


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    height: int = 32
    width: int = 32
    conv1: tuple[int, int, int] = (3, 8, 3)
    conv2: tuple[int, int, int] = (8, 16, 3)
    mlp_hidden: int = 8
    rnn_hidden: int = 32
    spatial_mid: int = 4
    spatial_kernel: int = 3
    head_hidden: int = 32
    attention: bool = True

    def __post_init__(self):
        for spec in (self.conv1, self.conv2):
            if len(spec) != 3 or min(spec) < 1:
                raise ValueError(f"conv spec {spec} must be three positive integers")
        if self.conv1[0] != self.in_channels or self.conv2[0] != self.conv1[1]:
            raise ValueError("conv channel counts do not chain")
        if min(self.height, self.width, self.mlp_hidden, self.rnn_hidden, self.spatial_mid, self.head_hidden) < 1:
            raise ValueError("layer sizes must be positive")

    @property
    def features(self) -> int:
        return self.conv2[1]

    @property
    def flat_dim(self) -> int:
        return self.features * self.height * self.width


def init_params(cfg: NetworkConfig, out_dim: int, extra_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-k, k) with k = 1/sqrt(fan_in) for every weight and bias."""

    def u(shape, fan_in):
        k = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape)

    c_in, c1, k1 = cfg.conv1
    _, c2, k2 = cfg.conv2
    p = {
        "conv1.w": u((c1, c_in, k1, k1), c_in * k1 * k1),
        "conv1.b": u((c1,), c_in * k1 * k1),
        "conv2.w": u((c2, c1, k2, k2), c1 * k2 * k2),
        "conv2.b": u((c2,), c1 * k2 * k2),
    }
    if cfg.attention:
        hm, hr, sm, sk = cfg.mlp_hidden, cfg.rnn_hidden, cfg.spatial_mid, cfg.spatial_kernel
        p.update({
            "ca.mlp1.w": u((c2, hm), c2),
            "ca.mlp1.b": u((hm,), c2),
            "ca.mlp2.w": u((hm, c2), hm),
            "ca.mlp2.b": u((c2,), hm),
            "ca.gru.wx": u((c2, 3 * hr), hr),
            "ca.gru.wh": u((hr, 3 * hr), hr),
            "ca.gru.bx": u((3 * hr,), hr),
            "ca.gru.bh": u((3 * hr,), hr),
            "ca.out.w": u((hr, c2), hr),
            "ca.out.b": u((c2,), hr),
            "sa.conv1.w": u((sm, 2, sk, sk), 2 * sk * sk),
            "sa.conv1.b": u((sm,), 2 * sk * sk),
            "sa.conv2.w": u((1, sm, sk, sk), sm * sk * sk),
            "sa.conv2.b": u((1,), sm * sk * sk),
        })
    head_in = cfg.flat_dim + extra_dim
    p.update({
        "head.w": u((head_in, cfg.head_hidden), head_in),
        "head.b": u((cfg.head_hidden,), head_in),
        "out.w": u((cfg.head_hidden, out_dim), cfg.head_hidden),
        "out.b": u((out_dim,), cfg.head_hidden),
    })
    return p


# ---------------------------------------------------------------- attention blocks


def channel_attention_forward(f, h_prev, p):
    """One timestep of channel attention on (N, C, H, W) features."""
    if h_prev.shape != (f.shape[0], p["ca.gru.wh"].shape[0]):
        raise StateError(f"recurrent state shape {h_prev.shape} does not match the network")
    mx, av, pool_c = L.global_pool_forward(f)
    n = f.shape[0]
    both = np.concatenate([mx, av], axis=0)
    z1, c1 = L.linear_forward(both, p["ca.mlp1.w"], p["ca.mlp1.b"])
    a1 = L.relu(z1)
    z2, c2 = L.linear_forward(a1, p["ca.mlp2.w"], p["ca.mlp2.b"])
    s = z2[:n] + z2[n:]
    h_new, cg = L.gru_forward(s, h_prev, p["ca.gru.wx"], p["ca.gru.wh"], p["ca.gru.bx"], p["ca.gru.bh"])
    o, co = L.linear_forward(h_new, p["ca.out.w"], p["ca.out.b"])
    weights = L.sigmoid(o)
    out = f * weights[:, :, None, None]
    return out, h_new, (f, weights, pool_c, c1, z1, c2, cg, co, n)


def channel_attention_backward(dout, dh_new, cache, g):
    """Accumulate parameter grads into ``g``; return (df, dh_prev)."""
    f, weights, pool_c, c1, z1, c2, cg, co, n = cache
    df = dout * weights[:, :, None, None]
    dw = (dout * f).sum(axis=(2, 3))
    do = dw * weights * (1.0 - weights)
    dh, dwo, dbo = L.linear_backward(do, co)
    g["ca.out.w"] += dwo
    g["ca.out.b"] += dbo
    dh = dh + dh_new
    ds, dh_prev, dwx, dwh, dbx, dbh = L.gru_backward(dh, cg)
    g["ca.gru.wx"] += dwx
    g["ca.gru.wh"] += dwh
    g["ca.gru.bx"] += dbx
    g["ca.gru.bh"] += dbh
    dz2 = np.concatenate([ds, ds], axis=0)
    da1, dw2, db2 = L.linear_backward(dz2, c2)
    g["ca.mlp2.w"] += dw2
    g["ca.mlp2.b"] += db2
    dz1 = da1 * (z1 > 0)
    dboth, dw1, db1 = L.linear_backward(dz1, c1)
    g["ca.mlp1.w"] += dw1
    g["ca.mlp1.b"] += db1
    df = df + L.global_pool_backward(dboth[:n], dboth[n:], pool_c)
    return df, dh_prev


def spatial_attention_forward(f, p):
    pooled, pool_c = L.channel_pool_forward(f)
    z1, c1 = L.conv2d_forward(pooled, p["sa.conv1.w"], p["sa.conv1.b"])
    a1 = L.relu(z1)
    z2, c2 = L.conv2d_forward(a1, p["sa.conv2.w"], p["sa.conv2.b"])
    mask = L.sigmoid(z2)
    return f * mask, (f, mask, pool_c, c1, z1, c2)


def spatial_attention_backward(dout, cache, g):
    f, mask, pool_c, c1, z1, c2 = cache
    df = dout * mask
    dmask = (dout * f).sum(axis=1, keepdims=True)
    dz2 = dmask * mask * (1.0 - mask)
    da1, dw2, db2 = L.conv2d_backward(dz2, c2)
    g["sa.conv2.w"] += dw2
    g["sa.conv2.b"] += db2
    dz1 = da1 * (z1 > 0)
    dpooled, dw1, db1 = L.conv2d_backward(dz1, c1)
    g["sa.conv1.w"] += dw1
    g["sa.conv1.b"] += db1
    return df + L.channel_pool_backward(dpooled, pool_c)


# ---------------------------------------------------------------- network


class Network:
    """One actor or critic: a trunk plus a two-layer head.

    ``extra_dim`` extra features (e.g. the actor's action distribution for
    the critic) are concatenated to the flattened trunk output.
    """

    def __init__(self, cfg: NetworkConfig, out_dim: int, extra_dim: int = 0, params=None, rng=None):
        self.cfg = cfg
        self.out_dim = out_dim
        self.extra_dim = extra_dim
        if params is None:
            params = init_params(cfg, out_dim, extra_dim, rng if rng is not None else np.random.default_rng(0))
        self.params = params
        self._cache = None

    def initial_state(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.cfg.rnn_hidden))

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_obs(self, obs):
        c = self.cfg
        if obs.ndim != 5 or obs.shape[2:] != (c.in_channels, c.height, c.width):
            raise L.ShapeError(
                f"observation batch must be (B, L, {c.in_channels}, {c.height}, {c.width}), got {obs.shape}"
            )

    def forward(self, obs, h0=None, starts=None, extra=None):
        """Returns (outputs (B, L, out_dim), final recurrent state (B, rnn_hidden))."""
        self._check_obs(obs)
        p, cfg = self.params, self.cfg
        b, steps = obs.shape[:2]
        x = obs.reshape(b * steps, *obs.shape[2:])
        z1, cc1 = L.conv2d_forward(x, p["conv1.w"], p["conv1.b"])
        a1 = L.relu(z1)
        z2, cc2 = L.conv2d_forward(a1, p["conv2.w"], p["conv2.b"])
        feats = L.relu(z2)

        if h0 is None:
            h0 = self.initial_state(b)
        if starts is None:
            starts = np.zeros((b, steps), dtype=bool)
        ca_caches, sa_cache = [], None
        h = h0
        # recurrent state entering each step, after episode-start resets
        self.step_states = np.zeros((b, steps, cfg.rnn_hidden))
        if cfg.attention:
            fs = feats.reshape(b, steps, *feats.shape[1:])
            outs = []
            for t in range(steps):
                h_in = np.where(starts[:, t:t + 1], 0.0, h)
                self.step_states[:, t] = h_in
                o, h, c = channel_attention_forward(fs[:, t], h_in, p)
                outs.append(o)
                ca_caches.append(c)
            f1 = np.stack(outs, axis=1).reshape(feats.shape)
            f2, sa_cache = spatial_attention_forward(f1, p)
        else:
            f2 = feats
        flat = f2.reshape(b * steps, -1)
        if self.extra_dim:
            if extra is None or extra.shape != (b, steps, self.extra_dim):
                raise L.ShapeError(f"network expects extra inputs of shape {(b, steps, self.extra_dim)}")
            flat = np.concatenate([flat, extra.reshape(b * steps, -1)], axis=1)
        zh, ch = L.linear_forward(flat, p["head.w"], p["head.b"])
        ah = L.relu(zh)
        out, co = L.linear_forward(ah, p["out.w"], p["out.b"])
        self._cache = (obs.shape, starts, cc1, z1, cc2, z2, ca_caches, sa_cache, ch, zh, co, feats.shape)
        return out.reshape(b, steps, self.out_dim), h

    def backward(self, dout, dh_final=None):
        """Gradients of a scalar loss given d loss / d outputs (B, L, out_dim).

        Returns (param grads, d loss / d h0).
        """
        if self._cache is None:
            raise LifecycleError("backward() called without a preceding forward()")
        obs_shape, starts, cc1, z1, cc2, z2, ca_caches, sa_cache, ch, zh, co, fshape = self._cache
        self._cache = None
        p, g = self.params, self.zero_grads()
        b, steps = obs_shape[:2]
        dah, dwo, dbo = L.linear_backward(dout.reshape(b * steps, -1), co)
        g["out.w"] += dwo
        g["out.b"] += dbo
        dzh = dah * (zh > 0)
        dflat, dwh, dbh = L.linear_backward(dzh, ch)
        g["head.w"] += dwh
        g["head.b"] += dbh
        df2 = dflat[:, :self.cfg.flat_dim].reshape(fshape)

        dh = np.zeros((b, self.cfg.rnn_hidden)) if dh_final is None else dh_final
        if self.cfg.attention:
            df1 = spatial_attention_backward(df2, sa_cache, g)
            df1 = df1.reshape(b, steps, *fshape[1:])
            dfeats = np.empty_like(df1)
            for t in reversed(range(steps)):
                dft, dh_in = channel_attention_backward(df1[:, t], dh, ca_caches[t], g)
                dfeats[:, t] = dft
                dh = np.where(starts[:, t:t + 1], 0.0, dh_in)
            dfeats = dfeats.reshape(fshape)
        else:
            dfeats = df2
        dz2 = dfeats * (z2 > 0)
        da1, dw2, db2 = L.conv2d_backward(dz2, cc2)
        g["conv2.w"] += dw2
        g["conv2.b"] += db2
        dz1 = da1 * (z1 > 0)
        _, dw1, db1 = L.conv2d_backward(dz1, cc1)
        g["conv1.w"] += dw1
        g["conv1.b"] += db1
        return g, dh


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- single-observation helpers


def conv_forward(x, w, b, activation: bool = True):
    """Same-size convolution of one (C, H, W) tensor, ReLU applied by default."""
    out, _ = L.conv2d_forward(x[None], w, b)
    return L.relu(out[0]) if activation else out[0]


def channel_attention(features, state, params):
    if features.ndim != 3:
        raise L.ShapeError("features must be (C, H, W)")
    out, h, _ = channel_attention_forward(features[None], np.atleast_2d(state), params)
    return out[0], h[0]


def spatial_attention(features, params):
    if features.ndim != 3:
        raise L.ShapeError("features must be (C, H, W)")
    out, _ = spatial_attention_forward(features[None], params)
    return out[0]


def actor_forward(obs, actor: Network, state):
    """Logits over the actions for one (C, H, W) observation, plus the next state."""
    out, h = actor.forward(obs[None, None], np.atleast_2d(state))
    return out[0, 0], h[0]


def critic_forward(obs, critic: Network, state, policy=None):
    extra = None if policy is None else np.asarray(policy, dtype=float)[None, None]
    out, h = critic.forward(obs[None, None], np.atleast_2d(state), extra=extra)
    return float(out[0, 0, 0]), h[0]
