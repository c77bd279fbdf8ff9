"""Conditional flow matching for a toy attention vector field.

The network maps a latent token grid ``z`` (tokens x channels), a time
``tau`` and a condition vector to a velocity of the same shape:

    h0 = z W_in + b_in + phi(tau) W_time + c W_cond
    h1 = h0 + softmax(rot(h0 W_q) rot(h0 W_k)^T / sqrt(d)) h0 W_v
    h2 = h1 + tanh(h1 W_1 + b_1) W_2 + b_2
    v  = h2 W_out + b_out

``rot`` applies the tokens' global rotary phases, so the only route by
which scan position reaches the network is the attention logits. Gradients
are written out by hand for this fixed architecture.

Data ``z0`` sits at ``tau = 0`` and Gaussian noise ``z1`` at ``tau = 1``;
the regression target is ``z1 - z0`` and sampling integrates from 1 to 0.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError, DivergenceError, TrainingDivergedError, UsageError
from .rope import RopeParams, global_coords, rotary_phases

PARAM_NAMES = ("W_in", "b_in", "W_time", "W_cond", "W_q", "W_k", "W_v",
               "W_1", "b_1", "W_2", "b_2", "W_out", "b_out")


@dataclass
class FlowSample:
    z0: np.ndarray
    z1: np.ndarray
    tau: float

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=np.float64)
        self.z1 = np.asarray(self.z1, dtype=np.float64)
        if self.z0.shape != self.z1.shape:
            raise DimensionError(f"z0 shape {self.z0.shape} != z1 shape {self.z1.shape}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass
class Condition:
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("condition embedding must be finite")


@dataclass(frozen=True)
class TrainConfig:
    """Toy-scale optimisation settings (Adam, no schedule, no weight decay by default)."""

    learning_rate: float = 3e-3
    batch_size: int = 32
    iterations: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be positive")


def interpolate(sample: FlowSample) -> np.ndarray:
    """Point on the straight path: ``(1 - tau) z0 + tau z1``."""
    return (1.0 - sample.tau) * sample.z0 + sample.tau * sample.z1


def time_features(tau, n_features: int) -> np.ndarray:
    """Fixed sinusoidal embedding of ``tau``, shape ``(len(tau), n_features)``."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    k = np.arange(n_features // 2, dtype=np.float64)
    omega = 0.5 * np.pi * 2.0 ** k
    arg = tau[:, None] * omega
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _rotate(x, cos, sin):
    out = np.empty_like(x)
    even, odd = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rotate_transpose(g, cos, sin):
    return _rotate(g, cos, -sin)


class VectorFieldNet:
    """Parameters and forward/backward passes of the toy vector field.

    ``params`` maps the names in ``PARAM_NAMES`` to float64 arrays.
    """

    def __init__(self, channels, model_dim=12, hidden_dim=16, time_dim=4, cond_dim=2,
                 rope=None, seed=0, params=None):
        self.channels = channels
        self.model_dim = model_dim
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.rope = rope if rope is not None else RopeParams.for_dim(model_dim)
        if self.rope.head_dim != model_dim:
            raise DimensionError(f"rope head_dim {self.rope.head_dim} != model_dim {model_dim}")
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self.optimizer_state = None

    def shapes(self):
        c, d, m = self.channels, self.model_dim, self.hidden_dim
        return {
            "W_in": (c, d), "b_in": (d,), "W_time": (self.time_dim, d), "W_cond": (self.cond_dim, d),
            "W_q": (d, d), "W_k": (d, d), "W_v": (d, d),
            "W_1": (d, m), "b_1": (m,), "W_2": (m, d), "b_2": (d,),
            "W_out": (d, c), "b_out": (c,),
        }

    def _init_params(self, rng):
        params = {}
        for name, shape in self.shapes().items():
            if name.startswith("b_"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        return params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "VectorFieldNet":
        return copy.deepcopy(self)

    def forward(self, z, tau, cond, phases, return_cache=False):
        """Velocity for a batch: ``z`` (B, n, c), ``tau`` (B,), ``cond`` (B, cond_dim), ``phases`` (n, d/2)."""
        p = self.params
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.channels:
            raise DimensionError(f"latent must be (batch, tokens, {self.channels}), got {z.shape}")
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (z.shape[0],))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (z.shape[0], self.cond_dim))
        if phases.shape != (z.shape[1], self.model_dim // 2):
            raise DimensionError(f"phases must be ({z.shape[1]}, {self.model_dim // 2}), got {phases.shape}")
        cos, sin = np.cos(phases), np.sin(phases)
        scale = 1.0 / np.sqrt(self.model_dim)

        tf = time_features(tau, self.time_dim)
        h0 = z @ p["W_in"] + p["b_in"] + (tf @ p["W_time"] + cond @ p["W_cond"])[:, None, :]
        q = h0 @ p["W_q"]
        k = h0 @ p["W_k"]
        v = h0 @ p["W_v"]
        qr = _rotate(q, cos, sin)
        kr = _rotate(k, cos, sin)
        s = qr @ kr.transpose(0, 2, 1) * scale
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        h1 = h0 + a @ v
        g = np.tanh(h1 @ p["W_1"] + p["b_1"])
        h2 = h1 + g @ p["W_2"] + p["b_2"]
        out = h2 @ p["W_out"] + p["b_out"]
        if not return_cache:
            return out
        cache = dict(z=z, tf=tf, cond=cond, cos=cos, sin=sin, scale=scale,
                     h0=h0, v=v, qr=qr, kr=kr, a=a, h1=h1, g=g, h2=h2)
        return out, cache

    def backward(self, cache, d_out):
        """Parameter gradients given ``d loss / d out``."""
        p = self.params
        c = cache
        grads = {}
        grads["W_out"] = np.einsum("bnd,bnc->dc", c["h2"], d_out)
        grads["b_out"] = d_out.sum(axis=(0, 1))
        dh2 = d_out @ p["W_out"].T
        grads["W_2"] = np.einsum("bnm,bnd->md", c["g"], dh2)
        grads["b_2"] = dh2.sum(axis=(0, 1))
        dpre = (dh2 @ p["W_2"].T) * (1.0 - c["g"] ** 2)
        grads["W_1"] = np.einsum("bnd,bnm->dm", c["h1"], dpre)
        grads["b_1"] = dpre.sum(axis=(0, 1))
        dh1 = dh2 + dpre @ p["W_1"].T

        a = c["a"]
        da = dh1 @ c["v"].transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dh1
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dqr = ds @ c["kr"] * c["scale"]
        dkr = ds.transpose(0, 2, 1) @ c["qr"] * c["scale"]
        dq = _rotate_transpose(dqr, c["cos"], c["sin"])
        dk = _rotate_transpose(dkr, c["cos"], c["sin"])
        h0 = c["h0"]
        grads["W_q"] = np.einsum("bnd,bne->de", h0, dq)
        grads["W_k"] = np.einsum("bnd,bne->de", h0, dk)
        grads["W_v"] = np.einsum("bnd,bne->de", h0, dv)
        dh0 = dh1 + dq @ p["W_q"].T + dk @ p["W_k"].T + dv @ p["W_v"].T

        grads["W_in"] = np.einsum("bnc,bnd->cd", c["z"], dh0)
        grads["b_in"] = dh0.sum(axis=(0, 1))
        dtok = dh0.sum(axis=1)
        grads["W_time"] = c["tf"].T @ dtok
        grads["W_cond"] = c["cond"].T @ dtok
        return grads

    def __call__(self, z, tau, cond, phases):
        return self.forward(z, tau, cond, phases)


def _stack_batch(batch):
    if len(batch) == 0:
        raise UsageError("flow-matching loss needs a non-empty batch")
    samples = [s for s, _ in batch]
    shape = samples[0].z0.shape
    if any(s.z0.shape != shape for s in samples):
        raise DimensionError("all samples in a batch must share one latent shape")
    z0 = np.stack([s.z0 for s in samples])
    z1 = np.stack([s.z1 for s in samples])
    tau = np.array([s.tau for s in samples], dtype=np.float64)
    cond = np.stack([np.asarray(cnd.embedding if isinstance(cnd, Condition) else cnd, dtype=np.float64)
                     for _, cnd in batch])
    return z0, z1, tau, cond


def _phases_for(net, coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2 and coords.shape[1] == 3:
        return rotary_phases(coords, net.rope)
    return coords


def fm_loss(net, batch, coords, return_grads=False):
    """Mean squared error between ``net(z_tau)`` and ``z1 - z0``.

    The mean runs over every element of every sample. ``net`` may be any
    callable ``net(z, tau, cond, phases)``; gradients need a ``VectorFieldNet``.
    ``coords`` is ``(tokens, 3)`` global coordinates or precomputed phases.
    """
    z0, z1, tau, cond = _stack_batch(batch)
    zt = (1.0 - tau)[:, None, None] * z0 + tau[:, None, None] * z1
    target = z1 - z0
    phases = _phases_for(net, coords) if isinstance(net, VectorFieldNet) else np.asarray(coords)
    if return_grads:
        pred, cache = net.forward(zt, tau, cond, phases, return_cache=True)
    else:
        pred = net(zt, tau, cond, phases)
    resid = pred - target
    loss = float(np.mean(resid ** 2))
    if not return_grads:
        return loss
    grads = net.backward(cache, 2.0 * resid / resid.size)
    return loss, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def train_step(net, batch, config: TrainConfig, coords, iteration=0):
    """One Adam update on a copy of ``net``; returns ``(new_net, loss)``.

    Optimiser moments travel with the network in ``net.optimizer_state``.
    """
    loss, grads = fm_loss(net, batch, coords, return_grads=True)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDivergedError(iteration, loss)
    new = net.copy()
    state = new.optimizer_state if new.optimizer_state is not None else AdamState()
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    lr_t = config.learning_rate * np.sqrt(1.0 - b2 ** state.step) / (1.0 - b1 ** state.step)
    for name in PARAM_NAMES:
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        param = new.params[name]
        if config.weight_decay:
            param = param - config.learning_rate * config.weight_decay * param
        new.params[name] = param - lr_t * m / (np.sqrt(v) + config.eps)
    new.optimizer_state = state
    return new, loss


def sample(net, z1, condition, steps, coords):
    """Explicit Euler on ``dz/dtau = v`` from ``tau = 1`` down to ``tau = 0``.

    ``z1`` is ``(tokens, channels)`` or a batch ``(B, tokens, channels)``.
    """
    if steps < 1:
        raise UsageError("steps must be >= 1")
    z = np.array(z1, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    cond = np.asarray(condition.embedding if isinstance(condition, Condition) else condition,
                      dtype=np.float64)
    cond = np.broadcast_to(cond, (z.shape[0], cond.shape[-1]))
    phases = _phases_for(net, coords) if isinstance(net, VectorFieldNet) else np.asarray(coords)
    h = 1.0 / steps
    for i in range(steps):
        tau = 1.0 - i * h
        z = z - h * net(z, np.full(z.shape[0], tau), cond, phases)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"sampler state became non-finite at step {i + 1} (tau={tau:.4f})")
    return z[0] if single else z


class FlowMatchingModel(BaseEstimator):
    """Estimator wrapper: ``fit`` trains on data latents, ``sample`` draws new ones.

    ``X`` passed to ``fit`` has shape ``(n_samples, tokens, channels)`` with
    ``tokens == grid[0] * grid[1]``. Tokens sit at global coordinates
    ``(t, anchor + local)``; the defaults place one frame at the origin.
    """

    def __init__(self, grid=(2, 2), model_dim=12, hidden_dim=16, time_dim=4, cond_dim=2,
                 rope_base=10000.0, rope_axis_split=None, learning_rate=3e-3, batch_size=32, n_iter=500,
                 sample_steps=32, seed=0):
        self.grid = grid
        self.model_dim = model_dim
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.rope_base = rope_base
        self.rope_axis_split = rope_axis_split
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.sample_steps = sample_steps
        self.seed = seed

    def _coords(self, t=0, anchor=(0, 0)):
        return global_coords(t, anchor, *self.grid)

    def fit(self, X, y=None, condition=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != self.grid[0] * self.grid[1]:
            raise DimensionError(f"X must be (n_samples, {self.grid[0] * self.grid[1]}, channels), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        rng = np.random.default_rng(self.seed)
        if self.rope_axis_split is None:
            rope = RopeParams.for_dim(self.model_dim, self.rope_base)
        else:
            rope = RopeParams(self.rope_base, self.model_dim, tuple(self.rope_axis_split))
        net = VectorFieldNet(X.shape[2], self.model_dim, self.hidden_dim, self.time_dim,
                             self.cond_dim, rope, seed=int(rng.integers(2 ** 31)))
        cond = np.zeros(self.cond_dim) if condition is None else np.asarray(condition, dtype=np.float64)
        config = TrainConfig(self.learning_rate, self.batch_size, self.n_iter, self.seed)
        coords = self._coords()
        curve = []
        for it in range(self.n_iter):
            idx = rng.integers(0, X.shape[0], size=self.batch_size)
            noise = rng.standard_normal((self.batch_size,) + X.shape[1:])
            taus = rng.uniform(0.0, 1.0, size=self.batch_size)
            batch = [(FlowSample(X[i], noise[b], taus[b]), cond) for b, i in enumerate(idx)]
            net, loss = train_step(net, batch, config, coords, iteration=it)
            curve.append(loss)
        self.net_ = net
        self.condition_ = cond
        self.loss_curve_ = np.array(curve)
        self.n_features_in_ = X.shape[2]
        return self

    def sample(self, n_samples=1, noise=None, t=0, anchor=(0, 0), random_state=None):
        check_is_fitted(self, "net_")
        if noise is None:
            rng = np.random.default_rng(self.seed if random_state is None else random_state)
            noise = rng.standard_normal((n_samples, self.grid[0] * self.grid[1], self.n_features_in_))
        return sample(self.net_, noise, self.condition_, self.sample_steps, self._coords(t, anchor))
