"""Minimal reverse-mode autodiff over numpy arrays and the balancing-policy networks.

A :class:`Tape` records every operation of one forward pass. :meth:`Tape.backward` walks the
records once in reverse order and accumulates gradients into the leaf variables and, for
parameters, into the owning :class:`ParamStore`.

Networks
--------
* actor: MLP ``(o, x_exp, l_imp, u_aln[, o_hist]) -> mean action``, tanh-bounded and scaled
  to the action clamp, plus a learned log-std vector.
* encoder: MLP ``x_imp -> l_imp``.
* explicit / implicit estimators: per-step MLP, two strided 1-D convolutions over the history
  axis, linear head.
* critic: MLP over ``(o, x_exp, x_imp)``.

Checkpoint layout (all integers little-endian)::

    b"QBNETS\\0\\0" | u32 version | u64 header length | UTF-8 JSON header | float64 LE data

The JSON header (sorted keys, no whitespace) lists ``params`` as ``[name, shape, offset]`` in
store order, the ``spec`` and free-form ``meta``. Offsets count float64 elements.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class TapeError(RuntimeError):
    """Autodiff contract violation (backward without a recorded forward, reuse, ...)."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named float64 arrays with matching gradient buffers."""

    def __init__(self, version: str = "1"):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self.version = version

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self.params[name].shape}")
        self.params[name][...] = value

    def zero_grad(self, names=None) -> None:
        for k in names or self.grads:
            self.grads[k][...] = 0.0

    def flat(self, names=None) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in names or self.params])

    def flat_grad(self, names=None) -> np.ndarray:
        return np.concatenate([self.grads[k].ravel() for k in names or self.grads])

    def load_flat(self, vec, names=None) -> None:
        i = 0
        for k in names or self.params:
            p = self.params[k]
            p[...] = np.asarray(vec[i:i + p.size]).reshape(p.shape)
            i += p.size

    def copy(self) -> "ParamStore":
        out = ParamStore(self.version)
        for k, v in self.params.items():
            out.add(k, v.copy())
        return out

    def zero_(self) -> "ParamStore":
        for v in self.params.values():
            v[...] = 0.0
        return self


# ---------------------------------------------------------------- tape and variables

class Var:
    """A recorded value. ``grad`` is filled by :meth:`Tape.backward`."""

    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", value, param: str | None = None):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.shape})"


class Tape:
    """Records operations of one forward pass. ``record=False`` gives a cheap inference tape."""

    def __init__(self, record: bool = True):
        self.record = record
        self.ops: list = []
        self.leaves: list[Var] = []
        self.used = False

    def const(self, value) -> Var:
        return Var(self, value)

    def param(self, store: ParamStore, name: str) -> Var:
        v = Var(self, store.params[name], param=name)
        v.store = store
        if self.record:
            self.leaves.append(v)
        return v

    def _push(self, out: Var, fn, *inputs: Var) -> Var:
        if self.record:
            self.ops.append((out, fn, inputs))
        return out

    def backward(self, loss: Var, accumulate: bool = False) -> None:
        """Reverse sweep from a scalar ``loss``; parameter gradients land in their stores."""
        if not self.record:
            raise TapeError("inference tape records nothing to differentiate")
        if self.used:
            raise TapeError("tape already consumed by a backward pass")
        if loss.tape is not self or not (self.ops or self.leaves):
            raise TapeError("backward without a recorded forward pass")
        if loss.value.size != 1:
            raise TapeError("loss must be a scalar")
        self.used = True
        loss.grad = np.ones_like(loss.value)
        for out, fn, inputs in reversed(self.ops):
            if out.grad is not None:
                fn(out.grad, *inputs)
        stores = {}
        for leaf in self.leaves:
            stores.setdefault(id(leaf.store), (leaf.store, set()))[1].add(leaf.param)
        if not accumulate:
            for store, names in stores.values():
                store.zero_grad(names)
        for leaf in self.leaves:
            if leaf.grad is not None:
                leaf.store.grads[leaf.param] += leaf.grad


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else Var(tape, x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise and reductions

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)

    def back(g, a, b):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))
    return tape._push(Var(tape, a.value + b.value), back, a, b)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)

    def back(g, a, b):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))
    return tape._push(Var(tape, a.value - b.value), back, a, b)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)

    def back(g, a, b):
        a._accum(_unbroadcast(g * b.value, a.shape))
        b._accum(_unbroadcast(g * a.value, b.shape))
    return tape._push(Var(tape, a.value * b.value), back, a, b)


def _unary(x: Var, value, dfn) -> Var:
    def back(g, x):
        x._accum(g * dfn())
    return x.tape._push(Var(x.tape, value), back, x)


def square(x: Var) -> Var:
    return _unary(x, x.value**2, lambda: 2.0 * x.value)


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return _unary(x, y, lambda: y)


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _unary(x, y, lambda: 1.0 - y * y)


def sigmoid(x: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _unary(x, y, lambda: y * (1.0 - y))


def elu(x: Var) -> Var:
    neg = x.value < 0.0
    em1 = np.expm1(np.minimum(x.value, 0.0))
    y = np.where(neg, em1, x.value)
    return _unary(x, y, lambda: np.where(neg, em1 + 1.0, 1.0))


def clip(x: Var, lo: float, hi: float) -> Var:
    """Clamp; the gradient is passed only where the value lies strictly inside the bounds."""
    inside = (x.value > lo) & (x.value < hi)
    return _unary(x, np.clip(x.value, lo, hi), lambda: inside.astype(float))


def minimum(a, b) -> Var:
    """Elementwise minimum; ties send the gradient to ``a``."""
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    pick_a = a.value <= b.value

    def back(g, a, b):
        a._accum(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))
    return tape._push(Var(tape, np.minimum(a.value, b.value)), back, a, b)


def sum_(x: Var, axis=None) -> Var:
    def back(g, x):
        gg = g if axis is None else np.expand_dims(g, axis)
        x._accum(np.broadcast_to(gg, x.shape))
    return x.tape._push(Var(x.tape, x.value.sum(axis)), back, x)


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def stop_gradient(x: Var) -> Var:
    """Same value, no gradient path back to ``x``."""
    return Var(x.tape, x.value.copy())


def take(x: Var, idx) -> Var:
    def back(g, x):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        x._accum(full)
    return x.tape._push(Var(x.tape, x.value[idx]), back, x)


def reshape(x: Var, shape) -> Var:
    def back(g, x):
        x._accum(g.reshape(x.shape))
    return x.tape._push(Var(x.tape, x.value.reshape(shape)), back, x)


def concat(xs, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    xs = [_as_var(tape, x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g, *xs):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accum(part)
    return tape._push(Var(tape, np.concatenate([x.value for x in xs], axis)), back, *xs)


# ---------------------------------------------------------------- layers

def affine(x, w: Var, b: Var) -> Var:
    """``x @ w + b`` over the last axis."""
    tape = _tape_of(x, w, b)
    x = _as_var(tape, x)
    y = x.value @ w.value + b.value

    def back(g, x, w, b):
        x._accum(g @ w.value.T)
        g2 = g.reshape(-1, g.shape[-1])
        w._accum(x.value.reshape(-1, x.shape[-1]).T @ g2)
        b._accum(g2.sum(0))
    return tape._push(Var(tape, y), back, x, w, b)


def _windows(length: int, kernel: int, stride: int) -> np.ndarray:
    n_out = (length - kernel) // stride + 1
    if n_out < 1:
        raise ValueError(f"sequence of length {length} is shorter than the kernel {kernel}")
    return np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]


def conv1d(x, w: Var, b: Var, stride: int) -> Var:
    """Valid 1-D convolution over axis 1 of ``x (B, L, C_in)``; ``w (K*C_in, C_out)``.

    Implemented as im2col followed by a matrix product.
    """
    tape = _tape_of(x, w, b)
    x = _as_var(tape, x)
    bsz, length, c_in = x.shape
    kernel = w.shape[0] // c_in
    idx = _windows(length, kernel, stride)
    cols = x.value[:, idx, :].reshape(bsz, len(idx), kernel * c_in)
    y = cols @ w.value + b.value

    def back(g, x, w, b):
        g2 = g.reshape(-1, g.shape[-1])
        w._accum(cols.reshape(-1, cols.shape[-1]).T @ g2)
        b._accum(g2.sum(0))
        dcols = (g @ w.value.T).reshape(bsz, len(idx), kernel, c_in)
        dx = np.zeros_like(x.value)
        np.add.at(dx, (slice(None), idx), dcols)
        x._accum(dx)
    return tape._push(Var(tape, y), back, x, w, b)


# ---------------------------------------------------------------- network specification

@dataclass
class NetSpec:
    obs_dim: int = 44
    exp_dim: int = 13          # explicit parameters seen by the actor and estimated (0 removes both)
    imp_dim: int = 29
    latent_dim: int = 8
    aln_dim: int = 3           # alignment command width (0 removes it)
    history: int = 20
    action_dim: int = 12
    action_scale: float = 0.6
    history_obs: bool = False  # append the flattened history to the actor input
    actor_hidden: tuple = (512, 256, 128, 64)
    encoder_hidden: tuple = (64,)
    critic_hidden: tuple = (256, 128, 64)
    est_mlp: int = 32
    est_channels: int = 32
    est_kernel: int = 5
    est_stride: int = 2
    critic_exp_dim: int = 13
    init_log_std: float = -1.0

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if self.history < 1 or self.latent_dim < 1:
            raise ValueError("history and latent_dim must be positive")
        _windows(self.conv_lengths[0], self.est_kernel, self.est_stride)
        _windows(self.conv_lengths[1], self.est_kernel, self.est_stride)
        if self.exp_dim not in (0, 7, 13):
            raise ValueError("exp_dim must be 13 (full), 7 (contacts + body velocity) or 0")

    @property
    def actor_in(self) -> int:
        extra = self.history * self.obs_dim if self.history_obs else 0
        return self.obs_dim + self.exp_dim + self.latent_dim + self.aln_dim + extra

    @property
    def critic_in(self) -> int:
        return self.obs_dim + self.critic_exp_dim + self.imp_dim

    @property
    def conv_lengths(self) -> tuple:
        l1 = (self.history - self.est_kernel) // self.est_stride + 1
        l2 = (l1 - self.est_kernel) // self.est_stride + 1
        return self.history, l1, l2

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("actor_hidden", "encoder_hidden", "critic_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


NETWORKS = ("actor", "encoder", "est_exp", "est_imp", "critic")


def _init_linear(store, rng, name, n_in, n_out, gain):
    store.add(f"{name}.w", rng.normal(0.0, gain / np.sqrt(n_in), (n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def _init_mlp(store, rng, prefix, sizes, out_gain=1.0):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        _init_linear(store, rng, f"{prefix}.{i}", a, b, out_gain if last else np.sqrt(2.0))


def init_params(spec: NetSpec, seed: int = 0) -> ParamStore:
    """Fresh parameters for every network (scaled-normal weights, zero biases)."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    _init_mlp(store, rng, "actor", (spec.actor_in, *spec.actor_hidden, spec.action_dim), out_gain=0.01)
    store.add("actor.log_std", np.full(spec.action_dim, spec.init_log_std))
    _init_mlp(store, rng, "encoder", (spec.imp_dim, *spec.encoder_hidden, spec.latent_dim))
    _, l1, l2 = spec.conv_lengths
    heads = (("est_exp", spec.exp_dim), ("est_imp", spec.latent_dim)) if spec.exp_dim else (("est_imp", spec.latent_dim),)
    for name, out in heads:
        _init_linear(store, rng, f"{name}.in", spec.obs_dim, spec.est_mlp, np.sqrt(2.0))
        _init_linear(store, rng, f"{name}.conv0", spec.est_kernel * spec.est_mlp, spec.est_channels, np.sqrt(2.0))
        _init_linear(store, rng, f"{name}.conv1", spec.est_kernel * spec.est_channels, spec.est_channels,
                     np.sqrt(2.0))
        _init_linear(store, rng, f"{name}.out", l2 * spec.est_channels, out, 1.0)
    _init_mlp(store, rng, "critic", (spec.critic_in, *spec.critic_hidden, 1))
    return store


# ---------------------------------------------------------------- forward passes

def _p(tape, store, name):
    return tape.param(store, name)


def mlp(tape: Tape, store: ParamStore, prefix: str, x, n_layers: int, act=elu) -> Var:
    for i in range(n_layers):
        x = affine(x, _p(tape, store, f"{prefix}.{i}.w"), _p(tape, store, f"{prefix}.{i}.b"))
        if i < n_layers - 1:
            x = act(x)
    return x


def _check_dim(x, dim, what):
    width = np.shape(x.value if isinstance(x, Var) else x)[-1]
    if width != dim:
        raise ValueError(f"{what}: expected last dimension {dim}, got {width}")


def actor_mean(tape, store, spec: NetSpec, o, x_exp=None, l_imp=None, u_aln=None, o_hist=None) -> Var:
    """Deterministic mean action, ``action_scale * tanh(b(inputs))``."""
    parts = [(o, spec.obs_dim, "o"), (x_exp, spec.exp_dim, "x_exp"), (l_imp, spec.latent_dim, "l_imp"),
             (u_aln, spec.aln_dim, "u_aln")]
    inputs = []
    for x, dim, what in parts:
        if dim == 0:
            continue
        if x is None:
            raise ValueError(f"{what} is required by this network spec")
        _check_dim(x, dim, what)
        inputs.append(x)
    if spec.history_obs:
        if o_hist is None:
            raise ValueError("o_hist is required by this network spec")
        h = _as_var(tape, o_hist)
        if h.shape[-2:] != (spec.history, spec.obs_dim):
            raise ValueError(f"o_hist must end in shape {(spec.history, spec.obs_dim)}")
        inputs.append(reshape(h, h.shape[:-2] + (spec.history * spec.obs_dim,)))
    x = concat([_as_var(tape, v) for v in inputs], -1)
    y = mlp(tape, store, "actor", x, len(spec.actor_hidden) + 1)
    return mul(tanh(y), spec.action_scale)


def encoder(tape, store, spec: NetSpec, x_imp) -> Var:
    _check_dim(x_imp, spec.imp_dim, "x_imp")
    return mlp(tape, store, "encoder", _as_var(tape, x_imp), len(spec.encoder_hidden) + 1)


def estimator_raw(tape, store, spec: NetSpec, o_hist, which: str) -> Var:
    """Pre-squash output of ``est_exp`` or ``est_imp`` for a history ``(B, H, obs_dim)``."""
    h = _as_var(tape, o_hist)
    if h.value.ndim != 3 or h.shape[1:] != (spec.history, spec.obs_dim):
        raise ValueError(f"history must have shape (B, {spec.history}, {spec.obs_dim}), got {h.shape}")
    x = elu(affine(h, _p(tape, store, f"{which}.in.w"), _p(tape, store, f"{which}.in.b")))
    for k in ("conv0", "conv1"):
        x = elu(conv1d(x, _p(tape, store, f"{which}.{k}.w"), _p(tape, store, f"{which}.{k}.b"), spec.est_stride))
    x = reshape(x, (h.shape[0], -1))
    return affine(x, _p(tape, store, f"{which}.out.w"), _p(tape, store, f"{which}.out.b"))


def squash_explicit(raw: Var) -> Var:
    """Contact probabilities (first four entries) through a sigmoid, the rest unchanged."""
    return concat([sigmoid(raw[:, :4]), raw[:, 4:]], -1)


def estimators(tape, store, spec: NetSpec, o_hist):
    """``(x_hat_exp (B, exp_dim), l_hat_imp (B, latent))``; ``x_hat_exp`` is None when ``exp_dim == 0``."""
    x_hat = squash_explicit(estimator_raw(tape, store, spec, o_hist, "est_exp")) if spec.exp_dim else None
    return x_hat, estimator_raw(tape, store, spec, o_hist, "est_imp")


def critic(tape, store, spec: NetSpec, o, x_exp, x_imp) -> Var:
    x = concat([_as_var(tape, o), _as_var(tape, x_exp), _as_var(tape, x_imp)], -1)
    _check_dim(x, spec.critic_in, "critic input")
    return reshape(mlp(tape, store, "critic", x, len(spec.critic_hidden) + 1), (x.shape[0],))


# numpy conveniences for rollouts and evaluation

def forward_actor(store, spec, o, x_exp=None, l_imp=None, u_aln=None, o_hist=None) -> np.ndarray:
    return actor_mean(Tape(False), store, spec, o, x_exp, l_imp, u_aln, o_hist).value


def forward_encoder(store, spec, x_imp) -> np.ndarray:
    return encoder(Tape(False), store, spec, x_imp).value


def forward_estimators(store, spec, o_hist):
    x, l = estimators(Tape(False), store, spec, o_hist)
    return (None if x is None else x.value), l.value


def forward_critic(store, spec, o, x_exp, x_imp) -> np.ndarray:
    return critic(Tape(False), store, spec, o, x_exp, x_imp).value


# ---------------------------------------------------------------- Gaussian policy head

def sample_action(mean, log_std, rng):
    """Diagonal Gaussian sample and its log density, summed over the action axis."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    eps = rng.standard_normal(mean.shape)
    a = mean + np.exp(log_std) * eps
    logp = -0.5 * np.sum(eps**2, -1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI
    return a, logp


def gaussian_log_prob_np(a, mean, log_std) -> np.ndarray:
    z = (np.asarray(a) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z**2, -1) - np.sum(log_std) - 0.5 * np.shape(a)[-1] * LOG_2PI


def gaussian_log_prob(a, mean: Var, log_std: Var) -> Var:
    z = mul(sub(a, mean), exp(mul(log_std, -1.0)))
    dim = mean.shape[-1]
    return sub(mul(sum_(square(z), -1), -0.5), sum_(log_std) + 0.5 * dim * LOG_2PI)


def gaussian_entropy(log_std: Var) -> Var:
    return sum_(log_std) + 0.5 * log_std.shape[-1] * (1.0 + LOG_2PI)


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Adam with optional global-norm gradient clipping over the parameters it owns."""

    store: ParamStore
    names: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.names = list(self.names)
        for k in self.names:
            self.m.setdefault(k, np.zeros_like(self.store[k]))
            self.v.setdefault(k, np.zeros_like(self.store[k]))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(self.store.grads[k] ** 2) for k in self.names)))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.names:
            g = self.store.grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.store.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def state_arrays(self) -> dict:
        out = {}
        for k in self.names:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = int(t)
        for k in self.names:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


# ---------------------------------------------------------------- checkpoints

MAGIC = b"QBNETS\0\0"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict, spec: NetSpec | None = None, meta: dict | None = None) -> None:
    """Write named float64 arrays (insertion order kept) with a JSON header."""
    entries, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append([name, list(arr.shape), offset])
        offset += arr.size
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"params": entries, "spec": spec.to_dict() if spec else None, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(arrays, spec, meta)``; arrays keep the file order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(raw[start:start + hlen].decode())
    data = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    arrays = OrderedDict()
    for name, shape, off in header["params"]:
        size = int(np.prod(shape))
        if off + size > data.size:
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        arrays[name] = data[off:off + size].reshape(shape).astype(np.float64)
    spec = NetSpec.from_dict(header["spec"]) if header["spec"] else None
    return arrays, spec, header["meta"]


def store_from_arrays(arrays: dict, prefix_filter=None) -> ParamStore:
    store = ParamStore()
    for k, v in arrays.items():
        if prefix_filter is None or k.split(".")[0] in prefix_filter:
            store.add(k, v)
    return store
