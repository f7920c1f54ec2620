"""Subnetwork building blocks with hand-written pullbacks, plus Adam.

All forward maps are batched: inputs have shape ``(batch, width)``. Each op
with parameters comes as a pair: ``*_forward`` returns the output together
with a cache, and ``*_pullback`` consumes the cache and an output cotangent,
accumulates parameter gradients into a grad container of the same type (when
one is given) and returns the input cotangents.

GRU (Cho et al. formulation, frozen here)::

    z  = sigmoid(W_z x + U_z h + b_z)          # update gate
    r  = sigmoid(W_r x + U_r h + b_r)          # reset gate
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h~ + z * h
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from crow.errors import NonFiniteError, ShapeError
from crow.numerics import Rng

# ---------------------------------------------------------------- param trees


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every float array inside a params tree."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def map_parameters(fn, obj):
    """Rebuild a params tree with ``fn`` applied to every array."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        changes = {f.name: map_parameters(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, dict):
        return {k: map_parameters(fn, o) for k, o in obj.items()}
    if isinstance(obj, list):
        return [map_parameters(fn, o) for o in obj]
    if isinstance(obj, tuple):
        return tuple(map_parameters(fn, o) for o in obj)
    return obj


def zeros_like_tree(obj):
    return map_parameters(np.zeros_like, obj)


def copy_tree(obj):
    return map_parameters(np.copy, obj)


def flatten(obj) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in named_parameters(obj)])


def unflatten_into(obj, flat: np.ndarray) -> None:
    """Write a flat vector back into the arrays of ``obj`` in place."""
    offset = 0
    for _, a in named_parameters(obj):
        a[...] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, tree holds {offset}")


def count_parameters(obj) -> int:
    return sum(a.size for _, a in named_parameters(obj))


# ---------------------------------------------------------------- activations


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def log_sigmoid(a: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -a)


def glorot(rng: Rng, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return (2.0 * rng.uniform((n_out, n_in)) - 1.0) * limit


def _check_width(x: np.ndarray, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ShapeError(f"{what}: expected input width {width}, got shape {x.shape}")


# ---------------------------------------------------------------- dense


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_out: int) -> "Dense":
        return cls(glorot(rng, n_out, n_in), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "Dense":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))


def dense_apply(p: Dense, x: np.ndarray) -> np.ndarray:
    _check_width(x, p.n_in, "dense_apply")
    return x @ p.weight.T + p.bias


def dense_pullback(p: Dense, x: np.ndarray, g_out: np.ndarray, grad: Dense | None) -> np.ndarray:
    if grad is not None:
        if x.ndim == 1:
            grad.weight += np.outer(g_out, x)
            grad.bias += g_out
        else:
            grad.weight += g_out.T @ x
            grad.bias += g_out.sum(axis=0)
    return g_out @ p.weight


# ---------------------------------------------------------------- residual stack


def residual_stack_forward(layers: list[Dense], x: np.ndarray):
    cache = []
    for i, layer in enumerate(layers):
        if layer.n_in != layer.n_out:
            raise ShapeError(f"residual layer {i} is not square: {layer.weight.shape}")
        pre = dense_apply(layer, x)
        cache.append((x, pre > 0.0))
        x = x + np.maximum(pre, 0.0)
    return x, cache


def residual_stack_apply(layers: list[Dense], x: np.ndarray) -> np.ndarray:
    return residual_stack_forward(layers, x)[0]


def residual_stack_pullback(layers, cache, g_out, grads: list[Dense] | None):
    g = g_out
    for i in reversed(range(len(layers))):
        x_in, active = cache[i]
        g_pre = g * active
        g = g + dense_pullback(layers[i], x_in, g_pre, grads[i] if grads is not None else None)
    return g


# ---------------------------------------------------------------- GRU


@dataclass
class GRU:
    """Gate rows are stacked ``[update; reset; candidate]`` in every array."""

    w_input: np.ndarray  # (3H, in)
    w_hidden: np.ndarray  # (3H, H)
    bias: np.ndarray  # (3H,)

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_input.shape[1]

    @classmethod
    def init(cls, rng: Rng, n_in: int, hidden: int) -> "GRU":
        w_in = np.concatenate([glorot(rng, hidden, n_in) for _ in range(3)])
        w_h = np.concatenate([glorot(rng, hidden, hidden) for _ in range(3)])
        return cls(w_in, w_h, np.zeros(3 * hidden))

    def gate_view(self, which: str):
        """(W, U, b) for gate ``which`` in {'update', 'reset', 'candidate'}; views, not copies."""
        k = {"update": 0, "reset": 1, "candidate": 2}[which]
        H = self.hidden
        sl = slice(k * H, (k + 1) * H)
        return self.w_input[sl], self.w_hidden[sl], self.bias[sl]


def gru_forward(p: GRU, x: np.ndarray, h: np.ndarray):
    _check_width(x, p.n_in, "gru_step input")
    _check_width(h, p.hidden, "gru_step hidden")
    H = p.hidden
    gx = x @ p.w_input.T + p.bias
    gh = h @ p.w_hidden[: 2 * H].T
    z = sigmoid(gx[..., :H] + gh[..., :H])
    r = sigmoid(gx[..., H:2 * H] + gh[..., H:])
    rh = r * h
    cand = np.tanh(gx[..., 2 * H:] + rh @ p.w_hidden[2 * H:].T)
    h_new = (1.0 - z) * cand + z * h
    return h_new, (x, h, z, r, rh, cand)


def gru_step(p: GRU, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    return gru_forward(p, x, h_prev)[0]


def gru_pullback(p: GRU, cache, g_hnew: np.ndarray, grad: GRU | None):
    x, h, z, r, rh, cand = cache
    H = p.hidden
    g_cand = g_hnew * (1.0 - z)
    g_z = g_hnew * (h - cand)
    g_h = g_hnew * z

    g_acand = g_cand * (1.0 - cand * cand)
    g_rh = g_acand @ p.w_hidden[2 * H:]
    g_r = g_rh * h
    g_h = g_h + g_rh * r
    g_az = g_z * z * (1.0 - z)
    g_ar = g_r * r * (1.0 - r)

    g_pre = np.concatenate([g_az, g_ar, g_acand], axis=-1)
    g_x = g_pre @ p.w_input
    g_h = g_h + g_pre[..., : 2 * H] @ p.w_hidden[: 2 * H]
    if grad is not None:
        x2 = np.atleast_2d(x)
        g_pre2 = np.atleast_2d(g_pre)
        grad.w_input += g_pre2.T @ x2
        grad.bias += g_pre2.sum(axis=0)
        grad.w_hidden[: 2 * H] += np.atleast_2d(g_pre[..., : 2 * H]).T @ np.atleast_2d(h)
        grad.w_hidden[2 * H:] += np.atleast_2d(g_acand).T @ np.atleast_2d(rh)
    return g_x, g_h


# ---------------------------------------------------------------- subnet


@dataclass
class Subnet:
    """GRU -> 3 residual ReLU layers -> linear head emitting ``[s_raw | r]``."""

    gru: GRU
    trunk: list[Dense]
    head: Dense
    s_max: float = field(default=2.0)

    @property
    def d_out(self) -> int:
        return self.head.n_out // 2

    @classmethod
    def init(cls, rng: Rng, d_in: int, d_out: int, hidden: int, s_max: float = 2.0,
             n_residual: int = 3) -> "Subnet":
        gru = GRU.init(rng, d_in, hidden)
        trunk = [Dense.init(rng, hidden, hidden) for _ in range(n_residual)]
        # zero head: every coupling layer starts with s = 0, r = 0
        return cls(gru, trunk, Dense.zeros(hidden, 2 * d_out), s_max)


def s_clamp(s_raw, s_max: float = 2.0) -> np.ndarray:
    """Soft clamp ``s_max * tanh(s_raw / s_max)``; strictly inside (-s_max, s_max)."""
    return s_max * np.tanh(np.asarray(s_raw, dtype=np.float64) / s_max)


def subnet_forward(p: Subnet, u: np.ndarray, h_prev: np.ndarray):
    h_new, gru_cache = gru_forward(p.gru, u, h_prev)
    a, trunk_cache = residual_stack_forward(p.trunk, h_new)
    q = dense_apply(p.head, a)
    d = p.d_out
    t = np.tanh(q[..., :d] / p.s_max)
    s = p.s_max * t
    r = q[..., d:]
    return s, r, h_new, (gru_cache, trunk_cache, a, t)


def subnet_apply(p: Subnet, u: np.ndarray, h_prev: np.ndarray):
    """Returns ``(s, r, h_new)`` with ``s`` already clamped."""
    s, r, h_new, _ = subnet_forward(p, u, h_prev)
    return s, r, h_new


def subnet_pullback(p: Subnet, cache, g_s, g_r, g_hnew, grad: Subnet | None):
    gru_cache, trunk_cache, a, t = cache
    g_q = np.concatenate([g_s * (1.0 - t * t), g_r], axis=-1)
    g_a = dense_pullback(p.head, a, g_q, grad.head if grad is not None else None)
    g_h = residual_stack_pullback(p.trunk, trunk_cache, g_a, grad.trunk if grad is not None else None)
    if g_hnew is not None:
        g_h = g_h + g_hnew
    return gru_pullback(p.gru, gru_cache, g_h, grad.gru if grad is not None else None)


# ---------------------------------------------------------------- context gate


@dataclass
class Gate:
    dense: Dense

    @classmethod
    def init(cls, rng: Rng, hidden: int, width: int, bias: float = 5.0) -> "Gate":
        d = Dense.init(rng, hidden, width)
        d.bias[:] = bias
        return cls(d)


def gate_forward(p: Gate, h: np.ndarray):
    """Returns ``(gate, log_gate, pre_activation)``; log_gate via stable log-sigmoid."""
    pre = dense_apply(p.dense, h)
    return sigmoid(pre), log_sigmoid(pre), pre


def gate_apply(p: Gate, h: np.ndarray) -> np.ndarray:
    return gate_forward(p, h)[0]


def gate_pullback(p: Gate, h, gate, g_gate, g_loggate, grad: Gate | None):
    g_pre = np.zeros_like(gate)
    if g_gate is not None:
        g_pre = g_pre + g_gate * gate * (1.0 - gate)
    if g_loggate is not None:
        # d log sigmoid(a) / da = 1 - sigmoid(a)
        g_pre = g_pre + g_loggate * (1.0 - gate)
    return dense_pullback(p.dense, h, g_pre, grad.dense if grad is not None else None)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              name: str = "param"):
    """One bias-corrected Adam update of a single tensor; ``t`` is the new step count (>= 1).

    Returns ``(params', m', v')`` without touching the inputs.
    """
    if params.shape != grads.shape:
        raise ShapeError(f"adam_step {name}: params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    m = beta1 * m + (1.0 - beta1) * grads
    v = beta2 * v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Per-tensor Adam over a params tree, updated in place."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params, grads) -> None:
        pairs = list(zip(named_parameters(params), named_parameters(grads)))
        # validate everything first so a bad gradient aborts the whole step
        for (name, _), (_, g) in pairs:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        st = self.state
        st.t += 1
        for (name, p), (_, g) in pairs:
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p)
                st.v[name] = np.zeros_like(p)
            new_p, st.m[name], st.v[name] = adam_step(
                p, g, m, st.v[name], st.t, self.lr, self.beta1, self.beta2, self.eps, name)
            p[...] = new_p
