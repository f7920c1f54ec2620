"""Recurrent affine coupling layers with temporal context gating.

One coupling layer has a *conditioning* half ``c`` and a *target* half ``t``::

    s, r, h'  = subnet(c, h)          # h: the layer's hidden state from t-1
    g         = gate(h)               # sigmoid context gate on the previous state
    t_out     = t * exp(s) + r
    c_out     = c * g
    log|det|  = sum(s) + sum(log g)

The gate reads the incoming state ``h`` rather than ``h'``: ``h'`` depends on
``c``, so gating ``c`` by it would make the inverse circular and destroy the
diagonal structure of ``d c_out / d c``. With ``g(h)`` the inverse simply
recomputes the gate first, un-gates ``c`` and then replays the subnet on the
same arguments as the forward pass.

A block chains two layers: layer A transforms ``u1`` conditioned on ``u2``
(and gates ``u2``), layer B transforms the gated ``u2`` conditioned on the new
``v1`` (and gates ``v1``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crow.errors import DomainError, NonFiniteError, ShapeError, SingularityError
from crow.nets import (
    Gate,
    Subnet,
    gate_forward,
    gate_pullback,
    s_clamp,
    subnet_forward,
    subnet_pullback,
)
from crow.numerics import Rng

__all__ = [
    "CouplingLayer",
    "CouplingBlock",
    "s_clamp",
    "layer_logdet_terms",
    "layer_forward",
    "layer_inverse",
    "block_forward",
    "block_inverse",
]

TINY = 1e-300


@dataclass
class CouplingLayer:
    subnet: Subnet
    gate: Gate

    @property
    def d_cond(self) -> int:
        return self.subnet.gru.n_in

    @property
    def d_target(self) -> int:
        return self.subnet.d_out

    @classmethod
    def init(cls, rng: Rng, d_cond: int, d_target: int, hidden: int, s_max: float = 2.0,
             gate_bias: float = 5.0) -> "CouplingLayer":
        return cls(Subnet.init(rng, d_cond, d_target, hidden, s_max),
                   Gate.init(rng, hidden, d_cond, gate_bias))


@dataclass
class CouplingBlock:
    layer_a: CouplingLayer  # transforms partition 1 from partition 2
    layer_b: CouplingLayer  # transforms partition 2 from partition 1

    @property
    def widths(self) -> tuple[int, int]:
        return self.layer_a.d_target, self.layer_a.d_cond

    @classmethod
    def init(cls, rng: Rng, d1: int, d2: int, hidden: int, s_max: float = 2.0,
             gate_bias: float = 5.0) -> "CouplingBlock":
        return cls(CouplingLayer.init(rng, d2, d1, hidden, s_max, gate_bias),
                   CouplingLayer.init(rng, d1, d2, hidden, s_max, gate_bias))


def layer_logdet_terms(s, gates) -> float | np.ndarray:
    """``sum(s) + sum(log gates)`` over the last axis."""
    s = np.asarray(s, dtype=np.float64)
    gates = np.asarray(gates, dtype=np.float64)
    if np.any(gates <= 0.0):
        raise DomainError("gate values must be strictly positive")
    return s.sum(axis=-1) + np.log(gates).sum(axis=-1)


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite intermediate in {name}")


def _check_widths(p: CouplingLayer, cond, target, name):
    if cond.shape[-1] != p.d_cond or target.shape[-1] != p.d_target:
        raise ShapeError(
            f"{name}: expected widths (cond={p.d_cond}, target={p.d_target}), "
            f"got cond {cond.shape} and target {target.shape}")


# ---------------------------------------------------------------- single layer


def layer_forward(p: CouplingLayer, cond, target, h, name: str = "layer"):
    """Returns ``(target_out, cond_out, h_new, logdet, cache)``."""
    _check_widths(p, cond, target, name)
    s, r, h_new, sub_cache = subnet_forward(p.subnet, cond, h)
    g, log_g, _ = gate_forward(p.gate, h)
    e = np.exp(s)
    target_out = target * e + r
    cond_out = cond * g
    logdet = s.sum(axis=-1) + log_g.sum(axis=-1)
    _check_finite(name, target_out, cond_out, h_new)
    return target_out, cond_out, h_new, logdet, (cond, target, h, s, e, g, sub_cache)


def layer_forward_pullback(p: CouplingLayer, cache, g_tout, g_cout, g_hnew, g_logdet,
                           grad: CouplingLayer | None):
    """Cotangents of ``(cond, target, h)`` given those of the forward outputs.

    ``g_logdet`` has shape ``(batch,)`` (or is a scalar for unbatched inputs).
    """
    cond, target, h, s, e, g, sub_cache = cache
    g_ld = np.asarray(g_logdet, dtype=np.float64)[..., None]
    g_target = g_tout * e
    g_s = g_tout * target * e + g_ld
    g_r = g_tout
    g_cond = g_cout * g
    g_h = gate_pullback(p.gate, h, g, g_cout * cond, np.broadcast_to(g_ld, g.shape),
                        grad.gate if grad is not None else None)
    g_c_sub, g_h_sub = subnet_pullback(p.subnet, sub_cache, g_s, g_r, g_hnew,
                                       grad.subnet if grad is not None else None)
    return g_cond + g_c_sub, g_target, g_h + g_h_sub


def layer_inverse(p: CouplingLayer, target_out, cond_out, h, name: str = "layer"):
    """Returns ``(target, cond, h_new, cache)``; exact inverse of :func:`layer_forward`."""
    _check_widths(p, cond_out, target_out, name)
    g, _, _ = gate_forward(p.gate, h)
    if np.min(g, initial=np.inf) < TINY:
        raise SingularityError(f"{name}: context gate underflowed, cannot invert")
    cond = cond_out / g
    s, r, h_new, sub_cache = subnet_forward(p.subnet, cond, h)
    e = np.exp(s)
    if np.min(e, initial=np.inf) < TINY:
        raise SingularityError(f"{name}: scale exp(s) underflowed, cannot invert")
    target = (target_out - r) / e
    _check_finite(name, target, cond, h_new)
    return target, cond, h_new, (cond_out, cond, target, h, e, g, sub_cache)


def layer_inverse_pullback(p: CouplingLayer, cache, g_target, g_cond, g_hnew,
                           grad: CouplingLayer | None):
    """Cotangents of ``(target_out, cond_out, h)`` given those of the inverse outputs."""
    cond_out, cond, target, h, e, g, sub_cache = cache
    g_tout = g_target / e
    g_r = -g_tout
    g_s = -g_target * target
    g_c_sub, g_h_sub = subnet_pullback(p.subnet, sub_cache, g_s, g_r, g_hnew,
                                       grad.subnet if grad is not None else None)
    g_c = g_cond + g_c_sub
    g_cout = g_c / g
    g_h = gate_pullback(p.gate, h, g, -g_c * cond / g, None,
                        grad.gate if grad is not None else None)
    return g_tout, g_cout, g_h + g_h_sub


# ---------------------------------------------------------------- block


def block_forward_cached(p: CouplingBlock, u1, u2, h_a, h_b, name: str = "block"):
    v1, u2g, h_a2, ld_a, cache_a = layer_forward(p.layer_a, u2, u1, h_a, f"{name}.layer_a")
    v2, v1g, h_b2, ld_b, cache_b = layer_forward(p.layer_b, v1, u2g, h_b, f"{name}.layer_b")
    return v1g, v2, h_a2, h_b2, ld_a + ld_b, (cache_a, cache_b)


def block_forward(p: CouplingBlock, u1, u2, h_a, h_b):
    """Returns ``(v1, v2, h_a', h_b', logdet)``."""
    return block_forward_cached(p, u1, u2, h_a, h_b)[:5]


def block_forward_pullback(p: CouplingBlock, cache, g_v1, g_v2, g_ha, g_hb, g_logdet,
                           grad: CouplingBlock | None):
    cache_a, cache_b = cache
    # layer B outputs: target_out = v2, cond_out = gated v1
    g_v1_pre, g_u2g, g_hb_in = layer_forward_pullback(
        p.layer_b, cache_b, g_v2, g_v1, g_hb, g_logdet, grad.layer_b if grad is not None else None)
    g_u2, g_u1, g_ha_in = layer_forward_pullback(
        p.layer_a, cache_a, g_v1_pre, g_u2g, g_ha, g_logdet, grad.layer_a if grad is not None else None)
    return g_u1, g_u2, g_ha_in, g_hb_in


def block_inverse_cached(p: CouplingBlock, v1, v2, h_a, h_b, name: str = "block"):
    u2g, v1_pre, h_b2, cache_b = layer_inverse(p.layer_b, v2, v1, h_b, f"{name}.layer_b")
    u1, u2, h_a2, cache_a = layer_inverse(p.layer_a, v1_pre, u2g, h_a, f"{name}.layer_a")
    return u1, u2, h_a2, h_b2, (cache_a, cache_b)


def block_inverse(p: CouplingBlock, v1, v2, h_a, h_b):
    """Returns ``(u1, u2, h_a', h_b')``; the hidden states equal the forward ones."""
    return block_inverse_cached(p, v1, v2, h_a, h_b)[:4]


def block_inverse_pullback(p: CouplingBlock, cache, g_u1, g_u2, g_ha, g_hb,
                           grad: CouplingBlock | None):
    cache_a, cache_b = cache
    g_v1_pre, g_u2g, g_ha_in = layer_inverse_pullback(
        p.layer_a, cache_a, g_u1, g_u2, g_ha, grad.layer_a if grad is not None else None)
    g_v2, g_v1, g_hb_in = layer_inverse_pullback(
        p.layer_b, cache_b, g_u2g, g_v1_pre, g_hb, grad.layer_b if grad is not None else None)
    return g_v1, g_v2, g_ha_in, g_hb_in
