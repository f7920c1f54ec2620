"""The full recurrent flow: padding, splitting, stacked blocks and sequences.

Per timestep the frame ``x`` (width ``d_x``) is zero-padded to ``d_total``,
split into two partitions, pushed through ``n_blocks`` coupling blocks and
merged back. The merged output is read as ``[y_hat | z | pad_out]``.

Every layer owns one recurrent state, so a model with ``n_blocks`` blocks
threads ``2 * n_blocks`` hidden vectors across time, all starting at zero.
Batched arrays put the batch axis first: frames are ``(batch, d_x)`` per step
and ``(batch, T, d_x)`` per sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from crow.coupling import (
    CouplingBlock,
    block_forward_cached,
    block_forward_pullback,
    block_inverse_cached,
    block_inverse_pullback,
)
from crow.errors import ShapeError
from crow.nets import glorot, map_parameters
from crow.numerics import Rng

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class Split:
    """Partition of ``d_total`` channels into two index sets.

    ``checkerboard``: pixel ``(i, j)`` of a ``rows x cols`` frame goes to
    partition 1 when ``i + j`` is even; padding channels alternate, each one
    joining whichever partition is currently smaller (ties go to partition 1).
    ``halves``: the first ``ceil(d/2)`` channels form partition 1.
    """

    kind: str = "halves"
    rows: int = 0
    cols: int = 0

    def __post_init__(self):
        if self.kind not in ("halves", "checkerboard"):
            raise ValueError(f"unknown split scheme {self.kind!r}")
        if self.kind == "checkerboard" and (self.rows < 1 or self.cols < 1):
            raise ValueError("checkerboard split needs rows and cols")

    def indices(self, d_total: int) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "halves":
            k = (d_total + 1) // 2
            return np.arange(k), np.arange(k, d_total)
        n_pix = self.rows * self.cols
        if n_pix > d_total:
            raise ShapeError(f"checkerboard {self.rows}x{self.cols} exceeds width {d_total}")
        part1, part2 = [], []
        for k in range(n_pix):
            i, j = divmod(k, self.cols)
            (part1 if (i + j) % 2 == 0 else part2).append(k)
        for k in range(n_pix, d_total):
            (part1 if len(part1) <= len(part2) else part2).append(k)
        return np.array(part1, dtype=np.int64), np.array(part2, dtype=np.int64)

    def to_dict(self) -> dict:
        if self.kind == "halves":
            return {"kind": "halves"}
        return {"kind": "checkerboard", "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d) -> "Split":
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], int(d.get("rows", 0)), int(d.get("cols", 0)))


class SplitPlan:
    """Precomputed gather/scatter indices for one ``(Split, d_total)`` pair."""

    def __init__(self, split: Split, d_total: int):
        self.split = split
        self.d_total = d_total
        self.idx1, self.idx2 = split.indices(d_total)
        self.inverse = np.argsort(np.concatenate([self.idx1, self.idx2]))

    def apply(self, x):
        if x.shape[-1] != self.d_total:
            raise ShapeError(f"split: expected width {self.d_total}, got {x.shape}")
        return x[..., self.idx1], x[..., self.idx2]

    def merge(self, x1, x2):
        if x1.shape[-1] != self.idx1.size or x2.shape[-1] != self.idx2.size:
            raise ShapeError(
                f"merge: expected widths ({self.idx1.size}, {self.idx2.size}), "
                f"got {x1.shape} and {x2.shape}")
        return np.concatenate([x1, x2], axis=-1)[..., self.inverse]


def split_apply(scheme: Split, x, d_total: int | None = None):
    x = np.asarray(x, dtype=np.float64)
    return SplitPlan(scheme, d_total or x.shape[-1]).apply(x)


def split_merge(scheme: Split, x1, x2):
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    return SplitPlan(scheme, x1.shape[-1] + x2.shape[-1]).merge(x1, x2)


# ---------------------------------------------------------------- config/model


@dataclass
class FlowConfig:
    d_x: int
    d_y: int
    d_z: int
    d_total: int
    n_blocks: int = 3
    hidden: int = 256
    split: Split = field(default_factory=Split)
    s_max: float = 2.0
    seed: int = 0
    pad_sigma: float = 0.01
    gate_bias: float = 5.0
    # covariates enter the flow as (y - y_shift) / y_scale
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.split, (dict, str)):
            self.split = Split.from_dict(self.split)
        if self.d_total < self.d_x or self.d_total < self.d_y + self.d_z:
            raise ValueError(
                f"d_total={self.d_total} must cover d_x={self.d_x} and d_y+d_z={self.d_y + self.d_z}")
        if min(self.d_x, self.d_z, self.n_blocks, self.hidden) < 1 or self.d_y < 0:
            raise ValueError("widths and counts must be positive")
        if not self.y_scale > 0:
            raise ValueError(f"y_scale must be positive, got {self.y_scale}")
        if self.split.kind == "checkerboard" and self.split.rows * self.split.cols != self.d_x:
            raise ValueError(
                f"checkerboard {self.split.rows}x{self.split.cols} does not tile d_x={self.d_x}")

    @property
    def d_pad(self) -> int:
        return self.d_total - self.d_y - self.d_z

    def to_dict(self) -> dict:
        return {
            "d_x": self.d_x, "d_y": self.d_y, "d_z": self.d_z, "d_total": self.d_total,
            "n_blocks": self.n_blocks, "hidden": self.hidden, "split": self.split.to_dict(),
            "s_max": self.s_max, "seed": self.seed, "pad_sigma": self.pad_sigma,
            "gate_bias": self.gate_bias, "y_shift": self.y_shift, "y_scale": self.y_scale,
        }

    def standardize_y(self, covariates) -> np.ndarray:
        """Map raw covariates to the units the y channels are trained in."""
        return (np.asarray(covariates, dtype=np.float64) - self.y_shift) / self.y_scale

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class FlowModel:
    config: FlowConfig
    blocks: list[CouplingBlock]

    def __post_init__(self):
        self.plan = SplitPlan(self.config.split, self.config.d_total)
        d1, d2 = self.plan.idx1.size, self.plan.idx2.size
        for i, b in enumerate(self.blocks):
            if b.widths != (d1, d2):
                raise ShapeError(f"block {i} widths {b.widths} do not match split ({d1}, {d2})")

    @property
    def n_hidden(self) -> int:
        return 2 * len(self.blocks)

    def zero_hiddens(self, batch: int | None = None) -> list[np.ndarray]:
        shape = (self.config.hidden,) if batch is None else (batch, self.config.hidden)
        return [np.zeros(shape) for _ in range(self.n_hidden)]


def init_model(config: FlowConfig, rng: Rng | None = None) -> FlowModel:
    """Identity-flavoured start: zero subnet heads (s = r = 0), gate bias +5."""
    rng = rng if rng is not None else Rng(config.seed)
    plan = SplitPlan(config.split, config.d_total)
    d1, d2 = plan.idx1.size, plan.idx2.size
    blocks = [CouplingBlock.init(rng, d1, d2, config.hidden, config.s_max, config.gate_bias)
              for _ in range(config.n_blocks)]
    return FlowModel(config, blocks)


def random_model(config: FlowConfig, rng: Rng, scale: float = 1.0,
                 gate_bias_range: tuple[float, float] = (-1.0, 3.0)) -> FlowModel:
    """A model with every parameter randomised (nonzero heads and biases); for verification."""
    model = init_model(config, rng)

    def fill(a):
        if a.ndim == 2:
            return scale * glorot(rng, *a.shape)
        return scale * 0.5 * (2.0 * rng.uniform(a.shape) - 1.0)

    model.blocks = map_parameters(fill, model.blocks)
    lo, hi = gate_bias_range
    for b in model.blocks:
        for layer in (b.layer_a, b.layer_b):
            layer.gate.dense.bias[:] = lo + (hi - lo) * rng.uniform(layer.gate.dense.bias.shape)
    return model


# ---------------------------------------------------------------- pad


def pad(x, d_total: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] > d_total:
        raise ShapeError(f"pad: width {x.shape[-1]} exceeds d_total={d_total}")
    widths = [(0, 0)] * (x.ndim - 1) + [(0, d_total - x.shape[-1])]
    return np.pad(x, widths)


def unpad(v, d_x: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < d_x:
        raise ShapeError(f"unpad: width {v.shape[-1]} is smaller than d_x={d_x}")
    return v[..., :d_x]


# ---------------------------------------------------------------- single step


@dataclass
class StepResult:
    y_hat: np.ndarray
    z: np.ndarray
    pad_out: np.ndarray
    logdet: np.ndarray | float
    hiddens: list[np.ndarray]

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.y_hat, self.z, self.pad_out], axis=-1)


def _blocks_forward(m: FlowModel, x, hiddens):
    cfg = m.config
    u1, u2 = m.plan.apply(pad(x, cfg.d_total))
    new_h = []
    logdet = 0.0
    caches = []
    for i, block in enumerate(m.blocks):
        u1, u2, ha, hb, ld, cache = block_forward_cached(
            block, u1, u2, hiddens[2 * i], hiddens[2 * i + 1], f"block{i}")
        new_h += [ha, hb]
        logdet = logdet + ld
        caches.append(cache)
    return m.plan.merge(u1, u2), logdet, new_h, caches


def step_forward_cached(m: FlowModel, x_t, hiddens):
    v, logdet, new_h, caches = _blocks_forward(m, x_t, hiddens)
    cfg = m.config
    res = StepResult(v[..., :cfg.d_y], v[..., cfg.d_y:cfg.d_y + cfg.d_z],
                     v[..., cfg.d_y + cfg.d_z:], logdet, new_h)
    return res, caches


def step_forward(m: FlowModel, x_t, hiddens=None) -> StepResult:
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != m.config.d_x:
        raise ShapeError(f"step_forward: frame width {x_t.shape[-1]} != d_x={m.config.d_x}")
    if hiddens is None:
        hiddens = m.zero_hiddens(None if x_t.ndim == 1 else x_t.shape[0])
    _check_hiddens(m, hiddens)
    return step_forward_cached(m, x_t, hiddens)[0]


def step_forward_pullback(m: FlowModel, caches, g_v, g_hiddens, g_logdet, grads: FlowModel | None):
    """Cotangents of ``(x_padded, hiddens_in)`` from those of ``(v, hiddens_out, logdet)``."""
    g1, g2 = m.plan.apply(g_v)
    g_h_in = [None] * m.n_hidden
    for i in reversed(range(len(m.blocks))):
        g1, g2, gha, ghb = block_forward_pullback(
            m.blocks[i], caches[i], g1, g2, g_hiddens[2 * i], g_hiddens[2 * i + 1], g_logdet,
            grads.blocks[i] if grads is not None else None)
        g_h_in[2 * i], g_h_in[2 * i + 1] = gha, ghb
    return m.plan.merge(g1, g2), g_h_in


def assemble_v(m: FlowModel, y, z, pad_in=None) -> np.ndarray:
    cfg = m.config
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if y.shape[-1] != cfg.d_y or z.shape[-1] != cfg.d_z:
        raise ShapeError(f"expected y width {cfg.d_y} and z width {cfg.d_z}, got {y.shape}, {z.shape}")
    if pad_in is None:
        pad_in = np.zeros(z.shape[:-1] + (cfg.d_pad,))
    pad_in = np.asarray(pad_in, dtype=np.float64)
    if pad_in.shape[-1] != cfg.d_pad:
        raise ShapeError(f"pad_in width {pad_in.shape[-1]} != {cfg.d_pad}")
    lead = np.broadcast_shapes(y.shape[:-1], z.shape[:-1], pad_in.shape[:-1])
    parts = [np.broadcast_to(a, lead + a.shape[-1:]) for a in (y, z, pad_in)]
    return np.concatenate(parts, axis=-1)


def step_inverse_cached(m: FlowModel, v, hiddens):
    v1, v2 = m.plan.apply(v)
    new_h = list(hiddens)
    caches = [None] * len(m.blocks)
    for i in reversed(range(len(m.blocks))):
        v1, v2, ha, hb, caches[i] = block_inverse_cached(
            m.blocks[i], v1, v2, hiddens[2 * i], hiddens[2 * i + 1], f"block{i}")
        new_h[2 * i], new_h[2 * i + 1] = ha, hb
    x_padded = m.plan.merge(v1, v2)
    return unpad(x_padded, m.config.d_x), new_h, caches


def step_inverse(m: FlowModel, y, z, pad_in=None, hiddens=None):
    """Returns ``(x_t, hiddens')``; ``hiddens'`` equal those the forward step would produce.

    With an explicit ``pad_in`` (a forward step's ``pad_out``), the states the
    inverse computes internally already are the forward's, and reusing them
    keeps round trips accurate to rounding. With ``pad_in=None`` (generation)
    the reconstructed input-pad channels are generally nonzero, so the
    internal states would describe a padded input the forward pass never
    sees; they are recomputed by a forward pass over the emitted ``x_t``.
    """
    v = assemble_v(m, y, z, pad_in)
    if hiddens is None:
        hiddens = m.zero_hiddens(None if v.ndim == 1 else v.shape[0])
    _check_hiddens(m, hiddens)
    x, new_h, _ = step_inverse_cached(m, v, hiddens)
    if pad_in is None and m.config.d_total > m.config.d_x:
        new_h = step_forward_cached(m, x, hiddens)[0].hiddens
    return x, new_h


def step_inverse_pullback(m: FlowModel, caches, g_x, g_hiddens, grads: FlowModel | None):
    """Cotangents of ``(v, hiddens_in)`` given those of ``(x_t, hiddens_out)``.

    ``g_hiddens`` entries may be None (output states unused).
    """
    g_xp = pad(g_x, m.config.d_total)
    g1, g2 = m.plan.apply(g_xp)
    g_h_in = [None] * m.n_hidden
    for i, block in enumerate(m.blocks):
        g1, g2, gha, ghb = block_inverse_pullback(
            block, caches[i], g1, g2, g_hiddens[2 * i], g_hiddens[2 * i + 1],
            grads.blocks[i] if grads is not None else None)
        g_h_in[2 * i], g_h_in[2 * i + 1] = gha, ghb
    return m.plan.merge(g1, g2), g_h_in


def _check_hiddens(m: FlowModel, hiddens):
    if len(hiddens) != m.n_hidden:
        raise ShapeError(f"expected {m.n_hidden} hidden states, got {len(hiddens)}")


# ---------------------------------------------------------------- sequences


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, d_x)
    covariates: np.ndarray  # (T, d_y)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.frames.ndim != 2 or self.covariates.ndim != 2:
            raise ShapeError("frames and covariates must be (T, width) arrays")
        if self.frames.shape[0] != self.covariates.shape[0] or self.frames.shape[0] < 1:
            raise ShapeError(
                f"frames ({self.frames.shape[0]}) and covariates ({self.covariates.shape[0]}) "
                "need the same T >= 1")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


def _frames_array(sample) -> np.ndarray:
    if isinstance(sample, SequenceSample):
        return sample.frames
    return np.asarray(sample, dtype=np.float64)


def sequence_forward(m: FlowModel, sample) -> list[StepResult]:
    """Thread zero-initialised hiddens through every frame.

    ``sample`` is a :class:`SequenceSample`, a ``(T, d_x)`` array or a
    batched ``(batch, T, d_x)`` array.
    """
    frames = _frames_array(sample)
    if frames.ndim not in (2, 3) or frames.shape[-2] < 1:
        raise ShapeError(f"expected (T, d_x) or (batch, T, d_x) frames, got {frames.shape}")
    batch = None if frames.ndim == 2 else frames.shape[0]
    hiddens = m.zero_hiddens(batch)
    out = []
    for t in range(frames.shape[-2]):
        res = step_forward(m, frames[..., t, :], hiddens)
        hiddens = res.hiddens
        out.append(res)
    return out


def sequence_inverse(m: FlowModel, steps: list[StepResult]) -> np.ndarray:
    """Reconstruct frames from each step's ``(y_hat, z, pad_out)``."""
    batch = None if steps[0].z.ndim == 1 else steps[0].z.shape[0]
    hiddens = m.zero_hiddens(batch)
    frames = []
    for st in steps:
        x, hiddens = step_inverse(m, st.y_hat, st.z, st.pad_out, hiddens)
        frames.append(x)
    return np.stack(frames, axis=-2)


def sequence_generate(m: FlowModel, covariates, rng: Rng, n: int | None = None,
                      z: np.ndarray | None = None) -> np.ndarray:
    """Generate frames conditioned on a covariate path.

    ``covariates`` is ``(T, d_y)`` (shared by all ``n`` samples) or
    ``(batch, T, d_y)``, in raw units (standardized here). Latents are drawn per sample and step from N(0, I)
    unless ``z`` (same leading shape, width ``d_z``) is given. Returns
    ``(T, d_x)`` when neither ``n`` nor a batch axis is present, otherwise
    ``(batch, T, d_x)``.
    """
    cfg = m.config
    cov = cfg.standardize_y(covariates)
    if cov.ndim == 2 and n is not None:
        cov = np.broadcast_to(cov, (n,) + cov.shape)
    if cov.shape[-1] != cfg.d_y or cov.shape[-2] < 1:
        raise ShapeError(f"covariates must be (..., T, {cfg.d_y}), got {cov.shape}")
    if z is None:
        z = rng.normal(cov.shape[:-1] + (cfg.d_z,))
    batch = None if cov.ndim == 2 else cov.shape[0]
    hiddens = m.zero_hiddens(batch)
    frames = []
    for t in range(cov.shape[-2]):
        x, hiddens = step_inverse(m, cov[..., t, :], z[..., t, :], None, hiddens)
        frames.append(x)
    return np.stack(frames, axis=-2)


# ---------------------------------------------------------------- density


def gaussian_log_pdf(x, sigma: float = 1.0) -> np.ndarray:
    """Exact log-density of N(0, sigma^2 I), summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[-1]
    return -0.5 * np.sum(x * x, axis=-1) / sigma**2 - k * (0.5 * LOG_2PI + math.log(sigma))


def log_density(step: StepResult, pad_sigma: float = 0.01):
    """``log N(z; 0, I) + log N(pad_out; 0, pad_sigma^2 I) + log|det J|``.

    The ``y`` channels carry no prior term: ``y`` is conditioned on.
    """
    return gaussian_log_pdf(step.z) + gaussian_log_pdf(step.pad_out, pad_sigma) + step.logdet


def sequence_log_density(m: FlowModel, sample) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ``(logdet, log_density)``, each shaped like the frames minus the width."""
    steps = sequence_forward(m, sample)
    logdet = np.stack([np.asarray(s.logdet, dtype=np.float64) for s in steps], axis=-1)
    dens = np.stack([log_density(s, m.config.pad_sigma) for s in steps], axis=-1)
    return logdet, dens
