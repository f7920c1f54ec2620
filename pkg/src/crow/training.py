"""Bidirectional training: MMD losses, label/pad losses and the Adam loop.

Per mini-batch of sequences the objective is::

    w_Z * sum_t MMD([y_hat_t | z_t], [y_t | N(0, I)])
  + w_Y * sum_t MSE(y_hat_t, y_t)
  + w_X * mean_t MMD(x_rec_t, x_t)
  + w_P * sum_t mean(pad_out_t ** 2)

where ``x_rec_t`` inverts ``[y_t | z~N(0, I) | 0]`` using the hidden states of
the forward pass over the real batch at ``t - 1``. Gradients flow through the
whole graph, including both hidden-state chains (full BPTT, no truncation).

With ``x_joint`` set, the loss_X samples are ``[x_rec_t | y_t]`` and
``[x_t | y_t]``: the kernel then compares generated and real frames mainly
within the same condition, a conditional rather than marginal match.

MMD is the biased V-statistic with the inverse multiquadratic kernel
``alpha / (alpha + |a - b|^2)`` summed over several ``alpha`` scales.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from crow.errors import InvertibilityError, NonFiniteError, ShapeError, TrainingDiverged
from crow.flow import (
    FlowModel,
    StepResult,
    assemble_v,
    sequence_forward,
    sequence_inverse,
    step_forward_cached,
    step_forward_pullback,
    step_inverse_cached,
    step_inverse_pullback,
)
from crow.nets import Adam, copy_tree, named_parameters, zeros_like_tree
from crow.numerics import Rng

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.2, 0.5, 0.8, 1.0, 1.2)


@dataclass
class MmdConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ValueError("MMD scales must be positive")


@dataclass
class TrainConfig:
    batch: int = 128
    epochs: int = 10
    max_steps: int | None = None
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_z: float = 1.0
    w_y: float = 1.0
    w_x: float = 1.0
    w_p: float = 1.0
    seed: int = 0
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    roundtrip_check: int = 8  # sequences spot-checked for invertibility after each epoch
    x_joint: bool = False  # loss_X over [x | y] instead of x alone

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (MMD needs pairs)")
        if min(self.w_z, self.w_y, self.w_x, self.w_p) < 0:
            raise ValueError("loss weights must be non-negative")
        self.alphas = tuple(self.alphas)

    @property
    def mmd(self) -> MmdConfig:
        return MmdConfig(self.alphas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------- kernels / MMD


def imq_kernel(a, b, alpha: float) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"imq_kernel: widths differ, {a.shape} vs {b.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d2 = float(np.sum((a - b) ** 2))
    return alpha / (alpha + d2)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _self_sqdist(a: np.ndarray) -> np.ndarray:
    d2 = _sqdist(a, a)
    np.fill_diagonal(d2, 0.0)
    return d2


def _cross_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # evaluate in a canonical operand order so D(a, b) is bit-identical to D(b, a).T
    if (a.shape, a.tobytes()) <= (b.shape, b.tobytes()):
        return _sqdist(a, b)
    return _sqdist(b, a).T


def _kernel_sums(d2: np.ndarray, alphas):
    k = np.zeros_like(d2)
    dk = np.zeros_like(d2)
    for alpha in alphas:
        ki = alpha / (alpha + d2)
        k += ki
        dk -= ki * ki / alpha  # d/dD of alpha / (alpha + D)
    return k, dk


def _as_samples(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"{name}: need a non-empty (n, width) sample set, got {x.shape}")
    return x


def mmd2_and_grad(A, B, alphas=DEFAULT_ALPHAS, need_grad: bool = True):
    """Biased multi-scale IMQ MMD^2 and its gradients w.r.t. both sample sets."""
    A, B = _as_samples(A, "mmd2"), _as_samples(B, "mmd2")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"mmd2: sample widths differ, {A.shape} vs {B.shape}")
    n, m = A.shape[0], B.shape[0]
    kaa, waa = _kernel_sums(_self_sqdist(A), alphas)
    kbb, wbb = _kernel_sums(_self_sqdist(B), alphas)
    kab, wab = _kernel_sums(_cross_sqdist(A, B), alphas)
    # symmetric in (A, B) to the last bit: cross term summed in both orders
    cross = 0.5 * (np.sum(kab) + np.sum(kab.T)) / (n * m)
    value = (np.sum(kaa) / (n * n) + np.sum(kbb) / (m * m)) - 2.0 * cross
    if not need_grad:
        return float(value), None, None
    g_a = (4.0 / (n * n)) * (waa.sum(axis=1)[:, None] * A - waa @ A) \
        - (4.0 / (n * m)) * (wab.sum(axis=1)[:, None] * A - wab @ B)
    g_b = (4.0 / (m * m)) * (wbb.sum(axis=1)[:, None] * B - wbb @ B) \
        - (4.0 / (n * m)) * (wab.sum(axis=0)[:, None] * B - wab.T @ A)
    return float(value), g_a, g_b


def mmd2(A, B, cfg: MmdConfig | None = None) -> float:
    alphas = (cfg or MmdConfig()).alphas
    return mmd2_and_grad(A, B, alphas, need_grad=False)[0]


# ---------------------------------------------------------------- individual losses


def _need_pairs(n: int):
    if n < 2:
        raise ShapeError(f"batch of {n}: MMD losses need at least 2 samples")


def loss_Z(y_hat, z, y_gt, rng: Rng | None = None, cfg: MmdConfig | None = None,
           z_prior: np.ndarray | None = None) -> float:
    """MMD between network samples ``[y_hat | z]`` and counterparts ``[y_gt | N(0, I)]``."""
    y_hat, z, y_gt = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (y_hat, z, y_gt))
    _need_pairs(z.shape[0])
    if z_prior is None:
        z_prior = (rng or Rng(0)).normal(z.shape)
    return mmd2(np.concatenate([y_hat, z], 1), np.concatenate([y_gt, z_prior], 1), cfg)


def loss_Y(y_hat, y_gt) -> float:
    y_hat, y_gt = np.asarray(y_hat, dtype=np.float64), np.asarray(y_gt, dtype=np.float64)
    if y_hat.shape != y_gt.shape:
        raise ShapeError(f"loss_Y: {y_hat.shape} vs {y_gt.shape}")
    return float(np.mean((y_hat - y_gt) ** 2))


def pad_penalty(step: StepResult | np.ndarray) -> float:
    pad_out = step.pad_out if isinstance(step, StepResult) else np.asarray(step)
    if pad_out.size == 0:
        return 0.0
    return float(np.mean(pad_out ** 2))


def loss_X(model: FlowModel, frames, covariates, rng: Rng | None = None,
           cfg: MmdConfig | None = None, z_samples: np.ndarray | None = None,
           joint: bool = False) -> float:
    """Mean over steps of MMD(inverse-mapped ``[y | z~N | 0]``, real frames)."""
    frames = np.asarray(frames, dtype=np.float64)
    covariates = np.asarray(covariates, dtype=np.float64)
    _need_pairs(frames.shape[0])
    B, T, _ = frames.shape
    if z_samples is None:
        z_samples = (rng or Rng(0)).normal((T, B, model.config.d_z))
    hiddens = model.zero_hiddens(B)
    total = 0.0
    for t in range(T):
        v = assemble_v(model, covariates[:, t], z_samples[t])
        x_rec, _, _ = step_inverse_cached(model, v, hiddens)
        if joint:
            total += mmd2(np.concatenate([x_rec, covariates[:, t]], 1),
                          np.concatenate([frames[:, t], covariates[:, t]], 1), cfg)
        else:
            total += mmd2(x_rec, frames[:, t], cfg)
        hiddens = step_forward_cached(model, frames[:, t], hiddens)[0].hiddens
    return total / T


# ---------------------------------------------------------------- full objective


@dataclass
class LossParts:
    loss_Z: float = 0.0
    loss_Y: float = 0.0
    loss_X: float = 0.0
    pad: float = 0.0
    total: float = 0.0


def batch_objective(model: FlowModel, frames, covariates, z_prior, z_gen, cfg: TrainConfig,
                    grads: FlowModel | None = None) -> LossParts:
    """Evaluate the training objective on one batch, accumulating gradients into ``grads``.

    ``frames``: (B, T, d_x); ``covariates``: (B, T, d_y); ``z_prior`` and
    ``z_gen``: (T, B, d_z) standard-normal draws for the loss_Z counterparts and
    the loss_X inverse pass. Passing fixed draws makes the objective a
    deterministic function of the parameters.
    """
    mc = model.config
    B, T, _ = frames.shape
    _need_pairs(B)
    d_y, d_z = mc.d_y, mc.d_z
    use_x = cfg.w_x > 0
    parts = LossParts()

    hiddens = [model.zero_hiddens(B)]
    fwd_caches, g_vs, inv_caches, g_xrecs = [], [], [], []
    for t in range(T):
        x_t, y_t = frames[:, t], covariates[:, t]
        h_prev = hiddens[-1]
        res, caches = step_forward_cached(model, x_t, h_prev)
        hiddens.append(res.hiddens)
        fwd_caches.append(caches)

        yz = np.concatenate([res.y_hat, res.z], axis=1)
        lz, g_yz, _ = mmd2_and_grad(yz, np.concatenate([y_t, z_prior[t]], axis=1),
                                    cfg.alphas, need_grad=grads is not None)
        diff = res.y_hat - y_t
        ly = float(np.mean(diff ** 2)) if d_y else 0.0
        lp = float(np.mean(res.pad_out ** 2)) if mc.d_pad else 0.0
        parts.loss_Z += lz
        parts.loss_Y += ly
        parts.pad += lp
        if grads is not None:
            g_v = np.empty((B, mc.d_total))
            g_v[:, :d_y + d_z] = cfg.w_z * g_yz
            if d_y:
                g_v[:, :d_y] += cfg.w_y * 2.0 * diff / diff.size
            if mc.d_pad:
                g_v[:, d_y + d_z:] = cfg.w_p * 2.0 * res.pad_out / res.pad_out.size
            g_vs.append(g_v)

        if use_x:
            v = assemble_v(model, y_t, z_gen[t])
            x_rec, _, icache = step_inverse_cached(model, v, h_prev)
            if cfg.x_joint:
                lx, g_xrec, _ = mmd2_and_grad(np.concatenate([x_rec, y_t], 1),
                                              np.concatenate([x_t, y_t], 1),
                                              cfg.alphas, need_grad=grads is not None)
                g_xrec = None if g_xrec is None else g_xrec[:, :mc.d_x]
            else:
                lx, g_xrec, _ = mmd2_and_grad(x_rec, x_t, cfg.alphas, need_grad=grads is not None)
            parts.loss_X += lx / T
            inv_caches.append(icache)
            g_xrecs.append(cfg.w_x * g_xrec / T if grads is not None else None)

    parts.total = (cfg.w_z * parts.loss_Z + cfg.w_y * parts.loss_Y
                   + cfg.w_x * parts.loss_X + cfg.w_p * parts.pad)

    if grads is not None:
        g_h = [np.zeros_like(h) for h in hiddens[-1]]
        zero_ld = np.zeros(B)
        for t in reversed(range(T)):
            _, g_h = step_forward_pullback(model, fwd_caches[t], g_vs[t], g_h, zero_ld, grads)
            if use_x:
                _, g_h_inv = step_inverse_pullback(
                    model, inv_caches[t], g_xrecs[t], [None] * model.n_hidden, grads)
                g_h = [a + b for a, b in zip(g_h, g_h_inv)]
    return parts


def grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in named_parameters(grads)))


# ---------------------------------------------------------------- loop


METRIC_FIELDS = ("epoch", "loss_Z", "loss_Y", "loss_X", "pad", "grad_norm")


def roundtrip_error(model: FlowModel, frames) -> float:
    steps = sequence_forward(model, frames)
    return float(np.max(np.abs(sequence_inverse(model, steps) - frames)))


def train(model: FlowModel, dataset, cfg: TrainConfig, rng: Rng | None = None,
          step_callback: Callable[[int, LossParts, float], None] | None = None,
          checkpoint: Callable[[FlowModel, int], object] | None = None):
    """Train in place; returns ``(model, per-epoch metric dicts)``.

    ``dataset`` exposes ``frames`` (N, T, d_x) and ``covariates`` (N, T, d_y);
    covariates are standardized with the model's ``y_shift``/``y_scale``.
    ``checkpoint(model, epoch)`` is called after every finished epoch and may
    return a reference (e.g. a file path) reported if training later diverges.
    """
    rng = rng if rng is not None else Rng(cfg.seed)
    frames = np.asarray(dataset.frames, dtype=np.float64)
    covs = np.asarray(dataset.covariates, dtype=np.float64)
    N, T, _ = frames.shape
    if N < 2:
        raise ShapeError("training needs at least 2 sequences")
    mc = model.config
    if frames.shape[2] != mc.d_x or covs.shape[2] != mc.d_y:
        raise ShapeError(f"dataset dims ({frames.shape[2]}, {covs.shape[2]}) "
                         f"do not match model ({mc.d_x}, {mc.d_y})")
    covs = mc.standardize_y(covs)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    batch = min(cfg.batch, N)
    last_good = checkpoint(model, 0) if checkpoint else copy_tree(model.blocks)
    metrics = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        sums = dict(loss_Z=0.0, loss_Y=0.0, loss_X=0.0, pad=0.0, grad_norm=0.0)
        n_batches = 0
        for start in range(0, N - batch + 1, batch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + batch]
            z_prior = rng.normal((T, batch, mc.d_z))
            z_gen = rng.normal((T, batch, mc.d_z)) if cfg.w_x > 0 else None
            grads = zeros_like_tree(model)
            try:
                parts = batch_objective(model, frames[idx], covs[idx], z_prior, z_gen, cfg, grads)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", step, last_good) from exc
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"step {step}: loss is {parts.total}", step, last_good)
            gn = grad_norm(grads)
            try:
                opt.step(model.blocks, grads.blocks)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", step, last_good) from exc
            step += 1
            n_batches += 1
            for k in ("loss_Z", "loss_Y", "loss_X", "pad"):
                sums[k] += getattr(parts, k)
            sums["grad_norm"] += gn
            if step_callback is not None:
                step_callback(step, parts, gn)
        if n_batches == 0:
            break
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if cfg.roundtrip_check:
            err = roundtrip_error(model, frames[: cfg.roundtrip_check])
            if err >= 1e-8:
                raise InvertibilityError(f"epoch {epoch}: round-trip error {err:.3g} >= 1e-8")
        metrics.append(row)
        log.info("epoch %d: %s", epoch, ", ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
        last_good = checkpoint(model, epoch) if checkpoint else copy_tree(model.blocks)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return model, metrics


def write_metrics_csv(metrics: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in metrics:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
