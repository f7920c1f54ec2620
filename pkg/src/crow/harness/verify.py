"""Invariant and oracle checks behind ``crow verify``.

Each check returns a :class:`Check` (name, passed, detail). The parameters
default to sizes that keep the whole suite well under a minute; the
acceptance tests call the same functions at full scale.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from crow.coupling import CouplingLayer, layer_forward
from crow.flow import (FlowConfig, FlowModel, Split, _blocks_forward, random_model,
                       sequence_forward, sequence_inverse)
from crow.harness.io import dataset_from_bytes, dataset_to_bytes, model_from_bytes, model_to_bytes
from crow.harness.stats import group_analysis
from crow.harness.synth import synth_moving_blob, synth_regime
from crow.nets import flatten, unflatten_into, zeros_like_tree
from crow.numerics import (Rng, finite_difference_gradient, finite_difference_jacobian,
                           lu_log_abs_det)
from crow.training import TrainConfig, batch_objective, imq_kernel, mmd2


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, *args, **kw) -> Check:
    t0 = time.perf_counter()
    try:
        passed, detail = fn(*args, **kw)
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return Check(name, bool(passed), detail, time.perf_counter() - t0)


def small_config(d_total: int, seed: int = 0, n_blocks: int = 3, hidden: int = 8,
                 d_x: int | None = None, d_y: int = 2, d_z: int = 3) -> FlowConfig:
    d_x = d_total if d_x is None else d_x
    return FlowConfig(d_x=d_x, d_y=d_y, d_z=d_z, d_total=d_total, n_blocks=n_blocks,
                      hidden=hidden, split=Split("halves"), seed=seed)


# ---------------------------------------------------------------- checks


def check_rng_moments(seed: int = 7, n: int = 100_000):
    x = Rng(seed).normal(n)
    mean, var = float(x.mean()), float(x.var())
    ok = -0.02 < mean < 0.02 and 0.97 < var < 1.03
    return ok, f"mean {mean:.4f}, var {var:.4f}"


def check_invertibility(n_pairs: int = 40, d_totals=(12, 64), Ts=(1, 6), seed: int = 0,
                        batch: int = 1, hidden: int = 8):
    """Forward then inverse over whole sequences of random models."""
    rng = Rng(seed)
    worst = {}
    ok = True
    combos = [(d, T) for d in d_totals for T in Ts]
    for k in range(n_pairs):
        d, T = combos[k % len(combos)]
        cfg = small_config(d, seed=k, hidden=hidden, d_x=d - d // 8, d_z=max(1, d // 4))
        m = random_model(cfg, rng.spawn(k))
        x = rng.normal((batch, T, cfg.d_x))
        err = float(np.max(np.abs(sequence_inverse(m, sequence_forward(m, x)) - x)))
        tol = 1e-8 if d >= 512 else 1e-9
        worst[d] = max(worst.get(d, 0.0), err)
        ok &= err < tol
    detail = ", ".join(f"d_total={d}: max err {e:.2e}" for d, e in sorted(worst.items()))
    return ok, f"{n_pairs} pairs; {detail}"


def _step_map(m, hiddens):
    return lambda u: _blocks_forward(m, u, hiddens)[0]


def _smooth_point_jacobian(f, draw, attempts: int = 8):
    """FD Jacobian at a point whose stencil does not straddle a ReLU kink.

    The residual trunk makes the step map only piecewise smooth, and a
    central difference across a kink is not a derivative at all. Two step
    sizes agree at a smooth point; if they do not, the point is redrawn.
    Returns ``(u, J, redraws)``.
    """
    for k in range(attempts):
        u = draw()
        j1 = finite_difference_jacobian(f, u, 1e-6)
        j2 = finite_difference_jacobian(f, u, 5e-7)
        if np.max(np.abs(j1 - j2)) <= 1e-6 * (1.0 + np.max(np.abs(j1))):
            return u, j1, k
    raise RuntimeError(f"no kink-free point found in {attempts} draws")


def check_jacobian_logdet(n_models: int = 10, d_total: int = 12, seed: int = 1, tol: float = 1e-4):
    """Analytic per-step log|det| (gates included) vs LU of a finite-difference Jacobian."""
    rng = Rng(seed)
    worst = 0.0
    redraws = 0
    for k in range(n_models):
        cfg = small_config(d_total, seed=k)
        m = random_model(cfg, rng.spawn(k))
        hiddens = [0.5 * rng.normal(cfg.hidden) for _ in range(m.n_hidden)]
        u, jac, k = _smooth_point_jacobian(_step_map(m, hiddens), lambda: rng.normal(d_total))
        redraws += k
        _, logdet, _, _ = _blocks_forward(m, u, hiddens)
        sign, oracle = lu_log_abs_det(jac)
        worst = max(worst, abs(float(logdet) - oracle) if sign else np.inf)
    return worst < tol, (f"{n_models} models, max |analytic - LU(FD)| = {worst:.2e}"
                         f" ({redraws} kink redraws)")


def check_zero_block(n_layers: int = 10, seed: int = 2, tol: float = 1e-8):
    """A coupling layer's gated conditioning output does not depend on its target input."""
    rng = Rng(seed)
    worst = 0.0
    for k in range(n_layers):
        d_c, d_t, hid = 5, 7, 6
        layer = CouplingLayer.init(rng.spawn(k), d_c, d_t, hid, 2.0, 0.0)
        for a in (layer.subnet.head.weight, layer.subnet.head.bias):
            a[...] = 0.3 * rng.normal(a.shape)
        cond, h = rng.normal(d_c), rng.normal(hid)

        def cond_out(target):
            return layer_forward(layer, cond, target, h)[1]

        jac = finite_difference_jacobian(cond_out, rng.normal(d_t))
        worst = max(worst, float(np.max(np.abs(jac))))
    return worst < tol, f"max |d cond_out / d target| = {worst:.2e}"


def check_chaining(n_models: int = 5, d_total: int = 12, seed: int = 3, tol: float = 1e-4):
    """Sum of per-block log-dets equals the LU log-det of the composed step map."""
    rng = Rng(seed)
    worst = 0.0
    redraws = 0
    for k in range(n_models):
        cfg = small_config(d_total, seed=k)
        m = random_model(cfg, rng.spawn(k))
        hiddens = [0.5 * rng.normal(cfg.hidden) for _ in range(m.n_hidden)]
        u, jac, k = _smooth_point_jacobian(_step_map(m, hiddens), lambda: rng.normal(d_total))
        redraws += k
        # per-block log-dets from single-block models sharing the parameters
        total = 0.0
        x = u
        for i, block in enumerate(m.blocks):
            sub = FlowModel(replace(cfg, n_blocks=1), [block])
            h_i = hiddens[2 * i:2 * i + 2]
            v, ld, _, _ = _blocks_forward(sub, x, h_i)
            total += float(ld)
            x = v
        _, composed = lu_log_abs_det(jac)
        worst = max(worst, abs(total - composed))
    return worst < tol, f"max |sum_block - composed| = {worst:.2e} ({redraws} kink redraws)"


def gradient_problem(seed: int = 4, d_total: int = 12, T: int = 3, batch: int = 4,
                     hidden: int = 6, x_joint: bool = False):
    """A 1-block model plus a fixed batch; returns (model, loss(theta), analytic grad)."""
    rng = Rng(seed)
    cfg = small_config(d_total, seed=seed, n_blocks=1, hidden=hidden, d_x=10, d_z=3)
    m = random_model(cfg, rng.spawn(1), scale=0.5)
    frames = rng.normal((batch, T, cfg.d_x))
    covs = rng.normal((batch, T, cfg.d_y))
    z_prior, z_gen = rng.normal((T, batch, cfg.d_z)), rng.normal((T, batch, cfg.d_z))
    tc = TrainConfig(batch=batch, x_joint=x_joint)
    grads = zeros_like_tree(m)
    batch_objective(m, frames, covs, z_prior, z_gen, tc, grads)
    theta0 = flatten(m.blocks)

    def loss(theta):
        unflatten_into(m.blocks, theta)
        try:
            return batch_objective(m, frames, covs, z_prior, z_gen, tc).total
        finally:
            unflatten_into(m.blocks, theta0)

    return m, loss, theta0, flatten(grads.blocks)


def check_gradient(tol: float = 1e-4, **kw):
    _, loss, theta0, analytic = gradient_problem(**kw)
    fd = finite_difference_gradient(loss, theta0)
    rel = float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic), np.linalg.norm(fd)))
    return rel < tol, f"{theta0.size} parameters, relative L2 error {rel:.2e}"


def check_mmd(n_pairs: int = 100, seed: int = 5):
    rng = Rng(seed)
    S = rng.normal((50, 4))
    self_val = mmd2(S, S)
    # half the pairs share a distribution, where the estimate sits closest to zero
    worst_neg = min(mmd2(rng.normal((20, 3)), 0.5 * (k % 2) + rng.normal((25, 3)))
                    for k in range(n_pairs))
    kernel_ok = all(imq_kernel(a, a, al) == 1.0 for a in rng.normal((5, 6)) for al in (0.2, 1.2))
    A, B = rng.normal((30, 3)), rng.normal((40, 3)) + 1.0
    sym = mmd2(A, B) == mmd2(B, A)
    ok = abs(self_val) < 1e-12 and worst_neg >= -1e-12 and kernel_ok and sym
    return ok, (f"mmd2(S,S)={self_val:.1e}, min over {n_pairs} pairs {worst_neg:.3g}, "
                f"k(a,a)==1: {kernel_ok}, symmetric: {sym}")


def check_serialization(seed: int = 6):
    rng = Rng(seed)
    m = random_model(small_config(12, seed=seed), rng)
    m2 = model_from_bytes(model_to_bytes(m))
    model_ok = np.array_equal(flatten(m.blocks), flatten(m2.blocks)) and m2.config == m.config
    ds = synth_regime(6, 3, 10, seed=seed)
    ds2 = dataset_from_bytes(dataset_to_bytes(ds))
    ds_ok = (ds.frames.tobytes() == ds2.frames.tobytes()
             and ds.covariates.tobytes() == ds2.covariates.tobytes() and ds.meta == ds2.meta)
    return model_ok and ds_ok, f"model bit-exact: {model_ok}, dataset bit-exact: {ds_ok}"


def check_synth_determinism(seed: int = 8):
    a = dataset_to_bytes(synth_moving_blob(20, 6, seed=seed))
    b = dataset_to_bytes(synth_moving_blob(20, 6, seed=seed))
    c = dataset_to_bytes(synth_regime(20, 3, 16, seed=seed))
    d = dataset_to_bytes(synth_regime(20, 3, 16, seed=seed))
    return a == b and c == d, "same seed gives byte-identical datasets"


def check_group_analysis(seed: int = 9):
    rng = Rng(seed)
    a = rng.normal((20, 5))
    same = group_analysis(a, a.copy())
    same_ok = not same.significant.any() and np.all(same.p_corrected == 1.0) and np.all(same.t == 0)
    sep = group_analysis(rng.normal((100, 1)), 5.0 + rng.normal((100, 1)))
    return same_ok and bool(sep.significant[0]), \
        f"identical groups unflagged: {same_ok}, 5-sigma shift flagged: {bool(sep.significant[0])}"


def check_config_model(cfg: FlowConfig, seed: int = 10, T: int = 3):
    """Round trip and log-det finiteness for a random model with a user-supplied config."""
    rng = Rng(seed)
    m = random_model(cfg, rng)
    x = rng.normal((2, T, cfg.d_x))
    steps = sequence_forward(m, x)
    err = float(np.max(np.abs(sequence_inverse(m, steps) - x)))
    tol = 1e-8 if cfg.d_total >= 512 else 1e-9
    finite = all(np.all(np.isfinite(s.logdet)) for s in steps)
    return err < tol and finite, f"d_total={cfg.d_total}: round-trip err {err:.2e}, finite logdet {finite}"


def run_all(config: FlowConfig | None = None, seed: int = 0) -> list[Check]:
    checks = [
        _timed("rng normal moments", check_rng_moments),
        _timed("invertibility", check_invertibility, seed=seed),
        _timed("jacobian log-det vs LU oracle", check_jacobian_logdet, seed=seed + 1),
        _timed("triangular zero block", check_zero_block, seed=seed + 2),
        _timed("determinant chaining", check_chaining, seed=seed + 3),
        _timed("total-loss gradient vs central differences", check_gradient, seed=seed + 4),
        _timed("mmd properties", check_mmd, seed=seed + 5),
        _timed("serialization round trip", check_serialization, seed=seed + 6),
        _timed("synth determinism", check_synth_determinism, seed=seed + 8),
        _timed("group analysis sanity", check_group_analysis, seed=seed + 9),
    ]
    if config is not None:
        checks.append(_timed("config model round trip", check_config_model, config, seed=seed + 10))
    return checks
