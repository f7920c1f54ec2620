"""Desk-scale synthetic sequence datasets.

``moving_blob``: a two-class sprite (disk or cross, radius 2 with a Gaussian
intensity falloff) slides one column per step along the central row and
bounces off the side walls. Covariates are the one-hot class, constant over the sequence.

``regime``: two cohorts of ``d``-dimensional measurements. Control stays flat
with covariate 10 at every step; progress drifts ``k = ceil(d / 8)``
designated coordinates by ``+delta`` per step while its covariate climbs
10, 20, 30, ...
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from crow.flow import SequenceSample
from crow.numerics import Rng

BLOB_RADIUS = 2
BLOB_SIGMA = 2.0
CONTROL_SCORE = 10.0
SCORE_STEP = 10.0


@dataclass
class Dataset:
    frames: np.ndarray  # (N, T, d_x)
    covariates: np.ndarray  # (N, T, d_y)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.frames.ndim != 3 or self.covariates.ndim != 3:
            raise ValueError("frames and covariates must be (N, T, width) arrays")
        if self.frames.shape[:2] != self.covariates.shape[:2]:
            raise ValueError(f"frames {self.frames.shape} and covariates "
                             f"{self.covariates.shape} disagree on (N, T)")
        n, T, d_x = self.frames.shape
        self.meta = {**self.meta, "n": n, "T": T, "d_x": d_x, "d_y": self.covariates.shape[2]}
        self.meta.setdefault("kind", "custom")
        self.meta.setdefault("seed", 0)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def samples(self) -> list[SequenceSample]:
        return [SequenceSample(f, c) for f, c in zip(self.frames, self.covariates)]

    def subset(self, idx) -> "Dataset":
        meta = {k: v for k, v in self.meta.items() if k not in ("labels", "cohort")}
        for key in ("labels", "cohort"):
            if key in self.meta:
                meta[key] = [self.meta[key][i] for i in np.asarray(idx).tolist()]
        return Dataset(self.frames[idx], self.covariates[idx], meta)


def blob_template(shape: str, radius: int = BLOB_RADIUS, sigma: float = BLOB_SIGMA) -> np.ndarray:
    di, dj = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    r2 = di**2 + dj**2
    if shape == "disk":
        mask = r2 <= radius**2
    elif shape == "cross":
        mask = (di == 0) | (dj == 0)
    else:
        raise ValueError(f"unknown blob shape {shape!r}")
    return mask * np.exp(-r2 / (2.0 * sigma**2))


SHAPES = ("disk", "cross")


def blob_columns(start: int, T: int, cols: int, radius: int = BLOB_RADIUS) -> list[int]:
    """Centre columns: one step right per frame, reflecting at either wall."""
    lo, hi = radius, cols - 1 - radius
    c, direction = start, 1
    out = [c]
    for _ in range(T - 1):
        nxt = c + direction
        if nxt > hi or nxt < lo:
            direction = -direction
            nxt = c + direction
        c = nxt
        out.append(c)
    return out


def render_blob(shape: str, row: int, col: int, rows: int, cols: int) -> np.ndarray:
    frame = np.zeros((rows, cols))
    tpl = blob_template(shape)
    r = BLOB_RADIUS
    frame[row - r:row + r + 1, col - r:col + r + 1] = tpl
    return frame


def synth_moving_blob(n: int, T: int, grid=(12, 12), rng: Rng | None = None,
                      seed: int = 0, random_rows: bool = False) -> Dataset:
    """Two-class blob sequences translating one column per step.

    By default every blob travels along the central row; ``random_rows``
    draws the row per sequence instead (a much harder problem for the
    kernel losses, since shape differences are only visible between
    frames at the same position).
    """
    rows, cols = grid
    if rows < 8 or cols < 8:
        raise ValueError(f"grid {rows}x{cols} too small: blob needs at least 8x8")
    if T < 2:
        raise ValueError("T must be >= 2")
    if rng is None:
        rng = Rng(seed)
    r = BLOB_RADIUS
    labels = rng.integers(0, 2, n)
    start_cols = rng.integers(r, cols - r, n)
    start_rows = rng.integers(r, rows - r, n) if random_rows else np.full(n, rows // 2)
    frames = np.zeros((n, T, rows * cols))
    covs = np.zeros((n, T, 2))
    for i in range(n):
        shape = SHAPES[labels[i]]
        for t, c in enumerate(blob_columns(int(start_cols[i]), T, cols)):
            frames[i, t] = render_blob(shape, int(start_rows[i]), c, rows, cols).ravel()
        covs[i, :, labels[i]] = 1.0
    meta = {"kind": "blob", "seed": rng.seed, "rows": rows, "cols": cols,
            "random_rows": bool(random_rows), "labels": labels.tolist()}
    return Dataset(frames, covs, meta)


def regime_covariates(T: int, progress: bool) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    path = CONTROL_SCORE + (SCORE_STEP * t if progress else 0.0 * t)
    return path[:, None]


def synth_regime(n: int, T: int, d: int, rng: Rng | None = None, seed: int = 0,
                 delta: float = 0.5, noise: float = 0.1) -> Dataset:
    if d < 4:
        raise ValueError("d must be >= 4")
    if T < 2:
        raise ValueError("T must be >= 2")
    if rng is None:
        rng = Rng(seed)
    k = math.ceil(d / 8)
    baseline = 1.0 + 0.5 * rng.uniform(d)
    drift = np.sort(rng.permutation(d)[:k])
    cohort = np.arange(n) % 2  # 0 control, 1 progress
    t = np.arange(T, dtype=np.float64)
    frames = baseline + noise * rng.normal((n, T, d))
    frames[np.ix_(cohort == 1, np.arange(T), drift)] += delta * t[None, :, None]
    covs = np.stack([regime_covariates(T, bool(c)) for c in cohort])
    meta = {"kind": "regime", "seed": rng.seed, "delta": delta, "noise": noise,
            "drift_coords": drift.tolist(), "baseline": baseline.tolist(),
            "cohort": cohort.tolist()}
    return Dataset(frames, covs, meta)
