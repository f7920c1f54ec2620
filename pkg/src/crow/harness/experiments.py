"""End-to-end toy experiments: blob conditional generation and regime group analysis.

The blob classifier is nearest-centroid on peak-centred patches. Raw pixel
centroids mostly encode position rather than shape (the two sprites differ
in only a few pixels while positions vary across the grid), so each frame is
first rolled so its blob sits at the grid centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crow.flow import FlowConfig, FlowModel, Split, init_model, sequence_generate, \
    sequence_log_density
from crow.harness.stats import group_analysis
from crow.harness.synth import BLOB_RADIUS, SHAPES, Dataset, blob_columns, regime_covariates, \
    render_blob, synth_moving_blob, synth_regime
from crow.numerics import Rng
from crow.training import TrainConfig, train


def centre_frames(frames: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Roll each frame so the peak of its 3x3 box-filtered intensity sits at the grid centre.

    The peak is far less sensitive to background noise than the centre of mass.
    """
    f = np.asarray(frames, dtype=np.float64).reshape(-1, rows, cols)
    box = sum(np.roll(f, (a, b), axis=(1, 2)) for a in (-1, 0, 1) for b in (-1, 0, 1))
    peak = box.reshape(f.shape[0], -1).argmax(axis=1)
    out = np.empty_like(f)
    for k, p in enumerate(peak):
        out[k] = np.roll(f[k], (rows // 2 - p // cols, cols // 2 - p % cols), axis=(0, 1))
    return out


def _windows(centred: np.ndarray, win: int) -> np.ndarray:
    """(n, 9, (2*win+1)**2) patches around the centre for every +-1 pixel offset."""
    rows, cols = centred.shape[1:]
    r0, c0 = rows // 2 - win, cols // 2 - win
    side = 2 * win + 1
    out = [np.roll(centred, (a, b), axis=(1, 2))[:, r0:r0 + side, c0:c0 + side].reshape(len(centred), -1)
           for a in (-1, 0, 1) for b in (-1, 0, 1)]
    return np.stack(out, axis=1)


@dataclass
class CentroidClassifier:
    """Nearest class centroid on blob-centred patches.

    Frames are aligned on their peak, so the centroid captures shape rather
    than position; at prediction time each class distance is the minimum
    over +-1 pixel re-alignments, which absorbs peak jitter in noisy frames.
    """
    rows: int
    cols: int
    win: int = 2
    centroids: np.ndarray = field(default=None)

    def _patches(self, frames):
        return _windows(centre_frames(np.asarray(frames).reshape(-1, self.rows * self.cols),
                                      self.rows, self.cols), self.win)

    def fit(self, frames, labels) -> "CentroidClassifier":
        x = self._patches(frames)[:, 4]  # zero offset
        labels = np.asarray(labels)
        self.centroids = np.stack([x[labels == c].mean(axis=0) for c in np.unique(labels)])
        return self

    def predict(self, frames) -> np.ndarray:
        shape = np.shape(frames)[:-1]
        w = self._patches(frames)
        d2 = ((w[:, :, None, :] - self.centroids[None, None]) ** 2).sum(axis=-1).min(axis=1)
        return d2.argmin(axis=1).reshape(shape)


def fit_blob_classifier(ds: Dataset) -> CentroidClassifier:
    rows, cols = ds.meta["rows"], ds.meta["cols"]
    labels = np.repeat(np.asarray(ds.meta["labels"]), ds.frames.shape[1])
    return CentroidClassifier(rows, cols).fit(ds.frames.reshape(-1, rows * cols), labels)


def one_hot_path(labels, d_y: int = 2) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, d_y))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------- blob


BLOB_FLOW = dict(d_x=144, d_y=2, d_z=8, d_total=152, n_blocks=3, hidden=32)
BLOB_TRAIN = dict(batch=64, max_steps=5000, epochs=1000, lr=5e-4, x_joint=True)


def blob_config(hidden: int = BLOB_FLOW["hidden"], seed: int = 0) -> FlowConfig:
    kw = {**BLOB_FLOW, "hidden": hidden}
    return FlowConfig(split=Split("checkerboard", 12, 12), seed=seed, **kw)


def train_blob(n: int = 2000, T: int = 6, seed: int = 1, flow: FlowConfig | None = None,
               tcfg: TrainConfig | None = None, step_callback=None):
    ds = synth_moving_blob(n, T, (12, 12), seed=seed)
    flow = flow or blob_config()
    tcfg = tcfg or TrainConfig(seed=seed, **BLOB_TRAIN)
    model = init_model(flow, Rng(flow.seed))
    model, metrics = train(model, ds, tcfg, Rng(tcfg.seed).spawn(1), step_callback=step_callback)
    return model, ds, metrics


def class_accuracy(model: FlowModel, clf: CentroidClassifier, T: int = 6, n: int = 200,
                   seed: int = 0, t_min: int = 2) -> float:
    """Fraction of generated frames at 1-based t >= t_min classified as the conditioned class."""
    rng = Rng(seed)
    hits = total = 0
    for label in (0, 1):
        frames = sequence_generate(model, one_hot_path([label] * T), rng, n=n)
        pred = clf.predict(frames[:, t_min - 1:])
        hits += int(np.count_nonzero(pred == label))
        total += pred.size
    return hits / total


def flip_paths(T: int, flip: int, first: int):
    """(control, flipped) one-hot paths; ``flip`` is the 1-based first step with the new label."""
    control = [first] * T
    flipped = [first] * (flip - 1) + [1 - first] * (T - flip + 1)
    return one_hot_path(control), one_hot_path(flipped)


def flip_switch(model: FlowModel, clf: CentroidClassifier, T: int = 6, flip: int = 4,
                n: int = 100, seed: int = 0, within: int = 2):
    """Fraction of flipped generations whose majority-class assignment switches by ``flip + within``.

    Per sample: the classifier must read the new class at some step in
    ``[flip, flip + within]`` (1-based, capped at T). Also returns per-step
    fractions of frames assigned the new class, averaged over both directions.
    """
    rng = Rng(seed)
    ok = 0
    per_step = np.zeros(T)
    for first in (0, 1):
        _, path = flip_paths(T, flip, first)
        frames = sequence_generate(model, path, rng, n=n)
        pred = clf.predict(frames)
        new = pred == 1 - first
        window = new[:, flip - 1:min(T, flip + within)]
        ok += int(np.count_nonzero(window.any(axis=1)))
        per_step += new.mean(axis=0) / 2
    return ok / (2 * n), per_step


def density_dip(model: FlowModel, T: int = 6, flip: int = 4, trials: int = 50, seed: int = 0):
    """Paired trials: same latents, flipped vs unflipped covariates.

    A trial counts as a dip when the flipped sequence's log-density at the
    flip step is below the control's at that step. Returns the dip fraction
    and the mean per-step density gap (flipped minus control).
    """
    rng = Rng(seed)
    cfg = model.config
    dips = 0
    gaps = np.zeros(T)
    for k in range(trials):
        first = k % 2
        control, flipped = flip_paths(T, flip, first)
        z = rng.normal((T, cfg.d_z))
        x_c = sequence_generate(model, control, rng, z=z)
        x_f = sequence_generate(model, flipped, rng, z=z)
        _, d_c = sequence_log_density(model, x_c)
        _, d_f = sequence_log_density(model, x_f)
        gap = d_f - d_c
        gaps += gap / trials
        dips += int(gap[flip - 1] < 0)
    return dips / trials, gaps


def switched_sequence_dip(model: FlowModel, rows: int = 12, cols: int = 12, T: int = 6,
                          flip: int = 4, trials: int = 50, seed: int = 0):
    """Density dip on rendered (not generated) sequences whose shape switches at ``flip``.

    Each trial pairs a clean single-shape sequence with the same trajectory
    whose shape changes mid-sequence. Unlike :func:`density_dip`, the latents
    and pad channels of the two frames differ, so the comparison is not
    reduced to a log-determinant difference.
    """
    rng = Rng(seed)
    starts = rng.integers(BLOB_RADIUS, cols - BLOB_RADIUS, trials)
    dips = 0
    gaps = np.zeros(T)
    for k in range(trials):
        first = k % 2
        path = blob_columns(int(starts[k]), T, cols)
        ctl = np.stack([render_blob(SHAPES[first], rows // 2, c, rows, cols).ravel() for c in path])
        sw = np.stack([render_blob(SHAPES[first if t < flip - 1 else 1 - first], rows // 2, c, rows, cols).ravel()
                       for t, c in enumerate(path)])
        gap = sequence_log_density(model, sw)[1] - sequence_log_density(model, ctl)[1]
        gaps += gap / trials
        dips += int(gap[flip - 1] < 0)
    return dips / trials, gaps


# ---------------------------------------------------------------- regime


REGIME_FLOW = dict(d_x=82, d_y=1, d_z=24, d_total=128, n_blocks=3, hidden=32, y_shift=20.0, y_scale=10.0)
REGIME_TRAIN = dict(batch=500, max_steps=1000, epochs=1000, lr=5e-4, x_joint=True)


def regime_config(seed: int = 0, **over) -> FlowConfig:
    return FlowConfig(split=Split("halves"), seed=seed, **{**REGIME_FLOW, **over})


def train_regime(n: int = 1000, T: int = 3, seed: int = 3, flow: FlowConfig | None = None,
                 tcfg: TrainConfig | None = None, step_callback=None):
    flow = flow or regime_config()
    ds = synth_regime(n, T, flow.d_x, seed=seed)
    tcfg = tcfg or TrainConfig(seed=seed, **REGIME_TRAIN)
    model = init_model(flow, Rng(flow.seed))
    model, metrics = train(model, ds, tcfg, Rng(tcfg.seed).spawn(1), step_callback=step_callback)
    return model, ds, metrics


def regime_recovery(model: FlowModel, drift, T: int = 3, n: int = 100, seed: int = 0,
                    alpha: float = 0.01, t_index: int = 3):
    """Generate both cohorts, test at 1-based ``t_index``; return (recall, false flags, stats)."""
    rng = Rng(seed)
    gen_p = sequence_generate(model, regime_covariates(T, True), rng, n=n)
    gen_c = sequence_generate(model, regime_covariates(T, False), rng, n=n)
    stats = group_analysis(gen_p[:, t_index - 1], gen_c[:, t_index - 1], alpha)
    flagged = set(stats.flagged)
    drift = set(int(j) for j in drift)
    recall = len(flagged & drift) / len(drift)
    return recall, len(flagged - drift), stats
