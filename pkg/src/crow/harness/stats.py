"""Per-feature Welch t-test with Bonferroni correction."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from crow.errors import ShapeError

DEFAULT_ALPHA = 0.01


@dataclass
class GroupStats:
    t: np.ndarray
    dof: np.ndarray
    p_raw: np.ndarray
    p_corrected: np.ndarray
    significant: np.ndarray
    alpha: float = DEFAULT_ALPHA

    @property
    def flagged(self) -> list[int]:
        return np.flatnonzero(self.significant).tolist()

    def rows(self):
        for j in range(self.t.size):
            yield (j, float(self.t[j]), float(self.dof[j]), float(self.p_raw[j]),
                   float(self.p_corrected[j]), int(self.significant[j]))

    HEADER = ("feature", "t", "dof", "p_raw", "p_corrected", "significant")


def t_two_sided_p(t, dof):
    """Two-sided tail of Student's t via the regularized incomplete beta.

    P(|T| > |t|) = I_{dof / (dof + t^2)}(dof / 2, 1 / 2).
    """
    t = np.asarray(t, dtype=np.float64)
    dof = np.asarray(dof, dtype=np.float64)
    return special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def welch(a: np.ndarray, b: np.ndarray):
    """Welch statistic and Welch-Satterthwaite degrees of freedom, per column."""
    na, nb = a.shape[0], b.shape[0]
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    se2 = va + vb
    diff = a.mean(axis=0) - b.mean(axis=0)
    degenerate = se2 == 0.0
    safe = np.where(degenerate, 1.0, se2)
    t = np.where(degenerate, 0.0, diff / np.sqrt(safe))
    denom = np.where(degenerate, 1.0,
                     va**2 / (na - 1) + vb**2 / (nb - 1))
    dof = np.where(degenerate, na + nb - 2.0, safe**2 / np.where(denom == 0, 1.0, denom))
    return t, dof, degenerate


def group_analysis(group_a, group_b, alpha: float = DEFAULT_ALPHA) -> GroupStats:
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"groups must be (n, d) with matching d, got {a.shape} and {b.shape}")
    if a.shape[0] < 3 or b.shape[0] < 3:
        raise ValueError(f"each group needs >= 3 samples, got {a.shape[0]} and {b.shape[0]}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    t, dof, degenerate = welch(a, b)
    p = t_two_sided_p(t, dof)
    if degenerate.any():
        p = np.where(degenerate, 1.0, p)
        warnings.warn(f"zero variance in both groups for features "
                      f"{np.flatnonzero(degenerate).tolist()}; p set to 1", RuntimeWarning,
                      stacklevel=2)
    d = a.shape[1]
    corrected = np.minimum(1.0, p * d)
    return GroupStats(t=t, dof=dof, p_raw=p, p_corrected=corrected,
                      significant=corrected < alpha, alpha=alpha)
