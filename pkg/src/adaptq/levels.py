"""Per-layer quantization codebooks.

Fixed schemes (uniform, power-of-two, additive power-of-two) and the adaptive
k-means codebook: discard tails, partition the kept range into ``2**n`` equal
intervals, take each interval's mean as a level, then rescale into [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Scheme(str, Enum):
    UNIFORM = "uniform"
    POT = "pot"
    APOT = "apot"
    KMEANS = "kmeans"
    STATIC_BINARY = "static_binary"
    ADAPTIVE_BINARY = "adaptive_binary"


SCHEME_CODES = {s: i for i, s in enumerate(Scheme)}

# the verbatim symmetric rescale can push the top k-means level past 1
_BOUNDED = {Scheme.UNIFORM, Scheme.POT, Scheme.APOT, Scheme.STATIC_BINARY}


class RescaleMode(str, Enum):
    ASYMMETRIC = "asymmetric"
    SYMMETRIC = "symmetric"
    # divides by max(|q_min|, q_max); keeps zero fixed for skewed level sets
    SYMMETRIC_ABSMAX = "symmetric_absmax"


@dataclass
class Codebook:
    levels: np.ndarray
    alpha: float
    scheme: Scheme
    bit_width: int

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.scheme = Scheme(self.scheme)
        self.validate()

    def validate(self) -> None:
        lv = self.levels
        if lv.ndim != 1 or lv.size < 1:
            raise ValueError("codebook needs a non-empty 1-D level array")
        if not np.all(np.isfinite(lv)):
            raise ValueError("codebook levels must be finite")
        if np.any(np.diff(lv) <= 0):
            raise ValueError("codebook levels must be strictly increasing")
        if self.scheme in _BOUNDED and (lv[0] < -1 or lv[-1] > 1):
            raise ValueError("codebook levels must lie in [-1, 1]")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def size(self) -> int:
        return self.levels.size

    @property
    def code_bits(self) -> int:
        """Bits needed per code; PoT sets carry 2**n + 1 levels."""
        return max(self.bit_width, int(np.ceil(np.log2(self.size))) if self.size > 1 else 1)

    def values(self) -> np.ndarray:
        """Dequantized level positions ``alpha * q``."""
        return self.alpha * self.levels


@dataclass
class KmeansConfig:
    bit_width: int = 4
    retention: float = 0.90
    rescale: RescaleMode = RescaleMode.SYMMETRIC

    def __post_init__(self):
        self.rescale = RescaleMode(self.rescale)
        if not 0.0 < self.retention <= 1.0:
            raise ValueError(f"retention ratio must be in (0, 1], got {self.retention}")
        if self.bit_width < 1:
            raise ValueError("bit width must be >= 1")


def _check_bits(n: int) -> None:
    if n < 2:
        raise ValueError(f"fixed codebooks need n >= 2, got {n}")


def uniform_levels(n: int, alpha: float = 1.0) -> Codebook:
    _check_bits(n)
    m = 2 ** (n - 1) - 1
    pos = np.arange(1, m + 1) / m
    return Codebook(np.concatenate([-pos[::-1], [0.0], pos]), alpha, Scheme.UNIFORM, n)


def pot_levels(n: int, alpha: float = 1.0) -> Codebook:
    _check_bits(n)
    exps = np.arange(-(2 ** (n - 1)) + 1, 1)
    pos = np.exp2(exps.astype(np.float64))
    return Codebook(np.concatenate([-pos[::-1], [0.0], pos]), alpha, Scheme.POT, n)


def apot_levels(n: int = 4, alpha: float = 1.0) -> Codebook:
    """Additive power-of-two levels for signed 4-bit weights.

    The sign takes one bit; the 3 magnitude bits split into a 2-bit group
    ``{0, 2^-1, 2^-2, 2^-4}`` and a 1-bit group ``{0, 2^-3}``. Every magnitude
    is one term from each group, normalized so the largest is 1.
    """
    if n != 4:
        raise ValueError("APoT is only defined here for n = 4")
    g1 = np.array([0.0, 2.0**-1, 2.0**-2, 2.0**-4])
    g2 = np.array([0.0, 2.0**-3])
    sums = np.unique((g1[:, None] + g2[None, :]).ravel())
    pos = sums[sums > 0] / sums.max()
    return Codebook(np.concatenate([-pos[::-1], [0.0], pos]), alpha, Scheme.APOT, n)


# ---------------------------------------------------------------------------
# k-means codebook
# ---------------------------------------------------------------------------


def retained_range(w: np.ndarray, retention: float) -> tuple[float, float]:
    """Quantile interval holding the central ``retention`` mass."""
    tail = (1.0 - retention) / 2.0
    lo, hi = np.quantile(w, [tail, 1.0 - tail])
    return float(lo), float(hi)


def interval_centroids(w: np.ndarray, lo: float, hi: float, k: int) -> np.ndarray:
    """Mean of the weights in each of ``k`` equal-width intervals of [lo, hi].

    The last interval is closed on the right. Empty intervals take their
    midpoint.
    """
    edges = np.linspace(lo, hi, k + 1)
    kept = w[(w >= lo) & (w <= hi)]
    bins = np.clip(np.searchsorted(edges, kept, side="right") - 1, 0, k - 1)
    sums = np.bincount(bins, weights=kept, minlength=k)
    counts = np.bincount(bins, minlength=k)
    mids = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(invalid="ignore", divide="ignore"):
        cents = np.where(counts > 0, sums / np.maximum(counts, 1), mids)
    return cents


def rescale_asymmetric(levels) -> np.ndarray:
    q = np.asarray(levels, dtype=np.float64)
    qmin, qmax = q.min(), q.max()
    if not qmax > qmin:
        raise ValueError("asymmetric rescale needs q_max > q_min")
    out = (q - qmin) / (qmax - qmin) * 2.0 - 1.0
    out[q == qmin] = -1.0
    out[q == qmax] = 1.0
    return out


def rescale_symmetric(levels) -> np.ndarray:
    q = np.asarray(levels, dtype=np.float64)
    qmin, qmax = q.min(), q.max()
    if not qmax > 0:
        raise ValueError("symmetric rescale needs q_max > 0")
    out = (q - qmin) / qmax - 1.0
    out[q == qmin] = -1.0
    return out


def rescale_symmetric_absmax(levels) -> np.ndarray:
    q = np.asarray(levels, dtype=np.float64)
    m = max(abs(q.min()), q.max())
    if not m > 0:
        raise ValueError("symmetric rescale needs a nonzero level")
    return q / m


RESCALERS = {
    RescaleMode.ASYMMETRIC: rescale_asymmetric,
    RescaleMode.SYMMETRIC: rescale_symmetric,
    RescaleMode.SYMMETRIC_ABSMAX: rescale_symmetric_absmax,
}


def kmeans_levels(weights, cfg: KmeansConfig | None = None) -> Codebook:
    """Adaptive codebook for one layer, levels rescaled into [-1, 1]."""
    cfg = cfg or KmeansConfig()
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64).ravel()
    k = 2**cfg.bit_width
    if w.size < k:
        raise ValueError(f"need at least {k} weights for {cfg.bit_width}-bit k-means, got {w.size}")
    lo, hi = retained_range(w, cfg.retention)
    if hi <= lo:
        # all retained weights equal: one interval around the value
        span = max(abs(lo), 1.0) * 1e-3
        lo, hi = lo - span, hi + span
    cents = interval_centroids(w, lo, hi, k)
    if np.unique(cents).size != k:
        raise ValueError("cannot form distinct k-means levels for this layer")
    levels = np.sort(RESCALERS[cfg.rescale](cents))
    if np.any(np.diff(levels) <= 0):
        raise ValueError("rescaled k-means levels are not distinct")
    return Codebook(levels, rescale_divisor(cents, cfg.rescale), Scheme.KMEANS, cfg.bit_width)


def rescale_divisor(centroids, mode: RescaleMode) -> float:
    """Scale undoing the rescale, so ``alpha * level`` lands on the centroids.

    Exact for centred level sets; used as the initial ``alpha``.
    """
    q = np.asarray(centroids, dtype=np.float64)
    mode = RescaleMode(mode)
    if mode is RescaleMode.ASYMMETRIC:
        return float((q.max() - q.min()) / 2.0)
    if mode is RescaleMode.SYMMETRIC:
        return float(q.max())
    return float(max(abs(q.min()), q.max()))


def initial_alpha(w: np.ndarray, retention: float = 1.0) -> float:
    lo, hi = retained_range(np.ravel(w), retention)
    a = max(abs(lo), abs(hi))
    return float(a) if a > 0 else 1.0


def fixed_levels(scheme: Scheme | str, n: int, alpha: float = 1.0) -> Codebook:
    scheme = Scheme(scheme)
    builders = {Scheme.UNIFORM: uniform_levels, Scheme.POT: pot_levels, Scheme.APOT: apot_levels}
    if scheme not in builders:
        raise ValueError(f"{scheme.value} is not a fixed scheme")
    return builders[scheme](n, alpha)


def fit_alpha(w, levels, grid: int = 2001) -> float:
    """Scale minimising squared error of nearest-level quantization.

    Grid search over ``alpha`` in (0, 2 * max|w| / max|level|].
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    levels = np.asarray(levels, dtype=np.float64)
    top = 2.0 * np.abs(w).max() / np.abs(levels).max()
    best, best_err = 1.0, np.inf
    for a in np.linspace(top / grid, top, grid):
        vals = a * levels
        mids = 0.5 * (vals[1:] + vals[:-1])
        q = vals[np.searchsorted(mids, w)]
        err = np.sum((w - q) ** 2)
        if err < best_err:
            best, best_err = float(a), err
    return best
