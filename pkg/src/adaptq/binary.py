"""1-bit quantizers: static {-alpha, +alpha} and adaptive {beta - d, beta + d}."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .levels import Codebook, Scheme
from .quantizer import FakeQuantState
from .store import QuantizedLayer


@dataclass
class BinaryParams:
    scheme: str
    beta: float = 0.0
    d: float = 0.0
    alpha: float = 1.0

    def values(self) -> tuple[float, float]:
        if self.scheme == "static":
            return (-self.alpha, self.alpha)
        return (self.beta - self.d, self.beta + self.d)


def _values(w) -> np.ndarray:
    return np.asarray(getattr(w, "data", w), dtype=np.float64)


def entropy_regularize(w) -> np.ndarray:
    """Scale a layer so its mean absolute value is 1."""
    w = _values(w)
    l1 = np.abs(w).sum()
    if l1 == 0:
        raise ValueError("cannot regularize an all-zero layer")
    return w / (l1 / w.size)


def static_binarize(w) -> np.ndarray:
    """Map regularized weights to {-1, +1}; zero goes to +1 (round half up)."""
    x = (np.clip(_values(w), -1.0, 1.0) + 1.0) * 0.5
    return np.floor(x + 0.5) * 2.0 - 1.0


def adaptive_fit(w) -> BinaryParams:
    w = _values(w).ravel()
    if w.size < 2:
        raise ValueError("adaptive binarization needs at least 2 weights")
    beta = float(w.mean())
    d = float(np.linalg.norm(w - beta) / np.sqrt(w.size))
    return BinaryParams("adaptive", beta=beta, d=d)


def adaptive_binarize(w, p: BinaryParams) -> np.ndarray:
    w = _values(w)
    return np.where(w < p.beta, p.beta - p.d, p.beta + p.d)


class StaticBinaryState(FakeQuantState):
    """Entropy-regularize, binarize to {-1, +1}, scale by a learnable alpha."""

    def __init__(self, latent: ad.Tensor, alpha: float | None = None, enabled: bool = True):
        if alpha is None:
            alpha = float(np.abs(latent.data).mean()) or 1.0
        cb = Codebook([-1.0, 1.0], alpha, Scheme.STATIC_BINARY, 1)
        super().__init__(cb, latent, enabled)

    def codes(self) -> np.ndarray:
        q = static_binarize(entropy_regularize(self.latent.data))
        return (q > 0).astype(np.int64)


class AdaptiveBinaryState(FakeQuantState):
    """Binary set {beta - d, beta + d} re-fit from the latent weights each call."""

    learns_alpha = False

    def __init__(self, latent: ad.Tensor, enabled: bool = True):
        self.latent = latent
        self.enabled = enabled
        self.alpha = None

    @property
    def params(self) -> BinaryParams:
        return adaptive_fit(self.latent.data)

    def codes(self) -> np.ndarray:
        p = self.params
        if p.d == 0:
            return np.zeros(self.latent.shape, dtype=np.int64)
        return (self.latent.data >= p.beta).astype(np.int64)

    def __call__(self, w: ad.Tensor) -> ad.Tensor:
        if not self.enabled:
            return w
        q = adaptive_binarize(w.data, self.params)
        return (w - ad.stop_gradient(w)) + ad.Tensor(q)

    def parameters(self) -> list[ad.Tensor]:
        return []

    @property
    def codebook(self) -> Codebook:
        p = self.params
        # a constant layer keeps the single value beta
        levels = [p.beta] if p.d == 0 else [p.beta - p.d, p.beta + p.d]
        return Codebook(levels, 1.0, Scheme.ADAPTIVE_BINARY, 1)

    def _current_codebook(self) -> Codebook:
        return self.codebook
