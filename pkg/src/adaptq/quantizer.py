"""Fake quantization: nearest-level mapping, dequantization and the STE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .levels import Codebook, KmeansConfig, Scheme, fixed_levels, initial_alpha, kmeans_levels
from .store import QuantizedLayer


def quantize(w, codebook: Codebook) -> np.ndarray:
    """Index of the level nearest to ``w / alpha``; ties go to the lower index.

    Values outside the level range clamp to the extreme levels.
    """
    x = np.asarray(w, dtype=np.float64) / codebook.alpha
    lv = codebook.levels
    mids = 0.5 * (lv[1:] + lv[:-1])
    # side="left": x exactly on a midpoint counts toward the lower level
    return np.searchsorted(mids, x, side="left").astype(np.int64)


def dequantize(codes, codebook: Codebook) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= codebook.size):
        raise IndexError("code outside codebook")
    return codebook.alpha * codebook.levels[codes]


def ste_backward(upstream_grad, state: "FakeQuantState") -> np.ndarray:
    g = np.asarray(upstream_grad)
    if g.shape != state.latent.shape:
        raise ValueError(f"gradient shape {g.shape} != weight shape {state.latent.shape}")
    return g


def alpha_gradient(upstream_grad, codes, codebook: Codebook) -> float:
    g = np.asarray(upstream_grad, dtype=np.float64).ravel()
    q = codebook.levels[np.asarray(codes).ravel()]
    if g.shape != q.shape:
        raise ValueError("gradient and codes differ in length")
    return float(np.sum(g * q))


@dataclass
class LayerQuant:
    """How one layer should be quantized; resolved against weights by :func:`attach`."""

    method: str = "kmeans"
    bits: int = 4
    retention: float = 0.90
    rescale: str = "symmetric"

    def describe(self) -> str:
        if self.method in ("static", "adaptive"):
            return f"{self.method}-binary"
        return f"{self.method}-{self.bits}bit"


class FakeQuantState:
    """Codebook fake-quant node over a latent full-precision weight tensor.

    Forward value is ``alpha * levels[codes]``. The backward pass hands the
    upstream gradient to the latent weights unchanged and gives ``alpha``
    the product rule gradient ``sum(g * q)``.
    """

    learns_alpha = True

    def __init__(self, codebook: Codebook, latent: ad.Tensor, enabled: bool = True):
        self.codebook = codebook
        self.latent = latent
        self.enabled = enabled
        self.alpha = ad.Tensor(codebook.alpha, requires_grad=True, name="alpha")

    def codes(self) -> np.ndarray:
        return quantize(self.latent.data, self._current_codebook())

    def _current_codebook(self) -> Codebook:
        a = float(self.alpha.data)
        if a <= 0:
            a = np.finfo(np.float64).tiny
        return Codebook(self.codebook.levels, a, self.codebook.scheme, self.codebook.bit_width)

    def __call__(self, w: ad.Tensor) -> ad.Tensor:
        if not self.enabled:
            return w
        q = self.codebook.levels[self.codes()]
        # w - stop(w) is exactly zero in value but routes the gradient to w
        return (w - ad.stop_gradient(w)) + self.alpha * ad.Tensor(q)

    def parameters(self) -> list[ad.Tensor]:
        return [self.alpha]

    def export(self, name: str) -> QuantizedLayer:
        cb = self._current_codebook()
        return QuantizedLayer(name, self.latent.shape, cb.bit_width, self.codes(), cb)


def build_codebook(spec: LayerQuant, w: np.ndarray) -> Codebook:
    if spec.method == "kmeans":
        return kmeans_levels(w, KmeansConfig(spec.bits, spec.retention, spec.rescale))
    return fixed_levels(spec.method, spec.bits, initial_alpha(w, spec.retention))


def attach(spec: LayerQuant, latent: ad.Tensor) -> FakeQuantState:
    """Fit a fake-quant node for ``latent`` from its current values."""
    from . import binary

    if spec.method == "static":
        return binary.StaticBinaryState(latent)
    if spec.method == "adaptive":
        return binary.AdaptiveBinaryState(latent)
    return FakeQuantState(build_codebook(spec, latent.data), latent)


def frozen_state(layer: QuantizedLayer, latent: ad.Tensor) -> FakeQuantState:
    """Fake-quant node reproducing a stored quantized layer."""
    from . import binary

    # an adaptive layer keeps its stored {beta - d, beta + d}; re-fitting
    # from the two-valued latent would move both values
    if layer.codebook.scheme is Scheme.STATIC_BINARY:
        return binary.StaticBinaryState(latent, alpha=layer.codebook.alpha)
    return FakeQuantState(layer.codebook, latent)
