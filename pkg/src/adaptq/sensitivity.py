"""Per-layer Hessian sensitivity: Hutchinson average traces and quantization perturbations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import Split
from .levels import KmeansConfig, kmeans_levels
from .net import Net
from .quantizer import dequantize, quantize
from .store import layer_size_bytes

PROFILE_VERSION = 1
EVAL_BATCH = 512
DEFAULT_PROBES = 64


def rademacher(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def hutchinson_samples(matvec: Callable[[np.ndarray], np.ndarray], dim: int, probes: int, seed: int = 0) -> np.ndarray:
    """``v^T H v`` for each of ``probes`` Rademacher vectors."""
    if probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    out = np.empty(probes)
    for k in range(probes):
        v = rademacher(rng, dim)
        out[k] = v @ np.ravel(matvec(v))
    return out


def hutchinson_trace(net: Net, layer: str, batch: Split, probes: int = DEFAULT_PROBES, seed: int = 0) -> float:
    """Average Hessian trace ``Tr(H) / param_count`` of one layer's weights."""
    n = net.param_count(layer)
    samples = hutchinson_samples(lambda v: net.hvp(layer, v, batch.x, batch.y), n, probes, seed)
    return float(samples.mean() / n)


def layer_sensitivity(avg_trace: float, w, q) -> float:
    w, q = np.asarray(w, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if w.shape != q.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {q.shape}")
    return float(avg_trace * np.sum((w - q) ** 2))


def one_shot_quantize(w: np.ndarray, bits: int, cfg: KmeansConfig) -> np.ndarray:
    cb = kmeans_levels(w, KmeansConfig(bits, cfg.retention, cfg.rescale))
    return dequantize(quantize(w, cb), cb).reshape(w.shape)


@dataclass
class LayerProfile:
    name: str
    param_count: int
    avg_trace: float
    perturbation: dict = field(default_factory=dict)

    def omega(self, bits: int) -> float:
        return self.avg_trace * self.perturbation[bits]


@dataclass
class SensitivityProfile:
    layers: list
    bits: tuple
    # bytes of everything outside the plan (biases, skipped layers), at 32 bits
    fixed_bytes: int = 0

    def __getitem__(self, name: str) -> LayerProfile:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    def omega(self, assignment: dict) -> float:
        # exactly rounded, so the total does not depend on layer order
        return math.fsum(l.omega(assignment[l.name]) for l in self.layers)

    def size_bytes(self, assignment: dict) -> int:
        return self.fixed_bytes + sum(layer_size_bytes(l.param_count, assignment[l.name]) for l in self.layers)

    def to_text(self) -> str:
        lines = [
            f"# adaptq sensitivity profile v{PROFILE_VERSION}",
            "# bits " + " ".join(str(b) for b in self.bits),
            f"# fixed_bytes {self.fixed_bytes}",
            "# layer\tparam_count\tavg_trace\t" + "\t".join(f"pert_{b}" for b in self.bits),
        ]
        for l in self.layers:
            vals = "\t".join(repr(float(l.perturbation[b])) for b in self.bits)
            lines.append(f"{l.name}\t{l.param_count}\t{float(l.avg_trace)!r}\t{vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SensitivityProfile":
        bits, fixed, layers = None, 0, []
        for line in text.splitlines():
            if line.startswith("# bits "):
                bits = tuple(int(b) for b in line[7:].split())
            elif line.startswith("# fixed_bytes "):
                fixed = int(line.split()[2])
            elif line.startswith("#") or not line.strip():
                continue
            else:
                if bits is None:
                    raise ValueError("profile rows before the '# bits' header")
                name, count, trace, *perts = line.split("\t")
                if len(perts) != len(bits):
                    raise ValueError(f"row for {name} has {len(perts)} perturbations, expected {len(bits)}")
                layers.append(LayerProfile(name, int(count), float(trace), {b: float(p) for b, p in zip(bits, perts)}))
        if bits is None:
            raise ValueError("not a sensitivity profile")
        return cls(layers, bits, fixed)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SensitivityProfile":
        return cls.from_text(Path(path).read_text())


def build_profile(
    net: Net,
    candidate_bits: Iterable[int],
    batch: Split,
    kmeans_cfg: KmeansConfig | None = None,
    probes: int = DEFAULT_PROBES,
    seed: int = 0,
    layers: Iterable[str] | None = None,
) -> SensitivityProfile:
    """Profile the full-precision ``net`` on ``batch``.

    Perturbations use one-shot k-means quantization of the current weights.
    Layers left out of ``layers`` count as full precision in ``fixed_bytes``.
    """
    cfg = kmeans_cfg or KmeansConfig()
    bits = tuple(sorted(set(candidate_bits)))
    chosen = list(net.names if layers is None else layers)
    records = []
    for k, name in enumerate(net.names):
        if name not in chosen:
            continue
        w = net.weights[net.layer_index(name)].data
        trace = hutchinson_trace(net, name, batch, probes, seed + k)
        pert = {b: float(np.sum((w - one_shot_quantize(w, b, cfg)) ** 2)) for b in bits}
        records.append(LayerProfile(name, w.size, trace, pert))
    fixed = sum(layer_size_bytes(b.size, None) for b in net.biases)
    fixed += sum(layer_size_bytes(net.param_count(n), None) for n in net.names if n not in chosen)
    return SensitivityProfile(records, bits, fixed)
