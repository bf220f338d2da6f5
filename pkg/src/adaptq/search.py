"""Mixed-precision bit allocation under a model-size budget.

Layers are sorted by descending average Hessian trace and cut into one
contiguous section per candidate bit width; the most sensitive section gets
the largest width. Every cut is scored and the feasible one with the least
total sensitivity wins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sensitivity import SensitivityProfile
from .store import layer_size_bytes

PLAN_VERSION = 1


class InfeasibleTarget(ValueError):
    pass


@dataclass
class BitPlan:
    assignment: dict
    total_size_bytes: int
    equivalent_bits: float
    omega: float

    def to_text(self) -> str:
        lines = [f"# adaptq bit plan v{PLAN_VERSION}", "# layer\tbits"]
        lines += [f"{name}\t{bits}" for name, bits in self.assignment.items()]
        lines.append(f"# size_bytes {self.total_size_bytes}")
        lines.append(f"# equivalent_bits {self.equivalent_bits!r} (~{self.equivalent_bits:.1f})")
        lines.append(f"# omega {self.omega!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BitPlan":
        assignment, footer = {}, {}
        for line in text.splitlines():
            if line.startswith("# ") and len(line.split()) >= 3 and line.split()[1] in ("size_bytes", "equivalent_bits", "omega"):
                footer[line.split()[1]] = line.split()[2]
            elif line.startswith("#") or not line.strip():
                continue
            else:
                name, bits = line.split("\t")
                assignment[name] = int(bits)
        if set(footer) != {"size_bytes", "equivalent_bits", "omega"}:
            raise ValueError("bit plan footer incomplete")
        return cls(assignment, int(footer["size_bytes"]), float(footer["equivalent_bits"]), float(footer["omega"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "BitPlan":
        return cls.from_text(Path(path).read_text())


def sensitivity_order(profile: SensitivityProfile) -> list[int]:
    """Layer indices by descending average trace; ties keep profile order."""
    traces = np.array([l.avg_trace for l in profile.layers])
    return list(np.argsort(-traces, kind="stable"))


@dataclass
class SearchSpace:
    order: list
    bits_desc: tuple
    n_layers: int

    @property
    def size(self) -> int:
        k = len(self.bits_desc)
        return math.comb(self.n_layers + k - 1, k - 1)

    def cuts(self) -> np.ndarray:
        """All boundary vectors ``0 <= b_1 <= ... <= b_{k-1} <= L``, one per row."""
        k = len(self.bits_desc)
        if k == 1:
            return np.zeros((1, 0), dtype=np.int64)
        it = itertools.combinations_with_replacement(range(self.n_layers + 1), k - 1)
        flat = np.fromiter(itertools.chain.from_iterable(it), dtype=np.int64, count=self.size * (k - 1))
        return flat.reshape(self.size, k - 1)

    def assignment(self, cut, names: list[str]) -> dict:
        bounds = [0, *map(int, cut), self.n_layers]
        bits = [0] * self.n_layers
        for j, b in enumerate(self.bits_desc):
            for pos in range(bounds[j], bounds[j + 1]):
                bits[self.order[pos]] = b
        return {name: bits[i] for i, name in enumerate(names)}


def build_search_space(profile: SensitivityProfile, candidates) -> SearchSpace:
    bits = tuple(sorted(set(candidates), reverse=True))
    if len(profile.layers) == 0:
        raise ValueError("profile has no layers")
    if len(bits) < 1:
        raise ValueError("empty candidate set")
    missing = [b for b in bits if b not in profile.bits]
    if missing:
        raise ValueError(f"profile lacks perturbations for bits {missing}")
    return SearchSpace(sensitivity_order(profile), bits, len(profile.layers))


def make_plan(profile: SensitivityProfile, assignment: dict) -> BitPlan:
    params = sum(l.param_count for l in profile.layers)
    eq = sum(assignment[l.name] * l.param_count for l in profile.layers) / params
    return BitPlan(dict(assignment), profile.size_bytes(assignment), eq, profile.omega(assignment))


def search(profile: SensitivityProfile, candidates, target_size_bytes: int) -> BitPlan:
    """Least-sensitivity plan with size <= target.

    Ties in sensitivity go to the smaller model, then to the
    lexicographically smaller bit tuple in profile layer order.
    """
    space = build_search_space(profile, candidates)
    order = space.order
    layers = [profile.layers[i] for i in order]
    zero = np.zeros(1)
    # prefix sums over the sorted layers, one row per section bit width
    omega_pre = np.stack([np.concatenate([zero, np.cumsum([l.omega(b) for l in layers])]) for b in space.bits_desc])
    size_pre = np.stack(
        [np.concatenate([[0], np.cumsum([layer_size_bytes(l.param_count, b) for l in layers])]) for b in space.bits_desc]
    ).astype(np.int64)
    cuts = space.cuts()
    n = cuts.shape[0]
    bounds = np.hstack([np.zeros((n, 1), np.int64), cuts, np.full((n, 1), space.n_layers, np.int64)])
    omega = np.zeros(n)
    size = np.full(n, profile.fixed_bytes, dtype=np.int64)
    for j in range(len(space.bits_desc)):
        omega += omega_pre[j, bounds[:, j + 1]] - omega_pre[j, bounds[:, j]]
        size += size_pre[j, bounds[:, j + 1]] - size_pre[j, bounds[:, j]]
    feasible = size <= target_size_bytes
    if not feasible.any():
        smallest = int(size.min())
        raise InfeasibleTarget(f"target {target_size_bytes} bytes below the smallest plan ({smallest} bytes)")
    # prefix-sum differences carry rounding; re-score near-optimal cuts exactly
    best = omega[feasible].min()
    tol = 1e-10 * float(np.abs(omega_pre).max(initial=0.0)) * len(space.bits_desc)
    near = np.flatnonzero(feasible & (omega <= best + tol))
    names = profile.names()
    scored = []
    for t in near:
        a = space.assignment(cuts[t], names)
        scored.append((profile.omega(a), int(size[t]), tuple(a[n] for n in names), a))
    chosen = min(scored, key=lambda s: s[:3])[3]
    return make_plan(profile, chosen)


def uniform_plan(profile: SensitivityProfile, bits: int) -> BitPlan:
    return make_plan(profile, {l.name: bits for l in profile.layers})
