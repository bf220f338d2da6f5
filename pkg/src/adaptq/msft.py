"""Multi-stage fine-tuning: quantize low-bit layers first, fine-tune, repeat."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import Split
from .levels import KmeansConfig
from .net import EpochRecord, Net, TrainConfig, TrainResult, train_qat
from .quantizer import LayerQuant
from .search import BitPlan

DEFAULT_PATIENCE = 5


@dataclass(frozen=True)
class Stage:
    threshold: int
    quantized: frozenset
    added: frozenset


@dataclass
class MsftSchedule:
    candidates: tuple
    stages: list

    def cumulative(self) -> list[set]:
        return [set(s.quantized) for s in self.stages]


def build_schedule(plan: BitPlan | dict, candidates) -> MsftSchedule:
    assignment = plan.assignment if isinstance(plan, BitPlan) else dict(plan)
    cands = tuple(sorted(set(candidates)))
    stray = {n: b for n, b in assignment.items() if b not in cands}
    if stray:
        raise ValueError(f"assignment outside candidate set: {stray}")
    stages, done = [], frozenset()
    for c in cands:
        now = frozenset(n for n, b in assignment.items() if b <= c)
        stages.append(Stage(c, now, now - done))
        done = now
    return MsftSchedule(cands, stages)


def stage_epochs(total: int, n_stages: int) -> list[int]:
    """Even split of the epoch budget; any remainder goes to the last stages."""
    base, extra = divmod(total, n_stages)
    return [base + (1 if j >= n_stages - extra else 0) for j in range(n_stages)]


@dataclass
class MsftResult:
    net: Net
    schedule: MsftSchedule
    history: list = field(default_factory=list)


def run_msft(
    net: Net,
    plan: BitPlan | dict,
    candidates,
    cfg: TrainConfig,
    train: Split,
    val: Split | None = None,
    test: Split | None = None,
    kmeans_cfg: KmeansConfig | None = None,
    patience: int | None = DEFAULT_PATIENCE,
    on_epoch=None,
    on_stage=None,
) -> MsftResult:
    """Fine-tune ``net`` in place through every stage of the schedule.

    Stage ``j`` fits k-means codebooks for its newly added layers from the
    current latent weights, then trains for its share of ``cfg.epochs`` with
    shuffle seed ``cfg.seed + j``. Already quantized layers keep training.
    ``on_stage(j, stage, net)`` runs after each stage, e.g. to checkpoint.
    """
    kcfg = kmeans_cfg or KmeansConfig()
    assignment = plan.assignment if isinstance(plan, BitPlan) else dict(plan)
    schedule = build_schedule(assignment, candidates)
    budgets = stage_epochs(cfg.epochs, len(schedule.stages))
    history: list[EpochRecord] = []
    for j, (stage, epochs) in enumerate(zip(schedule.stages, budgets)):
        new = {
            name: LayerQuant("kmeans", assignment[name], kcfg.retention, kcfg.rescale.value)
            for name in net.names
            if name in stage.added
        }
        stage_cfg = dataclasses.replace(cfg, epochs=epochs, seed=cfg.seed + j, patience=patience)
        result: TrainResult = train_qat(net, train, stage_cfg, new, val, test, stage=j + 1, on_epoch=on_epoch)
        quantized = {n for n, q in zip(net.names, net.quant) if q is not None}
        if quantized != set(stage.quantized):
            raise AssertionError(f"stage {j + 1}: quantized {sorted(quantized)} != {sorted(stage.quantized)}")
        history.extend(result.history)
        if on_stage:
            on_stage(j + 1, stage, net)
    return MsftResult(net, schedule, history)
