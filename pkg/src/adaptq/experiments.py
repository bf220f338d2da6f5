"""Desk-scale experiment protocols shared by the CLI, acceptance checks and demos.

Every run is a pure function of its seeds: the task comes from
``desk_task(data_seed)`` and the net, shuffling and probes from ``seed``.
"""

from __future__ import annotations

import dataclasses

from .data import DeskTask, desk_task
from .levels import KmeansConfig
from .msft import run_msft
from .net import Net, TrainConfig, desk_spec, train, train_qat
from .quantizer import LayerQuant
from .search import BitPlan, search, uniform_plan
from .sensitivity import EVAL_BATCH, SensitivityProfile, build_profile

PRETRAIN = TrainConfig(epochs=80, lr=0.05, schedule="cosine")
QAT = TrainConfig(epochs=20, lr=0.01, schedule="cosine")
CANDIDATES = (1, 2, 3, 4)
SEEDS = (0, 1, 2, 3, 4)


def pretrained(seed: int, task: DeskTask | None = None, cfg: TrainConfig = PRETRAIN, log: list | None = None) -> Net:
    task = task or desk_task()
    net = Net(desk_spec(seed))
    res = train(net, task.train, dataclasses.replace(cfg, seed=seed))
    _extend(log, res.history)
    return net


def qat(net: Net, task: DeskTask, spec: LayerQuant, seed: int, cfg: TrainConfig = QAT, log: list | None = None) -> Net:
    """Quantize every layer of a copy of ``net`` with ``spec`` and fine-tune it."""
    out = net.copy()
    res = train_qat(out, task.train, dataclasses.replace(cfg, seed=seed), {n: spec for n in out.names})
    _extend(log, res.history)
    return out


def profile(net: Net, task: DeskTask, seed: int, candidates=CANDIDATES) -> SensitivityProfile:
    return build_profile(net, candidates, task.train.head(EVAL_BATCH), KmeansConfig(), seed=seed)


def mixed_plan(prof: SensitivityProfile, bits: int = 2, candidates=CANDIDATES) -> BitPlan:
    """Least-sensitivity plan no larger than the uniform ``bits``-bit model."""
    return search(prof, candidates, uniform_plan(prof, bits).total_size_bytes)


def msft(
    net: Net, task: DeskTask, plan: BitPlan, seed: int, candidates=CANDIDATES, cfg: TrainConfig = QAT, log: list | None = None
) -> Net:
    """Multi-stage fine-tuning with one QAT budget per stage."""
    out = net.copy()
    total = dataclasses.replace(cfg, epochs=cfg.epochs * len(candidates), seed=seed)
    res = run_msft(out, plan, candidates, total, task.train, task.val)
    _extend(log, res.history)
    return out


def single_shot(net: Net, task: DeskTask, plan: BitPlan, seed: int, cfg: TrainConfig = QAT) -> Net:
    """The same mixed plan applied to every layer at once, then fine-tuned."""
    out = net.copy()
    assign = {n: LayerQuant("kmeans", b) for n, b in plan.assignment.items()}
    train_qat(out, task.train, dataclasses.replace(cfg, seed=seed), assign)
    return out


def _extend(log, history) -> None:
    if log is not None:
        log.extend((r.stage, r.epoch, r.split, r.loss, r.accuracy) for r in history)


def accuracy(net: Net, task: DeskTask) -> float:
    return net.evaluate(task.test)[1]
