"""Command-line pipeline: pretrain, quantize, profile, search, msft, binarize, report, hist.

Exit codes: 0 success, 1 invariant or feasibility failure, 2 usage or I/O
error. Inputs are loaded and output locations checked before any work is
done, and every artifact is written atomically next to a
``<artifact>.manifest.json`` sidecar. Manifests carry no timestamps, so
replaying one (``adaptq rerun``) reproduces the artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import desk_task
from .levels import KmeansConfig
from .msft import DEFAULT_PATIENCE, run_msft
from .net import DESK_WIDTHS, DivergenceError, Net, TrainConfig, mlp, train, train_qat
from .quantizer import LayerQuant, build_codebook
from .search import BitPlan, InfeasibleTarget, search, uniform_plan
from .sensitivity import DEFAULT_PROBES, EVAL_BATCH, SensitivityProfile, build_profile
from .store import FormatError, ModelFile, QuantizedLayer, dumps, load_model, model_size_bytes

HIST_FORMAT = "adaptq-hist/1"
MANIFEST_FORMAT = "adaptq-manifest/1"


class UsageError(Exception):
    """Bad flags or unusable paths (exit 2)."""


class InvariantError(Exception):
    """A data or feasibility invariant does not hold (exit 1)."""


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        d = {"format": MANIFEST_FORMAT, **dataclasses.asdict(self)}
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        if d.pop("format", None) != MANIFEST_FORMAT:
            raise UsageError("not an adaptq manifest")
        return cls(**d)


# ---------------------------------------------------------------------------
# file plumbing
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such input file: {path}")
    return p


def _output(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory not writable: {parent}")
    if p.is_dir():
        raise UsageError(f"output path is a directory: {path}")
    return p


def _load(path: str) -> ModelFile:
    try:
        return load_model(_input(path))
    except FormatError as e:
        raise UsageError(f"{path}: {e}") from e


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".adaptq-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Outputs:
    """Collects artifacts in memory; nothing touches disk until ``commit``."""

    def __init__(self):
        self.files: dict[Path, bytes] = {}

    def add(self, path: Path, data: bytes | str) -> None:
        self.files[path] = data.encode() if isinstance(data, str) else data

    def commit(self, manifest: RunManifest, primary: Path) -> None:
        manifest.outputs = [str(p) for p in self.files]
        for path, data in self.files.items():
            _write_atomic(path, data)
        _write_atomic(primary.with_name(primary.name + ".manifest.json"), manifest.to_json().encode())


def _metrics_lines(records) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def _bits_list(text: str) -> tuple[int, ...]:
    try:
        bits = tuple(sorted({int(b) for b in text.split(",") if b.strip()}))
    except ValueError:
        raise UsageError(f"bad bit list {text!r}") from None
    if not bits or any(not 1 <= b <= 8 for b in bits):
        raise UsageError(f"bit widths must lie in 1..8, got {text!r}")
    return bits


def _widths(text: str) -> tuple[int, ...]:
    try:
        w = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad widths {text!r}") from None
    if len(w) < 2 or w[0] != 2 or w[-1] != 3 or min(w) < 1:
        raise UsageError("widths must start at 2 inputs and end at 3 classes")
    return w


def _train_cfg(args, epochs: int) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=epochs,
            lr=args.lr,
            momentum=args.momentum,
            batch_size=args.batch_size,
            weight_decay=args.weight_decay,
            seed=args.seed,
            schedule=args.schedule,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _task(args):
    return desk_task(args.data_seed)


def _net(model: ModelFile) -> Net:
    try:
        return Net.from_model(model)
    except (ValueError, KeyError) as e:
        raise UsageError(f"model is not a desk net: {e}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args, manifest: RunManifest) -> None:
    out = _output(args.out)
    metrics = _output(args.metrics or args.out + ".metrics.jsonl")
    widths = _widths(args.widths)
    cfg = _train_cfg(args, args.epochs)
    task = _task(args)
    net = Net(mlp(widths, args.seed))
    res = train(net, task.train, cfg, val=task.val, test=task.test)
    loss, acc = net.evaluate(task.test)
    print(f"test accuracy {acc:.4f}  loss {loss:.4f}")
    files = Outputs()
    files.add(out, dumps(net.to_model()))
    files.add(metrics, _metrics_lines(res.history))
    files.commit(manifest, out)


def _layer_spec(args, method: str, bits: int) -> LayerQuant:
    rescale = {"sym": "symmetric", "asym": "asymmetric", "absmax": "symmetric_absmax"}[args.rescale]
    return LayerQuant(method, bits, args.retention, rescale)


def cmd_quantize(args, manifest: RunManifest) -> None:
    model = _load(args.model)
    out = _output(args.out)
    manifest.inputs[args.model] = _sha256(Path(args.model))
    files = Outputs()
    if args.bits == 32:
        files.add(out, Path(args.model).read_bytes())
        files.commit(manifest, out)
        print("32-bit: copied unchanged")
        return
    metrics = _output(args.metrics or args.out + ".metrics.jsonl")
    if args.method in ("uniform", "pot") and args.bits < 2:
        raise UsageError(f"{args.method} needs at least 2 bits")
    if args.method == "apot" and args.bits != 4:
        raise UsageError("apot is defined for 4 bits only")
    net = _net(model)
    spec = _layer_spec(args, args.method, args.bits)
    task = _task(args)
    cfg = _train_cfg(args, args.qat_epochs)
    res = train_qat(net, task.train, cfg, {n: spec for n in net.names}, val=task.val, test=task.test)
    _, acc = net.evaluate(task.test)
    report = model_size_bytes(net.to_model())
    print(f"{spec.describe()}: test accuracy {acc:.4f}  size {report.total_bytes} B  ratio {report.ratio:.2f}x")
    files.add(out, dumps(net.to_model()))
    files.add(metrics, _metrics_lines(res.history))
    files.commit(manifest, out)


def cmd_binarize(args, manifest: RunManifest) -> None:
    args.method = args.scheme
    args.bits = 1
    cmd_quantize(args, manifest)


def cmd_profile(args, manifest: RunManifest) -> None:
    model = _load(args.model)
    out = _output(args.out)
    manifest.inputs[args.model] = _sha256(Path(args.model))
    bits = _bits_list(args.bits)
    net = _net(model)
    if any(q is not None for q in net.quant):
        raise InvariantError("profile needs a full-precision model")
    if args.probes < 1 or args.batch < 1:
        raise UsageError("--probes and --batch must be positive")
    task = _task(args)
    rescale = {"sym": "symmetric", "asym": "asymmetric", "absmax": "symmetric_absmax"}[args.rescale]
    prof = build_profile(net, bits, task.train.head(args.batch), KmeansConfig(4, args.retention, rescale), args.probes, args.seed)
    for l in prof.layers:
        print(f"{l.name}\tparams {l.param_count}\tavg_trace {l.avg_trace:.6g}")
    files = Outputs()
    files.add(out, prof.to_text())
    files.commit(manifest, out)


def cmd_search(args, manifest: RunManifest) -> None:
    path = _input(args.profile)
    out = _output(args.out)
    manifest.inputs[args.profile] = _sha256(path)
    try:
        prof = SensitivityProfile.from_text(path.read_text())
    except ValueError as e:
        raise UsageError(f"{args.profile}: {e}") from None
    bits = _bits_list(args.bits) if args.bits else prof.bits
    if (args.target_bytes is None) == (args.target_bits is None):
        raise UsageError("give exactly one of --target-bytes or --target-bits")
    if args.target_bits is not None:
        if args.target_bits not in prof.bits:
            raise UsageError(f"--target-bits {args.target_bits} not in profile bits {prof.bits}")
        target = uniform_plan(prof, args.target_bits).total_size_bytes
    else:
        target = args.target_bytes
    try:
        plan = search(prof, bits, target)
    except InfeasibleTarget as e:
        raise InvariantError(str(e)) from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    if plan.total_size_bytes > target:
        raise InvariantError("search returned an over-budget plan")
    print(f"target {target} B -> {plan.total_size_bytes} B, ~{plan.equivalent_bits:.1f} bits, omega {plan.omega:.6g}")
    files = Outputs()
    files.add(out, plan.to_text())
    files.commit(manifest, out)


def cmd_msft(args, manifest: RunManifest) -> None:
    model = _load(args.model)
    plan_path = _input(args.plan)
    out = _output(args.out)
    metrics = _output(args.metrics or args.out + ".metrics.jsonl")
    ckdir = None
    if args.checkpoints:
        ckdir = Path(args.checkpoints)
        if not ckdir.is_dir():
            raise UsageError(f"checkpoint directory does not exist: {ckdir}")
    manifest.inputs[args.model] = _sha256(Path(args.model))
    manifest.inputs[args.plan] = _sha256(plan_path)
    try:
        plan = BitPlan.from_text(plan_path.read_text())
    except ValueError as e:
        raise UsageError(f"{args.plan}: {e}") from None
    bits = _bits_list(args.bits)
    net = _net(model)
    missing = set(net.names) ^ set(plan.assignment)
    if missing:
        raise InvariantError(f"plan and model disagree on layers: {sorted(missing)}")
    task = _task(args)
    cfg = _train_cfg(args, args.epochs)
    files = Outputs()

    def on_stage(j, stage, n):
        if ckdir is not None:
            files.add(ckdir / f"stage{j}.qnnw", dumps(n.to_model()))
        print(f"stage {j} (<= {stage.threshold} bits): {len(stage.quantized)} layers quantized, test {n.evaluate(task.test)[1]:.4f}")

    try:
        res = run_msft(net, plan, bits, cfg, task.train, task.val, task.test, KmeansConfig(), args.patience, on_stage=on_stage)
    except ValueError as e:
        raise InvariantError(str(e)) from None
    files.add(out, dumps(net.to_model()))
    files.add(metrics, _metrics_lines(res.history))
    files.commit(manifest, out)


def cmd_report(args, manifest: RunManifest) -> None:
    model = _load(args.model)
    rep = model_size_bytes(model)
    print(rep.format())
    if args.baseline:
        base = model_size_bytes(_load(args.baseline))
        print(f"baseline {args.baseline}: {base.total_bytes} B; this model is {base.total_bytes / rep.total_bytes:.2f}x smaller")
    if args.accuracy:
        net = _net(model)
        loss, acc = net.evaluate(_task(args).test)
        print(f"desk test accuracy {acc:.4f}  loss {loss:.4f}")


def cmd_hist(args, manifest: RunManifest) -> None:
    model = _load(args.model)
    out = _output(args.out)
    manifest.inputs[args.model] = _sha256(Path(args.model))
    if args.bins < 1:
        raise UsageError("--bins must be positive")
    lines = []
    for layer in model.layers:
        if not layer.name.endswith(".weight"):
            continue
        w = layer.array().astype(np.float64).ravel()
        counts, edges = np.histogram(w, bins=args.bins)
        if isinstance(layer, QuantizedLayer):
            levels = layer.codebook.values()
        elif args.method:
            levels = _fit_levels(args, layer.array().astype(np.float64))
        else:
            levels = None
        rec = {
            "format": HIST_FORMAT,
            "layer": layer.name[: -len(".weight")],
            "count": int(w.size),
            "mean": float(w.mean()),
            "std": float(w.std()),
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
            "levels": None if levels is None else [float(v) for v in levels],
        }
        lines.append(json.dumps(rec, sort_keys=True))
        print(f"{rec['layer']}\tstd {rec['std']:.4g}\trange [{edges[0]:.4g}, {edges[-1]:.4g}]")
    files = Outputs()
    files.add(out, "\n".join(lines) + "\n")
    files.commit(manifest, out)


def _fit_levels(args, w: np.ndarray) -> np.ndarray:
    from .binary import adaptive_fit

    if args.method == "adaptive":
        p = adaptive_fit(w)
        return np.array(sorted(set(p.values())))
    if args.method == "static":
        a = float(np.abs(w).mean())
        return np.array([-a, a])
    return build_codebook(_layer_spec(args, args.method, args.bits), w).values()


def cmd_rerun(args, manifest: RunManifest) -> int:
    m = RunManifest.from_json(_input(args.manifest).read_text())
    if m.version != __version__:
        print(f"warning: manifest from adaptq {m.version}, running {__version__}", file=sys.stderr)
    return main(m.argv)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_data(p):
    p.add_argument("--data-seed", type=int, default=0, help="desk task generator seed (default 0)")


def _add_train(p, epochs, lr, schedule="cosine"):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--schedule", choices=["constant", "cosine"], default=schedule)
    p.add_argument("--metrics", help="metrics JSON lines (default <out>.metrics.jsonl)")
    _add_data(p)


def _add_kmeans(p):
    p.add_argument("--retention", type=float, default=0.9, help="k-means retention ratio r (default 0.9)")
    p.add_argument("--rescale", choices=["sym", "asym", "absmax"], default="sym")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="adaptq", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"adaptq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train a full-precision desk net")
    p.add_argument("--out", required=True)
    p.add_argument("--widths", default=",".join(map(str, DESK_WIDTHS)))
    p.add_argument("--epochs", type=int, default=80)
    _add_train(p, 80, 0.05)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("quantize", help="quantize every layer and fine-tune (QAT)")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=4, choices=[1, 2, 3, 4, 5, 6, 7, 8, 32])
    p.add_argument("--method", choices=["kmeans", "uniform", "pot", "apot"], default="kmeans")
    p.add_argument("--qat-epochs", type=int, default=20)
    _add_kmeans(p)
    _add_train(p, 20, 0.01)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("binarize", help="1-bit QAT with the static or adaptive scheme")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=["static", "adaptive"], required=True)
    p.add_argument("--qat-epochs", type=int, default=20)
    _add_kmeans(p)
    _add_train(p, 20, 0.01)
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("profile", help="per-layer Hessian traces and k-means perturbations")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", default="1,2,3,4", help="candidate bit widths")
    p.add_argument("--probes", type=int, default=DEFAULT_PROBES)
    p.add_argument("--batch", type=int, default=EVAL_BATCH)
    p.add_argument("--seed", type=int, default=0)
    _add_kmeans(p)
    _add_data(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("search", help="least-sensitivity bit plan under a size budget")
    p.add_argument("profile")
    p.add_argument("--out", required=True)
    p.add_argument("--target-bytes", type=int)
    p.add_argument("--target-bits", type=int, help="budget = size of the uniform plan at this width")
    p.add_argument("--bits", help="candidate bit widths (default: the profile's)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("msft", help="multi-stage fine-tuning of a mixed plan")
    p.add_argument("model")
    p.add_argument("plan")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", default="1,2,3,4", help="candidate set C")
    p.add_argument("--epochs", type=int, default=80, help="total budget, split evenly over stages")
    p.add_argument("--patience", type=int, default=DEFAULT_PATIENCE)
    p.add_argument("--checkpoints", help="directory for per-stage models")
    _add_train(p, 80, 0.01)
    p.set_defaults(func=cmd_msft)

    p = sub.add_parser("report", help="model size (and optionally accuracy)")
    p.add_argument("model")
    p.add_argument("--baseline", help="a second model to compare sizes against")
    p.add_argument("--accuracy", action="store_true", help="also evaluate on the desk test split")
    _add_data(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("hist", help="per-layer weight histograms and level positions")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--method", choices=["kmeans", "uniform", "pot", "apot", "static", "adaptive"])
    p.add_argument("--bits", type=int, default=4)
    _add_kmeans(p)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("rerun", help="replay a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        manifest = RunManifest(args.command, argv, config, config.get("seed"))
        rc = args.func(args, manifest)
        return rc or 0
    except UsageError as e:
        print(f"adaptq: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"adaptq: I/O error: {e}", file=sys.stderr)
        return 2
    except (InvariantError, DivergenceError, InfeasibleTarget, FormatError, ValueError) as e:
        print(f"adaptq: invariant violated: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
