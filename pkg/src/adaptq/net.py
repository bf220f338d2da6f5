"""Small dense / conv1d ReLU classifier trained with SGD + momentum.

Layers carry an optional fake-quant node over their weight matrix; biases
always stay full precision.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .data import Split
from .quantizer import FakeQuantState, LayerQuant, attach, frozen_state
from .store import ModelFile, QuantizedLayer, WeightTensor

log = logging.getLogger(__name__)


@dataclass
class Dense:
    n_in: int
    n_out: int
    kind: str = "dense"


@dataclass
class Conv1d:
    in_ch: int
    out_ch: int
    kernel: int
    kind: str = "conv1d"


@dataclass
class NetSpec:
    layers: list
    input_shape: tuple = (2,)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.layers = [_as_layer(l) for l in self.layers]
        self.input_shape = tuple(self.input_shape)
        if self.activation != "relu":
            raise ValueError("only relu is supported")
        if not self.layers:
            raise ValueError("a net needs at least one layer")
        self.shapes()  # validates dimensions

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape (without batch) entering each layer, plus the output."""
        shape = self.input_shape
        out = [shape]
        for layer in self.layers:
            if isinstance(layer, Conv1d):
                if len(shape) == 1:
                    if shape[0] % layer.in_ch:
                        raise ValueError("input length not divisible by conv channels")
                    shape = (layer.in_ch, shape[0] // layer.in_ch)
                if shape[0] != layer.in_ch or shape[1] < layer.kernel:
                    raise ValueError(f"conv1d {layer} incompatible with input {shape}")
                shape = (layer.out_ch, shape[1] - layer.kernel + 1)
            else:
                flat = math.prod(shape)
                if flat != layer.n_in:
                    raise ValueError(f"dense {layer} incompatible with input {shape}")
                shape = (layer.n_out,)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetSpec":
        return cls(d["layers"], tuple(d["input_shape"]), d.get("activation", "relu"), d.get("seed", 0))


def _as_layer(l):
    if isinstance(l, (Dense, Conv1d)):
        return l
    l = dict(l)
    kind = l.pop("kind", "dense")
    return Conv1d(**l) if kind == "conv1d" else Dense(**l)


def mlp(widths: Iterable[int], seed: int = 0) -> NetSpec:
    widths = list(widths)
    layers = [Dense(a, b) for a, b in zip(widths[:-1], widths[1:])]
    return NetSpec(layers, (widths[0],), seed=seed)


DESK_WIDTHS = (2, 16, 16, 16, 16, 16, 16, 16, 3)


def desk_spec(seed: int = 0) -> NetSpec:
    return mlp(DESK_WIDTHS, seed)


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 1e-4
    patience: int | None = None
    seed: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; cosine decays to zero at the last."""
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))


ALPHA_FLOOR = 1e-8


class DivergenceError(RuntimeError):
    pass


def _conv_index(in_ch: int, length: int, kernel: int) -> np.ndarray:
    """Flat indices turning (in_ch, length) into (t_out, in_ch * kernel) patches."""
    t_out = length - kernel + 1
    c = np.arange(in_ch)[None, :, None]
    k = np.arange(kernel)[None, None, :]
    t = np.arange(t_out)[:, None, None]
    return (c * length + t + k).reshape(t_out, in_ch * kernel)


class Net:
    def __init__(self, spec: NetSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.names: list[str] = []
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        self.quant: list[FakeQuantState | None] = []
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Conv1d):
                shape = (layer.out_ch, layer.in_ch, layer.kernel)
                fan_in, n_out = layer.in_ch * layer.kernel, layer.out_ch
            else:
                shape = (layer.n_in, layer.n_out)
                fan_in, n_out = layer.n_in, layer.n_out
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            self.names.append(f"{layer.kind}{i}")
            self.weights.append(ad.Tensor(w, requires_grad=True, name=f"{layer.kind}{i}.weight"))
            self.biases.append(ad.Tensor(np.zeros(n_out), requires_grad=True, name=f"{layer.kind}{i}.bias"))
            self.quant.append(None)

    # ------------------------------------------------------------------
    def layer_index(self, name: str) -> int:
        return self.names.index(name)

    def param_count(self, name: str) -> int:
        return self.weights[self.layer_index(name)].size

    def parameters(self) -> list[ad.Tensor]:
        params = list(self.weights) + list(self.biases)
        for q in self.quant:
            if q is not None and q.enabled:
                params.extend(q.parameters())
        return params

    def effective_weight(self, i: int) -> ad.Tensor:
        q = self.quant[i]
        return self.weights[i] if q is None else q(self.weights[i])

    def quantize_layers(self, assignment: Mapping[str, LayerQuant | None]) -> None:
        """Attach fake-quant nodes fitted to the current latent weights."""
        for name, spec in assignment.items():
            i = self.layer_index(name)
            self.quant[i] = None if spec is None else attach(spec, self.weights[i])

    def clear_quant(self) -> None:
        self.quant = [None] * len(self.quant)

    def set_quant_enabled(self, enabled: bool) -> None:
        for q in self.quant:
            if q is not None:
                q.enabled = enabled

    def copy(self) -> "Net":
        other = Net.__new__(Net)
        other.spec = self.spec
        other.names = list(self.names)
        other.weights = [ad.Tensor(w.data.copy(), True, w.name) for w in self.weights]
        other.biases = [ad.Tensor(b.data.copy(), True, b.name) for b in self.biases]
        other.quant = []
        for q, w in zip(self.quant, other.weights):
            if q is None:
                other.quant.append(None)
                continue
            clone = q.__class__.__new__(q.__class__)
            clone.__dict__.update(q.__dict__)
            clone.latent = w
            if q.alpha is not None:
                clone.alpha = ad.Tensor(q.alpha.data.copy(), True, "alpha")
            other.quant.append(clone)
        return other

    # ------------------------------------------------------------------
    def forward(self, x, weights: list[ad.Tensor] | None = None) -> ad.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != {self.spec.input_shape}")
        h = ad.Tensor(x)
        shapes = self.spec.shapes()
        n = len(self.spec.layers)
        for i, layer in enumerate(self.spec.layers):
            w = weights[i] if weights is not None else self.effective_weight(i)
            b = self.biases[i]
            if isinstance(layer, Conv1d):
                c = layer.in_ch
                length = shapes[i][1] if len(shapes[i]) == 2 else shapes[i][0] // c
                batch = h.shape[0]
                h = ad.reshape(h, (batch, c * length))
                idx = _conv_index(c, length, layer.kernel)
                cols = ad.take(h, (np.arange(batch)[:, None, None] * (c * length)) + idx[None])
                wmat = ad.reshape(w, (layer.out_ch, c * layer.kernel))
                h = ad.matmul(cols, ad.transpose(wmat)) + b  # (batch, t_out, out_ch)
                h = ad.transpose(h, (0, 2, 1))
            else:
                if h.ndim > 2:
                    h = ad.reshape(h, (h.shape[0], -1))
                h = ad.matmul(h, w) + b
            if i < n - 1:
                h = ad.relu(h)
        return h

    def loss(self, x, y, weights=None) -> ad.Tensor:
        return cross_entropy(self.forward(x, weights), y)

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x).data.argmax(axis=1)

    def evaluate(self, split: Split) -> tuple[float, float]:
        with ad.no_grad():
            logits = self.forward(split.x)
            loss = cross_entropy(logits, split.y)
        return float(loss.data), float(np.mean(logits.data.argmax(axis=1) == split.y))

    def backward(self, x, y) -> dict[str, np.ndarray]:
        """Gradients of the mean loss for every trainable tensor, keyed by name."""
        params = self.parameters()
        loss = self.loss(x, y)
        grads = ad.grad(loss, params)
        out = {}
        for p, g in zip(params, grads):
            key = p.name
            if p.name == "alpha":
                owner = next(n for n, q in zip(self.names, self.quant) if q is not None and q.alpha is p)
                key = f"{owner}.alpha"
            out[key] = g.data
        return out

    def hvp(self, name: str, v, x, y) -> np.ndarray:
        """Hessian-vector product of the full-precision loss w.r.t. one layer's weights."""
        i = self.layer_index(name)
        w = self.weights[i]
        v = np.asarray(v, dtype=np.float64)
        if v.size != w.size:
            raise ValueError(f"vector of size {v.size} for a layer of {w.size} weights")

        def f(t):
            weights = list(self.weights)  # latent weights, quantization bypassed
            weights[i] = t
            return self.loss(x, y, weights)

        hv = ad.hvp(f, w, v)
        return hv.ravel()

    # ------------------------------------------------------------------
    def to_model(self) -> ModelFile:
        layers = []
        for name, w, b, q in zip(self.names, self.weights, self.biases, self.quant):
            if q is not None and q.enabled:
                layers.append(q.export(f"{name}.weight"))
            else:
                layers.append(WeightTensor(f"{name}.weight", w.shape, w.data))
            layers.append(WeightTensor(f"{name}.bias", b.shape, b.data))
        return ModelFile(layers)

    @classmethod
    def from_model(cls, model: ModelFile, spec: NetSpec | None = None) -> "Net":
        spec = spec or infer_spec(model)
        net = cls(spec)
        for i, name in enumerate(net.names):
            wl = model[f"{name}.weight"]
            bl = model[f"{name}.bias"]
            net.weights[i].data = wl.array().reshape(net.weights[i].shape)
            net.biases[i].data = bl.array().reshape(net.biases[i].shape)
            if isinstance(wl, QuantizedLayer):
                net.quant[i] = frozen_state(wl, net.weights[i])
        return net


def infer_spec(model: ModelFile) -> NetSpec:
    """Rebuild the layer stack from ``<kind><i>.weight`` tensors."""
    layers = []
    i = 0
    while True:
        kind = next((k for k in ("dense", "conv1d") if f"{k}{i}.weight" in model.names()), None)
        if kind is None:
            break
        shape = model[f"{kind}{i}.weight"].shape
        if kind == "dense":
            layers.append(Dense(shape[0], shape[1]))
        else:
            layers.append(Conv1d(shape[1], shape[0], shape[2]))
        i += 1
    if not layers:
        raise ValueError("model holds no recognizable layers")
    first = layers[0]
    if isinstance(first, Dense):
        input_shape = (first.n_in,)
    else:
        # walk back from the first dense layer to recover the sequence length
        length = None
        for j, l in enumerate(layers):
            if isinstance(l, Dense):
                length = l.n_in // layers[j - 1].out_ch
                for c in reversed(layers[:j]):
                    length += c.kernel - 1
                break
        if length is None:
            raise ValueError("cannot infer input length of an all-conv net")
        input_shape = (first.in_ch, length)
    return NetSpec(layers, input_shape)


def cross_entropy(logits: ad.Tensor, y) -> ad.Tensor:
    y = np.asarray(y)
    m = ad.Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - m
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.sum_(shifted * ad.Tensor(onehot), axis=1)
    return ad.mean(lse - picked)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    stage: int | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    net: Net
    history: list = field(default_factory=list)
    stopped_early: bool = False

    def final(self, split: str = "test") -> EpochRecord:
        return [r for r in self.history if r.split == split][-1]


def train_qat(
    net: Net,
    train: Split,
    cfg: TrainConfig,
    assignment: Mapping[str, LayerQuant | None] | None = None,
    val: Split | None = None,
    test: Split | None = None,
    stage: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """SGD + momentum; fake-quant nodes use the straight-through estimator.

    ``assignment`` attaches new quantizers before training; layers already
    carrying one keep it. Weight decay applies to weights and biases, not
    to alpha, whose step is scaled by ``1/sqrt(N)`` and floored at a small
    positive value.
    """
    if assignment:
        net.quantize_layers(assignment)
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    velocity = {id(p): np.zeros_like(p.data) for p in params}
    decayed = {id(p) for p in list(net.weights) + list(net.biases)}
    # alpha's gradient sums over the whole layer; scale its step by 1/sqrt(N)
    step_scale = {
        id(q.alpha): 1.0 / math.sqrt(q.latent.size)
        for q in net.quant
        if q is not None and q.enabled and q.alpha is not None
    }
    history: list[EpochRecord] = []
    best, wait, stopped = np.inf, 0, False

    def log_split(epoch, name, split):
        loss, acc = net.evaluate(split)
        rec = EpochRecord(epoch, name, loss, acc, stage)
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        return rec

    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = net.loss(train.x[idx], train.y[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}" + (f", stage {stage}" if stage else ""))
            grads = ad.grad(loss, params)
            for p, g in zip(params, grads):
                step = g.data
                if id(p) in decayed and cfg.weight_decay:
                    step = step + cfg.weight_decay * p.data
                elif id(p) in step_scale:
                    step = step * step_scale[id(p)]
                v = velocity[id(p)]
                v *= cfg.momentum
                v += step
                p.data = p.data - lr * v
                if id(p) in step_scale:
                    p.data = np.maximum(p.data, ALPHA_FLOOR)
            total += float(loss.data) * len(idx)
        history.append(EpochRecord(epoch, "train", total / n, _accuracy(net, train), stage))
        if on_epoch:
            on_epoch(history[-1])
        if val is not None:
            rec = log_split(epoch, "val", val)
            if cfg.patience is not None:
                if rec.loss < best:
                    best, wait = rec.loss, 0
                else:
                    wait += 1
                    if wait >= cfg.patience:
                        stopped = True
        if test is not None:
            log_split(epoch, "test", test)
        if stopped:
            log.info("early stop at epoch %d", epoch)
            break
    return TrainResult(net, history, stopped)


def _accuracy(net: Net, split: Split) -> float:
    return float(np.mean(net.predict(split.x) == split.y))


def train(net: Net, train_split: Split, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Full-precision training; quantizers, if any, are left as they are."""
    return train_qat(net, train_split, cfg, None, **kwargs)
