"""Model container, QNNW binary serialization and low-bit code packing.

File layout (all integers little-endian, floats IEEE-754 binary32 LE)::

    b"QNNW"  u16 version  u32 layer_count
    per layer:
        u8 tag (0 = full precision, 1 = quantized)
        u16 name_len, name (UTF-8)
        u8 rank, u32 extent * rank
        tag 0: f32 * prod(shape)
        tag 1: u8 bit_width, u8 scheme, f32 alpha, u16 level_count,
               f32 * level_count, u8 code_bits,
               packed codes (ceil(prod(shape) * code_bits / 8) bytes)

Codes are packed least-significant-bit first; padding bits in the last byte
are zero.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .levels import SCHEME_CODES, Codebook, Scheme

MAGIC = b"QNNW"
VERSION = 1
MAX_RANK = 4
ALPHA_BITS = 32

_SCHEMES_BY_CODE = {v: k for k, v in SCHEME_CODES.items()}


class FormatError(ValueError):
    """Raised for malformed QNNW data or invariant violations."""


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise FormatError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(s <= 0 for s in shape):
        raise FormatError(f"extents must be positive, got {shape}")
    return shape


@dataclass
class WeightTensor:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        self.shape = _check_shape(self.shape)
        self.data = np.asarray(self.data, dtype=np.float32).ravel()
        if self.data.size != math.prod(self.shape):
            raise FormatError(f"{self.name}: {self.data.size} values for shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError(f"{self.name}: non-finite weights")

    @property
    def param_count(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape).astype(np.float64)


@dataclass
class QuantizedLayer:
    name: str
    shape: tuple[int, ...]
    bit_width: int
    codes: np.ndarray
    codebook: Codebook

    def __post_init__(self):
        self.shape = _check_shape(self.shape)
        self.codes = np.asarray(self.codes, dtype=np.uint8).ravel()
        # levels and alpha live in binary32 on disk
        cb = self.codebook
        self.codebook = Codebook(
            cb.levels.astype(np.float32).astype(np.float64),
            float(np.float32(cb.alpha)),
            cb.scheme,
            cb.bit_width,
        )
        if self.bit_width < 1:
            raise FormatError("bit width must be >= 1")
        if self.codes.size != math.prod(self.shape):
            raise FormatError(f"{self.name}: {self.codes.size} codes for shape {self.shape}")
        if self.codes.size and self.codes.max() >= self.codebook.size:
            raise FormatError(f"{self.name}: code out of codebook range")
        if self.code_bits > 8:
            raise FormatError(f"{self.name}: more than 8 bits per code")

    @property
    def param_count(self) -> int:
        return self.codes.size

    @property
    def code_bits(self) -> int:
        return max(self.bit_width, self.codebook.code_bits)

    def dequantize(self) -> np.ndarray:
        return (self.codebook.alpha * self.codebook.levels[self.codes]).reshape(self.shape)

    def array(self) -> np.ndarray:
        return self.dequantize()


Layer = Union[WeightTensor, QuantizedLayer]


@dataclass
class ModelFile:
    layers: list = field(default_factory=list)
    version: int = VERSION

    def validate(self) -> None:
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise FormatError(f"duplicate layer names: {dup}")
        for layer in self.layers:
            if len(layer.name.encode("utf-8")) > 0xFFFF:
                raise FormatError("layer name too long")

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def names(self) -> list[str]:
        return [l.name for l in self.layers]


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def pack_codes(codes, bit_width: int) -> bytes:
    if not 1 <= bit_width <= 8:
        raise ValueError(f"bit width must be 1..8, got {bit_width}")
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= 1 << bit_width):
        raise ValueError(f"code out of range for {bit_width} bits")
    bits = ((codes[:, None] >> np.arange(bit_width)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_codes(buf: bytes, bit_width: int, count: int) -> np.ndarray:
    if not 1 <= bit_width <= 8:
        raise ValueError(f"bit width must be 1..8, got {bit_width}")
    nbytes = math.ceil(count * bit_width / 8)
    raw = np.frombuffer(buf, dtype=np.uint8, count=nbytes)
    bits = np.unpackbits(raw, bitorder="little")
    if np.any(bits[count * bit_width :]):
        raise FormatError("nonzero padding bits")
    bits = bits[: count * bit_width].reshape(count, bit_width).astype(np.uint8)
    return (bits << np.arange(bit_width, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def dumps(model: ModelFile) -> bytes:
    model.validate()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", model.version, len(model.layers)))
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        tag = 1 if isinstance(layer, QuantizedLayer) else 0
        out.write(struct.pack("<BH", tag, len(name)))
        out.write(name)
        out.write(struct.pack("<B", len(layer.shape)))
        out.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        if tag == 0:
            out.write(layer.data.astype("<f4").tobytes())
        else:
            cb = layer.codebook
            out.write(struct.pack("<BBfH", layer.bit_width, SCHEME_CODES[cb.scheme], cb.alpha, cb.size))
            out.write(cb.levels.astype("<f4").tobytes())
            out.write(struct.pack("<B", layer.code_bits))
            out.write(pack_codes(layer.codes, layer.code_bits))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated QNNW data")
        chunk = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> ModelFile:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    layers = []
    for _ in range(count):
        tag, name_len = r.unpack("<BH")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = math.prod(shape)
        if tag == 0:
            data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
            layers.append(WeightTensor(name, shape, data))
        elif tag == 1:
            bit_width, scheme, alpha, nlev = r.unpack("<BBfH")
            levels = np.frombuffer(r.take(4 * nlev), dtype="<f4").astype(np.float64)
            (code_bits,) = r.unpack("<B")
            codes = unpack_codes(r.take(math.ceil(n * code_bits / 8)), code_bits, n)
            cb = Codebook(levels, alpha, _SCHEMES_BY_CODE[scheme], bit_width)
            layers.append(QuantizedLayer(name, shape, bit_width, codes, cb))
        else:
            raise FormatError(f"unknown layer tag {tag}")
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last layer")
    model = ModelFile(layers, version)
    model.validate()
    return model


def save_model(model: ModelFile, path) -> None:
    data = dumps(model)
    Path(path).write_bytes(data)


def load_model(path) -> ModelFile:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------


def layer_size_bits(param_count: int, bit_width: int | None) -> int:
    """Headline storage bits for one layer; ``None`` means full precision."""
    if bit_width is None or bit_width >= 32:
        return param_count * 32
    return param_count * bit_width + ALPHA_BITS


def layer_size_bytes(param_count: int, bit_width: int | None) -> int:
    return math.ceil(layer_size_bits(param_count, bit_width) / 8)


@dataclass
class SizeReport:
    total_bytes: int
    full_precision_bytes: int
    codebook_bytes: int
    per_layer: dict

    @property
    def ratio(self) -> float:
        return self.full_precision_bytes / self.total_bytes if self.total_bytes else 1.0

    def format(self) -> str:
        lines = [f"{'layer':<32} {'params':>10} {'bits':>5} {'bytes':>12}"]
        for name, (n, b, size) in self.per_layer.items():
            lines.append(f"{name:<32} {n:>10} {b:>5} {size:>12}")
        lines.append(f"total bytes          {self.total_bytes}")
        lines.append(f"full-precision bytes {self.full_precision_bytes}")
        lines.append(f"compression ratio    {self.ratio:.2f}x")
        lines.append(f"codebook overhead    {self.codebook_bytes} bytes (not in total)")
        return "\n".join(lines)


def model_size_bytes(model: ModelFile) -> SizeReport:
    total = full = books = 0
    per_layer = {}
    for layer in model.layers:
        n = layer.param_count
        if isinstance(layer, QuantizedLayer):
            bits = layer.bit_width
            books += 4 * layer.codebook.size
        else:
            bits = 32
        size = layer_size_bytes(n, bits)
        per_layer[layer.name] = (n, bits, size)
        total += size
        full += layer_size_bytes(n, None)
    return SizeReport(total, full, books, per_layer)
