"""On-disk formats: FMAT feature files, SFWT checkpoints, text configs.

FMAT (features):
    magic  "FMAT" (4 bytes)
    u32 LE version (= 1)
    u64 LE rows, u64 LE cols
    rows*cols little-endian IEEE-754 float32, row-major

Feature payloads are float32 for compactness but always promoted to
float64 on load; since float32 -> float64 is exact, a load/store cycle
is bit-lossless.

SFWT (checkpoints): same magic/version header with magic "SFWT", then
    u64 LE tensor count
    per tensor: u32 LE name length, UTF-8 name,
                u32 LE ndim, ndim x u64 LE dims,
                little-endian float64 payload, row-major

Weights are stored at full float64 so save/load round-trips are exact.
Tensor order is the model's traversal order.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` starts
a comment. Unknown keys are rejected; missing keys take the documented
defaults.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .kernel import as_matrix
from .model import ModelConfig

FMAT_MAGIC = b"FMAT"
SFWT_MAGIC = b"SFWT"
FORMAT_VERSION = 1

CONFIG_KEYS = (
    "variant",
    "d_model",
    "num_heads",
    "hop1_ms",
    "blocks",
    "expand",
    "num_classes",
    "ffn_ratio",
    "scale_mode",
    "seed",
)


def write_fmat(path, matrix) -> None:
    m = as_matrix(matrix)
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"feature matrix must be nonempty, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("feature matrix must be finite")
    with open(path, "wb") as f:
        f.write(FMAT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, path):
        self.path = str(path)
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def expect_header(self, magic: bytes):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("<I")
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def read_fmat(path) -> np.ndarray:
    """Load a feature file as a float64 matrix."""
    r = _Reader(path)
    r.expect_header(FMAT_MAGIC)
    rows, cols = r.unpack("<QQ")
    if rows < 1 or cols < 1:
        raise FormatError(f"{r.path}: empty dimensions {rows}x{cols}")
    payload = r.take(rows * cols * 4)
    r.done()
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.isfinite(m).all():
        raise FormatError(f"{r.path}: payload contains non-finite values")
    return m


def write_sfwt(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(SFWT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(named)))
        for name, arr in named.items():
            a = np.asarray(arr, dtype=np.float64)
            if not np.isfinite(a).all():
                raise ValueError(f"tensor {name!r} contains non-finite values")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_sfwt(path) -> dict[str, np.ndarray]:
    """Load a checkpoint as an ordered name -> float64 array mapping."""
    r = _Reader(path)
    r.expect_header(SFWT_MAGIC)
    (count,) = r.unpack("<Q")
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        if ndim < 1 or ndim > 2:
            raise FormatError(f"{r.path}: tensor {name!r} has ndim={ndim}")
        shape = r.unpack(f"<{ndim}Q")
        size = 1
        for s in shape:
            size *= s
        payload = r.take(size * 8)
        a = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if not np.isfinite(a).all():
            raise FormatError(f"{r.path}: tensor {name!r} contains non-finite values")
        if name in named:
            raise FormatError(f"{r.path}: duplicate tensor name {name!r}")
        named[name] = a
    r.done()
    return named


def _parse_int_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in value.split(","))
    except ValueError:
        raise FormatError(f"expected a comma-separated integer list, got {value!r}")


def parse_config_text(text: str) -> tuple[ModelConfig, int]:
    """Parse config text into (ModelConfig, seed)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise FormatError(f"line {lineno}: empty value for {key!r}")
        values[key] = value

    try:
        kwargs = {
            "variant": values.get("variant", "baseline"),
            "d_model": int(values.get("d_model", "512")),
        }
        if "num_heads" in values:
            kwargs["num_heads"] = int(values["num_heads"])
        if "hop1_ms" in values:
            kwargs["hop1_ms"] = float(values["hop1_ms"])
        if "blocks" in values:
            kwargs["blocks_per_stage"] = _parse_int_list(values["blocks"])
        if "expand" in values:
            kwargs["expand_factors"] = _parse_int_list(values["expand"])
        if "num_classes" in values:
            kwargs["num_classes"] = int(values["num_classes"])
        if "ffn_ratio" in values:
            kwargs["ffn_ratio"] = float(values["ffn_ratio"])
        if "scale_mode" in values:
            kwargs["scale_mode"] = values["scale_mode"]
        seed = int(values.get("seed", "0"))
    except ValueError as exc:
        raise FormatError(f"bad config value: {exc}")
    return ModelConfig(**kwargs), seed


def read_config(path) -> tuple[ModelConfig, int]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
