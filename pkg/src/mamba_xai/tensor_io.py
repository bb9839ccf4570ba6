"""Portable tensor bundles, model configs, and PGM heatmaps.

A bundle file is a single UTF-8 JSON manifest line followed by a raw
little-endian blob::

    {"entries": [{"name": ..., "dtype": "f32", "shape": [...],
                  "byte_offset": 0, "byte_length": 24}, ...],
     "blob_length": 24}\\n
    <blob bytes>
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Mapping

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
CLS_POSITIONS = ("none", "first", "middle", "last")


class BundleError(ValueError):
    """Base class for bundle decoding/encoding failures."""

    code = "bundle_error"


class MalformedManifestError(BundleError):
    code = "malformed_manifest"


class ShapeMismatchError(BundleError):
    code = "shape_byte_mismatch"


class UnknownDtypeError(BundleError):
    code = "unknown_dtype"


class DuplicateNameError(BundleError):
    code = "duplicate_name"


class LayoutError(BundleError):
    """Offsets not ascending, overlapping, or outside the blob."""

    code = "bad_layout"


class ConfigError(ValueError):
    pass


def _dtype_name(dtype: np.dtype) -> str:
    for name, dt in DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return name
    raise UnknownDtypeError(f"unsupported dtype {dtype!r}; use float32 or float64")


class TensorBundle(Mapping[str, np.ndarray]):
    """Ordered, immutable-by-convention collection of named f32/f64 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self._tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        arr = np.asarray(arr)
        dt = DTYPES[_dtype_name(arr.dtype)]
        self._tensors[name] = np.array(arr, dtype=dt, order="C")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def manifest(self) -> list[dict]:
        entries, offset = [], 0
        for name, arr in self._tensors.items():
            nbytes = arr.size * arr.itemsize
            entries.append(
                {
                    "name": name,
                    "dtype": _dtype_name(arr.dtype),
                    "shape": list(arr.shape),
                    "byte_offset": offset,
                    "byte_length": nbytes,
                }
            )
            offset += nbytes
        return entries

    def to_bytes(self) -> bytes:
        entries = self.manifest()
        blob = b"".join(arr.tobytes(order="C") for arr in self._tensors.values())
        header = json.dumps({"entries": entries, "blob_length": len(blob)}, separators=(",", ":"))
        return header.encode("utf-8") + b"\n" + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "TensorBundle":
        nl = data.find(b"\n")
        if nl < 0:
            raise MalformedManifestError("missing newline after manifest")
        try:
            header = json.loads(data[:nl].decode("utf-8"))
            entries = header["entries"]
            blob_length = int(header["blob_length"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedManifestError(f"cannot parse manifest: {exc}") from exc
        if not isinstance(entries, list):
            raise MalformedManifestError("'entries' must be a list")
        blob = memoryview(data)[nl + 1 :]
        if len(blob) != blob_length:
            raise LayoutError(f"blob is {len(blob)} bytes, manifest declares {blob_length}")

        bundle = cls()
        prev_end = 0
        for e in entries:
            try:
                name, dtype_name = e["name"], e["dtype"]
                shape = [int(s) for s in e["shape"]]
                offset, length = int(e["byte_offset"]), int(e["byte_length"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedManifestError(f"bad entry {e!r}: {exc}") from exc
            if dtype_name not in DTYPES:
                raise UnknownDtypeError(f"entry {name!r}: unknown dtype {dtype_name!r}")
            if any(s < 0 for s in shape):
                raise MalformedManifestError(f"entry {name!r}: negative dimension")
            dt = DTYPES[dtype_name]
            expected = math.prod(shape) * dt.itemsize
            if length != expected:
                raise ShapeMismatchError(
                    f"entry {name!r}: shape {shape} needs {expected} bytes, manifest says {length}"
                )
            if offset < prev_end:
                raise LayoutError(f"entry {name!r}: offset {offset} overlaps or is not ascending")
            if offset + length > blob_length:
                raise LayoutError(f"entry {name!r}: extends past end of blob")
            prev_end = offset + length
            arr = np.frombuffer(blob[offset : offset + length], dtype=dt).reshape(shape)
            bundle.add(name, arr.copy())
        return bundle


def save_bundle(bundle: TensorBundle | Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    if not isinstance(bundle, TensorBundle):
        bundle = TensorBundle(bundle)
    with open(path, "wb") as fh:
        fh.write(bundle.to_bytes())


def load_bundle(path: str | os.PathLike) -> TensorBundle:
    with open(path, "rb") as fh:
        return TensorBundle.from_bytes(fh.read())


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    channels: int
    state_size: int
    conv_kernel: int = 4
    cls_position: str = "last"
    bidirectional: bool = False
    num_classes: int = 2
    expand: int = 1

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        for name in ("channels", "state_size", "conv_kernel", "num_classes", "expand"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.cls_position not in CLS_POSITIONS:
            raise ConfigError(f"cls_position must be one of {CLS_POSITIONS}, got {self.cls_position!r}")
        if not isinstance(self.bidirectional, bool):
            raise ConfigError("bidirectional must be a boolean")

    @property
    def inner(self) -> int:
        return self.expand * self.channels

    @property
    def has_cls(self) -> bool:
        return self.cls_position != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ModelConfig.from_dict(data)


def save_config(config: ModelConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def minmax_abs_u8(values: np.ndarray) -> np.ndarray:
    """Min-max normalize ``|values|`` to 0..255."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    lo, hi = a.min(initial=0.0), a.max(initial=0.0)
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(values: np.ndarray, path: str | os.PathLike) -> None:
    """Write a 2-D array as an 8-bit binary (P5) PGM after abs min-max scaling."""
    img = minmax_abs_u8(np.atleast_2d(values))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
