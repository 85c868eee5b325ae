"""Volume files: a JSON header next to a raw little-endian payload."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class VolumeHeader:
    shape: tuple
    spacing_mm: tuple
    dtype: str
    data: str
    order: str = "C"

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * _DTYPES[self.dtype].itemsize


def write_volume(path, array: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> Path:
    """Write ``<path>`` (JSON header) and ``<path stem>.raw`` (payload)."""
    path = Path(path)
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = "u8"
    else:
        code = "f32"
    raw = path.with_suffix(".raw")
    header = {
        "shape": list(array.shape),
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": code,
        "order": "C",
        "data": raw.name,
    }
    path.write_text(json.dumps(header) + "\n", encoding="utf-8")
    raw.write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return path


def read_header(path) -> VolumeHeader:
    h = json.loads(Path(path).read_text(encoding="utf-8"))
    if h.get("dtype") not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {h.get('dtype')!r}")
    if h.get("order", "C") != "C":
        raise ValueError(f"{path}: only C order is supported")
    return VolumeHeader(tuple(h["shape"]), tuple(h["spacing_mm"]), h["dtype"], h["data"], h.get("order", "C"))


def read_volume(path) -> tuple:
    """Return (array, spacing_mm)."""
    path = Path(path)
    header = read_header(path)
    payload = (path.parent / header.data).read_bytes()
    if len(payload) != header.nbytes:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {header.nbytes}")
    arr = np.frombuffer(payload, dtype=_DTYPES[header.dtype]).reshape(header.shape)
    native = np.float32 if header.dtype == "f32" else np.uint8
    return arr.astype(native), header.spacing_mm
