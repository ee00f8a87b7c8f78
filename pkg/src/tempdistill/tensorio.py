"""Tensor files and layer-trace directories.

Binary format: one ASCII header line
``TNSR v1 <rows> <cols> dtype=f32 order=row-major`` followed by
``rows * cols`` little-endian float32 values.  The text variant has one row
per line with space-separated decimals.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "TNSR v1"
_LAYER_GLOB = "layer_*.tnsr"


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_tensor(X) -> bytes:
    X = np.asarray(X, dtype="<f4")
    if X.ndim != 2:
        raise ValueError("tensor files hold 2-D arrays")
    header = f"{MAGIC} {X.shape[0]} {X.shape[1]} dtype=f32 order=row-major\n".encode("ascii")
    return header + np.ascontiguousarray(X).tobytes()


def loads_tensor(data: bytes) -> np.ndarray:
    if data.startswith(MAGIC.encode()):
        nl = data.index(b"\n")
        parts = data[:nl].decode("ascii").split()
        rows, cols = int(parts[2]), int(parts[3])
        if "dtype=f32" not in parts or "order=row-major" not in parts:
            raise ValueError(f"unsupported tensor header: {data[:nl]!r}")
        body = data[nl + 1:]
        if len(body) != 4 * rows * cols:
            raise ValueError(f"tensor body has {len(body)} bytes, expected {4 * rows * cols}")
        return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    rows = [line.split() for line in data.decode("utf-8").splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0))
    if len({len(r) for r in rows}) != 1:
        raise ValueError("ragged rows in text tensor")
    return np.array(rows, dtype=np.float64)


def write_tensor(path, X, text: bool = False) -> None:
    if text:
        X = np.asarray(X, dtype=np.float64)
        atomic_write(path, "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in X))
    else:
        atomic_write(path, dumps_tensor(X))


def read_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def save_trace(directory, model_id: str, layers, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, X in enumerate(layers):
        write_tensor(directory / f"layer_{k:03d}.tnsr", X)
    meta = {"model_id": model_id, "n_layers": len(layers), **(extra or {})}
    atomic_write(directory / "trace.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_trace(directory):
    from tempdistill.cka import LayerTrace

    directory = Path(directory)
    files = sorted(directory.glob(_LAYER_GLOB))
    if not files:
        raise FileNotFoundError(f"no {_LAYER_GLOB} files in {directory}")
    meta_path = directory / "trace.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"model_id": directory.name}
    model_id = meta.pop("model_id")
    meta.pop("n_layers", None)
    return LayerTrace(model_id, [read_tensor(f) for f in files], meta)
