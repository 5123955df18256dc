"""On-disk formats: the tensor dump and parameter manifests.

Dump layout: one ASCII header line ``T5 N C T H W\\n`` followed by the
little-endian float64 row-major payload.  Arrays of fewer than five axes are
stored with leading singleton dims; the manifest remembers the true shape.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import UsageError
from .tensor import Tensor5

_LE64 = np.dtype("<f8")


def write_tensor(path, arr) -> None:
    data = arr.data if isinstance(arr, Tensor5) else np.asarray(arr, dtype=np.float64)
    if data.ndim > 5:
        raise UsageError(f"dump format holds at most 5 axes, got {data.ndim}")
    shape5 = (1,) * (5 - data.ndim) + data.shape
    payload = np.ascontiguousarray(data, dtype=np.float64).reshape(shape5)
    with open(path, "wb") as fh:
        fh.write(("T5 " + " ".join(str(d) for d in shape5) + "\n").encode("ascii"))
        fh.write(payload.astype(_LE64, copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        parts = header.split()
        if len(parts) != 6 or parts[0] != "T5":
            raise UsageError(f"{path}: bad dump header {header!r}")
        shape = tuple(int(p) for p in parts[1:])
        count = int(np.prod(shape))
        payload = np.frombuffer(fh.read(count * 8), dtype=_LE64, count=count)
    return payload.astype(np.float64).reshape(shape)


def read_tensor5(path) -> Tensor5:
    return Tensor5(read_tensor(path))


def save_arrays(directory, named_arrays, manifest_name: str = "manifest.csv") -> None:
    """One dump file per array plus a manifest of names and true shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, (name, arr) in enumerate(named_arrays):
        arr = np.asarray(arr, dtype=np.float64)
        fname = f"{idx:04d}_{name.replace('/', '_').replace('.', '_')}.t5"
        write_tensor(directory / fname, arr)
        rows.append([name, fname, "x".join(str(d) for d in arr.shape)])
    with open(directory / manifest_name, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["name", "file", "shape"])
        wr.writerows(rows)


def load_arrays(directory, manifest_name: str = "manifest.csv") -> dict[str, np.ndarray]:
    directory = Path(directory)
    out: dict[str, np.ndarray] = {}
    with open(directory / manifest_name, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["name", "file", "shape"]:
            raise UsageError(f"bad manifest header {header}")
        for name, fname, shape in rd:
            arr = read_tensor(directory / fname)
            true_shape = tuple(int(d) for d in shape.split("x")) if shape else ()
            out[name] = arr.reshape(true_shape)
    return out
