"""Reading and writing grids, graphs, tables and summaries

The binary grid format is

    b"PURGRID1"
    uint32 n, uint32 ndim
    ndim x uint64 shape
    ndim x float64 spacing, ndim x float64 origin
    uint32 n_extra, n_extra x float64 extras
    row-major float64 payload

with every field little-endian.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .graph import GraphFunction

MAGIC = b"PURGRID1"


@dataclass
class GridData:
    values: np.ndarray
    n: int
    spacing: np.ndarray
    origin: np.ndarray
    extras: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_grid(
    path: str,
    values: np.ndarray,
    spacing: Sequence[float],
    origin: Sequence[float] | None = None,
    n: int | None = None,
    extras: Sequence[float] = (),
) -> None:
    """Write a sampled field in the binary grid format

    Parameters
    ----------
    path: str
        Output file
    values: np.ndarray
        Samples, one axis per coordinate
    spacing: Sequence[float]
        Lattice step of every axis
    origin: Sequence[float] | None
        Coordinates of the first sample, zeros by default
    n: int | None
        Space-time dimension recorded in the header, ``values.ndim`` by default
    extras: Sequence[float]
        Free-form float64 trailer of the header
    """
    values = np.ascontiguousarray(values, dtype="<f8")
    ndim = values.ndim
    spacing_ = np.asarray(spacing, dtype="<f8")
    origin_ = np.zeros(ndim, dtype="<f8") if origin is None else np.asarray(origin, dtype="<f8")
    extras_ = np.asarray(extras, dtype="<f8")
    if spacing_.shape != (ndim,) or origin_.shape != (ndim,):
        raise ValueError(f"spacing and origin need {ndim} entries, got {spacing_.size} and {origin_.size}")
    _ensure_parent(path)
    with open(path, "wb") as fout:
        fout.write(MAGIC)
        fout.write(np.array([ndim if n is None else n, ndim], dtype="<u4").tobytes())
        fout.write(np.array(values.shape, dtype="<u8").tobytes())
        fout.write(spacing_.tobytes())
        fout.write(origin_.tobytes())
        fout.write(np.array([extras_.size], dtype="<u4").tobytes())
        fout.write(extras_.tobytes())
        fout.write(values.tobytes(order="C"))


def read_grid(path: str) -> GridData:
    """Read a file written by `write_grid`

    Raises
    ------
    ValueError
        If the magic is wrong or the payload is truncated
    """
    with open(path, "rb") as fin:
        blob = fin.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a grid file (magic {blob[:len(MAGIC)]!r})")
    pos = len(MAGIC)

    def _take(dtype: str, count: int) -> np.ndarray:
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(blob):
            raise ValueError(f"{path} is truncated at byte {pos}")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += size
        return out

    n, ndim = (int(v) for v in _take("<u4", 2))
    shape = tuple(int(s) for s in _take("<u8", ndim))
    spacing = _take("<f8", ndim).copy()
    origin = _take("<f8", ndim).copy()
    n_extra = int(_take("<u4", 1)[0])
    extras = _take("<f8", n_extra).copy()
    payload = _take("<f8", int(np.prod(shape)))
    if pos != len(blob):
        raise ValueError(f"{path} has {len(blob) - pos} trailing bytes")
    return GridData(payload.reshape(shape).astype(float), n, spacing, origin, extras)


def write_graph(path: str, psi: GraphFunction) -> None:
    """Periodic samples of psi, with its affine trend in the header extras"""
    write_grid(path, psi.values, psi.steps, n=psi.n, extras=tuple(psi.slope) + (psi.offset,))


def read_graph(path: str) -> GraphFunction:
    grid = read_grid(path)
    if grid.values.ndim != grid.n:
        raise ValueError(f"{path} holds a {grid.values.ndim}-axis grid for n = {grid.n}")
    if not np.allclose(grid.spacing[-1], grid.spacing[0] ** 2):
        raise ValueError(f"{path} time step {grid.spacing[-1]} is not the square of {grid.spacing[0]}")
    extras = grid.extras
    slope = tuple(extras[:-1]) if extras.size else ()
    offset = float(extras[-1]) if extras.size else 0.0
    return GraphFunction(grid.values, float(grid.spacing[0]), slope, offset)


def graph_rows(psi: GraphFunction) -> list[dict[str, float]]:
    """One row per lattice node with the coordinates and psi, trend included"""
    x, t = psi.coordinates()
    values = psi.full_values()
    names = [f"x{i + 1}" for i in range(psi.n - 1)]
    rows = []
    for idx in np.ndindex(*psi.shape):
        row = {name: float(x[idx][i]) for i, name in enumerate(names)}
        row["t"] = float(t[idx])
        row["psi"] = float(values[idx])
        rows.append(row)
    return rows


def write_csv(path: str, rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> None:
    """Write rows with a header, ``columns`` fixes the order and keeps empty tables valid"""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as fout:
        writer = csv.DictWriter(fout, fieldnames=list(columns), extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _plain(row.get(key)) for key in columns})


def read_csv(path: str) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, encoding="utf-8", newline="") as fin:
        reader = csv.DictReader(fin)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _plain(value: Any) -> Any:
    """numpy and non-finite values as json-friendly python values"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def to_json(data: Any) -> str:
    return json.dumps(_plain(data), sort_keys=True, indent=2, allow_nan=False)


def write_json(path: str, data: Any) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fout:
        fout.write(to_json(data))
        fout.write("\n")


def read_json(path: str) -> Any:
    with open(path, encoding="utf-8") as fin:
        return json.load(fin)
