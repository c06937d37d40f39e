import math
import os

import numpy as np
import pytest

from purlab.graph import make_graph
from purlab.io import (
    MAGIC,
    graph_rows,
    read_csv,
    read_graph,
    read_grid,
    read_json,
    to_json,
    write_csv,
    write_graph,
    write_grid,
    write_json,
)


def test_grid_file(tmp_path) -> None:
    path = os.path.join(tmp_path, "sub", "grid.bin")
    values = np.arange(12, dtype=float).reshape(3, 4)
    write_grid(path, values, (0.5, 0.25), origin=(1.0, 2.0), extras=(7.0,))
    grid = read_grid(path)
    np.testing.assert_array_equal(grid.values, values)
    assert grid.n == 2
    np.testing.assert_array_equal(grid.spacing, [0.5, 0.25])
    np.testing.assert_array_equal(grid.origin, [1.0, 2.0])
    np.testing.assert_array_equal(grid.extras, [7.0])
    header = len(MAGIC) + 8 + 2 * 8 + 2 * 8 + 2 * 8 + 4 + 8
    assert os.path.getsize(path) == header + 12 * 8


def test_grid_spacing_mismatch(tmp_path) -> None:
    with pytest.raises(ValueError):
        write_grid(os.path.join(tmp_path, "bad.bin"), np.zeros((2, 2)), (0.5,))


def test_grid_corruption(tmp_path) -> None:
    path = os.path.join(tmp_path, "grid.bin")
    write_grid(path, np.ones((4, 4)), (0.25, 0.0625))
    with open(path, "rb") as fin:
        blob = fin.read()
    broken = os.path.join(tmp_path, "broken.bin")
    for payload in (b"NOTAGRID" + blob[len(MAGIC):], blob[:-8], blob + b"\x00"):
        with open(broken, "wb") as fout:
            fout.write(payload)
        with pytest.raises(ValueError):
            read_grid(broken)


def test_graph_file_keeps_trend(tmp_path) -> None:
    psi = make_graph("affine", n_x=16, n_t=256, slope=0.5, offset=0.1)
    path = os.path.join(tmp_path, "psi.bin")
    write_graph(path, psi)
    back = read_graph(path)
    assert back.n == 2
    assert back.hx == pytest.approx(psi.hx)
    np.testing.assert_allclose(back.full_values(), psi.full_values())
    rows = graph_rows(back)
    assert len(rows) == 16 * 256
    assert set(rows[0]) == {"x1", "t", "psi"}
    assert rows[1]["psi"] == pytest.approx(0.1)


def test_graph_file_checks_time_step(tmp_path) -> None:
    path = os.path.join(tmp_path, "psi.bin")
    write_grid(path, np.zeros((4, 4)), (0.25, 0.25))
    with pytest.raises(ValueError):
        read_graph(path)


def test_csv(tmp_path) -> None:
    path = os.path.join(tmp_path, "table.csv")
    write_csv(path, [{"a": 1, "b": np.float64(0.5)}, {"a": 2, "b": math.nan}])
    columns, rows = read_csv(path)
    assert columns == ["a", "b"]
    assert rows[0] == {"a": "1", "b": "0.5"}
    assert rows[1]["b"] == ""
    empty = os.path.join(tmp_path, "empty.csv")
    write_csv(empty, [], columns=["cube", "case"])
    columns, rows = read_csv(empty)
    assert columns == ["cube", "case"]
    assert rows == []


def test_json(tmp_path) -> None:
    data = {"value": np.float32(0.25), "bad": math.inf, "flag": np.bool_(True), "array": np.arange(3)}
    text = to_json(data)
    assert '"bad": null' in text
    path = os.path.join(tmp_path, "summary.json")
    write_json(path, data)
    assert read_json(path) == {"value": 0.25, "bad": None, "flag": True, "array": [0, 1, 2]}
