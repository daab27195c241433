import numpy as np
import pytest

from scl import io
from scl.model import p0


def test_cache_round_trip_is_exact(p0_coarse, tmp_path):
    b = p0_coarse
    path = io.write_cache(tmp_path / "c.scl", b.surface)
    assert path.read_bytes()[:4] == b"SCL1"
    back = io.read_cache(path, b.spec)
    assert back.grid == b.surface.grid
    assert back.V.tobytes() == b.surface.V.tobytes()
    assert np.array_equal(back.region, b.surface.region)
    assert back.complementarity_residual.tobytes() == b.surface.complementarity_residual.tobytes()
    assert back.params == b.surface.params
    assert back.terminal_kind == "g"


def test_cache_rejects_other_problems(p0_coarse, tmp_path):
    path = io.write_cache(tmp_path / "c.scl", p0_coarse.surface)
    with pytest.raises(ValueError, match="does not match"):
        io.read_cache(path, p0(T=2.0))
    with pytest.raises(ValueError, match="disagree"):
        io.read_cache(path, p0(f2="2.5 - tanh(y - 1)"))


def test_cache_rejects_garbage(p0_coarse, tmp_path):
    bad = tmp_path / "bad.scl"
    bad.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(ValueError, match="magic"):
        io.read_cache(bad, p0_coarse.spec)
    good = io.write_cache(tmp_path / "c.scl", p0_coarse.surface).read_bytes()
    cut = tmp_path / "cut.scl"
    cut.write_bytes(good[:-8])
    with pytest.raises(ValueError, match="truncated"):
        io.read_cache(cut, p0_coarse.spec)


def test_decimal_output_round_trips_doubles(p0_coarse, tmp_path):
    b = p0_coarse
    path = io.write_surface_csv(tmp_path / "V.csv", b.surface)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,y,V,region,residual"
    values = np.array([float(line.split(",")[2]) for line in lines[1:]])
    assert values.tobytes() == b.surface.V.ravel().tobytes()
    assert len(lines) == b.grid.nt * b.grid.ny + 1


def test_boundaries_csv_columns(p0_coarse, tmp_path):
    b = p0_coarse
    path = io.write_boundaries_csv(tmp_path / "fb.csv", b.fb)
    head = path.read_text().splitlines()[0].split(",")
    assert head[:3] == ["t", "a_tilde", "b_tilde"]


def test_plot_columns_are_whitespace_separated(tmp_path):
    path = io.write_plot_columns(tmp_path / "c.dat", ["t", "a"], [[0.0, 0.1], [1.0 / 3, -2.0]])
    lines = path.read_text().splitlines()
    assert lines[0] == "# t a"
    assert float(lines[1].split()[1]) == 1.0 / 3


def test_keyvalue_uses_seventeen_digits(tmp_path):
    path = io.write_keyvalue(tmp_path / "r.txt", [("x", 0.1), ("ok", True), ("n", 3)])
    assert path.read_text() == "x: 0.10000000000000001\nok: True\nn: 3\n"
