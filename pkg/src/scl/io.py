"""CSV, plot-data and binary-cache writers.

Decimal output uses 17 significant digits so doubles round-trip exactly.
The binary cache is ``b"SCL1"`` followed by a little-endian header and the
``V``, region and residual arrays as row-major doubles.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .game import REGION_NAMES, FreeBoundaries, SolverParams, ValueSurface, classify
from .grid import Grid

FMT = "%.17g"
MAGIC = b"SCL1"
# nt, ny, T, lo, hi, terminal flag, theta, omega, sweep_tol, residual_tol, kink_tol, max_sweeps
_HEADER = struct.Struct("<qqdddqdddddq")
_TERMINALS = {"g": 0, "g_tilde": 1}


def fmt(value) -> str:
    return FMT % value


def write_table(path, header, columns, sep=","):
    """Write equal-length columns; ints and strings are written as is."""
    path = Path(path)
    cols = [np.asarray(c) for c in columns]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(sep.join(header) + "\n")
        for row in zip(*cols):
            fh.write(sep.join(_cell(v) for v in row) + "\n")
    return path


def _cell(v):
    if isinstance(v, (np.floating, float)):
        return fmt(float(v))
    return str(v)


def write_surface_csv(path, surface: ValueSurface):
    g = surface.grid
    tt, yy = g.mesh()
    names = np.vectorize(REGION_NAMES.get)(surface.region)
    return write_table(path, ["t", "y", "V", "region", "residual"],
                       [tt.ravel(), yy.ravel(), surface.V.ravel(), names.ravel(),
                        surface.complementarity_residual.ravel()])


def write_boundaries_csv(path, fb: FreeBoundaries):
    cols = [fb.t, fb.a_tilde, fb.b_tilde, fb.slope_a, fb.slope_b]
    header = ["t", "a_tilde", "b_tilde", "slope_a", "slope_b"]
    if fb.curves is not None:
        cols += [fb.curves.a, fb.curves.b]
        header += ["a", "b"]
    return write_table(path, header, cols)


def write_w_csv(path, ws, residual, region):
    g = ws.grid
    tt, yy = g.mesh()
    names = np.vectorize(REGION_NAMES.get)(region)
    return write_table(path, ["s", "x", "W", "Wx", "residual", "region"],
                       [tt.ravel(), yy.ravel(), ws.W.ravel(), ws.Wx.ravel(), residual.ravel(),
                        names.ravel()])


def write_keyvalue(path, items):
    """``key: value`` lines; floats at 17 significant digits."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for key, value in items:
            fh.write(f"{key}: {_cell(value) if not isinstance(value, bool) else value}\n")
    return path


# -- binary cache ---------------------------------------------------------------------------


def write_cache(path, surface: ValueSurface):
    g = surface.grid
    p = surface.params
    head = _HEADER.pack(g.nt, g.ny, g.T, g.lo, g.hi, _TERMINALS[surface.terminal_kind], p.theta,
                        p.omega, p.sweep_tol, p.residual_tol, p.kink_tol, p.max_sweeps)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in (surface.V, surface.region.astype(float), surface.complementarity_residual))
    Path(path).write_bytes(MAGIC + head + body)
    return Path(path)


def read_cache(path, spec) -> ValueSurface:
    """Load a cached surface; obstacles are re-evaluated from ``spec``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a solver cache (bad magic)")
    nt, ny, T, lo, hi, term, theta, omega, sweep_tol, res_tol, kink_tol, max_sweeps = \
        _HEADER.unpack_from(data, 4)
    grid = Grid(T, lo, hi, nt, ny)
    if abs(T - spec.T) > 1e-12 or lo != spec.band_lo or hi != spec.band_hi:
        raise ValueError(f"{path}: cache grid does not match the configured problem")
    off = 4 + _HEADER.size
    size = nt * ny * 8
    if len(data) != off + 3 * size:
        raise ValueError(f"{path}: truncated cache")
    arrs = [np.frombuffer(data, dtype="<f8", count=nt * ny, offset=off + k * size).reshape(nt, ny).copy()
            for k in range(3)]
    V, region, res = arrs
    tt, yy = grid.mesh()
    lower = -spec.fn("f1")(tt, yy) * np.ones_like(tt)
    upper = spec.fn("f2")(tt, yy) * np.ones_like(tt)
    params = SolverParams(theta, omega, sweep_tol, int(max_sweeps), res_tol, kink_tol)
    kind = {v: k for k, v in _TERMINALS.items()}[term]
    stored = region.astype(np.int8)
    if not np.array_equal(stored, classify(V, lower, upper)):
        raise ValueError(f"{path}: cached regions disagree with the configured obstacles")
    return ValueSurface(grid, V, stored, res, lower, upper, params, kind)


# -- plot data -------------------------------------------------------------------------------


def write_plot_columns(path, header, columns):
    """Whitespace-separated columns with a ``#`` header line (gnuplot style)."""
    path = Path(path)
    cols = [np.asarray(c, dtype=float) for c in columns]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in zip(*cols):
            fh.write(" ".join(fmt(v) for v in row) + "\n")
    return path


def write_region_map(path, surface: ValueSurface):
    """``t y region`` blocks separated by blank lines, for ``splot ... with image``."""
    g = surface.grid
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("# t y region(-1 lower contact, 0 continuation, 1 upper contact)\n")
        for n in range(g.nt):
            for i in range(g.ny):
                fh.write(f"{fmt(g.t[n])} {fmt(g.y[i])} {int(surface.region[n, i])}\n")
            fh.write("\n")
    return path
