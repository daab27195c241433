from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform time-space grid on ``[0, T] x [lo, hi]`` with ``y = 0`` a node."""

    T: float
    lo: float
    hi: float
    nt: int
    ny: int

    def __post_init__(self):
        if self.nt < 2 or self.ny < 3:
            raise ValueError(f"need nt >= 2 and ny >= 3, got nt={self.nt}, ny={self.ny}")
        if not (self.T > 0 and self.lo < 0 < self.hi):
            raise ValueError("need T > 0 and lo < 0 < hi")
        j0 = -self.lo / self.dy
        if abs(j0 - round(j0)) > 1e-9:
            raise ValueError(f"y = 0 is not a grid node for band [{self.lo}, {self.hi}] with ny={self.ny}")

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    @property
    def dy(self) -> float:
        return (self.hi - self.lo) / (self.ny - 1)

    @property
    def origin(self) -> int:
        """Index of the node ``y = 0``."""
        return int(round(-self.lo / self.dy))

    @property
    def t(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, self.nt)
        t[-1] = self.T
        return t

    @property
    def y(self) -> np.ndarray:
        # offsets from the origin node keep symmetric bands exactly symmetric
        return self.dy * (np.arange(self.ny) - self.origin).astype(float)

    def mesh(self):
        return np.meshgrid(self.t, self.y, indexing="ij")

    def refine(self, factor: int = 2, time_factor: int | None = None) -> "Grid":
        tf = factor if time_factor is None else time_factor
        return Grid(self.T, self.lo, self.hi, (self.nt - 1) * tf + 1, (self.ny - 1) * factor + 1)

    def is_symmetric(self) -> bool:
        return self.lo == -self.hi


def integrate_from(values, dx, origin, axis=-1):
    """Cumulative trapezoid of ``values`` along ``axis``, zero at index ``origin``."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    cells = 0.5 * (v[..., 1:] + v[..., :-1]) * dx
    out = np.zeros_like(v)
    out[..., origin + 1:] = np.cumsum(cells[..., origin:], axis=-1)
    if origin > 0:
        out[..., :origin] = -np.cumsum(cells[..., :origin][..., ::-1], axis=-1)[..., ::-1]
    return np.moveaxis(out, -1, axis)
