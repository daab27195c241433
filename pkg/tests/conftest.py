import pytest

from scl.game import extract_free_boundaries, solve_dynkin_game
from scl.model import compute_ab_curves, p0, p0_jump, terminal_transform
from scl.singular import compute_holding_cost, integrate_value


class Bundle:
    """A solved fixture: spec, grid, surface, boundaries and W."""

    def __init__(self, spec, n=201, terminal="g"):
        self.spec = spec
        self.grid = spec.grid(n, n)
        self.tt = terminal_transform(spec, self.grid) if terminal == "g_tilde" else None
        self.surface = solve_dynkin_game(spec, self.grid, terminal, transformed=self.tt)
        self.curves = compute_ab_curves(spec, self.grid)
        self.fb = extract_free_boundaries(self.surface, spec, self.curves)
        self.ws = integrate_value(self.surface, spec)
        self.C, self.H = compute_holding_cost(self.ws, self.fb, spec)
        self.tt = self.tt or terminal_transform(spec, self.grid)


@pytest.fixture(scope="session")
def p0_bundle():
    return Bundle(p0())


@pytest.fixture(scope="session")
def jump_bundle():
    return Bundle(p0_jump(), terminal="g_tilde")


@pytest.fixture(scope="session")
def p0_coarse():
    return Bundle(p0(), n=101)
