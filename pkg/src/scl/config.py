"""Run configuration: one JSON document.

Schema (all sections optional except ``problem``)::

    {
      "problem": {
        "name": "P0",
        "constants": {"k": 1.0},               # named numbers usable below
        "c": 0.0, "d": 0.0, "T": 1.0,          # numbers or constant names
        "band": [-6.0, 6.0], "M": 10.0, "eps": 0.5,
        "sigma": "1", "f1": "2 + tanh(y + k)", "f2": "...", "h": "y", "g": "..."
      },
      "grid":   {"nt": 201, "ny": 201},
      "solver": {"theta": 0.5, "omega": 1.2, "sweep_tol": 1e-10, "max_sweeps": 10000,
                 "residual_tol": 1e-6, "kink_tol": 10.0, "hjb_tol": 1e-4},
      "mc":     {"n_paths": 100000, "dt": 0.001, "seed": 12345, "s": 0.0, "x": 0.0,
                 "perturbations": [{"kind": "shift", "delta": 0.25}, ...],
                 "scheme_bias_c": 0.1, "ci_budget": 0.05},
      "output": {"directory": "out", "formats": ["csv", "cache"]},
      "general_terminal": false
    }

Constants are substituted textually into the expression strings (whole
identifiers only) before parsing.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import expr as ex
from .game import SolverParams
from .model import ProblemSpec

RESERVED = set(ex.VARIABLES) | set(ex.ARITY)

DEFAULT_PERTURBATIONS = (
    {"kind": "shift", "delta": 0.25},
    {"kind": "shift", "delta": -0.25},
    {"kind": "widen", "delta": 0.5},
    {"kind": "narrow", "delta": 0.25},
    {"kind": "frozen", "delta": 0.0},
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    sigma: str
    f1: str
    f2: str
    h: str
    g: str
    c: float | str = 0.0
    d: float | str = 0.0
    T: float | str = 1.0
    band: tuple = (-6.0, 6.0)
    M: float | str = 10.0
    eps: float | str = 1e-3
    name: str = "problem"
    constants: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridConfig:
    nt: int = 201
    ny: int = 201


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 0.5
    omega: float = 1.2
    sweep_tol: float = 1e-10
    max_sweeps: int = 10000
    residual_tol: float = 1e-6
    kink_tol: float = 10.0
    hjb_tol: float = 1e-4

    def params(self) -> SolverParams:
        return SolverParams(self.theta, self.omega, self.sweep_tol, self.max_sweeps,
                            self.residual_tol, self.kink_tol)


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 100_000
    dt: float = 1e-3
    seed: int = 12345
    s: float = 0.0
    x: float = 0.0
    perturbations: tuple = DEFAULT_PERTURBATIONS
    scheme_bias_c: float | None = None
    ci_budget: float = 0.05


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple = ("csv", "cache")


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemConfig
    grid: GridConfig = GridConfig()
    solver: SolverConfig = SolverConfig()
    mc: MCConfig = MCConfig()
    output: OutputConfig = OutputConfig()
    general_terminal: bool = False

    # -- construction ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict) or "problem" not in data:
            raise ConfigError("config must be a JSON object with a 'problem' section")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        cfg = cls(
            problem=_section(ProblemConfig, data["problem"], "problem"),
            grid=_section(GridConfig, data.get("grid", {}), "grid"),
            solver=_section(SolverConfig, data.get("solver", {}), "solver"),
            mc=_section(MCConfig, data.get("mc", {}), "mc"),
            output=_section(OutputConfig, data.get("output", {}), "output"),
            general_terminal=bool(data.get("general_terminal", False)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from err
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mc"]["perturbations"] = [dict(p) for p in self.mc.perturbations]
        d["output"]["formats"] = list(self.output.formats)
        d["problem"]["band"] = list(self.problem.band)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **sections) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(sections)
        return RunConfig(**values)

    # -- checks and resolution ------------------------------------------------------------

    def validate(self):
        p = self.problem
        for name in p.constants:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", name):
                raise ConfigError(f"constant name {name!r} is not an identifier")
            if name in RESERVED:
                raise ConfigError(f"constant name {name!r} is reserved")
            if not isinstance(p.constants[name], (int, float)) or isinstance(p.constants[name], bool):
                raise ConfigError(f"constant {name!r} must be a number")
        if self.grid.nt < 2 or self.grid.ny < 3:
            raise ConfigError("grid needs nt >= 2 and ny >= 3")
        if self.mc.n_paths <= 0:
            raise ConfigError("mc.n_paths must be positive")
        if self.mc.dt <= 0:
            raise ConfigError("mc.dt must be positive")
        if len(p.band) != 2:
            raise ConfigError("problem.band must be [lo, hi]")
        for item in self.mc.perturbations:
            if set(item) - {"kind", "delta"} or item.get("kind") not in ("shift", "widen", "narrow", "frozen"):
                raise ConfigError(f"bad perturbation entry {item!r}")
        self.spec()  # parse every expression and number now

    def _number(self, key, value):
        if isinstance(value, bool):
            raise ConfigError(f"problem.{key} must be a number")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str) and value in self.problem.constants:
            return float(self.problem.constants[value])
        raise ConfigError(f"problem.{key}: {value!r} is neither a number nor a defined constant")

    def substituted(self, key) -> str:
        """Expression string for ``key`` after constant substitution."""
        text = getattr(self.problem, key)
        if not isinstance(text, str):
            raise ConfigError(f"problem.{key} must be an expression string")
        consts = self.problem.constants
        if not consts:
            return text
        pattern = re.compile(r"\b(" + "|".join(re.escape(k) for k in sorted(consts, key=len, reverse=True)) + r")\b")
        return pattern.sub(lambda m: f"({float(consts[m.group(1)])!r})", text)

    def spec(self) -> ProblemSpec:
        p = self.problem
        exprs = {}
        for key in ("sigma", "f1", "f2", "h", "g"):
            try:
                exprs[key] = ex.parse(self.substituted(key))
            except ex.ExprSyntaxError as err:
                raise ConfigError(f"problem.{key}: {err}") from err
        lo, hi = (self._number("band", v) for v in p.band)
        return ProblemSpec(
            c=self._number("c", p.c), d=self._number("d", p.d), T=self._number("T", p.T),
            band_lo=lo, band_hi=hi, M=self._number("M", p.M), eps=self._number("eps", p.eps),
            name=p.name, **exprs,
        )


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = dict(data)
    if name == "problem":
        missing = {"sigma", "f1", "f2", "h", "g"} - set(values)
        if missing:
            raise ConfigError(f"problem section is missing {sorted(missing)}")
        if "band" in values:
            values["band"] = tuple(values["band"])
        values["constants"] = dict(values.get("constants", {}))
    if name == "mc" and "perturbations" in values:
        values["perturbations"] = tuple(dict(p) for p in values["perturbations"])
    if name == "output" and "formats" in values:
        values["formats"] = tuple(values["formats"])
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(f"section {name!r}: {err}") from err
