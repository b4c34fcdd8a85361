"""JSON experiment configs and their translation into model objects."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constraint_map import constraint_map_from_config
from .control import ActionSet, RelaxedControl, cost_from_config
from .geometry import domain_from_config
from .grid import TimeGrid
from .mckean import SystemSpec, initial_from_config
from .stochastic import coefficients_from_config, jumps_from_config


class ConfigError(ValueError):
    pass


REQUIRED = ("domain", "map", "grid")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def particles(self) -> int:
        n = int(self.raw.get("N", 1000))
        if n < 2:
            raise ConfigError("N must be >= 2")
        return n

    @property
    def seeds(self) -> list[int]:
        seeds = self.raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(
                isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers")
        return seeds

    def section(self, key) -> dict:
        sec = self.raw.get(key, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{key!r} must be an object")
        return sec


def parse_config(raw, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    cfg = ExperimentConfig(raw, Path(base_dir))
    cfg.seeds
    cfg.particles
    build_grid(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(raw, path.parent)


def build_grid(cfg: ExperimentConfig) -> TimeGrid:
    g = cfg.raw["grid"]
    try:
        horizon, steps = float(g["T"]), int(g["M"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("grid needs numeric T and integer M") from None
    if not horizon > 0 or steps < 1:
        raise ConfigError("grid needs T > 0 and M >= 1")
    return TimeGrid.uniform(horizon, steps)


def build_system(cfg: ExperimentConfig, grid: TimeGrid | None = None) -> SystemSpec:
    """SystemSpec for ``cfg`` on its own grid (or on ``grid``)."""
    grid = grid if grid is not None else build_grid(cfg)
    try:
        domain = domain_from_config(cfg.raw["domain"])
        cmap = constraint_map_from_config(cfg.raw["map"], grid)
        d = domain.dim
        coeffs = coefficients_from_config(cfg.raw.get("coefficients", {}), d)
        jumps = jumps_from_config(cfg.raw.get("jumps"), d)
        initial = initial_from_config(cfg.raw.get("initial", {"name": "point", "value": [0.0] * d}))
        return SystemSpec(coeffs, domain, cmap, grid, initial, jumps)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def build_actions(cfg: ExperimentConfig) -> ActionSet:
    try:
        return ActionSet(cfg.raw["actions"])
    except KeyError:
        raise ConfigError("config needs an 'actions' list") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid actions: {exc}") from None


def build_cost(cfg: ExperimentConfig):
    try:
        return cost_from_config(cfg.section("cost"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_relaxed(cfg: ExperimentConfig, actions: ActionSet, steps: int) -> RelaxedControl:
    """Relaxed control from {"constant": w} or {"file": path to CSV step,w_0,...}."""
    rec = cfg.section("relaxed")
    try:
        if "constant" in rec:
            return RelaxedControl.constant(actions, rec["constant"], steps)
        if "file" in rec:
            path = cfg.base_dir / rec["file"]
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
            if rows and not _is_number(rows[0][0]):
                rows = rows[1:]
            rows.sort(key=lambda r: int(r[0]))
            if [int(r[0]) for r in rows] != list(range(steps)):
                raise ConfigError("control file must list steps 0..M-1")
            return RelaxedControl(actions, np.array([[float(v) for v in r[1:]] for r in rows]))
    except ConfigError:
        raise
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid relaxed control: {exc}") from None
    raise ConfigError("'relaxed' needs a 'constant' or 'file' entry")


def _is_number(s) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
