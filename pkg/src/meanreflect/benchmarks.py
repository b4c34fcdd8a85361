"""Benchmark configurations with known or easily checked behaviour.

Each builder returns a plain config dict (the CLI schema), so benchmarks and
CLI runs share one construction path.
"""

from __future__ import annotations


def halfline(steps: int = 1000, horizon: float = 1.0) -> dict:
    """d=1, D=[0, inf), phi=id, b=-1, sigma=1, X_0=0.  The limit push is k_t = t."""
    return {
        "domain": {"type": "halfspace", "normal": [-1.0], "offset": 0.0},
        "map": {"l": [[1.0]], "v": {"kind": "constant", "value": [0.0]}},
        "coefficients": {
            "drift": [{"name": "constant", "value": [-1.0]}],
            "diffusion": {"name": "constant", "matrix": [[1.0]]},
        },
        "initial": {"name": "point", "value": [0.0]},
        "grid": {"T": horizon, "M": steps},
    }


def mean_field_attraction(steps: int = 200, rate: float = 0.5, jumps: bool = False,
                          horizon: float = 1.0) -> dict:
    """d=1 halfline, b = -rate (x - mean mu) - 1, sigma = 1, X_0 ~ N(0.5, 0.25).

    With ``jumps`` a compensated compound Poisson term with intensity 2 and
    marks uniform on [-0.6, -0.2] u [0.2, 0.6] is added (beta = z).
    """
    cfg = {
        "domain": {"type": "halfspace", "normal": [-1.0], "offset": 0.0},
        "map": {"l": [[1.0]], "v": {"kind": "constant", "value": [0.0]}},
        "coefficients": {
            "drift": [
                {"name": "mean_attraction", "rate": rate},
                {"name": "constant", "value": [-1.0]},
            ],
            "diffusion": {"name": "constant", "matrix": [[1.0]]},
        },
        "initial": {"name": "normal", "mean": [0.5], "std": 0.5},
        "grid": {"T": horizon, "M": steps},
    }
    if jumps:
        cfg["jumps"] = {"intensity": 2.0, "marks": {"kind": "shell", "dim": 1,
                                                    "r_min": 0.2, "r_max": 0.6}}
        cfg["coefficients"]["jump"] = {"name": "linear", "value": [0.0], "mark_scale": 1.0}
    return cfg


def two_action_drift(steps: int = 10, horizon: float = 1.0) -> dict:
    """b = a with A = {-1, 1}, f = a^2, h = 1, g = x^2 on the halfline.

    The relaxed control q = (1/2, 1/2) has zero mean drift, while its
    chattered versions zigzag the mean at the boundary.
    """
    return {
        "domain": {"type": "halfspace", "normal": [-1.0], "offset": 0.0},
        "map": {"l": [[1.0]], "v": {"kind": "constant", "value": [0.0]}},
        "coefficients": {
            "drift": [{"name": "action", "scale": 1.0}],
            "diffusion": {"name": "constant", "matrix": [[1.0]]},
        },
        "initial": {"name": "point", "value": [0.0]},
        "grid": {"T": horizon, "M": steps},
        "actions": [[-1.0], [1.0]],
        "relaxed": {"constant": [0.5, 0.5]},
        "cost": {
            "running": {"name": "action_square"},
            "reflection": {"name": "constant", "value": 1.0},
            "terminal": {"name": "square"},
        },
    }


def mean_field_2d(steps: int = 100, horizon: float = 1.0) -> dict:
    """d=2 unit ball with a non-identity map and a moving offset."""
    return {
        "domain": {"type": "ball", "center": [0.0, 0.0], "radius": 1.0},
        "map": {"l": [[1.0, 0.3], [0.0, 0.8]],
                "v": {"kind": "linear", "intercept": [0.0, 0.0], "slope": [0.4, -0.2]}},
        "coefficients": {
            "drift": [
                {"name": "mean_attraction", "rate": 0.5},
                {"name": "constant", "value": [1.5, 1.0]},
            ],
            "diffusion": {"name": "constant", "matrix": [[0.5, 0.0], [0.1, 0.4]]},
        },
        "initial": {"name": "normal", "mean": [0.0, 0.0], "std": 0.3},
        "grid": {"T": horizon, "M": steps},
    }


REGISTRY = {
    "halfline": halfline,
    "mean_field_attraction": mean_field_attraction,
    "two_action_drift": two_action_drift,
    "mean_field_2d": mean_field_2d,
}
