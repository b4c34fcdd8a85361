from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Nodes 0 = t_0 < t_1 < ... < t_M = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        if t.size < 2:
            raise ValueError("a time grid needs at least two nodes (M >= 1)")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("grid nodes must start at 0 and strictly increase")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> TimeGrid:
        if horizon <= 0 or steps < 1:
            raise ValueError("uniform grid needs T > 0 and M >= 1")
        return cls(horizon * np.arange(steps + 1) / steps)

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def mesh(self) -> float:
        return float(self.dt.max())

    def refine(self, n: int) -> TimeGrid:
        """Split every step into n equal sub-steps."""
        frac = np.arange(n) / n
        inner = (self.times[:-1, None] + frac[None, :] * self.dt[:, None]).reshape(-1)
        return TimeGrid(np.append(inner, self.times[-1]))

    def same_as(self, other: TimeGrid) -> bool:
        return self.times.shape == other.times.shape and np.allclose(self.times, other.times)

    def __len__(self):
        return self.times.size
