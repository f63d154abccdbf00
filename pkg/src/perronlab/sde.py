"""Euler-Maruyama simulation of the underlying diffusion.

Gaussian increments come from a counter-based generator keyed by
(seed, path, step), so a path's trajectory does not depend on how many other
paths are simulated, and bundles are bit-reproducible for a fixed seed
regardless of parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .coeffs import Expr, compile_program
from .metadata import write_csv
from .problem import Problem

__all__ = ["PathBundle", "simulate", "terminal_payoff", "terminal_states", "states_at_levels"]

DEFAULT_ESCAPE_RADIUS = 1e6


@dataclass(frozen=True)
class PathBundle:
    """M simulated trajectories on a uniform grid from (s, x0) to T."""

    s: float
    x0: np.ndarray
    time_nodes: np.ndarray  # length N+1
    paths: np.ndarray  # (M, N+1, d)
    seed: int
    scheme: str = "euler_maruyama"

    @property
    def M(self) -> int:
        return self.paths.shape[0]

    @property
    def N(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def d(self) -> int:
        return self.paths.shape[2]

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Row-per-state dump (m, k, t, x1..xd); large, gated behind a CLI flag."""
        cols = ["m", "k", "t"] + [f"x{i+1}" for i in range(self.d)]
        rows = []
        for m in range(self.M):
            for k, t in enumerate(self.time_nodes):
                rows.append([m, k, float(t)] + [float(v) for v in self.paths[m, k]])
        write_csv(path, cols, rows, metadata)


def _stepper_for(p: Problem) -> kernels.Stepper:
    cached = p._cache.get("stepper")
    if cached is None:
        drift = [compile_program(e) for e in p.drift]
        diffusion = [[compile_program(e) for e in row] for row in p.diffusion]
        cached = kernels.Stepper(drift, diffusion)
        p._cache["stepper"] = cached
    return cached


def _check_args(p: Problem, s: float, M: int, N: int) -> None:
    p.require_valid()
    if not 0 <= s < p.T:
        raise ValueError(f"start time s={s} must lie in [0, T)")
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")


def simulate(
    p: Problem,
    s: float,
    x0,
    M: int,
    N: int,
    seed: int,
    escape_radius: float = DEFAULT_ESCAPE_RADIUS,
) -> PathBundle:
    """Simulate M Euler-Maruyama paths of the problem's SDE from (s, x0)."""
    _check_args(p, s, M, N)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (p.d,):
        raise ValueError(f"x0 must have shape ({p.d},)")
    record = np.arange(N + 1, dtype=np.int64)
    paths = _stepper_for(p).paths(s, x0, p.T, M, N, seed, escape_radius, record)
    times = s + (p.T - s) * np.arange(N + 1) / N
    return PathBundle(s=s, x0=x0, time_nodes=times, paths=paths, seed=int(seed))


def states_at_levels(
    p: Problem,
    s: float,
    x0,
    M: int,
    N: int,
    seed: int,
    levels: np.ndarray,
    escape_radius: float = DEFAULT_ESCAPE_RADIUS,
) -> np.ndarray:
    """States (M, len(levels), d) recorded only at the requested step levels.

    Identical trajectories to :func:`simulate` (recording does not perturb the
    stream); used where full bundles would waste memory.
    """
    _check_args(p, s, M, N)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    levels = np.asarray(levels, dtype=np.int64)
    if levels.ndim != 1 or np.any(np.diff(levels) <= 0) or levels[0] < 0 or levels[-1] > N:
        raise ValueError("levels must be strictly increasing in [0, N]")
    return _stepper_for(p).paths(s, x0, p.T, M, N, seed, escape_radius, levels)


def terminal_states(
    p: Problem, s: float, x0, M: int, N: int, seed: int,
    escape_radius: float = DEFAULT_ESCAPE_RADIUS,
) -> np.ndarray:
    """Terminal states (M, d) without storing intermediate levels."""
    return states_at_levels(
        p, s, x0, M, N, seed, np.array([N], dtype=np.int64), escape_radius
    )[:, 0, :]


def terminal_payoff(bundle: PathBundle, g: Expr) -> np.ndarray:
    """g evaluated at each path's terminal state."""
    return np.asarray(g.evaluate(float(bundle.time_nodes[-1]), bundle.paths[:, -1, :]))
