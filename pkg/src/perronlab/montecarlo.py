"""Monte Carlo estimation of the expected terminal payoff v(s, x) = E[g(X_T)]."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import SdeExplosionError
from .lattice import Grid, GridFn
from .problem import Problem
from .sde import DEFAULT_ESCAPE_RADIUS, terminal_states

__all__ = ["Estimate", "estimate_value", "estimate_grid", "GridEstimate"]

Z95 = 1.96


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    M: int

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.value - Z95 * self.stderr, self.value + Z95 * self.stderr)


def _estimate_from_samples(samples: np.ndarray) -> Estimate:
    m = int(len(samples))
    value = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return Estimate(value=value, stderr=stderr, M=m)


def estimate_value(
    p: Problem,
    s: float,
    x0,
    M: int,
    N: int,
    seed: int,
    escape_radius: float = DEFAULT_ESCAPE_RADIUS,
) -> Estimate:
    """Sample mean and standard error of the terminal payoff from (s, x0)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if s == p.T:
        return Estimate(value=float(p.payoff.evaluate(p.T, x0)), stderr=0.0, M=M)
    terminal = terminal_states(p, s, x0, M, N, seed, escape_radius)
    samples = np.asarray(p.payoff.evaluate(p.T, terminal))
    return _estimate_from_samples(samples)


@dataclass(frozen=True)
class GridEstimate:
    """Monte Carlo surface: node-wise value and standard error grid functions."""

    value: GridFn
    stderr: GridFn
    invalid_nodes: tuple[tuple, ...]  # (time_index, space_index...) of failed nodes

    @property
    def valid_mask(self) -> np.ndarray:
        mask = np.ones(self.value.grid.shape, dtype=bool)
        for node in self.invalid_nodes:
            mask[node] = False
        return mask


def estimate_grid(
    p: Problem,
    grid: Grid,
    M: int,
    N: int,
    seed: int,
    threads: int = 1,
    escape_radius: float = DEFAULT_ESCAPE_RADIUS,
) -> GridEstimate:
    """Estimate at every grid node; per-node seeds hash (seed, node index).

    Nodes at t = T are exact (value g, stderr 0).  Explosions mark the node
    invalid and the sweep continues.  Results are independent of the thread
    count: per-node work is pure and written by node index.
    """
    p.require_valid()
    mesh = grid.space_mesh()
    flat_space = np.stack([m.ravel() for m in mesh], axis=-1)
    space_shape = grid.shape[1:]
    n_space = flat_space.shape[0]
    values = np.empty(grid.shape)
    stderrs = np.zeros(grid.shape)
    invalid: list[tuple] = []

    terminal_vals = np.asarray(p.payoff.evaluate(p.T, flat_space)).reshape(space_shape)

    def run_node(args):
        n, r = args
        t = float(grid.times[n])
        x0 = flat_space[r]
        node_index = n * n_space + r
        node_seed = kernels.derive_seed(seed, node_index)
        try:
            est = estimate_value(p, t, x0, M, N, node_seed, escape_radius)
            return n, r, est.value, est.stderr, None
        except SdeExplosionError as exc:
            return n, r, np.nan, np.nan, str(exc)

    tasks = [(n, r) for n in range(len(grid.times) - 1) for r in range(n_space)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_node, tasks))
    else:
        results = [run_node(task) for task in tasks]

    for n, r, val, err, failure in results:
        node = (n,) + np.unravel_index(r, space_shape)
        if failure is not None:
            invalid.append(node)
            values[node] = 0.0
            stderrs[node] = 0.0
        else:
            values[node] = val
            stderrs[node] = err

    values[-1] = terminal_vals
    stderrs[-1] = 0.0
    return GridEstimate(
        value=GridFn(grid, values, "unknown"),
        stderr=GridFn(grid, stderrs, "unknown"),
        invalid_nodes=tuple(sorted(invalid)),
    )
