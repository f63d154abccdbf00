"""Rectangular time-space grids, grid functions, and envelope algebra.

Grid functions carry a semicontinuity tag that is propagated by construction
rules (a finite grid cannot certify semicontinuity analytically).  The
countable-selection operation extracts a subfamily whose pointwise infimum
matches the full family's exactly, via greedy sub-level-set covers over a
finite rational threshold set that is enlarged on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import GridError
from .metadata import read_csv, write_csv

__all__ = [
    "Grid",
    "GridFn",
    "FnFamily",
    "pointwise_inf",
    "pointwise_sup",
    "sublevel_set",
    "countable_selection",
]


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid: sorted time nodes and per-dimension space nodes."""

    times: np.ndarray
    spaces: tuple[np.ndarray, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(
            self, "spaces", tuple(np.asarray(s, dtype=float) for s in self.spaces)
        )
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise GridError("need at least 2 strictly increasing time nodes")
        for s in self.spaces:
            if len(s) < 3 or np.any(np.diff(s) <= 0):
                raise GridError("need at least 3 strictly increasing nodes per space dimension")

    @classmethod
    def uniform(cls, T: float, box: Sequence[tuple[float, float]], nt: int, nx: int | Sequence[int]) -> "Grid":
        """Uniform grid with nt time steps and nx space cells per dimension."""
        if isinstance(nx, int):
            nx = [nx] * len(box)
        times = np.linspace(0.0, T, nt + 1)
        spaces = tuple(np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(box, nx))
        return cls(times, spaces)

    @property
    def d(self) -> int:
        return len(self.spaces)

    @property
    def shape(self) -> tuple[int, ...]:
        return (len(self.times),) + tuple(len(s) for s in self.spaces)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def space_mesh(self) -> list[np.ndarray]:
        """Meshgrid (ij indexing) of the space axes."""
        return list(np.meshgrid(*self.spaces, indexing="ij"))

    def min_space_step(self) -> float:
        return min(float(np.diff(s).min()) for s in self.spaces)

    def max_space_step(self) -> float:
        return max(float(np.diff(s).max()) for s in self.spaces)

    def max_time_step(self) -> float:
        return float(np.diff(self.times).max())

    def same_nodes(self, other: "Grid") -> bool:
        return (
            len(self.spaces) == len(other.spaces)
            and np.array_equal(self.times, other.times)
            and all(np.array_equal(a, b) for a, b in zip(self.spaces, other.spaces))
        )


TAGS = ("USC", "LSC", "continuous", "unknown")


@dataclass(frozen=True)
class GridFn:
    """Values on a grid, shaped (nt, nx1, ..., nxd), with a regularity tag."""

    grid: Grid
    values: np.ndarray
    tag: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != self.grid.shape:
            raise GridError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("grid function values must be finite")
        if self.tag not in TAGS:
            raise GridError(f"tag must be one of {TAGS}")

    @classmethod
    def constant(cls, grid: Grid, value: float, tag: str = "continuous") -> "GridFn":
        return cls(grid, np.full(grid.shape, float(value)), tag)

    @classmethod
    def from_expr(cls, grid: Grid, expr, tag: str = "continuous") -> "GridFn":
        mesh = grid.space_mesh()
        stacked = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = np.empty(grid.shape)
        for n, t in enumerate(grid.times):
            vals[n] = np.asarray(expr.evaluate(float(t), stacked)).reshape(grid.shape[1:])
        return cls(grid, vals, tag)

    def with_values(self, values: np.ndarray, tag: str | None = None) -> "GridFn":
        return GridFn(self.grid, values, self.tag if tag is None else tag)

    def terminal_slice(self) -> np.ndarray:
        return self.values[-1]

    def interpolate(self, t, x, return_clamp_rate: bool = False):
        """Multilinear interpolation at times t (K,) and points x (M, K, d) or (K, d).

        Query points outside the grid are clamped to its hull; the fraction of
        clamped coordinates is reported when requested.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None, :, :]
        M, K, d = x.shape
        if K != len(t) or d != self.grid.d:
            raise GridError("interpolation query shape mismatch")
        clamped = 0
        total = M * K * (d + 1)
        out = np.empty((M, K))
        # interpolate per query time: time clamp + linear weight
        times = self.grid.times
        ti = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
        wt = (t - times[ti]) / (times[ti + 1] - times[ti])
        clamped += int(np.sum((t < times[0]) | (t > times[-1])))
        wt = np.clip(wt, 0.0, 1.0)
        for k in range(K):
            lo = self._space_interp(self.values[ti[k]], x[:, k, :])
            hi = self._space_interp(self.values[ti[k] + 1], x[:, k, :])
            out[:, k] = (1.0 - wt[k]) * lo[0] + wt[k] * hi[0]
            clamped += lo[1]
        rate = clamped / total
        result = out[0] if squeeze else out
        if return_clamp_rate:
            return result, rate
        return result

    def _space_interp(self, slab: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, int]:
        """Multilinear interpolation of one time slab at pts (M, d)."""
        M, d = pts.shape
        clamped = 0
        idx = []
        w = []
        for i in range(d):
            nodes = self.grid.spaces[i]
            j = np.clip(np.searchsorted(nodes, pts[:, i], side="right") - 1, 0, len(nodes) - 2)
            clamped += int(np.sum((pts[:, i] < nodes[0]) | (pts[:, i] > nodes[-1])))
            frac = np.clip((pts[:, i] - nodes[j]) / (nodes[j + 1] - nodes[j]), 0.0, 1.0)
            idx.append(j)
            w.append(frac)
        out = np.zeros(M)
        for corner in range(1 << d):
            weight = np.ones(M)
            coords = []
            for i in range(d):
                if corner & (1 << i):
                    weight = weight * w[i]
                    coords.append(idx[i] + 1)
                else:
                    weight = weight * (1.0 - w[i])
                    coords.append(idx[i])
            out += weight * slab[tuple(coords)]
        return out, clamped

    # -- serialization -------------------------------------------------------

    def to_csv(self, path, metadata: dict | None = None, stderr: "GridFn | None" = None) -> None:
        """CSV rows (t, x1..xd, value[, stderr]) plus a JSON grid sidecar."""
        mesh = self.grid.space_mesh()
        flat_space = np.stack([m.ravel() for m in mesh], axis=-1)
        cols = ["t"] + [f"x{i+1}" for i in range(self.grid.d)] + ["value"]
        if stderr is not None:
            cols.append("stderr")
        rows = []
        for n, t in enumerate(self.grid.times):
            vals = self.values[n].ravel()
            errs = stderr.values[n].ravel() if stderr is not None else None
            for r in range(flat_space.shape[0]):
                row = [float(t)] + [float(c) for c in flat_space[r]] + [float(vals[r])]
                if errs is not None:
                    row.append(float(errs[r]))
                rows.append(row)
        write_csv(path, cols, rows, metadata)
        sidecar = {
            "tag": self.tag,
            "times": self.grid.times.tolist(),
            "spaces": [s.tolist() for s in self.grid.spaces],
        }
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path) -> "GridFn":
        with open(str(path) + ".meta.json") as fh:
            sidecar = json.load(fh)
        grid = Grid(np.asarray(sidecar["times"]), tuple(np.asarray(s) for s in sidecar["spaces"]))
        cols, data, _ = read_csv(path)
        vcol = cols.index("value")
        values = data[:, vcol].reshape(grid.shape)
        return cls(grid, values, sidecar.get("tag", "unknown"))


@dataclass(frozen=True)
class FnFamily:
    """Finite indexed family of grid functions on a shared grid."""

    members: tuple[GridFn, ...]
    label: str = ""

    def __post_init__(self):
        if not self.members:
            raise GridError("family must be non-empty")
        g = self.members[0].grid
        for m in self.members[1:]:
            if not m.grid.same_nodes(g):
                raise GridError("family members must share one grid")

    @property
    def grid(self) -> Grid:
        return self.members[0].grid

    def __len__(self) -> int:
        return len(self.members)


def _inf_tag(members: Iterable[GridFn]) -> str:
    return "USC" if all(m.tag in ("USC", "continuous") for m in members) else "unknown"


def _sup_tag(members: Iterable[GridFn]) -> str:
    return "LSC" if all(m.tag in ("LSC", "continuous") for m in members) else "unknown"


def pointwise_inf(fam: FnFamily) -> GridFn:
    """Node-wise minimum over the family."""
    values = np.minimum.reduce([m.values for m in fam.members])
    return GridFn(fam.grid, values, _inf_tag(fam.members))


def pointwise_sup(fam: FnFamily) -> GridFn:
    """Node-wise maximum over the family."""
    values = np.maximum.reduce([m.values for m in fam.members])
    return GridFn(fam.grid, values, _sup_tag(fam.members))


def sublevel_set(f: GridFn, q: float) -> np.ndarray:
    """Boolean mask of nodes where f < q (strict)."""
    return f.values < q


def _default_rationals(values: np.ndarray, cap: int = 64) -> np.ndarray:
    """Midpoints between consecutive distinct values, thinned to at most cap."""
    distinct = np.unique(values)
    if len(distinct) < 2:
        return np.asarray([])
    mids = 0.5 * (distinct[:-1] + distinct[1:])
    if len(mids) > cap:
        pick = np.linspace(0, len(mids) - 1, cap).round().astype(int)
        mids = mids[np.unique(pick)]
    return mids


def countable_selection(
    fam: FnFamily, rationals: Sequence[float] | None = None
) -> tuple[list[int], dict]:
    """Indices H of a subfamily with pointwise_inf(H) == pointwise_inf(fam) exactly.

    For each threshold q, greedily covers the sub-level set of the infimum by
    member sub-level sets (the finite-grid analogue of extracting a countable
    open sub-cover).  The threshold set starts from the supplied rationals, or
    from midpoints of the family's value set, and is enlarged with targeted
    midpoints until the exact-equality post-check passes; termination is
    guaranteed on a finite grid.
    """
    target = pointwise_inf(fam)
    member_vals = np.stack([m.values.ravel() for m in fam.members])
    inf_vals = target.values.ravel()
    if rationals is None:
        thresholds = list(_default_rationals(inf_vals))
    else:
        thresholds = list(rationals)
        if not thresholds:
            raise GridError("rationals must be non-empty")
    selected: set[int] = set()
    rounds = 0
    while True:
        rounds += 1
        for q in thresholds:
            want = inf_vals < q
            covered = np.zeros_like(want)
            for i in sorted(selected):
                covered |= member_vals[i] < q
            while True:
                missing = want & ~covered
                if not missing.any():
                    break
                gains = np.array([np.sum((member_vals[i] < q) & missing) for i in range(len(fam))])
                best = int(np.argmax(gains))
                if gains[best] == 0:
                    break  # cannot happen: inf < q implies some member < q
                selected.add(best)
                covered |= member_vals[best] < q
        sub_inf = np.min(member_vals[sorted(selected)], axis=0) if selected else None
        if sub_inf is not None and np.array_equal(sub_inf, inf_vals):
            break
        # enlarge with targeted thresholds separating the infimum from the
        # current subfamily value at each failing node
        if sub_inf is None:
            bad_nodes = np.arange(len(inf_vals))
            sub_inf = np.full_like(inf_vals, np.inf)
        else:
            bad_nodes = np.nonzero(sub_inf > inf_vals)[0]
        new_qs = set()
        for i in bad_nodes:
            hi = min(sub_inf[i], float(np.max(member_vals[:, i])))
            if hi > inf_vals[i]:
                new_qs.add(0.5 * (inf_vals[i] + hi))
            else:  # only the infimum value itself exists: step just above it
                new_qs.add(float(np.nextafter(inf_vals[i], np.inf)))
        thresholds = sorted(new_qs)
        if rounds > len(fam) * max(len(inf_vals), 1) + 2:
            raise AssertionError("countable_selection failed to terminate")
    indices = sorted(selected)
    diagnostics = {"rounds": rounds, "selected": len(indices), "family": len(fam)}
    return indices, diagnostics
