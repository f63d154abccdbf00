"""Perron envelopes: admitted classical candidate families plus bump refinement.

The upper envelope starts as the pointwise infimum of admitted smooth
supersolution candidates (the constant payoff upper bound always qualifies)
and is driven down by two local modifications until its finite-difference
residual satisfies the subsolution inequality everywhere and its terminal
values hug the payoff:

* ``bump_step``     - at an interior node whose residual exceeds the
  tolerance, fit a quadratic model that touches the envelope from above,
  verify its generator residual is positive on a surrounding ball, shift it
  down, and min-patch it in;
* ``terminal_bump`` - at a terminal node with excess over the payoff, patch
  in a backward-growing paraboloid (quadratic in space, linear slope k in
  remaining time, k doubled until the residual check passes).

The lower envelope is the exact mirror: it is computed by running the upper
construction on the negated payoff and negating the result, which makes the
upper/lower duality identity hold to machine precision.

Each accepted modification strictly improves the envelope at its target node
and keeps every family member admissible; the iteration is a discrete,
empirical analogue of an existence argument, so termination within a budget
is reported, never assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coeffs import Expr, Neg, differentiate, parse
from .errors import GridError, NonDifferentiableError
from .lattice import FnFamily, Grid, GridFn, countable_selection, pointwise_inf, pointwise_sup
from .pde import CoefficientGrids, fd_residual, residual_tolerance
from .problem import Problem

__all__ = [
    "CandidateSupersolution",
    "BumpRecord",
    "PerronState",
    "admit_candidate",
    "build_envelope",
    "bump_step",
    "terminal_bump",
    "perron_iterate",
    "envelope_gap",
]

DEFAULT_EPS_CELLS = 4
DEFAULT_ETA_FRACTION = 0.5
MIN_STEP = 1e-12  # bumps smaller than this are treated as blocked


def negate_expr(e: Expr) -> Expr:
    return Expr(Neg(e.root), e.dim)


@dataclass(frozen=True)
class CandidateSupersolution:
    """A smooth candidate with its grid evaluation and admission diagnostics.

    For the upper direction admission requires residual >= -tol_admit at all
    pre-terminal nodes and u(T, .) >= g - tol_admit; the lower direction is
    the mirror image.
    """

    expr: Expr
    values: np.ndarray
    residual_min: float
    terminal_slack_min: float
    admitted: bool
    direction: str = "upper"


@dataclass
class BumpRecord:
    kind: str  # "interior" | "terminal"
    node: tuple
    eps_cells: int
    eta: float
    delta: float
    curvature: float
    slope_scale: float
    k_doublings: int
    changed_nodes: int
    center_decrease: float
    flat_indices: np.ndarray = field(repr=False, default=None)
    new_values: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "node": list(self.node),
            "eps_cells": self.eps_cells,
            "eta": self.eta,
            "delta": self.delta,
            "curvature": self.curvature,
            "slope_scale": self.slope_scale,
            "k_doublings": self.k_doublings,
            "changed_nodes": self.changed_nodes,
            "center_decrease": self.center_decrease,
        }


def _symbolic_residual_grid(p: Problem, grid: Grid, expr: Expr, coeffs: CoefficientGrids) -> np.ndarray:
    """Exact residual of a smooth candidate on all pre-terminal grid nodes."""
    u_t = differentiate(expr, "t")
    grads = [differentiate(expr, f"x{i+1}") for i in range(p.d)]
    hess = [differentiate(grads[i], f"x{i+1}") for i in range(p.d)]
    mesh = grid.space_mesh()
    flat = np.stack([m.ravel() for m in mesh], axis=-1)
    space_shape = grid.shape[1:]
    nt = len(grid.times)
    out = np.empty((nt - 1,) + space_shape)
    for n in range(nt - 1):
        t = float(grid.times[n])
        val = -np.asarray(u_t.evaluate(t, flat)).reshape(space_shape)
        for i in range(p.d):
            gi = np.asarray(grads[i].evaluate(t, flat)).reshape(space_shape)
            hi = np.asarray(hess[i].evaluate(t, flat)).reshape(space_shape)
            val = val - coeffs.b[i][n] * gi - coeffs.diff[i][n] * hi
        out[n] = val
    return out


def _payoff_grid(p: Problem, grid: Grid) -> np.ndarray:
    mesh = grid.space_mesh()
    flat = np.stack([m.ravel() for m in mesh], axis=-1)
    return np.asarray(p.payoff.evaluate(p.T, flat)).reshape(grid.shape[1:])


def admit_candidate(
    p: Problem,
    grid: Grid,
    expr: Expr,
    tol_admit: float,
    direction: str = "upper",
    coeffs: CoefficientGrids | None = None,
) -> CandidateSupersolution:
    """Evaluate the admission conditions of a smooth candidate on the grid."""
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    if coeffs is None:
        coeffs = CoefficientGrids.tabulate(p, grid)
    try:
        residual = _symbolic_residual_grid(p, grid, expr, coeffs)
    except NonDifferentiableError:
        raise
    values = GridFn.from_expr(grid, expr).values
    g_vals = _payoff_grid(p, grid)
    slack = values[-1] - g_vals
    if direction == "upper":
        residual_min = float(np.min(residual))
        slack_min = float(np.min(slack))
        admitted = residual_min >= -tol_admit and slack_min >= -tol_admit
    else:
        residual_min = float(np.min(-residual))  # lower wants residual <= tol
        slack_min = float(np.min(-slack))  # and u(T) <= g + tol
        admitted = residual_min >= -tol_admit and slack_min >= -tol_admit
    return CandidateSupersolution(
        expr=expr,
        values=values,
        residual_min=residual_min,
        terminal_slack_min=slack_min,
        admitted=admitted,
        direction=direction,
    )


@dataclass
class PerronState:
    """Envelope, family, and iteration log for one direction."""

    direction: str
    grid: Grid
    tol: float
    tol_admit: float
    candidates: list[CandidateSupersolution]
    envelope_values: np.ndarray
    g_values: np.ndarray
    bumps: list[BumpRecord] = field(default_factory=list)
    blocked: dict = field(default_factory=dict)
    converged: bool = False
    iterations: int = 0
    selection_log: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def envelope(self) -> GridFn:
        tag = "USC" if self.direction == "upper" else "LSC"
        return GridFn(self.grid, self.envelope_values.copy(), tag)

    def recompute_envelope(self) -> np.ndarray:
        """Replay the construction: candidate extremum, then bump patches in order."""
        sign = 1.0 if self.direction == "upper" else -1.0
        admitted = [c.values for c in self.candidates if c.admitted]
        base = np.minimum.reduce([sign * v for v in admitted])
        for rec in self.bumps:
            base.flat[rec.flat_indices] = rec.new_values
        return sign * base

    def summary(self) -> dict:
        return {
            "direction": self.direction,
            "tol": self.tol,
            "tol_admit": self.tol_admit,
            "candidates": [
                {
                    "expr": str(c.expr),
                    "admitted": c.admitted,
                    "residual_min": c.residual_min,
                    "terminal_slack_min": c.terminal_slack_min,
                }
                for c in self.candidates
            ],
            "bumps": len(self.bumps),
            "interior_bumps": sum(1 for b in self.bumps if b.kind == "interior"),
            "terminal_bumps": sum(1 for b in self.bumps if b.kind == "terminal"),
            "blocked_nodes": {str(list(k)): v for k, v in self.blocked.items()},
            "converged": self.converged,
            "iterations": self.iterations,
            "selection": self.selection_log,
            "diagnostics": self.diagnostics,
        }

    def write_bump_log(self, path) -> None:
        import json

        with open(path, "w") as fh:
            for rec in self.bumps:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True))
                fh.write("\n")


def build_envelope(state: PerronState) -> GridFn:
    """Envelope via the lattice operations, with the countable-selection step logged.

    The family view holds the admitted smooth candidates plus, once bumps have
    been applied, the patched function itself (each patch is the pointwise
    extremum of the previous envelope and a shifted test function, so the
    latest member dominates all intermediate ones).
    """
    tag = "USC" if state.direction == "upper" else "LSC"
    members = [
        GridFn(state.grid, c.values, "continuous") for c in state.candidates if c.admitted
    ]
    if state.bumps:
        members.append(GridFn(state.grid, state.envelope_values.copy(), tag))
    fam = FnFamily(tuple(members), label=f"{state.direction} envelope family")
    if state.direction == "upper":
        indices, diag = countable_selection(fam)
        sub = FnFamily(tuple(fam.members[i] for i in indices), label="selected")
        env = pointwise_inf(sub)
        full = pointwise_inf(fam)
    else:
        # sup-preserving selection = inf-preserving selection of the negated family
        neg = FnFamily(tuple(m.with_values(-m.values) for m in fam.members), label="mirror")
        indices, diag = countable_selection(neg)
        sub = FnFamily(tuple(fam.members[i] for i in indices), label="selected")
        env = pointwise_sup(sub)
        full = pointwise_sup(fam)
    if not np.array_equal(env.values, full.values):
        raise AssertionError("countable selection changed the envelope")
    if not np.array_equal(env.values, state.envelope_values):
        raise AssertionError("family envelope does not match the iterated envelope")
    state.selection_log = {"selected": len(indices), "family": len(fam), **diag}
    return GridFn(state.grid, env.values, tag)


# --------------------------------------------------------------------------
# Internal upper-direction iteration engine


class _UpperEngine:
    """Mutable workspace for the upper-envelope iteration on a negatable problem."""

    def __init__(
        self,
        p: Problem,
        grid: Grid,
        tol: float,
        tol_admit: float,
        seed_exprs: Sequence[Expr],
        floor: np.ndarray | None,
        eps_cells: int,
        eta_fraction: float,
    ):
        p.require_valid()
        self.p = p
        self.grid = grid
        self.tol = tol
        self.tol_admit = tol_admit
        self.eps_cells = eps_cells
        self.eta_fraction = eta_fraction
        self.coeffs = CoefficientGrids.tabulate(p, grid)
        self.g_vals = _payoff_grid(p, grid)
        self.candidates = [
            admit_candidate(p, grid, e, tol_admit, "upper", self.coeffs) for e in seed_exprs
        ]
        admitted = [c.values for c in self.candidates if c.admitted]
        if not admitted:
            raise GridError("no admitted seed candidate; the constant payoff bound always works")
        self.env = np.minimum.reduce(list(admitted)).copy()
        self.floor = floor
        # the upper envelope dominates the expected payoff, hence inf g
        self.global_floor = p.g_min - tol
        self.bumps: list[BumpRecord] = []
        self.blocked: dict = {}
        nt = len(grid.times)
        self.times = grid.times
        self.spaces = grid.spaces
        self.nt = nt
        # interior mask for residual argmax: rows 0..nt-2, space strictly interior
        self.res_mask = np.zeros(grid.shape, dtype=bool)
        interior = tuple(slice(1, -1) for _ in range(grid.d))
        self.res_mask[(slice(0, nt - 1),) + interior] = True

    # -- residual and excess ------------------------------------------------

    def residual(self) -> np.ndarray:
        return fd_residual(self.p, GridFn(self.grid, self.env, "unknown"), self.coeffs)

    def _node_residual(self, node: tuple) -> float:
        r = self.residual()[node]
        return float(r) if np.isfinite(r) else 0.0

    def terminal_excess(self) -> np.ndarray:
        return self.env[-1] - self.g_vals

    # -- derivative estimates at a node --------------------------------------

    def _time_slope(self, node: tuple) -> float:
        n = node[0]
        idx = node[1:]
        t = self.times
        if n == 0:
            h1 = t[1] - t[0]
            h2 = t[2] - t[1]
            return float(
                -(2 * h1 + h2) / (h1 * (h1 + h2)) * self.env[(0,) + idx]
                + (h1 + h2) / (h1 * h2) * self.env[(1,) + idx]
                - h1 / (h2 * (h1 + h2)) * self.env[(2,) + idx]
            )
        h1 = t[n] - t[n - 1]
        h2 = t[n + 1] - t[n]
        v0 = self.env[(n - 1,) + idx]
        v1 = self.env[(n,) + idx]
        v2 = self.env[(n + 1,) + idx]
        return float(
            (-h2 / (h1 * (h1 + h2))) * v0
            + ((h2 - h1) / (h1 * h2)) * v1
            + (h1 / (h2 * (h1 + h2))) * v2
        )

    def _space_slopes(self, node: tuple) -> np.ndarray:
        n = node[0]
        idx = node[1:]
        out = np.empty(self.grid.d)
        for i in range(self.grid.d):
            nodes = self.spaces[i]
            j = idx[i]
            lo = list(idx)
            hi = list(idx)
            lo[i] -= 1
            hi[i] += 1
            h1 = nodes[j] - nodes[j - 1]
            h2 = nodes[j + 1] - nodes[j]
            v0 = self.env[(n,) + tuple(lo)]
            v1 = self.env[(n,) + idx]
            v2 = self.env[(n,) + tuple(hi)]
            out[i] = (
                (-h2 / (h1 * (h1 + h2))) * v0
                + ((h2 - h1) / (h1 * h2)) * v1
                + (h1 / (h2 * (h1 + h2))) * v2
            )
        return out

    # -- region helpers -------------------------------------------------------

    def _region(self, node: tuple, eps: int, row_max: int):
        """Slices, local coordinates, and scaled radii around a node."""
        n0 = node[0]
        idx0 = node[1:]
        r_lo = max(0, n0 - eps)
        r_hi = min(row_max, n0 + eps)
        t0 = self.times[n0]
        dt_loc = (
            self.times[min(n0 + 1, self.nt - 1)] - self.times[min(n0 + 1, self.nt - 1) - 1]
        )
        slices = [slice(r_lo, r_hi + 1)]
        offsets = [self.times[r_lo : r_hi + 1] - t0]
        scales = [eps * dt_loc]
        for i in range(self.grid.d):
            nodes = self.spaces[i]
            j = idx0[i]
            c_lo = max(0, j - eps)
            c_hi = min(len(nodes) - 1, j + eps)
            slices.append(slice(c_lo, c_hi + 1))
            offsets.append(nodes[c_lo : c_hi + 1] - nodes[j])
            dj = nodes[min(j + 1, len(nodes) - 1)] - nodes[min(j + 1, len(nodes) - 1) - 1]
            scales.append(eps * dj)
        shape = tuple(len(o) for o in offsets)
        rho2 = np.zeros(shape)
        for ax, (off, sc) in enumerate(zip(offsets, scales)):
            view = [1] * len(shape)
            view[ax] = len(off)
            rho2 = rho2 + (off.reshape(view) / sc) ** 2
        center_local = tuple(int(np.argmin(np.abs(o))) for o in offsets)
        return tuple(slices), offsets, scales, rho2, center_local

    def _coeff_region(self, slices) -> tuple[list[np.ndarray], list[np.ndarray]]:
        b = [self.coeffs.b[i][slices] for i in range(self.grid.d)]
        D = [self.coeffs.diff[i][slices] for i in range(self.grid.d)]
        return b, D

    def _apply_patch(self, slices, mask, patched_region, node, record_kwargs) -> BumpRecord:
        region = self.env[slices]
        new_region = np.where(mask, np.minimum(region, patched_region), region)
        changed = int(np.sum(new_region < region - 0.0))
        flat_idx = np.ravel_multi_index(
            tuple(g.ravel() for g in np.meshgrid(
                *[np.arange(s.start, s.stop) for s in slices], indexing="ij"
            )),
            self.env.shape,
        )
        rec = BumpRecord(
            node=node,
            changed_nodes=changed,
            flat_indices=flat_idx,
            new_values=new_region.ravel().copy(),
            **record_kwargs,
        )
        self.env[slices] = new_region
        self.bumps.append(rec)
        # a changed landscape may unblock nodes inside the patch window
        for blocked_node in [k for k in self.blocked if self._inside(k, slices)]:
            del self.blocked[blocked_node]
        return rec

    @staticmethod
    def _inside(node: tuple, slices) -> bool:
        return all(s.start <= c < s.stop for c, s in zip(node, slices))

    # -- interior bump ---------------------------------------------------------

    def _depth_cap(self, node: tuple, r0: float) -> float:
        """Residual-transfer depth: lowering the node by this much roughly
        clears a violation of size r0 through its own stencil sensitivities."""
        n = node[0]
        idx = node[1:]
        dt_loc = self.times[min(n + 1, self.nt - 1)] - self.times[min(n + 1, self.nt - 1) - 1]
        sens = 1.0 / (2.0 * dt_loc)
        for i in range(self.grid.d):
            nodes = self.spaces[i]
            j = idx[i]
            dx = nodes[min(j + 1, len(nodes) - 1)] - nodes[min(j + 1, len(nodes) - 1) - 1]
            sens += 2.0 * float(self.coeffs.diff[i][node]) / dx**2
        return max(r0, self.tol) / sens

    def try_interior_bump(self, node: tuple, r0: float | None = None) -> BumpRecord | None:
        """Quadratic touch-from-above patch at an interior violation node."""
        u0 = float(self.env[node])
        p_slope = self._time_slope(node)
        q_slopes = self._space_slopes(node)
        if r0 is None:
            r0 = self._node_residual(node)
        shift_base = max(r0, self.tol, 0.0)
        depth_cap = self._depth_cap(node, r0)
        delta_target = depth_cap / self.eta_fraction
        best = None
        for eps in range(self.eps_cells, 0, -1):
            slices, offsets, scales, rho2, center = self._region(node, eps, self.nt - 2)
            ball = rho2 <= 1.0 + 1e-12
            shell = ball & (rho2 >= 0.25)
            if not shell.any():
                continue
            region = self.env[slices]
            b_reg, D_reg = self._coeff_region(slices)
            # slope candidates: scaled central estimates plus downward time
            # shifts within the superdifferential range at creases
            for theta in (1.0, 0.5, 0.25):
                for shift in (0.0, shift_base):
                    cand = self._fit_quadratic(
                        u0, theta * p_slope - shift, theta * q_slopes, offsets, scales,
                        rho2, ball, shell, region, b_reg, D_reg, delta_target,
                    )
                    if cand is None:
                        continue
                    lam, delta, phi = cand
                    if best is None or delta > best[0]:
                        best = (delta, eps, theta, lam, phi, slices, ball)
            if best is not None:
                break
        if best is None:
            self.blocked[node] = "no admissible quadratic model"
            return None
        delta, eps, theta, lam, phi, slices, ball = best
        eta = min(self.eta_fraction * delta, depth_cap)
        floor_region = self.floor[slices] if self.floor is not None else self.global_floor
        cap = float(np.min(np.where(ball, phi - floor_region, np.inf)))
        eta = min(eta, 0.99 * cap)
        if eta <= MIN_STEP:
            self.blocked[node] = (
                "sandwich floor blocks further decrease"
                if self.floor is not None
                else "bump depth below minimum step"
            )
            return None
        return self._apply_patch(
            slices,
            ball,
            phi - eta,
            node,
            dict(
                kind="interior",
                eps_cells=eps,
                eta=float(eta),
                delta=float(delta),
                curvature=float(lam),
                slope_scale=float(theta),
                k_doublings=0,
                center_decrease=float(eta),
            ),
        )

    def _fit_quadratic(
        self, u0, p_slope, q_slopes, offsets, scales, rho2, ball, shell,
        region, b_reg, D_reg, delta_target,
    ):
        """Feasible (curvature, shell margin, phi values) or None.

        phi = lin + 0.5*lam*rho2 must dominate the envelope on the ball and
        keep -phi_t - L phi > 0 there.  The curvature starts at the minimal
        majorant and is raised only as far as needed for the target shell
        margin, so bump depth tracks the local landscape.
        """
        lin = np.full(region.shape, u0)
        view = [1] * region.ndim
        view[0] = len(offsets[0])
        lin = lin + p_slope * offsets[0].reshape(view)
        for i in range(len(q_slopes)):
            view = [1] * region.ndim
            view[i + 1] = len(offsets[i + 1])
            lin = lin + q_slopes[i] * offsets[i + 1].reshape(view)
        gap = region - lin
        away = ball & (rho2 > 1e-14)
        if not away.any():
            return None
        safe_rho2 = np.where(rho2 > 0, rho2, 1.0)
        lam_req = max(0.0, float(np.max(np.where(away, 2.0 * gap / safe_rho2, -np.inf))))
        # curvature needed so the shell margin reaches the target depth
        lam_target = float(
            np.max(np.where(shell, 2.0 * (gap + delta_target) / safe_rho2, -np.inf))
        )
        # residual of phi is A - lam * B node-wise
        A = -np.full(region.shape, p_slope)
        for i in range(len(q_slopes)):
            A = A - b_reg[i] * q_slopes[i]
        B = np.zeros(region.shape)
        view = [1] * region.ndim
        view[0] = len(offsets[0])
        B = B + offsets[0].reshape(view) / scales[0] ** 2
        for i in range(len(q_slopes)):
            view = [1] * region.ndim
            view[i + 1] = len(offsets[i + 1])
            B = B + b_reg[i] * offsets[i + 1].reshape(view) / scales[i + 1] ** 2
            B = B + D_reg[i] / scales[i + 1] ** 2
        rmin = 1e-12
        tinyB = np.abs(B) < 1e-300
        if np.any(ball & tinyB & (A <= rmin)):
            return None
        pos = ball & (B > 0) & ~tinyB
        neg = ball & (B < 0) & ~tinyB
        lam_hi = float(np.min(np.where(pos, (A - rmin) / np.where(pos, B, 1.0), np.inf)))
        lam_lo = float(np.max(np.where(neg, (A - rmin) / np.where(neg, B, 1.0), -np.inf)))
        lam_floor = max(lam_req, lam_lo, 0.0)
        if not np.isfinite(lam_floor) or lam_floor >= lam_hi:
            return None
        lam = min(max(lam_target, lam_floor * 1.0 + MIN_STEP), lam_floor + 0.9 * (lam_hi - lam_floor))
        if not np.isfinite(lam):
            return None
        phi = lin + 0.5 * lam * rho2
        delta = float(np.min(np.where(shell, phi - region, np.inf)))
        if not np.isfinite(delta) or delta <= MIN_STEP:
            return None
        return lam, delta, phi

    # -- terminal bump ----------------------------------------------------------

    def try_terminal_bump(self, sp_idx: tuple) -> BumpRecord | None:
        """Paper-style paraboloid patch at terminal node (T, x0)."""
        node = (self.nt - 1,) + sp_idx
        E0 = float(self.env[node])
        excess = E0 - float(self.g_vals[sp_idx])
        for eps in range(self.eps_cells, 0, -1):
            slices, offsets, scales, rho2, center = self._region(node, eps, self.nt - 1)
            tau_view = [1] * (self.grid.d + 1)
            tau_view[0] = len(offsets[0])
            tau = (-offsets[0]).reshape(tau_view)  # T - t >= 0
            rho_sp2 = rho2 - (offsets[0].reshape(tau_view) / scales[0]) ** 2
            ball = rho2 <= 1.0 + 1e-12
            shell = ball & (rho2 >= 0.25)
            if not shell.any():
                continue
            region = self.env[slices]
            b_reg, D_reg = self._coeff_region(slices)
            S = max(excess, self.tol)
            result = None
            for _ in range(24):
                k, doublings = self._find_k(S, offsets, scales, ball, b_reg, D_reg)
                if k is None:
                    break
                phi = E0 + S * rho_sp2 + k * tau
                delta_shell = float(np.min(np.where(shell, phi - region, np.inf)))
                if delta_shell > MIN_STEP:
                    result = (S, k, doublings, phi)
                    break
                S *= 2.0
            if result is None:
                continue
            S, k, doublings, phi = result
            term_ball = ball[-1]
            g_region = self.g_vals[slices[1:]]
            delta_term = float(np.min(np.where(term_ball, phi[-1] - g_region, np.inf)))
            if delta_term <= MIN_STEP:
                continue
            delta_shell = float(np.min(np.where(shell, phi - region, np.inf)))
            delta = 0.9 * min(delta_shell, delta_term)
            if self.floor is not None:
                floor_region = self.floor[slices]
                cap = float(np.min(np.where(ball, phi - floor_region, np.inf)))
                delta = min(delta, 0.99 * cap)
                if delta <= MIN_STEP:
                    self.blocked[node] = "sandwich floor blocks further decrease"
                    return None
            if delta <= MIN_STEP:
                continue
            return self._apply_patch(
                slices,
                ball,
                phi - delta,
                node,
                dict(
                    kind="terminal",
                    eps_cells=eps,
                    eta=float(delta),
                    delta=float(delta),
                    curvature=float(S),
                    slope_scale=1.0,
                    k_doublings=doublings,
                    center_decrease=float(delta),
                ),
            )
        self.blocked[node] = "no admissible terminal paraboloid"
        return None

    def _find_k(self, S, offsets, scales, ball, b_reg, D_reg):
        """Smallest k = 2^j with -phi_t - L phi > 0 on the ball."""
        ndim = self.grid.d + 1
        drift_diff = np.zeros(ball.shape)
        for i in range(self.grid.d):
            view = [1] * ndim
            view[i + 1] = len(offsets[i + 1])
            dx = offsets[i + 1].reshape(view)
            drift_diff = drift_diff + b_reg[i] * 2.0 * dx * S / scales[i + 1] ** 2
            drift_diff = drift_diff + D_reg[i] * 2.0 * S / scales[i + 1] ** 2
        need = float(np.max(np.where(ball, drift_diff, -np.inf)))
        k = 1.0
        for j in range(200):
            if k > need:
                return k, j
            k *= 2.0
        return None, -1


def _run_engine(engine: _UpperEngine, budget: int) -> tuple[bool, int, dict]:
    """Alternate terminal and interior bumps, worst violation first."""
    iterations = 0
    converged = False
    while iterations < budget:
        excess = engine.terminal_excess()
        order = np.argsort(-excess.ravel(), kind="stable")
        target = None
        for flat in order:
            if excess.ravel()[flat] <= engine.tol:
                break
            sp_idx = np.unravel_index(int(flat), excess.shape)
            if (engine.nt - 1,) + tuple(sp_idx) in engine.blocked:
                continue
            target = tuple(int(i) for i in sp_idx)
            break
        if target is not None:
            iterations += 1
            engine.try_terminal_bump(target)
            continue
        res = engine.residual()
        masked = np.where(engine.res_mask & np.isfinite(res), res, -np.inf)
        order = np.argsort(-masked.ravel(), kind="stable")
        target = None
        target_r0 = 0.0
        for flat in order:
            if masked.ravel()[flat] <= engine.tol:
                break
            node = np.unravel_index(int(flat), masked.shape)
            if tuple(int(i) for i in node) in engine.blocked:
                continue
            target = tuple(int(i) for i in node)
            target_r0 = float(masked.ravel()[flat])
            break
        if target is None:
            res_ok = float(np.max(masked)) <= engine.tol
            term_ok = float(np.max(engine.terminal_excess())) <= engine.tol
            converged = res_ok and term_ok
            break
        iterations += 1
        engine.try_interior_bump(target, r0=target_r0)
    res = engine.residual()
    masked = np.where(engine.res_mask & np.isfinite(res), res, -np.inf)
    diagnostics = {
        "max_residual_excess": float(np.max(masked) - engine.tol),
        "max_terminal_excess": float(np.max(engine.terminal_excess()) - engine.tol),
        "budget": budget,
    }
    return converged, iterations, diagnostics


def _iterate_scalar_direction(
    p: Problem,
    grid: Grid,
    budget: int,
    tol: float,
    tol_admit: float,
    direction: str,
    seed_exprs: Sequence[Expr] | None,
    mc_floor: np.ndarray | None,
    mc_ceiling: np.ndarray | None,
    eps_cells: int,
    eta_fraction: float,
) -> PerronState:
    if direction == "upper":
        work_p = p
        exprs = list(seed_exprs) if seed_exprs else [parse(repr(p.g_max), p.d)]
        floor = mc_floor
        sign = 1.0
    else:
        work_p = p.negated_payoff()
        user = list(seed_exprs) if seed_exprs else [parse(repr(p.g_min), p.d)]
        exprs = [negate_expr(e) for e in user]
        floor = -mc_ceiling if mc_ceiling is not None else None
        sign = -1.0
    engine = _UpperEngine(work_p, grid, tol, tol_admit, exprs, floor, eps_cells, eta_fraction)
    converged, iterations, diagnostics = _run_engine(engine, budget)

    if direction == "upper":
        candidates = engine.candidates
        env_values = engine.env
        g_values = engine.g_vals
        bumps = engine.bumps
        blocked = engine.blocked
    else:
        # mirror everything back
        candidates = []
        for c, orig in zip(engine.candidates, user):
            candidates.append(
                CandidateSupersolution(
                    expr=orig,
                    values=-c.values,
                    residual_min=c.residual_min,
                    terminal_slack_min=c.terminal_slack_min,
                    admitted=c.admitted,
                    direction="lower",
                )
            )
        env_values = -engine.env
        g_values = -engine.g_vals
        bumps = engine.bumps  # recorded in mirrored coordinates
        blocked = engine.blocked
        diagnostics["mirrored"] = True
    state = PerronState(
        direction=direction,
        grid=grid,
        tol=tol,
        tol_admit=tol_admit,
        candidates=candidates,
        envelope_values=env_values,
        g_values=g_values,
        bumps=bumps,
        blocked=blocked,
        converged=converged,
        iterations=iterations,
        diagnostics=diagnostics,
    )
    build_envelope(state)
    return state


def perron_iterate(
    p: Problem,
    grid: Grid,
    budget: int,
    tol: float | None = None,
    direction: str = "both",
    tol_admit: float | None = None,
    seed_exprs: Sequence[Expr] | None = None,
    mc=None,
    stderr_multiplier: float = 3.0,
    eps_cells: int = DEFAULT_EPS_CELLS,
    eta_fraction: float = DEFAULT_ETA_FRACTION,
):
    """Run the envelope iteration; direction 'upper', 'lower', or 'both'.

    When a grid Monte Carlo estimate ``mc`` is supplied, bumps never push the
    upper envelope below mc - k*stderr nor the lower envelope above
    mc + k*stderr, preserving the sandwich at every iteration.
    """
    if tol is None:
        tol = residual_tolerance(grid)
    if tol_admit is None:
        tol_admit = tol
    floor = ceiling = None
    if mc is not None:
        k = stderr_multiplier
        valid = mc.valid_mask
        floor = np.where(valid, mc.value.values - k * mc.stderr.values, -np.inf)
        ceiling = np.where(valid, mc.value.values + k * mc.stderr.values, np.inf)
    if direction in ("upper", "lower"):
        return _iterate_scalar_direction(
            p, grid, budget, tol, tol_admit, direction, seed_exprs, floor, ceiling,
            eps_cells, eta_fraction,
        )
    if direction != "both":
        raise ValueError("direction must be 'upper', 'lower', or 'both'")
    upper = _iterate_scalar_direction(
        p, grid, budget, tol, tol_admit, "upper", seed_exprs, floor, None,
        eps_cells, eta_fraction,
    )
    lower = _iterate_scalar_direction(
        p, grid, budget, tol, tol_admit, "lower", None, None, ceiling,
        eps_cells, eta_fraction,
    )
    return upper, lower


def _engine_from_state(
    state: PerronState,
    p: Problem,
    eps_cells: int,
    eta_fraction: float,
    floor: np.ndarray | None = None,
) -> tuple[_UpperEngine, float]:
    sign = 1.0 if state.direction == "upper" else -1.0
    work_p = p if sign > 0 else p.negated_payoff()
    exprs = [c.expr if sign > 0 else negate_expr(c.expr) for c in state.candidates]
    engine = _UpperEngine(
        work_p, state.grid, state.tol, state.tol_admit, exprs, floor, eps_cells, eta_fraction
    )
    engine.env = sign * state.envelope_values.copy()
    engine.bumps = list(state.bumps)
    engine.blocked = dict(state.blocked)
    return engine, sign


def _sync_state(state: PerronState, engine: _UpperEngine, sign: float) -> None:
    state.envelope_values = sign * engine.env
    state.bumps = engine.bumps
    state.blocked = engine.blocked


def bump_step(
    state: PerronState,
    p: Problem,
    eps_cells: int = DEFAULT_EPS_CELLS,
    eta_fraction: float = DEFAULT_ETA_FRACTION,
) -> PerronState:
    """One interior bump at the worst residual violator; no-op when none exists.

    Sets ``state.diagnostics['last_action']`` to what happened; the envelope
    strictly decreases (upper) or increases (lower) at the target node.
    """
    engine, sign = _engine_from_state(state, p, eps_cells, eta_fraction)
    res = engine.residual()
    masked = np.where(engine.res_mask & np.isfinite(res), res, -np.inf)
    order = np.argsort(-masked.ravel(), kind="stable")
    target = None
    r0 = 0.0
    for flat in order:
        if masked.ravel()[flat] <= engine.tol:
            break
        node = tuple(int(i) for i in np.unravel_index(int(flat), masked.shape))
        if node in engine.blocked:
            continue
        target = node
        r0 = float(masked.ravel()[flat])
        break
    if target is None:
        state.diagnostics["last_action"] = "no interior violation"
        return state
    rec = engine.try_interior_bump(target, r0=r0)
    _sync_state(state, engine, sign)
    state.iterations += 1
    state.diagnostics["last_action"] = (
        f"bumped {target}" if rec is not None else f"blocked {target}"
    )
    return state


def terminal_bump(
    state: PerronState,
    p: Problem,
    eps_cells: int = DEFAULT_EPS_CELLS,
    eta_fraction: float = DEFAULT_ETA_FRACTION,
) -> PerronState:
    """One terminal-excess bump at the worst terminal node; no-op when none exists."""
    engine, sign = _engine_from_state(state, p, eps_cells, eta_fraction)
    excess = engine.terminal_excess()
    order = np.argsort(-excess.ravel(), kind="stable")
    target = None
    for flat in order:
        if excess.ravel()[flat] <= engine.tol:
            break
        sp_idx = tuple(int(i) for i in np.unravel_index(int(flat), excess.shape))
        if (engine.nt - 1,) + sp_idx in engine.blocked:
            continue
        target = sp_idx
        break
    if target is None:
        state.diagnostics["last_action"] = "no terminal excess"
        return state
    rec = engine.try_terminal_bump(target)
    _sync_state(state, engine, sign)
    state.iterations += 1
    state.diagnostics["last_action"] = (
        f"terminal bumped {target}" if rec is not None else f"blocked {target}"
    )
    return state


def envelope_gap(
    upper: PerronState, lower: PerronState, exclude_lateral: bool = True
) -> dict:
    """Node-wise gap metrics between the two envelopes.

    Lateral boundary columns never carry the interior residual test (the
    problem lives on the whole space; the box is a numerical device), so the
    headline metric excludes them; the all-nodes figure is reported alongside.
    """
    gap = upper.envelope_values - lower.envelope_values
    mask = np.ones(gap.shape, dtype=bool)
    d = upper.grid.d
    for i in range(d):
        sl = [slice(None)] * (d + 1)
        sl[i + 1] = 0
        mask[tuple(sl)] = False
        sl[i + 1] = -1
        mask[tuple(sl)] = False
    interior_max = float(np.max(np.where(mask, gap, -np.inf)))
    out = {
        "max_gap": interior_max if exclude_lateral else float(np.max(gap)),
        "max_gap_all_nodes": float(np.max(gap)),
        "max_gap_excluding_lateral": interior_max,
        "min_gap": float(np.min(gap)),
        "nodes": int(gap.size),
        "lateral_excluded": int(np.sum(~mask)),
    }
    return out
