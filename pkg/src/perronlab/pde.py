"""Generator application and theta-scheme terminal-value solver.

The solver marches u backward from u(T, .) = g with Dirichlet values
u(t, x_boundary) = g(x_boundary) held constant in time (the underlying
problem lives on the whole space; truncation error is unquantified).  Drift
terms switch from central to upwind differencing when the cell Peclet number
exceeds 2, which keeps the theta=1 scheme monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .coeffs import Expr, differentiate
from .errors import GridError, SolveError, UnsupportedProblemError
from .lattice import Grid, GridFn
from .problem import Problem

__all__ = [
    "GeneratorEval",
    "apply_generator",
    "solve_terminal_value",
    "SolveResult",
    "fd_residual",
    "CoefficientGrids",
    "SCHEME_CONSTANT",
    "residual_tolerance",
]

# Calibrated on the tanh/Brownian benchmark: the solver's own finite-difference
# residual stays below SCHEME_CONSTANT * (dt + dx^2) across grid refinements.
SCHEME_CONSTANT = 0.35


def residual_tolerance(grid: Grid, safety: float = 5.0) -> float:
    """Default residual tolerance 5 * (dt + dx^2) * scheme constant."""
    return safety * SCHEME_CONSTANT * (grid.max_time_step() + grid.max_space_step() ** 2)


@dataclass(frozen=True)
class GeneratorEval:
    """The generator decomposition at one point: residual = -u_t - drift - diffusion."""

    time_derivative: float
    drift_term: float
    diffusion_term: float

    @property
    def residual(self) -> float:
        return -self.time_derivative - self.drift_term - self.diffusion_term


def apply_generator(p: Problem, u, t: float, x) -> GeneratorEval:
    """Evaluate u_t, <b, grad u>, and the diffusion trace term at (t, x).

    Expr candidates use exact symbolic derivatives; GridFn candidates use
    second-order central differences and require (t, x) to be an interior
    node of their grid.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(u, Expr):
        u_t = differentiate(u, "t").evaluate(t, x)
        grads = [differentiate(u, f"x{i+1}") for i in range(p.d)]
        bvec = np.array([e.evaluate(t, x) for e in p.drift])
        grad_vals = np.array([g.evaluate(t, x) for g in grads])
        ssT = p.diffusion_matrix_sq(t, x)
        hess = np.empty((p.d, p.d))
        for i in range(p.d):
            for j in range(i, p.d):
                hess[i, j] = hess[j, i] = differentiate(grads[i], f"x{j+1}").evaluate(t, x)
        drift_term = float(bvec @ grad_vals)
        diffusion_term = float(0.5 * np.sum(ssT * hess))
        return GeneratorEval(float(u_t), drift_term, diffusion_term)
    if isinstance(u, GridFn):
        return _apply_generator_gridfn(p, u, t, x)
    raise TypeError(f"u must be Expr or GridFn, got {type(u)}")


def _locate(nodes: np.ndarray, value: float, what: str) -> int:
    idx = int(np.argmin(np.abs(nodes - value)))
    if abs(nodes[idx] - value) > 1e-9 * max(1.0, abs(value)):
        raise GridError(f"{what} {value} is not a grid node")
    return idx


def _apply_generator_gridfn(p: Problem, u: GridFn, t: float, x: np.ndarray) -> GeneratorEval:
    grid = u.grid
    n = _locate(grid.times, t, "time")
    if n == 0 or n >= len(grid.times) - 1:
        raise GridError("central differences need an interior time node")
    idx = tuple(_locate(grid.spaces[i], x[i], f"x{i+1}") for i in range(grid.d))
    for i, j in enumerate(idx):
        if j == 0 or j >= len(grid.spaces[i]) - 1:
            raise GridError("central differences need an interior space node")
    ssT = p.diffusion_matrix_sq(t, x)
    _require_diagonal(ssT)
    h1 = grid.times[n] - grid.times[n - 1]
    h2 = grid.times[n + 1] - grid.times[n]
    v_prev = u.values[(n - 1,) + idx]
    v_here = u.values[(n,) + idx]
    v_next = u.values[(n + 1,) + idx]
    u_t = _central_first(v_prev, v_here, v_next, h1, h2)
    drift_term = 0.0
    diffusion_term = 0.0
    for i in range(grid.d):
        lo = list(idx)
        hi = list(idx)
        lo[i] -= 1
        hi[i] += 1
        g1 = grid.spaces[i][idx[i]] - grid.spaces[i][idx[i] - 1]
        g2 = grid.spaces[i][idx[i] + 1] - grid.spaces[i][idx[i]]
        w_prev = u.values[(n,) + tuple(lo)]
        w_next = u.values[(n,) + tuple(hi)]
        du = _central_first(w_prev, v_here, w_next, g1, g2)
        d2u = _central_second(w_prev, v_here, w_next, g1, g2)
        b_i = p.drift[i].evaluate(t, x)
        drift_term += b_i * du
        diffusion_term += 0.5 * ssT[i, i] * d2u
    return GeneratorEval(float(u_t), float(drift_term), float(diffusion_term))


def _central_first(v0, v1, v2, h1, h2):
    return (-h2 / (h1 * (h1 + h2))) * v0 + ((h2 - h1) / (h1 * h2)) * v1 + (
        h1 / (h2 * (h1 + h2))
    ) * v2


def _central_second(v0, v1, v2, h1, h2):
    return 2.0 * (v0 / (h1 * (h1 + h2)) - v1 / (h1 * h2) + v2 / (h2 * (h1 + h2)))


def _require_diagonal(ssT: np.ndarray) -> None:
    d = ssT.shape[0]
    if d > 1:
        off = ssT - np.diag(np.diag(ssT))
        if np.max(np.abs(off)) > 1e-12:
            raise UnsupportedProblemError(
                "grid operators support diagonal sigma sigma^T only"
            )


@dataclass
class CoefficientGrids:
    """Drift and diffusion coefficient values tabulated on a grid.

    ``b[i]`` and ``diff[i]`` (= 0.5 * (sigma sigma^T)_ii) have the grid's full
    shape; time-independent coefficients are broadcast once.
    """

    grid: Grid
    b: list[np.ndarray]
    diff: list[np.ndarray]

    @classmethod
    def tabulate(cls, p: Problem, grid: Grid) -> "CoefficientGrids":
        mesh = grid.space_mesh()
        flat = np.stack([m.ravel() for m in mesh], axis=-1)
        space_shape = grid.shape[1:]
        nt = len(grid.times)

        def eval_levels(expr) -> np.ndarray:
            if not expr.depends_on_time():
                one = np.broadcast_to(
                    np.asarray(expr.evaluate(0.0, flat)).reshape(space_shape),
                    grid.shape,
                )
                return np.ascontiguousarray(one)
            out = np.empty(grid.shape)
            for n in range(nt):
                out[n] = np.asarray(expr.evaluate(float(grid.times[n]), flat)).reshape(space_shape)
            return out

        b = [eval_levels(p.drift[i]) for i in range(p.d)]
        diff = []
        for i in range(p.d):
            acc = np.zeros(grid.shape)
            for j in range(p.dprime):
                sij = eval_levels(p.diffusion[i][j])
                acc = acc + sij * sij
            diff.append(0.5 * acc)
        # off-diagonal check at a sample of nodes
        if p.d > 1:
            for row in flat[:: max(1, len(flat) // 16)]:
                _require_diagonal(p.diffusion_matrix_sq(0.0, row))
        return cls(grid, b, diff)


def fd_residual(p: Problem, u: GridFn, coeffs: CoefficientGrids | None = None) -> np.ndarray:
    """Finite-difference residual -u_t - <b, grad u> - 0.5 Tr(ssT u_xx).

    Computed at space-interior nodes for time rows 0..nt-2 (the terminal row
    carries data, not the equation).  The time derivative is the second-order
    central difference at interior rows and the second-order one-sided
    difference at row 0.  Non-computed nodes hold NaN.
    """
    grid = u.grid
    if coeffs is None:
        coeffs = CoefficientGrids.tabulate(p, grid)
    v = u.values
    nt = grid.shape[0]
    out = np.full(grid.shape, np.nan)

    # space-interior mask slices per dimension
    sp_int = tuple(slice(1, -1) for _ in range(grid.d))

    # time derivative
    t = grid.times
    u_t = np.empty((nt - 1,) + grid.shape[1:])
    for n in range(nt - 1):
        if n == 0:
            h1 = t[1] - t[0]
            h2 = t[2] - t[1]
            u_t[0] = (
                -(2 * h1 + h2) / (h1 * (h1 + h2)) * v[0]
                + (h1 + h2) / (h1 * h2) * v[1]
                - h1 / (h2 * (h1 + h2)) * v[2]
            )
        else:
            h1 = t[n] - t[n - 1]
            h2 = t[n + 1] - t[n]
            u_t[n] = _central_first(v[n - 1], v[n], v[n + 1], h1, h2)

    res = -u_t[(slice(None),) + sp_int]
    for i in range(grid.d):
        nodes = grid.spaces[i]
        h1v = np.diff(nodes)[:-1]
        h2v = np.diff(nodes)[1:]
        shape_bcast = [1] * grid.d
        shape_bcast[i] = len(nodes) - 2
        h1v = h1v.reshape(shape_bcast)
        h2v = h2v.reshape(shape_bcast)
        ax = i + 1  # values axis for dim i

        def shifted(arr, shift):
            sl = []
            for a in range(arr.ndim):
                if a == 0:
                    sl.append(slice(0, nt - 1))
                elif a == ax:
                    sl.append(slice(1 + shift, arr.shape[a] - 1 + shift))
                else:
                    sl.append(slice(1, -1))
            return arr[tuple(sl)]

        v0 = shifted(v, -1)
        v1 = shifted(v, 0)
        v2 = shifted(v, +1)
        du = _central_first(v0, v1, v2, h1v, h2v)
        d2u = _central_second(v0, v1, v2, h1v, h2v)
        b_i = shifted(coeffs.b[i], 0)
        D_i = shifted(coeffs.diff[i], 0)
        res = res - b_i * du - D_i * d2u
    out[(slice(0, nt - 1),) + sp_int] = res
    return out


@dataclass
class SolveResult:
    solution: GridFn
    theta: float
    max_residual: float
    rms_residual: float
    warnings: list[str] = field(default_factory=list)


def _operator_diagonals_1d(b_row, D_row, nodes):
    """Lower/main/upper coefficient arrays of L over one space line.

    Central drift differences switch to upwind where |b| h / D > 2 (or D = 0).
    Boundary rows are zero.
    """
    n = len(nodes)
    lower = np.zeros(n)
    main = np.zeros(n)
    upper = np.zeros(n)
    h1 = nodes[1:-1] - nodes[:-2]
    h2 = nodes[2:] - nodes[1:-1]
    b = b_row[1:-1]
    D = D_row[1:-1]
    # diffusion part
    lo = 2.0 * D / (h1 * (h1 + h2))
    hi = 2.0 * D / (h2 * (h1 + h2))
    mid = -2.0 * D / (h1 * h2)
    # drift part: central where the cell Peclet number allows, upwind otherwise
    h_avg = 0.5 * (h1 + h2)
    with np.errstate(divide="ignore", invalid="ignore"):
        peclet = np.where(D > 0, np.abs(b) * h_avg / D, np.inf)
    central = peclet <= 2.0
    lo_c = -b * h2 / (h1 * (h1 + h2))
    hi_c = b * h1 / (h2 * (h1 + h2))
    mid_c = b * (h2 - h1) / (h1 * h2)
    pos = b >= 0
    lo_u = np.where(pos, 0.0, -b / h1)
    hi_u = np.where(pos, b / h2, 0.0)
    mid_u = np.where(pos, -b / h2, b / h1)
    lower[1:-1] = lo + np.where(central, lo_c, lo_u)
    upper[1:-1] = hi + np.where(central, hi_c, hi_u)
    main[1:-1] = mid + np.where(central, mid_c, mid_u)
    return lower, main, upper


def _sparse_operator(coeffs: CoefficientGrids, n: int) -> sp.csr_matrix:
    """Sparse L at time level n for d >= 2 (diagonal diffusion)."""
    grid = coeffs.grid
    space_shape = grid.shape[1:]
    size = int(np.prod(space_shape))
    L = sp.lil_matrix((size, size))
    interior = np.ones(space_shape, dtype=bool)
    for i in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[i] = 0
        interior[tuple(sl)] = False
        sl[i] = -1
        interior[tuple(sl)] = False
    strides = np.asarray(
        [int(np.prod(space_shape[i + 1 :])) for i in range(grid.d)], dtype=int
    )
    for flat in range(size):
        idx = np.unravel_index(flat, space_shape)
        if not interior[idx]:
            continue
        for i in range(grid.d):
            nodes = grid.spaces[i]
            j = idx[i]
            h1 = nodes[j] - nodes[j - 1]
            h2 = nodes[j + 1] - nodes[j]
            b = coeffs.b[i][(n,) + idx]
            D = coeffs.diff[i][(n,) + idx]
            lo = 2.0 * D / (h1 * (h1 + h2))
            hi = 2.0 * D / (h2 * (h1 + h2))
            mid = -2.0 * D / (h1 * h2)
            h_avg = 0.5 * (h1 + h2)
            peclet = abs(b) * h_avg / D if D > 0 else np.inf
            if peclet <= 2.0:
                lo += -b * h2 / (h1 * (h1 + h2))
                hi += b * h1 / (h2 * (h1 + h2))
                mid += b * (h2 - h1) / (h1 * h2)
            elif b >= 0:
                hi += b / h2
                mid += -b / h2
            else:
                lo += -b / h1
                mid += b / h1
            L[flat, flat - strides[i]] += lo
            L[flat, flat] += mid
            L[flat, flat + strides[i]] += hi
    return L.tocsr()


def solve_terminal_value(p: Problem, grid: Grid, theta: float = 0.5) -> SolveResult:
    """Backward theta-scheme sweep of -u_t - L_t u = 0 from u(T, .) = g."""
    p.require_valid()
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    coeffs = CoefficientGrids.tabulate(p, grid)
    mesh = grid.space_mesh()
    flat = np.stack([m.ravel() for m in mesh], axis=-1)
    space_shape = grid.shape[1:]
    g_vals = np.asarray(p.payoff.evaluate(p.T, flat)).reshape(space_shape)
    nt = len(grid.times)
    values = np.empty(grid.shape)
    values[-1] = g_vals
    warnings: list[str] = []

    if theta < 0.5:
        dt_max = grid.max_time_step()
        stiff = max(
            float(np.max(2.0 * coeffs.diff[i] / grid.min_space_step() ** 2))
            for i in range(grid.d)
        )
        if (1.0 - theta) * dt_max * stiff > 1.0:
            warnings.append(
                f"explicit-dominant theta={theta} violates the stability bound "
                f"(dt*max|L| ~ {dt_max * stiff:.2f} > 1); decrease dt or raise theta"
            )

    if grid.d == 1:
        _sweep_1d(p, grid, coeffs, theta, values, g_vals)
    else:
        _sweep_nd(p, grid, coeffs, theta, values, g_vals)

    solution = GridFn(grid, values, "continuous")
    res = fd_residual(p, solution, coeffs)
    finite = res[np.isfinite(res)]
    return SolveResult(
        solution=solution,
        theta=theta,
        max_residual=float(np.max(np.abs(finite))) if finite.size else 0.0,
        rms_residual=float(np.sqrt(np.mean(finite**2))) if finite.size else 0.0,
        warnings=warnings,
    )


def _sweep_1d(p, grid, coeffs, theta, values, g_vals):
    nodes = grid.spaces[0]
    n_sp = len(nodes)
    for n in range(len(grid.times) - 2, -1, -1):
        dt = grid.times[n + 1] - grid.times[n]
        lo_n, mid_n, up_n = _operator_diagonals_1d(coeffs.b[0][n], coeffs.diff[0][n], nodes)
        lo_f, mid_f, up_f = _operator_diagonals_1d(
            coeffs.b[0][n + 1], coeffs.diff[0][n + 1], nodes
        )
        u_next = values[n + 1]
        # rhs = (I + (1-theta) dt L_{n+1}) u_{n+1}
        rhs = u_next.copy()
        if theta < 1.0:
            w = (1.0 - theta) * dt
            rhs[1:-1] += w * (
                lo_f[1:-1] * u_next[:-2] + mid_f[1:-1] * u_next[1:-1] + up_f[1:-1] * u_next[2:]
            )
        rhs[0] = g_vals[0]
        rhs[-1] = g_vals[-1]
        # A = I - theta dt L_n with identity boundary rows
        ab = np.zeros((3, n_sp))
        ab[0, 1:] = -theta * dt * up_n[:-1]
        ab[1, :] = 1.0 - theta * dt * mid_n
        ab[2, :-1] = -theta * dt * lo_n[1:]
        ab[1, 0] = 1.0
        ab[0, 1] = 0.0
        ab[1, -1] = 1.0
        ab[2, -2] = 0.0
        try:
            values[n] = solve_banded((1, 1), ab, rhs)
        except Exception as exc:  # noqa: BLE001
            raise SolveError(f"banded solve failed at time level {n}: {exc}") from exc


def _sweep_nd(p, grid, coeffs, theta, values, g_vals):
    space_shape = grid.shape[1:]
    size = int(np.prod(space_shape))
    boundary = np.zeros(space_shape, dtype=bool)
    for i in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[i] = 0
        boundary[tuple(sl)] = True
        sl[i] = -1
        boundary[tuple(sl)] = True
    b_flat = boundary.ravel()
    g_flat = g_vals.ravel()
    eye = sp.identity(size, format="csr")
    L_next = _sparse_operator(coeffs, len(grid.times) - 1)
    for n in range(len(grid.times) - 2, -1, -1):
        dt = grid.times[n + 1] - grid.times[n]
        L_here = _sparse_operator(coeffs, n)
        u_next = values[n + 1].ravel()
        rhs = (eye + (1.0 - theta) * dt * L_next) @ u_next if theta < 1.0 else u_next.copy()
        A = (eye - theta * dt * L_here).tolil()
        for flat in np.nonzero(b_flat)[0]:
            A.rows[flat] = [int(flat)]
            A.data[flat] = [1.0]
            rhs[flat] = g_flat[flat]
        try:
            values[n] = splu(A.tocsc()).solve(rhs).reshape(space_shape)
        except Exception as exc:  # noqa: BLE001
            raise SolveError(f"sparse solve failed at time level {n}: {exc}") from exc
        L_next = L_here
