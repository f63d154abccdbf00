"""Problem datum: dimensions, horizon, drift/diffusion/payoff expressions, box.

A Problem is immutable after construction and carries its own validation:
linear growth of the coefficients is measured empirically on a Halton sample
of the time-box cylinder, and the declared payoff bounds are spot checked.
Downstream modules call :meth:`Problem.require_valid` before consuming it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .coeffs import Expr, differentiate, parse
from .errors import ProblemValidationError
from .metadata import TRUNCATION_NOTE

__all__ = ["Problem", "ValidationReport", "Violation"]

DEFAULT_VALIDATION_SAMPLES = 256


@dataclass(frozen=True)
class Violation:
    kind: str  # "payoff_bounds" | "non_finite"
    where: tuple  # (t, x...)
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    samples: int
    linear_growth_constant: float
    payoff_empirical: tuple[float, float]
    payoff_declared: tuple[float, float]
    violations: tuple[Violation, ...]
    note: str = TRUNCATION_NOTE

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "linear_growth_constant": self.linear_growth_constant,
            "payoff_empirical": list(self.payoff_empirical),
            "payoff_declared": list(self.payoff_declared),
            "violations": [
                {"kind": v.kind, "where": list(v.where), "detail": v.detail}
                for v in self.violations
            ],
            "ok": self.ok,
            "note": self.note,
        }


@dataclass(frozen=True)
class Problem:
    """The tuple (d, T, drift, diffusion, payoff) plus numerical metadata."""

    d: int
    dprime: int
    T: float
    drift: tuple[Expr, ...]
    diffusion: tuple[tuple[Expr, ...], ...]
    payoff: Expr
    payoff_bounds: tuple[float, float]
    box: tuple[tuple[float, float], ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.T <= 0:
            raise ProblemValidationError("horizon T must be positive")
        if self.d < 1 or self.dprime < 1:
            raise ProblemValidationError("dimensions must be >= 1")
        if len(self.drift) != self.d:
            raise ProblemValidationError(f"drift must have {self.d} components")
        if len(self.diffusion) != self.d or any(len(r) != self.dprime for r in self.diffusion):
            raise ProblemValidationError(
                f"diffusion must be a {self.d}x{self.dprime} matrix of expressions"
            )
        if len(self.box) != self.d:
            raise ProblemValidationError(f"box must have {self.d} intervals")
        for lo, hi in self.box:
            if not lo < hi:
                raise ProblemValidationError("box intervals must satisfy lo < hi")
        lo, hi = self.payoff_bounds
        if not lo <= hi:
            raise ProblemValidationError("payoff_bounds must satisfy lo <= hi")

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict) -> "Problem":
        try:
            d = int(cfg["dimension"])
            dprime = int(cfg["brownian_dimension"])
            T = float(cfg["horizon"])
            drift = tuple(parse(src, d) for src in cfg["drift"])
            diffusion = tuple(tuple(parse(src, d) for src in row) for row in cfg["diffusion"])
            payoff = parse(cfg["payoff"], d)
            bounds = (float(cfg["payoff_bounds"][0]), float(cfg["payoff_bounds"][1]))
            box = tuple((float(lo), float(hi)) for lo, hi in cfg["box"])
        except KeyError as exc:
            raise ProblemValidationError(f"problem config missing field {exc}") from exc
        return cls(d, dprime, T, drift, diffusion, payoff, bounds, box)

    @classmethod
    def from_json(cls, path) -> "Problem":
        with open(path) as fh:
            return cls.from_config(json.load(fh))

    def to_config(self) -> dict:
        return {
            "dimension": self.d,
            "brownian_dimension": self.dprime,
            "horizon": self.T,
            "drift": [str(e) for e in self.drift],
            "diffusion": [[str(e) for e in row] for row in self.diffusion],
            "payoff": str(self.payoff),
            "payoff_bounds": list(self.payoff_bounds),
            "box": [list(iv) for iv in self.box],
        }

    # -- convenience --------------------------------------------------------

    @property
    def g_min(self) -> float:
        return self.payoff_bounds[0]

    @property
    def g_max(self) -> float:
        return self.payoff_bounds[1]

    def negated_payoff(self) -> "Problem":
        """Same dynamics with payoff -g and mirrored declared bounds."""
        neg = parse(f"-({self.payoff})", self.d)
        return Problem(
            self.d,
            self.dprime,
            self.T,
            self.drift,
            self.diffusion,
            neg,
            (-self.payoff_bounds[1], -self.payoff_bounds[0]),
            self.box,
        )

    def diffusion_matrix_sq(self, t: float, x: np.ndarray) -> np.ndarray:
        """sigma sigma^T evaluated at (t, x)."""
        sig = np.array(
            [[self.diffusion[i][j].evaluate(t, x) for j in range(self.dprime)] for i in range(self.d)]
        )
        return sig @ sig.T

    # -- validation ----------------------------------------------------------

    def _halton_sample(self, samples: int) -> np.ndarray:
        eng = qmc.Halton(d=self.d + 1, scramble=False)
        pts = eng.random(samples)  # columns: time fraction then space fractions
        out = np.empty_like(pts)
        out[:, 0] = pts[:, 0] * self.T
        for i, (lo, hi) in enumerate(self.box):
            out[:, i + 1] = lo + pts[:, i + 1] * (hi - lo)
        return out

    def validate(self, samples: int = DEFAULT_VALIDATION_SAMPLES) -> ValidationReport:
        """Empirical linear-growth constant and payoff-bounds check.

        Deterministic for a fixed sample count (unscrambled Halton points).
        """
        if samples < 1:
            raise ValueError("samples must be >= 1")
        pts = self._halton_sample(samples)
        violations: list[Violation] = []
        worst_c = 0.0
        g_lo, g_hi = np.inf, -np.inf
        decl_lo, decl_hi = self.payoff_bounds
        for row in pts:
            t, x = float(row[0]), row[1:]
            try:
                bvec = np.array([e.evaluate(t, x) for e in self.drift])
                sig = np.array(
                    [[self.diffusion[i][j].evaluate(t, x) for j in range(self.dprime)] for i in range(self.d)]
                )
                gval = self.payoff.evaluate(t, x)
            except Exception as exc:  # noqa: BLE001 - any domain error is a finding
                violations.append(Violation("non_finite", (t, *x), str(exc)))
                continue
            # |b| + |sigma| with Euclidean / Frobenius norms
            c = (np.linalg.norm(bvec) + np.linalg.norm(sig)) / (1.0 + np.linalg.norm(x))
            worst_c = max(worst_c, float(c))
            g_lo, g_hi = min(g_lo, gval), max(g_hi, gval)
            if gval < decl_lo - 1e-12 or gval > decl_hi + 1e-12:
                violations.append(
                    Violation(
                        "payoff_bounds",
                        (t, *x),
                        f"payoff {gval!r} outside declared [{decl_lo!r}, {decl_hi!r}]",
                    )
                )
        report = ValidationReport(
            samples=samples,
            linear_growth_constant=worst_c,
            payoff_empirical=(float(g_lo), float(g_hi)),
            payoff_declared=self.payoff_bounds,
            violations=tuple(violations),
        )
        return report

    def require_valid(self) -> None:
        """Validate once (cached) and raise on failure; used by downstream modules."""
        report = self._cache.get("validation")
        if report is None:
            report = self.validate(DEFAULT_VALIDATION_SAMPLES)
            self._cache["validation"] = report
        if not report.ok:
            first = report.violations[0]
            raise ProblemValidationError(
                f"problem failed validation ({len(report.violations)} violations); "
                f"first: {first.kind} at {first.where}: {first.detail}"
            )

    def payoff_gradient(self) -> list[Expr]:
        """Symbolic spatial gradient of the payoff (raises if non-smooth)."""
        return [differentiate(self.payoff, f"x{i+1}") for i in range(self.d)]


def sample_points(problem: Problem, count: int) -> np.ndarray:
    """Public deterministic sampler used by tests (time column first)."""
    return problem._halton_sample(count)
