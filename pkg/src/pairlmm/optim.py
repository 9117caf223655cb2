"""Derivative-free bound-constrained minimization and starting values.

The minimizer is a deterministic projected Nelder-Mead: every trial point
is clipped into the box before evaluation, non-finite objective values are
treated as +inf (so reflections into a bad region contract back), and the
iterate sequence depends only on the inputs. Termination is on relative
simplex diameter, relative objective spread, or the evaluation budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .structure import RandomStructure

__all__ = ["OptimizerError", "Bounds", "OptResult", "minimize_bounded", "starting_values"]


class OptimizerError(RuntimeError):
    """Optimization could not proceed."""


@dataclass(frozen=True)
class Bounds:
    """Per-coordinate box; lower defaults to 0 on Cholesky diagonals elsewhere."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def for_structure(cls, structure: RandomStructure) -> "Bounds":
        lower = structure.theta_lower_bounds
        return cls(lower=lower, upper=np.full_like(lower, np.inf))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def validate(self) -> None:
        if np.any(self.lower > self.upper):
            raise OptimizerError("lower bound exceeds upper bound")


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    n_evals: int
    n_iter: int
    converged: bool
    reason: str
    n_nonfinite: int


def minimize_bounded(fun: Callable[[np.ndarray], float], x0: np.ndarray,
                     bounds: Bounds, xtol: float = 1e-8, ftol: float = 1e-10,
                     max_evals: int = 5000) -> OptResult:
    """Minimize fun over the box by projected Nelder-Mead.

    The start is projected to feasibility and must evaluate finite. The
    reported optimum never exceeds the start value, every evaluation point
    satisfies the bounds, and identical inputs yield identical iterate
    sequences.
    """
    bounds.validate()
    x0 = bounds.project(np.asarray(x0, dtype=float))
    dim = len(x0)
    state = {"evals": 0, "nonfinite": 0}

    def wrapped(x: np.ndarray) -> float:
        state["evals"] += 1
        v = fun(x)
        if v is None or not math.isfinite(v):
            state["nonfinite"] += 1
            return math.inf
        return float(v)

    if dim == 0:
        f0 = wrapped(x0)
        if not math.isfinite(f0):
            raise OptimizerError("objective is non-finite at the starting point")
        return OptResult(x=x0, fun=f0, n_evals=1, n_iter=0, converged=True,
                         reason="empty parameter vector", n_nonfinite=0)

    f0 = wrapped(x0)
    if not math.isfinite(f0):
        raise OptimizerError(
            f"objective is non-finite at the starting point {x0.tolist()}")

    # Initial simplex: perturb one coordinate per vertex, stepping away from
    # a nearby bound when needed.
    verts = [x0]
    fvals = [f0]
    for k in range(dim):
        step = 0.05 * max(abs(x0[k]), 1.0)
        v = x0.copy()
        if x0[k] + step > bounds.upper[k]:
            step = -step
        v[k] = x0[k] + step
        v = bounds.project(v)
        if v[k] == x0[k]:  # box too tight for the default step
            v[k] = x0[k] + 0.5 * (bounds.upper[k] - bounds.lower[k]) * (
                1 if x0[k] < bounds.upper[k] else -1)
            v = bounds.project(v)
        verts.append(v)
        fvals.append(wrapped(v))
    verts = np.array(verts)
    fvals = np.array(fvals)

    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    n_iter = 0
    reason = "max_evals"
    converged = False
    # ftol means "no relative improvement of the best value over a full
    # cycle"; a cycle is a dim-scaled window of iterations.
    stall_window = 2 * (dim + 1)
    stalled = 0
    last_best = f0
    while True:
        order = np.argsort(fvals, kind="stable")
        verts = verts[order]
        fvals = fvals[order]
        best = fvals[0]
        if not math.isfinite(best):
            raise OptimizerError(
                "objective is non-finite on the whole simplex; aborting near "
                f"{verts[0].tolist()}")
        diam = float(np.max(np.abs(verts[1:] - verts[0])))
        scale = max(1.0, float(np.max(np.abs(verts[0]))))
        if diam <= xtol * scale:
            converged, reason = True, "xtol"
            break
        if best < last_best - ftol * (abs(best) + ftol):
            last_best = best
            stalled = 0
        else:
            stalled += 1
            if stalled >= stall_window:
                converged, reason = True, "ftol"
                break
        if state["evals"] >= max_evals:
            break
        n_iter += 1

        centroid = verts[:-1].mean(axis=0)
        xr = bounds.project(centroid + alpha * (centroid - verts[-1]))
        fr = wrapped(xr)
        if fr < fvals[0]:
            xe = bounds.project(centroid + gamma * (xr - centroid))
            fe = wrapped(xe)
            if fe < fr:
                verts[-1], fvals[-1] = xe, fe
            else:
                verts[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            verts[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = bounds.project(centroid + rho * (xr - centroid))
        else:
            xc = bounds.project(centroid + rho * (verts[-1] - centroid))
        fc = wrapped(xc)
        if fc < min(fr, fvals[-1]):
            verts[-1], fvals[-1] = xc, fc
            continue
        # Shrink toward the best vertex; also the recovery path when trial
        # points keep landing in a non-finite region.
        for k in range(1, len(verts)):
            verts[k] = bounds.project(verts[0] + sigma * (verts[k] - verts[0]))
            fvals[k] = wrapped(verts[k])

    order = np.argsort(fvals, kind="stable")
    return OptResult(x=verts[order[0]].copy(), fun=float(fvals[order[0]]),
                     n_evals=state["evals"], n_iter=n_iter, converged=converged,
                     reason=reason, n_nonfinite=state["nonfinite"])


def minimize_multistart(fun, x0, bounds, xtol=1e-8, ftol=1e-10, max_evals=5000):
    """Three-point multi-start (x0, x0/2, 2 x0) for flat objectives; best wins."""
    starts = [np.asarray(x0, dtype=float)]
    starts.append(0.5 * starts[0])
    starts.append(2.0 * starts[0])
    best = None
    total_evals = 0
    for s in starts:
        res = minimize_bounded(fun, s, bounds, xtol=xtol, ftol=ftol, max_evals=max_evals)
        total_evals += res.n_evals
        if best is None or res.fun < best.fun:
            best = res
    best.n_evals = total_evals
    return best


def starting_values(y: np.ndarray, X: np.ndarray, structure: RandomStructure,
                    floor: float = 0.1) -> np.ndarray:
    """Method-of-moments start for the variance parameters.

    For each grouping term, a between/within decomposition of the OLS
    residuals maps to the intercept Cholesky diagonal; other diagonals and
    relatedness coefficients start at the floor, off-diagonals at 0.
    """
    if structure.n_theta == 0:
        return np.zeros(0)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    resid = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
    theta0 = np.zeros(structure.n_theta)
    theta0[structure.theta_diag_mask] = floor
    for term, sl in zip(structure.terms, structure.theta_slices):
        if term.kind != "group":
            continue
        ratio = _anova_variance_ratio(resid, term.groups)
        if ratio is not None:
            # First lower-triangle entry of the term is its (0, 0) diagonal.
            theta0[sl.start] = max(math.sqrt(ratio), floor)
    return theta0


def _anova_variance_ratio(resid: np.ndarray, groups: np.ndarray) -> Optional[float]:
    """(between - within/mean_size) / within from groups with >= 2 members."""
    means, sizes, withins = [], [], []
    order = np.argsort(groups, kind="stable")
    codes = groups[order]
    start = 0
    for stop in range(1, len(order) + 1):
        if stop == len(order) or codes[stop] != codes[start]:
            vals = resid[order[start:stop]]
            if len(vals) >= 2:
                means.append(float(np.mean(vals)))
                sizes.append(len(vals))
                withins.append(float(np.var(vals, ddof=1)))
            start = stop
    if len(means) < 2:
        return None
    s_w = float(np.mean(withins))
    if s_w <= 0:
        return None
    s_b = float(np.var(means, ddof=1))
    mbar = float(np.mean(sizes))
    return max((s_b - s_w / mbar) / s_w, 0.0)
