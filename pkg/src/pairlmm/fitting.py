"""High-level fit driver: enumerate pairs, optimize the profile deviance,
and attach design-based standard errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .design import SurveyDesign
from .inference import jackknife_se, sandwich_beta
from .optim import Bounds, minimize_bounded, minimize_multistart, starting_values
from .pairs import (
    DegenerateFitError,
    PairContext,
    enumerate_pairs,
)
from .structure import RandomStructure, SingularBlockError

__all__ = ["FitResult", "fit_model"]


@dataclass
class FitResult:
    """Point estimates, convergence diagnostics, and covariance blocks."""

    beta: np.ndarray
    beta_names: List[str]
    sigma2: float
    theta: np.ndarray
    theta_names: List[str]
    deviance: float
    converged: bool
    n_evals: int
    opt_reason: str
    mode: str
    n_obs: int
    n_pairs: int
    n_design_pairs: int
    nhat_pairs: float
    nhat_units: float
    sd_names: List[str]
    sd_components: np.ndarray  # random-effect SDs, sigma * sqrt(diag V_g)
    vcov_beta: Optional[np.ndarray] = None
    se_beta: Optional[np.ndarray] = None
    jackknife: Optional[Dict[str, object]] = None

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def params_on_report_scale(self) -> np.ndarray:
        """beta, random-effect SDs, residual SD; the jackknife target vector."""
        return np.concatenate([self.beta, self.sd_components, [self.sigma]])

    def report_scale_names(self) -> List[str]:
        return list(self.beta_names) + [f"sd({s})" for s in self.sd_names] + ["sd(residual)"]


def _sd_components(structure: RandomStructure, theta: np.ndarray, sigma: float):
    names: List[str] = []
    values: List[float] = []
    for term, V in zip(structure.terms, structure.coef_blocks(theta)):
        labels = term.z_names if term.z_names else tuple(
            f"z{k}" for k in range(term.q))
        for k in range(term.q):
            names.append(f"{term.name}:{labels[k]}")
            values.append(sigma * math.sqrt(max(V[k, k], 0.0)))
    return names, np.array(values)


def _guarded(context: PairContext):
    def objective(theta):
        try:
            return context.deviance(theta)
        except (SingularBlockError, DegenerateFitError):
            return math.inf
    return objective


def fit_model(y, X, structure: RandomStructure, design: Optional[SurveyDesign] = None,
              mode: str = "correlated", se: str = "sandwich",
              population_size: Optional[float] = None,
              column_names: Optional[Sequence[str]] = None,
              theta_start: Optional[np.ndarray] = None,
              xtol: float = 1e-8, ftol: float = 1e-10, max_evals: int = 5000,
              multistart: bool = False) -> FitResult:
    """Fit the mixed model by weighted pairwise likelihood.

    se is one of "sandwich", "jackknife", "both", or "none". With no design
    the fit is unweighted (census) and only sandwich/none are available.
    """
    if se not in ("sandwich", "jackknife", "both", "none"):
        raise ValueError(f"unknown se method {se!r}")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    pairset = enumerate_pairs(structure, design=design, mode=mode,
                              population_size=population_size)
    context = PairContext(y, X, structure, pairset, column_names=column_names)
    bounds = Bounds.for_structure(structure)
    if theta_start is None:
        theta_start = starting_values(y, X, structure)
    objective = _guarded(context)
    minimizer = minimize_multistart if multistart else minimize_bounded
    opt = minimizer(objective, theta_start, bounds, xtol=xtol, ftol=ftol,
                    max_evals=max_evals)
    ev = context.evaluate(opt.x)
    sigma = math.sqrt(ev.sigma2)
    sd_names, sd_values = _sd_components(structure, opt.x, sigma)

    result = FitResult(
        beta=ev.beta,
        beta_names=list(context.column_names),
        sigma2=ev.sigma2,
        theta=opt.x.copy(),
        theta_names=list(structure.theta_names),
        deviance=ev.deviance,
        converged=opt.converged,
        n_evals=opt.n_evals,
        opt_reason=opt.reason,
        mode=mode,
        n_obs=context.n,
        n_pairs=pairset.n_pairs,
        n_design_pairs=pairset.n_design_pairs,
        nhat_pairs=pairset.nhat_pairs,
        nhat_units=pairset.nhat_units,
        sd_names=sd_names,
        sd_components=sd_values,
    )

    if se in ("sandwich", "both"):
        result.vcov_beta = sandwich_beta(context, opt.x, ev.beta)
        result.se_beta = np.sqrt(np.diag(result.vcov_beta))
    if se in ("jackknife", "both"):
        if design is None:
            raise ValueError("jackknife standard errors need a survey design")
        result.jackknife = _jackknife_block(context, design, result, bounds,
                                            xtol, ftol, max_evals)
    return result


def _jackknife_block(context: PairContext, design: SurveyDesign, result: FitResult,
                     bounds: Bounds, xtol: float, ftol: float, max_evals: int):
    theta_hat = result.theta

    def refit(multipliers):
        sub = context.reweighted(multipliers)
        opt = minimize_bounded(_guarded(sub), theta_hat, bounds, xtol=xtol,
                               ftol=ftol, max_evals=max_evals)
        ev = sub.evaluate(opt.x)
        sigma = math.sqrt(ev.sigma2)
        _, sd_values = _sd_components(context.structure, opt.x, sigma)
        return np.concatenate([ev.beta, sd_values, [sigma]])

    full = result.params_on_report_scale()
    se, dropped, total = jackknife_se(design, refit, full)
    p = len(result.beta)
    k = len(result.sd_components)
    return {
        "se_beta": se[:p],
        "se_sd_components": se[p:p + k],
        "se_sigma": float(se[p + k]),
        "names": result.report_scale_names(),
        "se": se,
        "n_replicates": total,
        "n_dropped": dropped,
    }
