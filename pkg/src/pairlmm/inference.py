"""Design-based uncertainty: sandwich covariance for the fixed effects and
delete-one-PSU jackknife standard errors for all parameters.

The sandwich treats the fitted fixed effects as the solution of weighted
estimating equations X' W (Y - mu) = 0 and combines per-observation score
columns with the sampling-indicator covariances of the design-correlated
pairs (the usual with-replacement form: the O(1/N) population term is
dropped). Variance parameters get jackknife standard errors; a pair's
replicate weight is scaled by the product of its two units' multipliers.
"""

from __future__ import annotations

import warnings
from typing import Callable, List, Optional, Tuple

import numpy as np

from .design import SurveyDesign
from .pairs import PairContext

__all__ = [
    "assemble_weight_entries",
    "sandwich_beta",
    "jackknife_combine",
    "jackknife_se",
]


def assemble_weight_entries(context: PairContext, theta: np.ndarray):
    """Diagonal (n,) and model-pair off-diagonal entries of the weight matrix W.

    Off-diagonal: inverse-block corner over the pair probability. Diagonal:
    the accumulated inverse-block corners of every pair the unit belongs
    to; in all-pairs mode plus the closed-form marginal contribution of its
    non-correlated partners, without enumerating them.
    """
    diag, off, a, d, det, i11, i12, i22 = context._blocks(np.asarray(theta, float))
    I, J, wp = context.I, context.J, context.wp
    W_off = wp * i12
    W_diag = np.zeros(context.n)
    np.add.at(W_diag, I, wp * i11)
    np.add.at(W_diag, J, wp * i22)
    if context.mode == "all":
        inv_diag = 1.0 / diag
        np.add.at(W_diag, I, -wp * inv_diag[I])
        np.add.at(W_diag, J, -wp * inv_diag[J])
        W_diag += (context.population_size - 1.0) * context.wu * inv_diag
    return W_diag, W_off


def sandwich_beta(context: PairContext, theta: np.ndarray,
                  beta: np.ndarray) -> np.ndarray:
    """Sandwich covariance of the fixed effects.

    bread = X'WX; meat sums (delta_ij / pi_ij) a_i a_j' over the
    design-correlated pairs plus the diagonal terms with
    delta_ii = pi_i (1 - pi_i), where a_i is column i of X'W times
    residual i. Symmetrized and eigenvalue-floored at zero.
    """
    X, y = context.X, context.y
    W_diag, W_off = assemble_weight_entries(context, theta)
    I, J = context.I, context.J
    WX = W_diag[:, None] * X
    if len(I):
        np.add.at(WX, I, W_off[:, None] * X[J])
        np.add.at(WX, J, W_off[:, None] * X[I])
    bread = X.T @ WX
    bread = (bread + bread.T) / 2.0
    resid = y - X @ beta
    score_cols = WX * resid[:, None]  # row i holds a_i'
    pi = context.pairset.pi_units
    meat = score_cols.T @ ((1.0 - pi)[:, None] * score_cols)
    dI, dJ = context.pairset.design_ii, context.pairset.design_jj
    if len(dI):
        w = context.pairset.design_delta / context.pairset.design_pi
        cross = score_cols[dI].T @ (w[:, None] * score_cols[dJ])
        meat = meat + cross + cross.T
    meat = (meat + meat.T) / 2.0
    try:
        half = np.linalg.solve(bread, meat)
        vcov = np.linalg.solve(bread, half.T).T
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "sandwich bread X'WX is singular; check the fixed-effect design") from None
    vcov = (vcov + vcov.T) / 2.0
    w_eig, v_eig = np.linalg.eigh(vcov)
    if np.any(w_eig < 0):
        vcov = (v_eig * np.maximum(w_eig, 0.0)) @ v_eig.T
        vcov = (vcov + vcov.T) / 2.0
    return vcov


def jackknife_combine(full: np.ndarray, replicate_estimates: List[Tuple[object, np.ndarray]],
                      factors: dict) -> np.ndarray:
    """Stratified jackknife variance: SE^2 = sum_k f_k sum_{r in k} (est_r - full)^2."""
    se2 = np.zeros_like(np.asarray(full, dtype=float))
    for stratum, est in replicate_estimates:
        dev = np.asarray(est, dtype=float) - full
        se2 += factors[stratum] * dev * dev
    return np.sqrt(se2)


def jackknife_se(design: SurveyDesign, refit: Callable[[np.ndarray], np.ndarray],
                 full: np.ndarray):
    """Refit under every delete-one-PSU replicate and combine.

    refit maps a multiplier vector to the packed parameter estimate on the
    reporting scale. Replicates whose refit raises are dropped with a
    warning; the drop count is returned alongside the SEs.
    """
    replicates, factors = design.jackknife_replicates()
    estimates: List[Tuple[object, np.ndarray]] = []
    dropped = 0
    for rep in replicates:
        try:
            est = refit(rep.multipliers)
        except Exception as exc:  # noqa: BLE001 - any replicate failure is dropped
            warnings.warn(
                f"jackknife replicate (stratum {rep.stratum!r}, PSU {rep.psu!r}) "
                f"failed and was dropped: {exc}")
            dropped += 1
            continue
        estimates.append((rep.stratum, est))
    se = jackknife_combine(np.asarray(full, dtype=float), estimates, factors)
    return se, dropped, len(replicates)
