"""Pair enumeration and the weighted pairwise Gaussian objective.

The estimator maximizes a sum of genuine bivariate Gaussian loglikelihoods
over the model-correlated pairs, each inverse-probability weighted. The
fixed effects and the residual variance have closed-form profile solutions
given the variance parameters, leaving a deviance in theta alone for the
optimizer.

Two modes are supported. "correlated" sums over the model-correlated pairs
only. "all" sums over every pair of population units via the marginal
decomposition: (N - 1) times the weighted marginal loglikelihoods plus a
per-correlated-pair correction, which costs O(n + #pairs) instead of
O(n^2).

Evaluation is deterministic: reductions run in input order, so repeated
evaluations at the same parameters are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .design import SurveyDesign
from .structure import RandomStructure, SingularBlockError, det2_inv2_entries, det_inv_2x2

__all__ = [
    "PairObjectiveError",
    "DegenerateFitError",
    "RankDeficientError",
    "PairSet",
    "PairContext",
    "Evaluation",
    "enumerate_pairs",
    "pair_loglik",
    "beta_hat",
    "sigma2_hat",
    "profile_deviance",
    "all_pairs_objective",
]

_LOG_2PI = math.log(2.0 * math.pi)


class PairObjectiveError(RuntimeError):
    """Objective evaluation failed."""


class DegenerateFitError(PairObjectiveError):
    """Weighted residual quadratic form is not positive."""


class RankDeficientError(PairObjectiveError):
    """Fixed-effect design matrix is rank deficient over the pair rows."""


@dataclass(frozen=True)
class PairSet:
    """Enumerated model-correlated pairs plus design-correlated pairs.

    ii < jj index data rows. pi_pairs are joint inclusion probabilities for
    the model pairs; design_* describe the pairs whose sampling indicators
    covary, with their indicator covariances.
    """

    mode: str
    ii: np.ndarray
    jj: np.ndarray
    pi_pairs: np.ndarray
    pi_units: np.ndarray
    design_ii: np.ndarray
    design_jj: np.ndarray
    design_pi: np.ndarray
    design_delta: np.ndarray
    nhat_pairs: float
    nhat_units: float
    population_size: Optional[float] = None

    @property
    def n_pairs(self) -> int:
        return len(self.ii)

    @property
    def n_design_pairs(self) -> int:
        return len(self.design_ii)


def enumerate_pairs(structure: RandomStructure, design: Optional[SurveyDesign] = None,
                    mode: str = "correlated",
                    population_size: Optional[float] = None) -> PairSet:
    """Enumerate the model-correlated pairs and attach design probabilities.

    The model pairs are the union over variance terms of within-group pairs
    and nonzero relatedness pairs, canonically ordered i < j by row index.
    With no design, weights are 1 (census) and no pairs are design
    correlated.
    """
    if mode not in ("correlated", "all"):
        raise ValueError(f"mode must be 'correlated' or 'all', got {mode!r}")
    n = structure.n
    pairs = structure.correlated_pairs()
    ii = np.array([p[0] for p in pairs], dtype=np.intp)
    jj = np.array([p[1] for p in pairs], dtype=np.intp)
    if design is None:
        pi_pairs = np.ones(len(ii))
        pi_units = np.ones(n)
        z = np.zeros(0, dtype=np.intp)
        d_ii, d_jj, d_pi, d_delta = z, z.copy(), np.zeros(0), np.zeros(0)
    else:
        if design.n != n:
            raise ValueError(f"design covers {design.n} elements but the structure has {n}")
        pi_units = design.pi.copy()
        pi_pairs = design.pair_probs(ii, jj) if len(ii) else np.zeros(0)
        d_ii, d_jj, d_pi, d_delta = design.design_pairs()
    nhat_pairs = float(np.sum(1.0 / pi_pairs)) if len(ii) else 0.0
    nhat_units = float(np.sum(1.0 / pi_units))
    return PairSet(mode=mode, ii=ii, jj=jj, pi_pairs=pi_pairs, pi_units=pi_units,
                   design_ii=d_ii, design_jj=d_jj, design_pi=d_pi, design_delta=d_delta,
                   nhat_pairs=nhat_pairs, nhat_units=nhat_units,
                   population_size=population_size)


@dataclass(frozen=True)
class Evaluation:
    """One profiled evaluation of the objective at a theta value."""

    theta: np.ndarray
    beta: np.ndarray
    sigma2: float
    deviance: float
    logdet_sum: float
    quad_sum: float
    stacked_count: float


class PairContext:
    """Precomputed arrays for repeated objective evaluations on one dataset.

    Reentrant and read-only after construction; reweighted() returns a
    cheap view with replicate weight multipliers applied.
    """

    def __init__(self, y: np.ndarray, X: np.ndarray, structure: RandomStructure,
                 pairset: PairSet, column_names: Optional[Sequence[str]] = None):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != len(y):
            raise ValueError("X must be (n, p) matching y")
        if structure.n != len(y):
            raise ValueError("structure does not match the data length")
        self.y = y
        self.X = X
        self.n, self.p = X.shape
        self.structure = structure
        self.pairset = pairset
        self.mode = pairset.mode
        self.column_names = list(column_names) if column_names else [
            f"x{k}" for k in range(self.p)]
        self.I = pairset.ii
        self.J = pairset.jj
        if self.mode == "correlated" and len(self.I) == 0:
            raise PairObjectiveError(
                "no model-correlated pairs; correlated-pairs estimation is undefined "
                "(use all-pairs mode for models with singletons only)")
        self.wp = 1.0 / pairset.pi_pairs if len(self.I) else np.zeros(0)
        self.wu = 1.0 / pairset.pi_units
        self.nhat_pairs = pairset.nhat_pairs
        self.nhat_units = pairset.nhat_units
        self._fixed_population = pairset.population_size is not None
        self.population_size = (pairset.population_size if self._fixed_population
                                else self.nhat_units)
        # Per-term pair and diagonal relatedness weights, computed once.
        self._rp = [t.pair_weights(self.I, self.J) for t in structure.terms]
        self._rd = [t.diag_weights() for t in structure.terms]

    def reweighted(self, multipliers: np.ndarray) -> "PairContext":
        """Replicate view: unit weights scaled by m_i, pair weights by m_i * m_j."""
        mult = np.asarray(multipliers, dtype=float)
        if len(mult) != self.n:
            raise ValueError("multiplier length does not match the data")
        other = object.__new__(PairContext)
        other.__dict__.update(self.__dict__)
        other.wp = self.wp * mult[self.I] * mult[self.J]
        other.wu = self.wu * mult
        other.nhat_pairs = float(np.sum(other.wp))
        other.nhat_units = float(np.sum(other.wu))
        if not self._fixed_population:
            other.population_size = other.nhat_units
        return other

    # -- covariance pieces --------------------------------------------------

    def cov_entries(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Scaled-covariance diagonal (n,) and model-pair off-diagonals (m,)."""
        blocks = self.structure.coef_blocks(theta)
        diag = np.ones(self.n)
        off = np.zeros(len(self.I))
        for t, V, rp, rd in zip(self.structure.terms, blocks, self._rp, self._rd):
            zV = t.z @ V
            diag += rd * np.einsum("ij,ij->i", zV, t.z)
            if len(self.I):
                off += rp * np.einsum("ij,ij->i", zV[self.I], t.z[self.J])
        return diag, off

    def _blocks(self, theta):
        diag, off = self.cov_entries(theta)
        a = diag[self.I]
        d = diag[self.J]
        det, i11, i12, i22 = det2_inv2_entries(a, off, d, pair_labels=(self.I, self.J))
        return diag, off, a, d, det, i11, i12, i22

    # -- profiling ------------------------------------------------------------

    def beta_hat(self, theta: np.ndarray) -> np.ndarray:
        """Profile (generalized-least-squares) fixed effects at theta."""
        return self._beta_with_blocks(theta, self._blocks(theta))[0]

    def _beta_with_blocks(self, theta, blocks):
        diag, off, a, d, det, i11, i12, i22 = blocks
        I, J, X, y = self.I, self.J, self.X, self.y
        c11 = self.wp * i11
        c22 = self.wp * i22
        c12 = self.wp * i12
        if self.mode == "all":
            inv_diag = 1.0 / diag
            c11 = c11 - self.wp * inv_diag[I]
            c22 = c22 - self.wp * inv_diag[J]
            mc = (self.population_size - 1.0) * self.wu * inv_diag
        if len(I):
            XI, XJ = X[I], X[J]
            yI, yJ = y[I], y[J]
            G = (XI.T @ (c11[:, None] * XI) + XJ.T @ (c22[:, None] * XJ)
                 + XI.T @ (c12[:, None] * XJ) + XJ.T @ (c12[:, None] * XI))
            h = XI.T @ (c11 * yI + c12 * yJ) + XJ.T @ (c22 * yJ + c12 * yI)
        else:
            G = np.zeros((self.p, self.p))
            h = np.zeros(self.p)
        if self.mode == "all":
            G = G + X.T @ (mc[:, None] * X)
            h = h + X.T @ (mc * y)
        try:
            beta = np.linalg.solve(G, h)
        except np.linalg.LinAlgError:
            raise self._rank_error(G) from None
        if not np.all(np.isfinite(beta)):
            raise self._rank_error(G)
        return beta, G

    def _rank_error(self, G):
        # Name the columns loading on the (near) null space.
        w, v = np.linalg.eigh((G + G.T) / 2.0)
        null = np.abs(v[:, 0])
        cols = [self.column_names[k] for k in np.flatnonzero(null > 1e-8 * null.max())]
        return RankDeficientError(
            "fixed-effect design is rank deficient over the pair rows; "
            f"columns involved: {', '.join(cols)}")

    def _quads(self, beta, blocks):
        diag, off, a, d, det, i11, i12, i22 = blocks
        resid = self.y - self.X @ beta
        rI, rJ = resid[self.I], resid[self.J]
        pair_quad = i11 * rI * rI + 2.0 * i12 * rI * rJ + i22 * rJ * rJ
        return resid, rI, rJ, pair_quad

    def evaluate(self, theta: np.ndarray, beta: Optional[np.ndarray] = None) -> Evaluation:
        """Profiled evaluation at theta; beta defaults to its profile solution."""
        theta = np.asarray(theta, dtype=float)
        blocks = self._blocks(theta)
        diag, off, a, d, det, i11, i12, i22 = blocks
        if beta is None:
            beta, _ = self._beta_with_blocks(theta, blocks)
        resid, rI, rJ, pair_quad = self._quads(beta, blocks)
        if self.mode == "correlated":
            quad_sum = float(np.sum(self.wp * pair_quad))
            logdet_sum = float(np.sum(self.wp * np.log(det)))
            count = 2.0 * self.nhat_pairs
        else:
            inv_diag = 1.0 / diag
            marg_quad = resid * resid * inv_diag
            quad_sum = float(
                (self.population_size - 1.0) * np.sum(self.wu * marg_quad)
                + np.sum(self.wp * (pair_quad - marg_quad[self.I] - marg_quad[self.J])))
            log_diag = np.log(diag)
            logdet_sum = float(
                (self.population_size - 1.0) * np.sum(self.wu * log_diag)
                + np.sum(self.wp * (np.log(det) - log_diag[self.I] - log_diag[self.J])))
            count = (self.population_size - 1.0) * self.nhat_units
        if quad_sum <= 0.0:
            raise DegenerateFitError(
                f"weighted residual quadratic form is {quad_sum}; the fit is degenerate "
                "(residuals identically zero or weights collapse)")
        sigma2 = quad_sum / count
        deviance = logdet_sum + count * math.log(2.0 * sigma2)
        if not math.isfinite(deviance):
            raise PairObjectiveError(f"non-finite deviance at theta={theta.tolist()}")
        return Evaluation(theta=theta, beta=beta, sigma2=sigma2, deviance=deviance,
                          logdet_sum=logdet_sum, quad_sum=quad_sum, stacked_count=count)

    def deviance(self, theta: np.ndarray) -> float:
        return self.evaluate(theta).deviance

    # -- full (unprofiled) objective -----------------------------------------

    def objective(self, beta: np.ndarray, sigma2: float, theta: np.ndarray) -> float:
        """Weighted pairwise loglikelihood at explicit parameter values.

        In all-pairs mode this is the marginal decomposition: (N - 1) times
        the weighted marginal loglikelihoods plus per-pair corrections.
        """
        beta = np.asarray(beta, dtype=float)
        blocks = self._blocks(np.asarray(theta, dtype=float))
        diag, off, a, d, det, i11, i12, i22 = blocks
        resid, rI, rJ, pair_quad = self._quads(beta, blocks)
        log_s2 = math.log(2.0 * math.pi * sigma2)
        if len(self.I):
            ll_pairs = -0.5 * (2.0 * log_s2 + np.log(det) + pair_quad / sigma2)
        else:
            ll_pairs = np.zeros(0)
        if self.mode == "correlated":
            return float(np.sum(self.wp * ll_pairs))
        marg = -0.5 * (log_s2 + np.log(diag) + resid * resid / (diag * sigma2))
        total = (self.population_size - 1.0) * float(np.sum(self.wu * marg))
        if len(self.I):
            total += float(np.sum(self.wp * (ll_pairs - marg[self.I] - marg[self.J])))
        return total


# ---------------------------------------------------------------------------
# Spec-level operation wrappers
# ---------------------------------------------------------------------------


def pair_loglik(y_pair: np.ndarray, x_pair: np.ndarray, beta: np.ndarray,
                sigma2: float, block: np.ndarray) -> float:
    """Bivariate Gaussian loglikelihood of one pair given its 2x2 scaled block."""
    r = np.asarray(y_pair, dtype=float) - np.asarray(x_pair, dtype=float) @ beta
    det, inv = det_inv_2x2(np.asarray(block, dtype=float))
    quad = float(r @ inv @ r)
    return -0.5 * (2.0 * math.log(2.0 * math.pi * sigma2) + math.log(det) + quad / sigma2)


def beta_hat(context: PairContext, theta: np.ndarray) -> np.ndarray:
    return context.beta_hat(theta)


def sigma2_hat(context: PairContext, theta: np.ndarray,
               beta: Optional[np.ndarray] = None) -> float:
    return context.evaluate(theta, beta=beta).sigma2


def profile_deviance(context: PairContext, theta: np.ndarray) -> float:
    return context.evaluate(theta).deviance


def all_pairs_objective(context: PairContext, beta: np.ndarray, sigma2: float,
                        theta: np.ndarray) -> float:
    if context.mode != "all":
        raise PairObjectiveError("all_pairs_objective requires a context in 'all' mode")
    return context.objective(beta, sigma2, theta)
