"""Random-effect covariance structures with Cholesky-parameterized coefficients.

The marginal covariance of the response is sigma2 * C where

    C[i, j] = 1{i == j} + sum_g r_g(i, j) * z_i' V_g(theta) z_j

summed over variance terms g. For a grouping term, r_g(i, j) is 1 when i
and j share the group and 0 otherwise; for an explicit relatedness term it
is the (i, j) entry of a sparse symmetric weight matrix. Each coefficient
block V_g = L_g L_g' is parameterized by the lower triangle of its Cholesky
factor L_g, so V_g is positive semidefinite for any parameter value; the
diagonal entries of L_g are constrained nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "StructureError",
    "SingularBlockError",
    "VarianceTerm",
    "RandomStructure",
    "ParameterVector",
    "det_inv_2x2",
    "grouping_term",
    "relatedness_term",
    "preset",
    "PRESET_NAMES",
]


class StructureError(ValueError):
    """Invalid random-effect structure specification."""


class SingularBlockError(ArithmeticError):
    """A 2x2 covariance block is numerically singular."""

    def __init__(self, message: str, pair: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.pair = pair


def _canonical_entries(entries) -> Dict[Tuple[int, int], float]:
    """Canonicalize sparse off-diagonal entries to i < j keys, checking symmetry."""
    out: Dict[Tuple[int, int], float] = {}
    for (i, j), w in entries.items() if isinstance(entries, dict) else entries:
        i, j = int(i), int(j)
        if i == j:
            raise StructureError("off-diagonal relatedness entries must have i != j")
        key = (i, j) if i < j else (j, i)
        prev = out.get(key)
        if prev is not None and prev != w:
            raise StructureError(f"asymmetric relatedness entries for pair {key}")
        out[key] = float(w)
    return out


@dataclass(frozen=True)
class VarianceTerm:
    """One additive component of the random-effect covariance.

    z holds the random-effect design rows (n x q, a column of ones for an
    intercept). Exactly one of `groups` (grouping term) or `rel_entries`
    (explicit relatedness term, canonical i < j keys, implicit unit
    diagonal unless `rel_diag` is given) is set.
    """

    name: str
    z: np.ndarray
    kind: str  # "group" or "relatedness"
    groups: Optional[np.ndarray] = None
    rel_entries: Optional[Dict[Tuple[int, int], float]] = None
    rel_diag: Optional[np.ndarray] = None
    z_names: Tuple[str, ...] = ()

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def weight(self, i: int, j: int) -> float:
        """Relatedness weight r(i, j); symmetric in (i, j)."""
        if self.kind == "group":
            if i == j:
                return 1.0
            return 1.0 if self.groups[i] == self.groups[j] else 0.0
        if i == j:
            return float(self.rel_diag[i]) if self.rel_diag is not None else 1.0
        key = (i, j) if i < j else (j, i)
        return self.rel_entries.get(key, 0.0)

    def pair_weights(self, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
        """Vectorized r(i, j) over index arrays (i != j assumed)."""
        if self.kind == "group":
            return (self.groups[ii] == self.groups[jj]).astype(float)
        out = np.zeros(len(ii), dtype=float)
        for k, (i, j) in enumerate(zip(ii, jj)):
            key = (i, j) if i < j else (j, i)
            w = self.rel_entries.get(key)
            if w is not None:
                out[k] = w
        return out

    def diag_weights(self) -> np.ndarray:
        """r(i, i) for every unit."""
        if self.kind == "group":
            return np.ones(self.n)
        if self.rel_diag is not None:
            return np.asarray(self.rel_diag, dtype=float)
        return np.ones(self.n)

    def correlated_pairs(self) -> Iterator[Tuple[int, int]]:
        """Yield (i, j), i < j, with nonzero weight under this term."""
        if self.kind == "group":
            order = np.argsort(self.groups, kind="stable")
            codes = np.asarray(self.groups)[order]
            start = 0
            for stop in range(1, len(order) + 1):
                if stop == len(order) or codes[stop] != codes[start]:
                    members = np.sort(order[start:stop])
                    for a in range(len(members)):
                        for b in range(a + 1, len(members)):
                            yield int(members[a]), int(members[b])
                    start = stop
        else:
            for (i, j), w in self.rel_entries.items():
                if w != 0.0:
                    yield i, j


def _validate_term(term: VarianceTerm, n: int) -> None:
    if term.z.ndim != 2 or term.z.shape[0] != n:
        raise StructureError(f"term '{term.name}': z must be (n, q) with n={n}")
    if term.q < 1:
        raise StructureError(f"term '{term.name}': q must be >= 1")
    if term.kind == "group":
        if term.groups is None or len(term.groups) != n:
            raise StructureError(f"term '{term.name}': grouping codes missing or wrong length")
    elif term.kind == "relatedness":
        if term.rel_entries is None:
            raise StructureError(f"term '{term.name}': relatedness entries missing")
        for (i, j) in term.rel_entries:
            if not (0 <= i < n and 0 <= j < n):
                raise StructureError(f"term '{term.name}': relatedness index ({i},{j}) out of range")
        if term.rel_diag is not None:
            if len(term.rel_diag) != n:
                raise StructureError(f"term '{term.name}': relatedness diagonal has wrong length")
            if np.any(np.asarray(term.rel_diag) <= 0):
                raise StructureError(f"term '{term.name}': relatedness diagonal entries must be > 0")
    else:
        raise StructureError(f"term '{term.name}': unknown kind '{term.kind}'")


class RandomStructure:
    """A set of variance terms plus the layout of the flat parameter vector.

    The parameter vector theta stacks, term by term, the lower-triangular
    entries of each Cholesky factor L_g in row-major order
    ((0,0), (1,0), (1,1), ...). Every coordinate feeds exactly one entry of
    one factor; shared (equality-constrained) parameters are not
    representable.
    """

    def __init__(self, terms: Sequence[VarianceTerm], n: Optional[int] = None):
        terms = list(terms)
        if terms:
            n = terms[0].n
        elif n is None:
            raise StructureError("a structure with no terms needs an explicit n")
        for t in terms:
            _validate_term(t, n)
        self.terms = terms
        self.n = n

        self.theta_slices: List[slice] = []
        self.theta_names: List[str] = []
        is_diag: List[bool] = []
        pos = 0
        for t in terms:
            rows, cols = np.tril_indices(t.q)
            k = len(rows)
            self.theta_slices.append(slice(pos, pos + k))
            names = t.z_names if t.z_names else tuple(f"z{c}" for c in range(t.q))
            for r, c in zip(rows, cols):
                label = names[r] if r == c else f"{names[r]}.{names[c]}"
                self.theta_names.append(f"{t.name}:{label}[{r},{c}]")
                is_diag.append(r == c)
            pos += k
        self.n_theta = pos
        self._diag_mask = np.array(is_diag, dtype=bool)

    @property
    def theta_lower_bounds(self) -> np.ndarray:
        lb = np.full(self.n_theta, -np.inf)
        lb[self._diag_mask] = 0.0
        return lb

    @property
    def theta_diag_mask(self) -> np.ndarray:
        return self._diag_mask.copy()

    def chol_factors(self, theta: np.ndarray) -> List[np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise StructureError(f"theta must have length {self.n_theta}, got shape {theta.shape}")
        factors = []
        for t, sl in zip(self.terms, self.theta_slices):
            L = np.zeros((t.q, t.q))
            L[np.tril_indices(t.q)] = theta[sl]
            factors.append(L)
        return factors

    def coef_blocks(self, theta: np.ndarray) -> List[np.ndarray]:
        """V_g = L_g L_g' for each term; positive semidefinite by construction."""
        return [L @ L.T for L in self.chol_factors(theta)]

    def entry(self, theta: np.ndarray, i: int, j: int) -> float:
        """Scaled-covariance entry: 1{i == j} plus the term contributions."""
        blocks = self.coef_blocks(theta)
        val = 1.0 if i == j else 0.0
        for t, V in zip(self.terms, blocks):
            r = t.weight(i, j)
            if r != 0.0:
                val += r * float(t.z[i] @ V @ t.z[j])
        return val

    def block(self, theta: np.ndarray, i: int, j: int) -> np.ndarray:
        """Symmetric 2x2 scaled-covariance block for the pair (i, j)."""
        a = self.entry(theta, i, i)
        b = self.entry(theta, i, j)
        d = self.entry(theta, j, j)
        return np.array([[a, b], [b, d]])

    def correlated_pairs(self) -> List[Tuple[int, int]]:
        """Sorted union over terms of pairs with a nonzero weight."""
        seen = set()
        for t in self.terms:
            seen.update(t.correlated_pairs())
        return sorted(seen)


@dataclass
class ParameterVector:
    """Full parameter vector: fixed effects, residual variance, variance parameters."""

    beta: np.ndarray
    sigma2: float
    theta: np.ndarray

    def validate(self, structure: Optional[RandomStructure] = None) -> None:
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise StructureError(f"sigma2 must be > 0, got {self.sigma2}")
        if structure is not None:
            if len(self.theta) != structure.n_theta:
                raise StructureError("theta length does not match the structure layout")
            if np.any(self.theta[structure.theta_diag_mask] < 0):
                raise StructureError("diagonal Cholesky entries must be >= 0")


_DET_RTOL = 1e-12


def det2_inv2_entries(a: np.ndarray, b: np.ndarray, d: np.ndarray,
                      pair_labels=None):
    """Determinant and inverse entries of symmetric 2x2 blocks [[a, b], [b, d]].

    Vectorized over leading dimensions. Raises SingularBlockError when any
    det <= 1e-12 * max(|a|, |d|, 1) or a diagonal entry is nonpositive,
    naming the offending pair when labels are supplied.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.asarray(d, dtype=float)
    det = a * d - b * b
    tol = _DET_RTOL * np.maximum(np.maximum(np.abs(a), np.abs(d)), 1.0)
    bad = (det <= tol) | (a <= 0) | (d <= 0)
    if np.any(bad):
        idx = int(np.argmax(bad)) if bad.ndim else 0
        if pair_labels is not None:
            i, j = pair_labels[0][idx], pair_labels[1][idx]
            label = f"pair ({i}, {j})"
        else:
            label = f"block {idx}"
        av = a.flat[idx] if a.ndim else float(a)
        dv = d.flat[idx] if d.ndim else float(d)
        bv = b.flat[idx] if b.ndim else float(b)
        raise SingularBlockError(
            f"singular 2x2 covariance block at {label}: [[{av}, {bv}], [{bv}, {dv}]]",
            pair=(pair_labels[0][idx], pair_labels[1][idx]) if pair_labels is not None else None,
        )
    inv11 = d / det
    inv22 = a / det
    inv12 = -b / det
    return det, inv11, inv12, inv22


def det_inv_2x2(blocks: np.ndarray):
    """Determinants and inverses of a batch of symmetric 2x2 blocks.

    Accepts shape (2, 2) or (m, 2, 2); returns (det, inv) with matching
    leading shape. The batch is processed with array arithmetic, no
    per-block dispatch.
    """
    arr = np.asarray(blocks, dtype=float)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.shape[-2:] != (2, 2):
        raise ValueError("blocks must have trailing shape (2, 2)")
    det, inv11, inv12, inv22 = det2_inv2_entries(arr[:, 0, 0], arr[:, 0, 1], arr[:, 1, 1])
    inv = np.empty_like(arr)
    inv[:, 0, 0] = inv11
    inv[:, 0, 1] = inv12
    inv[:, 1, 0] = inv12
    inv[:, 1, 1] = inv22
    if single:
        return float(det[0]), inv[0]
    return det, inv


# ---------------------------------------------------------------------------
# Term constructors and named presets
# ---------------------------------------------------------------------------


def grouping_term(groups, z=None, name: str = "group",
                  z_names: Sequence[str] = ()) -> VarianceTerm:
    """Random effects shared within levels of a grouping factor.

    groups may be any label array; it is factorized to integer codes.
    z defaults to an intercept column (q = 1).
    """
    codes = _factorize(groups)
    n = len(codes)
    if z is None:
        z = np.ones((n, 1))
        z_names = z_names or ("(Intercept)",)
    else:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
    return VarianceTerm(name=name, z=z, kind="group", groups=codes,
                        z_names=tuple(z_names))


def relatedness_term(entries, n: int, diag=None, z=None, name: str = "kinship",
                     z_names: Sequence[str] = ()) -> VarianceTerm:
    """Random effects correlated through an explicit sparse symmetric weight matrix.

    entries: dict {(i, j): w} or iterable of ((i, j), w) over row indices,
    off-diagonal only. The diagonal defaults to 1 unless `diag` is given.
    """
    canon = _canonical_entries(entries)
    if z is None:
        z = np.ones((n, 1))
        z_names = z_names or ("(Intercept)",)
    else:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
    diag_arr = None if diag is None else np.asarray(diag, dtype=float)
    return VarianceTerm(name=name, z=z, kind="relatedness", rel_entries=canon,
                        rel_diag=diag_arr, z_names=tuple(z_names))


def _factorize(values) -> np.ndarray:
    values = np.asarray(values)
    _, codes = np.unique(values, return_inverse=True)
    return codes


def _twin_relatedness(pair_ids, is_mz, dz_weight: float, name: str) -> VarianceTerm:
    """Within-pair relatedness term: weight 1 for identical pairs, dz_weight otherwise."""
    codes = _factorize(pair_ids)
    is_mz = np.asarray(is_mz, dtype=bool)
    n = len(codes)
    entries: Dict[Tuple[int, int], float] = {}
    order = np.argsort(codes, kind="stable")
    start = 0
    for stop in range(1, n + 1):
        if stop == n or codes[order[stop]] != codes[order[start]]:
            members = np.sort(order[start:stop])
            w = 1.0 if is_mz[members[0]] else dz_weight
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    entries[(int(members[a]), int(members[b]))] = w
            start = stop
    return relatedness_term(entries, n, name=name)


PRESET_NAMES = (
    "twin-E",
    "twin-AE",
    "twin-ADE",
    "herd-kinship",
    "intercept-by-group",
    "intercept-slope-by-group",
)


def preset(name: str, **kwargs) -> RandomStructure:
    """Build one of the named random-effect structures.

    twin-E:    shared within-pair intercept (pair_ids).
    twin-AE:   adds an additive relatedness term, off-diagonal 1 for
               identical pairs and 1/2 for fraternal pairs (pair_ids, is_mz).
    twin-ADE:  adds a dominance relatedness term with fraternal weight 1/4.
    herd-kinship: herd grouping term plus an explicit relatedness term
               (herd_ids, kinship entries, n).
    intercept-by-group: (groups,).
    intercept-slope-by-group: correlated intercept and slope (groups, slope).
    """
    if name == "twin-E":
        return RandomStructure([grouping_term(kwargs["pair_ids"], name="pair")])
    if name == "twin-AE":
        return RandomStructure([
            grouping_term(kwargs["pair_ids"], name="pair"),
            _twin_relatedness(kwargs["pair_ids"], kwargs["is_mz"], 0.5, "additive"),
        ])
    if name == "twin-ADE":
        return RandomStructure([
            grouping_term(kwargs["pair_ids"], name="pair"),
            _twin_relatedness(kwargs["pair_ids"], kwargs["is_mz"], 0.5, "additive"),
            _twin_relatedness(kwargs["pair_ids"], kwargs["is_mz"], 0.25, "dominant"),
        ])
    if name == "herd-kinship":
        n = kwargs["n"]
        return RandomStructure([
            grouping_term(kwargs["herd_ids"], name="herd"),
            relatedness_term(kwargs["kinship"], n, diag=kwargs.get("kinship_diag"),
                             name="genetic"),
        ])
    if name == "intercept-by-group":
        return RandomStructure([grouping_term(kwargs["groups"], name="group")])
    if name == "intercept-slope-by-group":
        groups = kwargs["groups"]
        slope = np.asarray(kwargs["slope"], dtype=float)
        z = np.column_stack([np.ones(len(slope)), slope])
        return RandomStructure([
            grouping_term(groups, z=z, name="group",
                          z_names=("(Intercept)", kwargs.get("slope_name", "slope"))),
        ])
    raise StructureError(f"unknown preset '{name}'; choose one of {', '.join(PRESET_NAMES)}")
