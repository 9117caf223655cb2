"""Sampling designs: single and joint inclusion probabilities, indicator
covariances, and delete-one-PSU jackknife replicate weights.

Three kinds of design are supported. Multistage designs record, for every
sampled element, its selection path (stratum, then a nested sequence of
sampling stages); joint probabilities are exact. Probability designs carry
only per-unit inclusion probabilities and approximate joint probabilities
with the Hajek formula. Pair-table designs read user-supplied joint
probabilities, defaulting to independence for missing pairs.

All designs are read-only after construction; the scalar pair-probability
memo is lock-protected so concurrent queries are safe.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DesignError",
    "Stage",
    "SurveyDesign",
    "JackknifeReplicate",
    "hajek_pair_prob",
    "hajek_pair_prob_population",
    "sampling_covariance",
]


class DesignError(ValueError):
    """Invalid design specification or unanswerable probability query."""


_KIND_SRS = 0
_KIND_BERNOULLI = 1
_KIND_POISSON = 2
_KIND_CODES = {"srs": _KIND_SRS, "bernoulli": _KIND_BERNOULLI, "poisson": _KIND_POISSON}


@dataclass(frozen=True)
class Stage:
    """One selection step along an element's path.

    srs stages sample n of N units without replacement with equal
    probability; bernoulli and poisson stages include each unit
    independently with its own probability (poisson marks size measures,
    the arithmetic is identical).
    """

    kind: str
    unit: Hashable
    n: int = 0
    N: int = 0
    prob: float = 0.0

    def fraction(self) -> float:
        if self.kind == "srs":
            if self.N <= 0:
                raise DesignError(f"stage for unit {self.unit!r}: population count must be > 0")
            if not (0 < self.n <= self.N):
                raise DesignError(
                    f"stage for unit {self.unit!r}: sampled count {self.n} outside (0, {self.N}]")
            return self.n / self.N
        if self.kind in ("bernoulli", "poisson"):
            if not (0 < self.prob <= 1):
                raise DesignError(f"stage for unit {self.unit!r}: probability {self.prob} outside (0, 1]")
            return self.prob
        raise DesignError(f"unknown stage kind '{self.kind}'")


@dataclass(frozen=True)
class JackknifeReplicate:
    stratum: Hashable
    psu: Hashable
    multipliers: np.ndarray


def hajek_pair_prob(sample_probs: np.ndarray, i: int, j: int) -> float:
    """Sample-based Hajek approximation to the joint inclusion probability.

    pi_i * pi_j * (1 - (1-pi_i)(1-pi_j) / sum_k (1-pi_k)) with the sum over
    sampled units. A census (sum zero) returns pi_i * pi_j with a warning;
    results outside (0, min(pi_i, pi_j)] are clamped with a warning.
    """
    probs = np.asarray(sample_probs, dtype=float)
    if np.any((probs <= 0) | (probs > 1)):
        raise DesignError("all inclusion probabilities must lie in (0, 1]")
    if len(probs) < 2:
        raise DesignError("Hajek approximation needs a sample of at least 2 units")
    pi_i, pi_j = float(probs[i]), float(probs[j])
    denom = float(np.sum(1.0 - probs))
    return _hajek_value(pi_i, pi_j, denom)


def hajek_pair_prob_population(all_probs: np.ndarray, i: int, j: int) -> float:
    """Population-level Hajek approximation: denominator sum_k pi_k (1 - pi_k)."""
    probs = np.asarray(all_probs, dtype=float)
    pi_i, pi_j = float(probs[i]), float(probs[j])
    denom = float(np.sum(probs * (1.0 - probs)))
    return _hajek_value(pi_i, pi_j, denom)


def _hajek_value(pi_i: float, pi_j: float, denom: float) -> float:
    prod = pi_i * pi_j
    if denom == 0.0:
        warnings.warn("Hajek denominator is zero (census); returning pi_i * pi_j")
        return prod
    val = prod * (1.0 - (1.0 - pi_i) * (1.0 - pi_j) / denom)
    upper = min(pi_i, pi_j)
    if val > upper or val <= 0.0:
        warnings.warn(
            f"Hajek joint probability {val} outside (0, {upper}]; clamping")
        val = min(max(val, 1e-10 * prod), upper)
    return val


def sampling_covariance(pi_i: float, pi_j: float, pi_ij: float, same_unit: bool) -> float:
    """Covariance of sampling indicators: pi_ij - pi_i pi_j, or pi(1-pi) on the diagonal."""
    if same_unit:
        return pi_i * (1.0 - pi_i)
    return pi_ij - pi_i * pi_j


class SurveyDesign:
    """Per-element view of a sampling design over the n sampled elements.

    Elements are indexed 0..n-1 in data-row order; `ids` carries optional
    external labels used in messages and pair tables.
    """

    def __init__(self):
        raise TypeError("use SurveyDesign.from_* constructors")

    # -- constructors -------------------------------------------------------

    @classmethod
    def _blank(cls) -> "SurveyDesign":
        obj = object.__new__(cls)
        obj._memo: Dict[Tuple[int, int], float] = {}
        obj._memo_lock = threading.Lock()
        obj._jk_stratum_override: Dict[Hashable, Hashable] = {}
        obj.ids = None
        obj.psu_labels = None
        return obj

    @classmethod
    def from_paths(cls, strata: Sequence[Hashable], paths: Sequence[Sequence[Stage]],
                   ids: Optional[Sequence] = None) -> "SurveyDesign":
        """Exact multistage design from explicit per-element selection paths.

        The final stage of each path selects the element itself; paths must
        have equal depth, stages of elements sharing a unit must agree on
        that unit's counts, and each unit must appear under a single parent.
        """
        obj = cls._blank()
        obj.mode = "multistage"
        obj.n = len(paths)
        if obj.n == 0:
            raise DesignError("design has no elements")
        obj.strata_labels = np.asarray(strata, dtype=object)
        if len(obj.strata_labels) != obj.n:
            raise DesignError("strata and paths lengths differ")
        if any(len(p) == 0 for p in paths):
            raise DesignError("every element needs at least one selection stage")
        depth = max(len(p) for p in paths)
        # Ragged designs (strata with different stage counts) are padded with
        # per-element certainty stages; distinct elements always diverge at or
        # before their own selection stage, so padding never hosts a divergence.
        paths = [
            list(p) + [Stage("srs", ("_pad", e, t), n=1, N=1)
                       for t in range(len(p), depth)]
            for e, p in enumerate(paths)
        ]
        obj.depth = depth
        obj.ids = _as_ids(ids, obj.n)

        # Cumulative-prefix codes make level-t equality mean full-path-prefix
        # equality; prefixes also key the unit-consistency checks.
        # Unit identity is prefix-scoped: the same PSU label may recur in
        # different strata and denotes distinct units there.
        kind = np.zeros((obj.n, depth), dtype=np.int8)
        n_arr = np.zeros((obj.n, depth))
        N_arr = np.zeros((obj.n, depth))
        prob = np.zeros((obj.n, depth))
        codes = np.zeros((obj.n, depth), dtype=np.int64)
        seen_params: Dict[Tuple, Tuple] = {}
        prefix_code: Dict[Tuple, int] = {}
        for e, (stratum, path) in enumerate(zip(obj.strata_labels, paths)):
            prefix = (stratum,)
            for t, st in enumerate(path):
                if st.kind not in _KIND_CODES:
                    raise DesignError(f"unknown stage kind '{st.kind}'")
                st.fraction()  # validates counts/probabilities
                parent = prefix
                prefix = prefix + (st.unit,)
                if st.kind == "srs":
                    params = (st.n, st.N)
                    prev = seen_params.get(parent)
                    if prev is not None and prev != params:
                        raise DesignError(
                            f"inconsistent stage counts under parent {parent!r} at stage {t}")
                    seen_params[parent] = params
                kind[e, t] = _KIND_CODES[st.kind]
                n_arr[e, t], N_arr[e, t], prob[e, t] = st.n, st.N, st.prob
                codes[e, t] = prefix_code.setdefault(prefix, len(prefix_code))
        if len(set(map(tuple, codes))) != obj.n:
            raise DesignError("two elements share an identical selection path")

        frac = np.where(kind == _KIND_SRS,
                        n_arr / np.maximum(N_arr, 1), prob)
        obj._kind, obj._n_arr, obj._N_arr, obj._prob = kind, n_arr, N_arr, prob
        obj._codes = codes
        obj._frac = frac
        below = np.ones((obj.n, depth + 1))
        for t in range(depth - 1, -1, -1):
            below[:, t] = frac[:, t] * below[:, t + 1]
        obj._below = below
        obj.pi = below[:, 0].copy()
        obj.psu_labels = np.array([p[0].unit for p in paths], dtype=object)
        obj._pair_table = None
        obj._validate_pi()
        return obj

    @classmethod
    def from_multistage(cls, strata, psu, counts, stage_ids=(), ids=None) -> "SurveyDesign":
        """Exact multistage SRS design from parallel column arrays.

        counts lists one population-count column per stage: PSUs per
        stratum, then units per next-level parent, ending with elements per
        deepest unit. Sampled counts are inferred from the distinct units
        present at each stage, so the data must contain the complete sample.
        """
        strata = np.asarray(strata, dtype=object)
        n = len(strata)
        unit_cols = [np.asarray(psu, dtype=object)]
        unit_cols += [np.asarray(c, dtype=object) for c in stage_ids]
        counts = [np.asarray(c, dtype=float) for c in counts]
        if len(counts) != len(unit_cols) + 1:
            raise DesignError(
                f"need {len(unit_cols) + 1} count columns (one per stage, elements last), "
                f"got {len(counts)}")
        for col in unit_cols + counts:
            if len(col) != n:
                raise DesignError("design columns must match the data length")

        # Sampled counts: distinct child units within each parent prefix.
        sampled: List[Dict[Tuple, int]] = []
        for t in range(len(unit_cols) + 1):
            children: Dict[Tuple, set] = {}
            for e in range(n):
                parent = (strata[e],) + tuple(col[e] for col in unit_cols[:t])
                child = unit_cols[t][e] if t < len(unit_cols) else e
                children.setdefault(parent, set()).add(child)
            sampled.append({k: len(v) for k, v in children.items()})

        paths = []
        for e in range(n):
            path = []
            for t in range(len(unit_cols) + 1):
                parent = (strata[e],) + tuple(col[e] for col in unit_cols[:t])
                unit = unit_cols[t][e] if t < len(unit_cols) else f"el{e}"
                N_pop = counts[t][e]
                if not np.isfinite(N_pop) or N_pop <= 0 or N_pop != int(N_pop):
                    raise DesignError(
                        f"row {e}: population count at stage {t} must be a positive integer, "
                        f"got {counts[t][e]}")
                n_smp = sampled[t][parent]
                if n_smp > N_pop:
                    raise DesignError(
                        f"stage {t} under {parent!r}: {n_smp} sampled units exceed the "
                        f"population count {int(N_pop)}")
                path.append(Stage("srs", unit, n=n_smp, N=int(N_pop)))
            paths.append(path)
        return cls.from_paths(strata, paths, ids=ids)

    @classmethod
    def from_probs(cls, pi, strata=None, psu=None, ids=None) -> "SurveyDesign":
        """Design with known per-unit probabilities; joint probabilities by Hajek.

        Units in different strata are treated as independent; the Hajek
        denominator is accumulated within strata over the sampled units.
        """
        obj = cls._blank()
        obj.mode = "pps"
        obj.pi = np.asarray(pi, dtype=float).copy()
        obj.n = len(obj.pi)
        obj.strata_labels = _as_strata(strata, obj.n)
        obj.psu_labels = None if psu is None else np.asarray(psu, dtype=object)
        obj.ids = _as_ids(ids, obj.n)
        obj._pair_table = None
        obj._validate_pi()
        obj._hajek_denoms = {}
        for s in np.unique(obj.strata_labels):
            mask = obj.strata_labels == s
            obj._hajek_denoms[s] = float(np.sum(1.0 - obj.pi[mask]))
        return obj

    @classmethod
    def from_pair_table(cls, pi, pairs: Dict[Tuple, float], strata=None, psu=None,
                        ids=None) -> "SurveyDesign":
        """Design with user-supplied joint probabilities.

        pairs maps (id_i, id_j) to the joint probability, keyed by the
        external ids when given, else by row position. Missing pairs
        default to independence (pi_i * pi_j).
        """
        obj = cls._blank()
        obj.mode = "pair-table"
        obj.pi = np.asarray(pi, dtype=float).copy()
        obj.n = len(obj.pi)
        obj.strata_labels = _as_strata(strata, obj.n)
        obj.psu_labels = None if psu is None else np.asarray(psu, dtype=object)
        obj.ids = _as_ids(ids, obj.n)
        obj._validate_pi()
        id_to_idx = {v: k for k, v in enumerate(obj.ids)}
        table: Dict[Tuple[int, int], float] = {}
        for (a, b), p in pairs.items():
            if a not in id_to_idx or b not in id_to_idx:
                raise DesignError(f"pair table references unknown element ({a!r}, {b!r})")
            i, j = id_to_idx[a], id_to_idx[b]
            if i == j:
                raise DesignError(f"pair table has a diagonal entry for {a!r}")
            key = (i, j) if i < j else (j, i)
            if not (0 < p <= 1):
                raise DesignError(f"pair probability for ({a!r}, {b!r}) outside (0, 1]")
            bound = min(obj.pi[i], obj.pi[j])
            if p > bound * (1 + 1e-9):
                raise DesignError(
                    f"pair probability {p} for ({a!r}, {b!r}) exceeds min(pi_i, pi_j) = {bound}")
            table[key] = float(p)
        obj._pair_table = table
        return obj

    @classmethod
    def census(cls, n: int, ids=None) -> "SurveyDesign":
        """Every unit observed with certainty; all joint probabilities 1."""
        return cls.from_pair_table(np.ones(n), {}, ids=ids)

    def _validate_pi(self):
        if np.any((self.pi <= 0) | (self.pi > 1 + 1e-12)):
            bad = int(np.argmax((self.pi <= 0) | (self.pi > 1 + 1e-12)))
            raise DesignError(
                f"inclusion probability for element {self._label(bad)} is {self.pi[bad]}, "
                "outside (0, 1]")
        np.minimum(self.pi, 1.0, out=self.pi)

    def _label(self, i: int):
        return self.ids[i] if self.ids is not None else i

    # -- probabilities ------------------------------------------------------

    def unit_prob(self, i: int) -> float:
        """First-order inclusion probability of element i (by row index)."""
        if not (0 <= i < self.n):
            raise DesignError(f"unknown element index {i}")
        return float(self.pi[i])

    def pair_prob(self, i: int, j: int) -> float:
        """Joint inclusion probability of elements i and j, memoized."""
        if i == j:
            return self.unit_prob(i)
        key = (i, j) if i < j else (j, i)
        with self._memo_lock:
            val = self._memo.get(key)
        if val is None:
            val = float(self.pair_probs(np.array([key[0]]), np.array([key[1]]))[0])
            with self._memo_lock:
                self._memo[key] = val
        return val

    def pair_probs(self, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
        """Vectorized joint inclusion probabilities over index arrays (i != j)."""
        ii = np.asarray(ii, dtype=np.intp)
        jj = np.asarray(jj, dtype=np.intp)
        if np.any(ii == jj):
            raise DesignError("pair_probs requires i != j")
        if self.mode == "multistage":
            return self._pair_probs_paths(ii, jj)
        if self.mode == "pps":
            return self._pair_probs_hajek(ii, jj)
        return self._pair_probs_table(ii, jj)

    def _pair_probs_paths(self, ii, jj):
        same_stratum = self.strata_labels[ii] == self.strata_labels[jj]
        out = self.pi[ii] * self.pi[jj]
        if not np.any(same_stratum):
            return out
        si, sj = ii[same_stratum], jj[same_stratum]
        eq = self._codes[si] == self._codes[sj]
        # Cumulative prefixes guarantee equality is a prefix property and the
        # element stage always differs, so argmax finds the divergence level.
        div = np.argmax(~eq, axis=1)
        kind = self._kind[si, div]
        n_at = self._n_arr[si, div]
        N_at = self._N_arr[si, div]
        joint = np.empty(len(si))
        srs = kind == _KIND_SRS
        if np.any(srs):
            lonely = srs & (n_at < 2)
            if np.any(lonely):
                k = int(np.argmax(lonely))
                raise DesignError(
                    f"elements {self._label(si[k])} and {self._label(sj[k])} diverge at a "
                    f"stage with a single sampled unit; their joint probability is zero. "
                    "Merge strata (merge_strata) or supply pair probabilities.")
            joint[srs] = (n_at[srs] * (n_at[srs] - 1)) / (N_at[srs] * (N_at[srs] - 1))
        indep = ~srs
        if np.any(indep):
            joint[indep] = self._prob[si, div][indep] * self._prob[sj, div][indep]
        shared = self.pi[si] / self._below[si, div]
        below_i = self._below[si, div + 1]
        below_j = self._below[sj, div + 1]
        out[same_stratum] = shared * joint * below_i * below_j
        return out

    def _pair_probs_hajek(self, ii, jj):
        out = self.pi[ii] * self.pi[jj]
        same = self.strata_labels[ii] == self.strata_labels[jj]
        if np.any(same):
            pi_i, pi_j = self.pi[ii[same]], self.pi[jj[same]]
            denoms = np.array([self._hajek_denoms[s] for s in self.strata_labels[ii[same]]])
            prod = pi_i * pi_j
            with np.errstate(divide="ignore", invalid="ignore"):
                val = np.where(denoms > 0,
                               prod * (1.0 - (1.0 - pi_i) * (1.0 - pi_j) / denoms),
                               prod)
            if np.any(denoms == 0):
                warnings.warn("Hajek denominator is zero (census stratum); using pi_i * pi_j")
            upper = np.minimum(pi_i, pi_j)
            oob = (val > upper) | (val <= 0)
            if np.any(oob):
                warnings.warn(
                    f"{int(np.sum(oob))} Hajek joint probabilities outside (0, min(pi_i, pi_j)]; "
                    "clamping")
                val = np.minimum(np.maximum(val, 1e-10 * prod), upper)
            out[same] = val
        return out

    def _pair_probs_table(self, ii, jj):
        out = self.pi[ii] * self.pi[jj]
        if self._pair_table:
            for k, (i, j) in enumerate(zip(ii, jj)):
                key = (i, j) if i < j else (j, i)
                p = self._pair_table.get(key)
                if p is not None:
                    out[k] = p
        return out

    def delta(self, i: int, j: int) -> float:
        """Covariance of the sampling indicators of i and j."""
        if i == j:
            p = self.unit_prob(i)
            return p * (1.0 - p)
        return self.pair_prob(i, j) - self.pi[i] * self.pi[j]

    def delta_array(self, ii, jj) -> np.ndarray:
        return self.pair_probs(ii, jj) - self.pi[ii] * self.pi[jj]

    # -- design-correlated pairs --------------------------------------------

    def design_pairs(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All sampled pairs with nonzero indicator covariance.

        Returns (ii, jj, pi_ij, delta) with ii < jj. Candidates are pairs
        whose joint probability can differ from independence: table entries
        in pair-table mode, same-stratum pairs otherwise.
        """
        if self.mode == "pair-table":
            if not self._pair_table:
                z = np.zeros(0, dtype=np.intp)
                return z, z.copy(), np.zeros(0), np.zeros(0)
            keys = sorted(self._pair_table)
            ii = np.array([k[0] for k in keys], dtype=np.intp)
            jj = np.array([k[1] for k in keys], dtype=np.intp)
            pij = np.array([self._pair_table[k] for k in keys])
        else:
            blocks_i, blocks_j = [], []
            for s in np.unique(self.strata_labels):
                idx = np.flatnonzero(self.strata_labels == s)
                if len(idx) < 2:
                    continue
                a, b = np.triu_indices(len(idx), k=1)
                blocks_i.append(idx[a])
                blocks_j.append(idx[b])
            if not blocks_i:
                z = np.zeros(0, dtype=np.intp)
                return z, z.copy(), np.zeros(0), np.zeros(0)
            ii = np.concatenate(blocks_i)
            jj = np.concatenate(blocks_j)
            pij = self.pair_probs(ii, jj)
        delta = pij - self.pi[ii] * self.pi[jj]
        keep = delta != 0.0
        return ii[keep], jj[keep], pij[keep], delta[keep]

    # -- jackknife ------------------------------------------------------------

    def _jk_groups(self):
        psu = self.psu_labels
        if psu is None:
            psu = np.arange(self.n, dtype=object)
        strata = np.array(
            [self._jk_stratum_override.get(s, s) for s in self.strata_labels],
            dtype=object)
        return strata, psu

    def merge_strata(self, a: Hashable, b: Hashable) -> None:
        """Pool stratum a into stratum b for jackknife grouping.

        Inclusion probabilities are left untouched; merging is a variance-
        estimation device for strata with a single sampled PSU.
        """
        labels = set(self.strata_labels.tolist())
        for s in (a, b):
            if s not in labels:
                raise DesignError(f"cannot merge: stratum {s!r} not present")
        self._jk_stratum_override[a] = b

    def jackknife_replicates(self) -> Tuple[List[JackknifeReplicate], Dict[Hashable, float]]:
        """Delete-one-PSU replicate weight multipliers and per-stratum scales.

        One replicate per sampled PSU: its elements get multiplier 0, other
        PSUs in the stratum get n_k / (n_k - 1), all other strata 1. The
        returned scales (n_k - 1) / n_k weight the squared deviations in
        the variance combination.
        """
        strata, psu = self._jk_groups()
        reps: List[JackknifeReplicate] = []
        factors: Dict[Hashable, float] = {}
        for s in sorted(set(strata.tolist()), key=repr):
            in_stratum = strata == s
            psus = sorted(set(psu[in_stratum].tolist()), key=repr)
            n_k = len(psus)
            if n_k < 2:
                raise DesignError(
                    f"stratum {s!r} has a single sampled PSU; jackknife needs at least 2. "
                    "Merge it into a similar stratum (merge_strata or --merge-strata).")
            factors[s] = (n_k - 1) / n_k
            for p in psus:
                mult = np.ones(self.n)
                mult[in_stratum] = n_k / (n_k - 1)
                mult[in_stratum & (psu == p)] = 0.0
                reps.append(JackknifeReplicate(stratum=s, psu=p, multipliers=mult))
        return reps, factors


def _as_ids(ids, n: int):
    if ids is None:
        return np.arange(n, dtype=object)
    arr = np.asarray(ids, dtype=object)
    if len(arr) != n:
        raise DesignError("ids length does not match the number of elements")
    if len(set(arr.tolist())) != n:
        raise DesignError("element ids must be unique")
    return arr


def _as_strata(strata, n: int):
    if strata is None:
        return np.zeros(n, dtype=object)
    arr = np.asarray(strata, dtype=object)
    if len(arr) != n:
        raise DesignError("strata length does not match the number of elements")
    return arr
