"""Model mini-language: response, fixed effects, and random terms.

    y ~ x1 + x2 + (1 | group)          shared intercept within group
    y ~ x + (1 + z | group)            correlated intercept and slope
    y ~ x + (1 | kin:phi.csv)          explicit relatedness weights

Nonlinear correlation families (autoregressive, spatial) are rejected at
parse time: the covariance must stay a linear combination of basis terms.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .structure import RandomStructure, VarianceTerm, grouping_term, relatedness_term

__all__ = ["FormulaError", "RandomTermSpec", "ParsedFormula", "ModelData",
           "parse_formula", "build_model_data"]

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")
_NONLINEAR_HINTS = ("ar1", "ar", "ou", "spatial", "matern", "exp", "gau")


class FormulaError(ValueError):
    """Malformed model formula."""


@dataclass(frozen=True)
class RandomTermSpec:
    z_columns: Tuple[str, ...]  # "1" marks the intercept
    factor: Optional[str] = None
    kinship_path: Optional[str] = None

    @property
    def label(self) -> str:
        if self.kinship_path is not None:
            return f"kin:{os.path.basename(self.kinship_path)}"
        return self.factor


@dataclass(frozen=True)
class ParsedFormula:
    response: str
    fixed: Tuple[str, ...]
    intercept: bool
    random: Tuple[RandomTermSpec, ...]


def _split_top_level(text: str, sep: str) -> List[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise FormulaError("unbalanced parentheses")
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise FormulaError("unbalanced parentheses")
    parts.append("".join(cur))
    return parts


def _check_name(tok: str, where: str) -> str:
    if not _NAME_RE.match(tok):
        if "(" in tok or ")" in tok:
            base = tok.split("(", 1)[0].strip().lower()
            if base in _NONLINEAR_HINTS:
                raise FormulaError(
                    f"nonlinear correlation structures such as '{tok}' are not "
                    "supported; the covariance must be a linear combination of "
                    "grouping and relatedness terms")
        raise FormulaError(f"unknown token {tok!r} in {where}")
    return tok


def parse_formula(text: str) -> ParsedFormula:
    """Parse the model mini-language into response, fixed, and random parts."""
    if not text or not text.strip():
        raise FormulaError("empty formula")
    sides = text.split("~")
    if len(sides) == 1:
        raise FormulaError("formula needs a response: use 'y ~ ...'")
    if len(sides) > 2:
        raise FormulaError("duplicate response: more than one '~'")
    response = sides[0].strip()
    _check_name(response, "response")
    fixed: List[str] = []
    random: List[RandomTermSpec] = []
    intercept = True
    for raw in _split_top_level(sides[1], "+"):
        term = raw.strip()
        if not term:
            raise FormulaError("empty term (stray '+')")
        if term.startswith("(") and term.endswith(")"):
            random.append(_parse_random(term[1:-1]))
            continue
        if term in ("0", "-1"):
            intercept = False
            continue
        if term == "1":
            intercept = True
            continue
        fixed.append(_check_name(term, "fixed effects"))
    if response in fixed:
        raise FormulaError(f"response {response!r} also appears as a predictor")
    return ParsedFormula(response=response, fixed=tuple(fixed), intercept=intercept,
                         random=tuple(random))


def _parse_random(body: str) -> RandomTermSpec:
    pieces = _split_top_level(body, "|")
    if len(pieces) != 2:
        raise FormulaError(
            f"random term '({body})' must look like '(expr | factor)'")
    lhs, rhs = pieces[0].strip(), pieces[1].strip()
    slope_cols: List[str] = []
    has_intercept = True  # implicit, dropped only by an explicit 0
    for tok in (t.strip() for t in _split_top_level(lhs, "+")):
        if not tok:
            raise FormulaError(f"empty entry in random term '({body})'")
        if tok == "1":
            has_intercept = True
        elif tok == "0":
            has_intercept = False
        else:
            slope_cols.append(_check_name(tok, f"random term '({body})'"))
    z_cols = (["1"] if has_intercept else []) + slope_cols
    if not z_cols:
        raise FormulaError(f"random term '({body})' selects no effect columns")
    if rhs.startswith("kin:"):
        path = rhs[4:].strip()
        if not path:
            raise FormulaError("kin: term needs a file path")
        return RandomTermSpec(z_columns=tuple(z_cols), kinship_path=path)
    _check_name(rhs, f"grouping factor of '({body})'")
    return RandomTermSpec(z_columns=tuple(z_cols), factor=rhs)


@dataclass
class ModelData:
    y: np.ndarray
    X: np.ndarray
    column_names: List[str]
    structure: RandomStructure
    kept_index: np.ndarray
    n_dropped: int
    ids: np.ndarray


def build_model_data(parsed: ParsedFormula, df: pd.DataFrame,
                     base_dir: Optional[str] = None) -> ModelData:
    """Assemble y, X, and the random structure from a data frame.

    Rows with missing values in any referenced column are dropped and
    counted; they are never silently imputed. Kinship files are coordinate
    triplets (id1, id2, weight) whose ids match the data's `id` column when
    present, else 0-based row positions; diagonal entries override the
    implicit unit diagonal.
    """
    needed = [parsed.response] + list(parsed.fixed)
    for spec in parsed.random:
        needed += [c for c in spec.z_columns if c != "1"]
        if spec.factor is not None:
            needed.append(spec.factor)
    missing_cols = [c for c in dict.fromkeys(needed) if c not in df.columns]
    if missing_cols:
        raise FormulaError(f"columns not in the data: {', '.join(missing_cols)}")

    mask = np.ones(len(df), dtype=bool)
    for c in dict.fromkeys(needed):
        mask &= ~pd.isna(df[c]).to_numpy()
    kept = df.loc[mask]
    n_dropped = int(len(df) - len(kept))
    kept_index = np.flatnonzero(mask)
    if len(kept) == 0:
        raise FormulaError("no rows left after dropping missing values")

    def numeric(col: str) -> np.ndarray:
        vals = pd.to_numeric(kept[col], errors="coerce").to_numpy(dtype=float)
        if np.any(np.isnan(vals)):
            raise FormulaError(f"column {col!r} has non-numeric entries")
        return vals

    y = numeric(parsed.response)
    cols = []
    names = []
    if parsed.intercept:
        cols.append(np.ones(len(kept)))
        names.append("(Intercept)")
    for c in parsed.fixed:
        cols.append(numeric(c))
        names.append(c)
    if not cols:
        raise FormulaError("model has no fixed-effect columns (not even an intercept)")
    X = np.column_stack(cols)

    if "id" in kept.columns:
        ids = kept["id"].to_numpy()
    else:
        ids = kept_index.copy()
    id_to_pos = {v: k for k, v in enumerate(ids)}
    if len(id_to_pos) != len(ids):
        raise FormulaError("the id column has duplicate values")

    terms: List[VarianceTerm] = []
    for spec in parsed.random:
        if spec.z_columns == ("1",):
            z = None
            z_names: Tuple[str, ...] = ("(Intercept)",)
        else:
            zcols = []
            z_names = tuple("(Intercept)" if c == "1" else c for c in spec.z_columns)
            for c in spec.z_columns:
                zcols.append(np.ones(len(kept)) if c == "1" else numeric(c))
            z = np.column_stack(zcols)
        if spec.factor is not None:
            terms.append(grouping_term(kept[spec.factor].to_numpy(), z=z,
                                       name=spec.factor, z_names=z_names))
        else:
            path = spec.kinship_path
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            entries, diag = _read_kinship(path, id_to_pos, len(kept))
            terms.append(relatedness_term(entries, n=len(kept), diag=diag, z=z,
                                          name=spec.label, z_names=z_names))
    return ModelData(y=y, X=X, column_names=names,
                     structure=RandomStructure(terms, n=len(kept)),
                     kept_index=kept_index, n_dropped=n_dropped, ids=ids)


def _read_kinship(path: str, id_to_pos: Dict, n: int):
    try:
        tbl = pd.read_csv(path)
    except OSError as exc:
        raise FormulaError(f"cannot read kinship file {path!r}: {exc}") from None
    if tbl.shape[1] < 3:
        raise FormulaError(
            f"kinship file {path!r} needs three columns (id1, id2, weight)")
    diag = np.ones(n)
    entries: Dict[Tuple[int, int], float] = {}
    c0, c1, c2 = tbl.columns[:3]
    for row in tbl.itertuples(index=False):
        a, b, w = getattr(row, c0), getattr(row, c1), float(getattr(row, c2))
        pa, pb = id_to_pos.get(a), id_to_pos.get(b)
        if pa is None or pb is None:
            continue  # entry for units outside the (kept) sample
        if pa == pb:
            if w <= 0:
                raise FormulaError(
                    f"kinship diagonal for id {a!r} must be positive, got {w}")
            diag[pa] = w
        elif w != 0.0:
            key = (pa, pb) if pa < pb else (pb, pa)
            entries[key] = w
    return entries, diag
