"""Local mortality lookup by age band and sex."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .expr import Call, EvalContext, EvalError, eval_expression

SEX_CODES = {"BTSX": 0, "MLE": 1, "FMLE": 2}
SEX_NAMES = {v: k for k, v in SEX_CODES.items()}


class LifeTableError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LifeTable:
    # per sex code: sorted band lower bounds, upper bounds (inf when open), probs
    bands: dict

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "LifeTable":
        cols = ["age_lo", "age_hi", "sex", "prob"]
        if list(df.columns[:4]) != cols:
            raise LifeTableError(f"life table columns must be {cols}, got {list(df.columns)}")
        bands = {}
        for sex, g in df.groupby("sex", sort=False):
            if sex not in SEX_CODES:
                raise LifeTableError(f"unknown sex code {sex!r}; use one of {sorted(SEX_CODES)}")
            g = g.sort_values("age_lo")
            lo = g["age_lo"].to_numpy(float)
            hi = pd.to_numeric(g["age_hi"], errors="coerce").to_numpy(float)
            if np.isnan(hi[:-1]).any():
                raise LifeTableError(f"{sex}: only the last band may be open-ended")
            hi = np.where(np.isnan(hi), np.inf, hi)
            p = g["prob"].to_numpy(float)
            if lo[0] != 0:
                raise LifeTableError(f"{sex}: bands must start at age 0")
            if np.any(hi <= lo) or np.any(lo[1:] != hi[:-1]):
                raise LifeTableError(f"{sex}: bands must be contiguous and non-overlapping")
            if np.any((p < 0) | (p > 1)):
                raise LifeTableError(f"{sex}: probabilities must lie in [0, 1]")
            bands[SEX_CODES[sex]] = (lo, hi, p)
        return cls(bands)

    @classmethod
    def read_csv(cls, path) -> "LifeTable":
        return cls.from_frame(pd.read_csv(path, dtype={"sex": str}, keep_default_na=False, na_values=[""]))


def _code(sex) -> int:
    if isinstance(sex, str):
        if sex not in SEX_CODES:
            raise LifeTableError(f"unknown sex code {sex!r}")
        return SEX_CODES[sex]
    return int(sex)


def mortality_prob(table: LifeTable, age, sex) -> np.ndarray:
    """Annual death probability for each age; bands are ``[lo, hi)``."""
    age = np.atleast_1d(np.asarray(age, dtype=float))
    sexes = np.broadcast_to(np.atleast_1d(np.asarray(sex, dtype=object)), age.shape)
    codes = np.array([_code(s) for s in sexes.ravel()]).reshape(age.shape)
    out = np.empty_like(age)
    for code in np.unique(codes):
        if code not in table.bands:
            raise LifeTableError(f"sex {SEX_NAMES.get(code, code)!r} is not in the life table")
        mask = codes == code
        lo, hi, p = table.bands[code]
        a = age[mask]
        if np.any(a < 0) or np.any(a >= hi[-1]):
            raise LifeTableError(f"age outside life table coverage [0, {hi[-1]}): {a.tolist()}")
        out[mask] = p[np.searchsorted(lo, a, side="right") - 1]
    return out


def mortality_extension(table: LifeTable):
    """``mortality_prob(age, sex)`` for model expressions; sex is 0/1/2
    for BTSX/MLE/FMLE."""

    def ext(call: Call, ctx: EvalContext) -> np.ndarray:
        args = list(call.args) + [v for _, v in call.kwargs]
        if len(args) != 2:
            raise EvalError("mortality_prob() takes (age, sex)")
        age = eval_expression(args[0], ctx)
        sex = eval_expression(args[1], ctx)
        if np.any(sex != np.round(sex)):
            raise EvalError("mortality_prob(): sex must be a code 0 (BTSX), 1 (MLE) or 2 (FMLE)")
        try:
            return mortality_prob(table, age, sex.astype(int))
        except LifeTableError as err:
            raise EvalError(f"mortality_prob(): {err}") from err

    return ext
