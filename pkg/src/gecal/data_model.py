"""Observed data container, basis-function expansion, and q-weight families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

__all__ = ["ObservedData", "BasisSpec", "QWeights", "build_basis", "load_csv", "write_csv"]


@dataclass(frozen=True)
class ObservedData:
    """Covariates with a partially observed outcome.

    ``responded`` is authoritative: outcome entries of non-responded units are
    overwritten with NaN at construction so that accidental use of placeholder
    values poisons any downstream number instead of silently entering it.
    """

    covariates: np.ndarray    # (N, p0) dense float
    outcome: np.ndarray       # (N,) float, NaN where responded is False
    responded: np.ndarray     # (N,) bool

    def __post_init__(self):
        x = np.atleast_2d(np.array(self.covariates, dtype=float))
        y = np.array(self.outcome, dtype=float)
        d = np.array(self.responded, dtype=bool)
        if x.shape[0] != y.shape[0] or y.shape[0] != d.shape[0]:
            raise ValueError(
                f"shape mismatch: covariates {x.shape}, outcome {y.shape}, responded {d.shape}"
            )
        if np.any(~np.isfinite(y[d])):
            raise ValueError("responded units must carry a finite outcome")
        y[~d] = np.nan
        for name, val in (("covariates", x), ("outcome", y), ("responded", d)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_units(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_responded(self) -> int:
        return int(self.responded.sum())

    @property
    def observed_outcome(self) -> np.ndarray:
        """Outcome restricted to responded units (always finite)."""
        return self.outcome[self.responded]


# Basis terms are tuples: ("intercept",), ("raw", j), ("interaction", j, k),
# ("square_centered", j) meaning x_j**2 - 1.  Column indices are 0-based.
Term = tuple


@dataclass(frozen=True)
class BasisSpec:
    """Ordered list of basis descriptors; the first term must be the intercept."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        terms = tuple(tuple(t) for t in self.terms)
        if not terms or terms[0] != ("intercept",):
            raise ValueError("first basis term must be ('intercept',)")
        for t in terms:
            if t[0] not in ("intercept", "raw", "interaction", "square_centered"):
                raise ValueError(f"unknown basis term {t!r}")
        object.__setattr__(self, "terms", terms)

    @property
    def p(self) -> int:
        return len(self.terms)

    @classmethod
    def intercept_only(cls) -> "BasisSpec":
        return cls((("intercept",),))

    @classmethod
    def with_raw_columns(cls, columns) -> "BasisSpec":
        """Intercept plus the given 0-based raw covariate columns."""
        return cls((("intercept",),) + tuple(("raw", int(j)) for j in columns))


def build_basis(data: ObservedData, spec: BasisSpec) -> np.ndarray:
    """Expand the covariates into the (N, p) basis matrix, column 1 all ones.

    Column order follows ``spec.terms`` exactly; this ordering is what makes
    fitted coefficients interpretable downstream.
    """
    x = data.covariates
    n, p0 = x.shape
    cols = []
    for t in spec.terms:
        if t[0] == "intercept":
            cols.append(np.ones(n))
        elif t[0] == "raw":
            j = t[1]
            if not 0 <= j < p0:
                raise IndexError(f"basis term {t!r}: column {j} out of range for p0={p0}")
            cols.append(x[:, j])
        elif t[0] == "interaction":
            j, k = t[1], t[2]
            if not (0 <= j < p0 and 0 <= k < p0):
                raise IndexError(f"basis term {t!r}: column out of range for p0={p0}")
            cols.append(x[:, j] * x[:, k])
        else:  # square_centered
            j = t[1]
            if not 0 <= j < p0:
                raise IndexError(f"basis term {t!r}: column {j} out of range for p0={p0}")
            cols.append(x[:, j] ** 2 - 1.0)
    return np.column_stack(cols)


@dataclass(frozen=True)
class QWeights:
    """Per-unit weights q_i entering the entropy objective as q_i^{-1}."""

    family: str               # "unit" or "power"
    values: np.ndarray        # (N,) strictly positive
    kappa: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.family not in ("unit", "power"):
            raise ValueError(f"unknown q-weight family {self.family!r}")
        if np.any(~np.isfinite(v) | (v <= 0.0)):
            raise ValueError("all q weights must be positive and finite")
        if self.family == "unit" and not np.all(v == 1.0):
            raise ValueError("unit family requires q identically one")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def unit(cls, n: int) -> "QWeights":
        return cls("unit", np.ones(n))

    @classmethod
    def propensity_power(cls, pi_hat: np.ndarray, kappa: float) -> "QWeights":
        """q_i = pi_hat_i^(kappa - 1); kappa == 1 gives unit weights."""
        pi_hat = np.asarray(pi_hat, dtype=float)
        if kappa == 1.0:
            return cls("unit", np.ones(pi_hat.shape[0]), kappa=1.0)
        return cls("power", pi_hat ** (kappa - 1.0), kappa=float(kappa))


def load_csv(path, outcome_col: str, indicator_col: str | None = None) -> ObservedData:
    """Read a rectangular numeric CSV with a header row into ObservedData.

    Missing outcomes are marked either by blank cells in ``outcome_col`` or,
    when ``indicator_col`` is given, by that 0/1 column (1 = responded); the
    indicator column is consumed and not kept as a covariate.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    if outcome_col not in df.columns:
        raise ValueError(f"outcome column {outcome_col!r} not found in {path}")
    y = pd.to_numeric(df[outcome_col], errors="coerce").to_numpy(dtype=float)
    if indicator_col is not None:
        if indicator_col not in df.columns:
            raise ValueError(f"indicator column {indicator_col!r} not found in {path}")
        responded = df[indicator_col].to_numpy(dtype=float) != 0.0
        covariate_cols = [c for c in df.columns if c not in (outcome_col, indicator_col)]
    else:
        responded = np.isfinite(y)
        covariate_cols = [c for c in df.columns if c != outcome_col]
    if not covariate_cols:
        raise ValueError("no covariate columns found")
    try:
        x = df[covariate_cols].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"non-numeric covariate values in {path}: {exc}") from None
    if np.any(~np.isfinite(x)):
        raise ValueError("covariates must be fully observed and finite")
    if not responded.any():
        raise ValueError("all outcomes are missing; nothing to estimate from")
    if np.any(responded & ~np.isfinite(y)):
        raise ValueError("responded units must carry a numeric outcome")
    return ObservedData(covariates=x, outcome=y, responded=responded)


def write_csv(data: ObservedData, path, outcome_col: str = "y") -> None:
    """Write ObservedData back to CSV using the blank-cell missing convention."""
    n, p0 = data.covariates.shape
    frame = pd.DataFrame(
        {f"x{j + 1}": data.covariates[:, j] for j in range(p0)}
    )
    frame[outcome_col] = data.outcome
    frame.to_csv(path, index=False)
