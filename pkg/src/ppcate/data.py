"""Core data containers, validation and the overlap diagnostic."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

# Propensity clamp: keeps scores strictly inside (0, 1).
PROPENSITY_CLAMP = 1e-6


class SchemaError(ValueError):
    """Raised when an input table does not match the expected column layout."""


class ValidationError(ValueError):
    """Raised when a dataset violates its invariants."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (n x d), treatment ``Z`` (0/1), outcome ``Y``.

    ``tau_true`` is only available for simulated data. Arrays are stored
    read-only; results produced downstream refer to units by row index.
    """

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    tau_true: Optional[np.ndarray] = None
    columns: tuple = field(default=())

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "Z", _frozen(np.array(self.Z, dtype=float).ravel()))
        object.__setattr__(self, "Y", _frozen(np.array(self.Y, dtype=float).ravel()))
        if self.tau_true is not None:
            tau = np.array(self.tau_true, dtype=float).ravel()
            object.__setattr__(self, "tau_true", _frozen(tau))
        if not self.columns:
            object.__setattr__(
                self, "columns", tuple(f"x{j + 1}" for j in range(X.shape[1]))
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return self.Z == 1

    @property
    def n_control(self) -> int:
        return int(np.sum(self.Z == 0))

    def subset(self, idx: np.ndarray) -> "Dataset":
        """Rows ``idx`` (may repeat, as in a bootstrap resample)."""
        tau = None if self.tau_true is None else self.tau_true[idx]
        return Dataset(self.X[idx], self.Z[idx], self.Y[idx], tau, self.columns)

    def with_columns(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return Dataset(
            self.X[:, cols], self.Z, self.Y, self.tau_true,
            tuple(self.columns[j] for j in cols),
        )


@dataclass(frozen=True)
class ScoredSample:
    """Estimated propensity ``e_hat`` and prognostic ``p_hat`` per unit."""

    e_hat: np.ndarray
    p_hat: np.ndarray

    def __post_init__(self):
        e = np.array(self.e_hat, dtype=float).ravel()
        p = np.array(self.p_hat, dtype=float).ravel()
        if e.shape != p.shape:
            raise ValueError("e_hat and p_hat must have equal length")
        object.__setattr__(self, "e_hat", _frozen(e))
        object.__setattr__(self, "p_hat", _frozen(p))

    def __len__(self) -> int:
        return self.e_hat.shape[0]

    def as_matrix(self) -> np.ndarray:
        """(n, 2) array with columns (propensity, prognostic)."""
        return np.column_stack([self.e_hat, self.p_hat])


@dataclass(frozen=True)
class ValidationReport:
    problems: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return bool(self.problems)

    def __contains__(self, text: str) -> bool:
        return any(text in p for p in self.problems)

    def __iter__(self):
        return iter(self.problems)

    def __len__(self) -> int:
        return len(self.problems)


def validate(ds: Dataset) -> ValidationReport:
    """List every violated dataset invariant. An empty report means valid."""
    problems = []
    X, Z, Y = ds.X, ds.Z, ds.Y
    n = X.shape[0]
    if n < 2:
        problems.append(f"need at least 2 units, got {n}")
    if X.shape[1] < 1:
        problems.append("need at least one covariate column")
    if Z.shape[0] != n or Y.shape[0] != n:
        problems.append(
            f"length mismatch: X has {n} rows, Z has {Z.shape[0]}, Y has {Y.shape[0]}"
        )
    if ds.tau_true is not None and ds.tau_true.shape[0] != n:
        problems.append("tau_true length does not match X")
    bad_z = ~np.isin(Z, (0.0, 1.0))
    if bad_z.any():
        rows = np.flatnonzero(bad_z)[:5].tolist()
        problems.append(f"treatment not binary at rows {rows}")
    else:
        if not np.any(Z == 1):
            problems.append("treated arm empty")
        if not np.any(Z == 0):
            problems.append("control arm empty")
    if not np.all(np.isfinite(X)):
        rows = np.flatnonzero(~np.isfinite(X).all(axis=1))[:5].tolist()
        problems.append(f"non-finite covariate at rows {rows}")
    if not np.all(np.isfinite(Y)):
        rows = np.flatnonzero(~np.isfinite(Y))[:5].tolist()
        problems.append(f"non-finite outcome at rows {rows}")
    return ValidationReport(tuple(problems))


def require_valid(ds: Dataset) -> Dataset:
    report = validate(ds)
    if report:
        raise ValidationError(report.problems)
    return ds


@dataclass(frozen=True)
class OverlapReport:
    eps: float
    indices: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @property
    def violated(self) -> bool:
        return self.count > 0


def check_overlap(scores: ScoredSample, eps: float = 0.05) -> OverlapReport:
    """Units whose propensity falls outside ``[eps, 1 - eps]``."""
    if not (0.0 < eps < 0.5):
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    e = scores.e_hat
    idx = np.flatnonzero((e < eps) | (e > 1.0 - eps))
    return OverlapReport(eps=eps, indices=idx)


def clamp_propensity(e: np.ndarray) -> np.ndarray:
    return np.clip(e, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)


# ---------------------------------------------------------------- CSV I/O


def read_csv(
    path,
    y_col: str = "y",
    z_col: str = "z",
    x_cols: Optional[Sequence[str]] = None,
    tau_col: str = "tau_true",
) -> Dataset:
    """Load a dataset from CSV.

    Covariates default to every column named ``x1``, ``x2``, ... in numeric
    order. Rows with missing values are rejected, not imputed.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    return from_frame(df, y_col=y_col, z_col=z_col, x_cols=x_cols, tau_col=tau_col)


def covariate_columns(df: pd.DataFrame) -> list:
    xs = [c for c in df.columns if isinstance(c, str) and c[:1] == "x" and c[1:].isdigit()]
    return sorted(xs, key=lambda c: int(c[1:]))


def from_frame(df, y_col="y", z_col="z", x_cols=None, tau_col="tau_true") -> Dataset:
    for col in (y_col, z_col):
        if col not in df.columns:
            raise SchemaError(f"missing required column '{col}'")
    if x_cols is None:
        x_cols = covariate_columns(df)
    else:
        missing = [c for c in x_cols if c not in df.columns]
        if missing:
            raise SchemaError(f"missing covariate columns {missing}")
    if not x_cols:
        raise SchemaError("no covariate columns (expected x1..xd)")
    used = list(x_cols) + [y_col, z_col]
    has_tau = tau_col in df.columns
    if has_tau:
        used.append(tau_col)
    na_rows = np.flatnonzero(df[used].isna().any(axis=1).to_numpy())
    if na_rows.size:
        raise ValidationError(
            [f"missing values at rows {na_rows[:10].tolist()} (header excluded, 0-based)"]
        )
    try:
        X = df[list(x_cols)].to_numpy(dtype=float)
        Z = df[z_col].to_numpy(dtype=float)
        Y = df[y_col].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError([f"non-numeric data: {exc}"]) from exc
    tau = df[tau_col].to_numpy(dtype=float) if has_tau else None
    return require_valid(Dataset(X, Z, Y, tau, tuple(x_cols)))


def write_csv(ds: Dataset, path) -> None:
    cols = {name: ds.X[:, j] for j, name in enumerate(ds.columns)}
    cols["z"] = ds.Z.astype(int)
    cols["y"] = ds.Y
    if ds.tau_true is not None:
        cols["tau_true"] = ds.tau_true
    pd.DataFrame(cols).to_csv(Path(path), index=False, float_format="%.17g")
