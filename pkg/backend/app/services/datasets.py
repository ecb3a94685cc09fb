"""
Design-matrix ingestion from CSV.

Contract: a header row, numeric feature columns, and the binary response in
the last column.  An optional subject column (by name) is pulled out as the
group index for the mixed model.
"""

import csv
import logging
from pathlib import Path

import numpy as np

from app.services.errors import DatasetError
from app.services.targets import DesignMatrix

logger = logging.getLogger(__name__)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"row {row}, column '{col}': non-numeric value '{cell}'") from None
    if not np.isfinite(value):
        raise DatasetError(f"row {row}, column '{col}': non-finite value '{cell}'")
    return value


def standardize_columns(X: np.ndarray, names: list[str]) -> tuple[np.ndarray, dict]:
    """Per-column z-score; constant columns (the intercept) are left alone."""
    X = X.copy()
    record = {}
    for j, name in enumerate(names):
        sd = float(X[:, j].std())
        if sd == 0.0:
            continue
        mean = float(X[:, j].mean())
        X[:, j] = (X[:, j] - mean) / sd
        record[name] = {"mean": mean, "sd": sd}
    return X, record


def load_dataset(
    path: str | Path,
    add_intercept: bool = False,
    standardize: bool = False,
    subject_column: str | None = None,
) -> DesignMatrix:
    """Read and validate a design-matrix CSV."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path} is empty") from None
        if len(header) < 2:
            raise DatasetError("need at least one feature column and a response column")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"row {lineno} has {len(row)} cells, header has {len(header)}"
                )
            rows.append([_parse_float(c.strip(), lineno, header[j]) for j, c in enumerate(row)])

    if not rows:
        raise DatasetError(f"{path} has no data rows")
    table = np.array(rows)
    response = header[-1]
    y = table[:, -1]
    bad = ~((y == 0.0) | (y == 1.0))
    if bad.any():
        first = int(np.argmax(bad))
        raise DatasetError(f"response '{response}' must be 0/1, found {y[first]} on row {first + 2}")

    features = header[:-1]
    X = table[:, :-1]
    groups = None
    if subject_column is not None:
        if subject_column not in features:
            raise DatasetError(f"subject column '{subject_column}' not in header")
        j = features.index(subject_column)
        raw = X[:, j]
        if np.any(raw != np.round(raw)):
            raise DatasetError("subject column must hold integer indices")
        _, groups = np.unique(raw.astype(int), return_inverse=True)
        X = np.delete(X, j, axis=1)
        features = features[:j] + features[j + 1:]

    record = {}
    if standardize:
        X, record = standardize_columns(X, features)
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
        features = ["intercept"] + features

    logger.info(f"Loaded {path.name}: n={X.shape[0]}, p={X.shape[1]}")
    return DesignMatrix(X, y, features, groups=groups, standardization=record)
