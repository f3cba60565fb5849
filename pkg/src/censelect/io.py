"""CSV storage for datasets: header ``time,status,treatment,<covariates...>``."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import DataError
from .survival import Dataset

FIXED_COLUMNS = ("time", "status", "treatment")


def write_dataset(data: Dataset, path) -> None:
    """Write ``data`` losslessly (floats use their shortest round-trip repr)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIXED_COLUMNS + data.covariate_names)
        for t, d, a, x in zip(data.time, data.status, data.treatment, data.covariates):
            writer.writerow([repr(float(t)), int(d), int(a), *(repr(float(v)) for v in x)])


def _number(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: {column} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: {column} must be finite, got {text!r}")
    return value


def _binary(text: str, column: str, line: int) -> int:
    value = _number(text, column, line)
    if value not in (0.0, 1.0):
        raise DataError(f"line {line}: {column} must be 0 or 1, got {text!r}")
    return int(value)


def read_dataset(path) -> Dataset:
    """Parse a dataset CSV, reporting schema violations with their line number."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        if tuple(header[:3]) != FIXED_COLUMNS:
            raise DataError(f"line 1: header must start with {','.join(FIXED_COLUMNS)}, "
                            f"got {','.join(header[:3])}")
        names = tuple(header[3:])
        if any(not name for name in names):
            raise DataError("line 1: empty covariate name")
        times, status, treatment, covariates = [], [], [], []
        for record in reader:
            line = reader.line_num
            if not record or all(not field.strip() for field in record):
                continue
            if len(record) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(record)}")
            t = _number(record[0], "time", line)
            if t <= 0:
                raise DataError(f"line {line}: time must be positive, got {record[0]!r}")
            times.append(t)
            status.append(_binary(record[1], "status", line))
            treatment.append(_binary(record[2], "treatment", line))
            covariates.append([_number(v, names[j], line) for j, v in enumerate(record[3:])])
    if not times:
        raise DataError(f"{path} has no data rows")
    return Dataset(np.array(times), np.array(status), np.array(treatment),
                   np.array(covariates, dtype=np.float64).reshape(len(times), len(names)),
                   names)
