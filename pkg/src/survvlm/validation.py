"""Input checks shared by the estimator and the pipeline helpers.

Each helper either returns a normalised copy of its input or raises
``DataError`` with a message naming the offending item.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .dataprep import DataError, ReportRecord
from .survstats import SurvivalRecord


def check_reports(reports, require_survival: bool = False) -> list[ReportRecord]:
    """Nonempty list of ``ReportRecord`` with unique scan ids."""
    if isinstance(reports, (str, bytes)) or not isinstance(reports, Sequence):
        raise DataError(f"reports must be a sequence of ReportRecord, got {type(reports).__name__}")
    reports = list(reports)
    if not reports:
        raise DataError("no reports")
    seen = set()
    for r in reports:
        if not isinstance(r, ReportRecord):
            raise DataError(f"expected ReportRecord, got {type(r).__name__}")
        if r.scan_id in seen:
            raise DataError(f"duplicate scan_id {r.scan_id!r}")
        seen.add(r.scan_id)
        if require_survival:
            if r.survival is None:
                raise DataError(f"{r.scan_id}: no survival outcome")
            time, _ = r.survival
            if not (time >= 0) or math.isinf(time):
                raise DataError(f"{r.scan_id}: survival time must be finite and >= 0, got {time!r}")
    return reports


def check_volume(volume, shape: Sequence[int], name: str = "volume") -> np.ndarray:
    """Finite float64 array of exactly ``shape``."""
    try:
        arr = np.asarray(volume, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{name}: not numeric ({exc})") from exc
    if arr.shape != tuple(shape):
        raise DataError(f"{name}: shape {arr.shape} != expected {tuple(shape)}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name}: contains NaN or inf")
    return arr


def check_volumes(volumes, scan_ids: Sequence[str], shape: Sequence[int]) -> dict[str, np.ndarray]:
    """One checked volume per scan id; extra keys are ignored."""
    if not isinstance(volumes, Mapping):
        raise DataError(f"volumes must map scan_id to array, got {type(volumes).__name__}")
    if missing := [s for s in scan_ids if s not in volumes]:
        raise DataError(f"no volume for scans {missing[:3]}")
    return {s: check_volume(volumes[s], shape, s) for s in scan_ids}


def check_risks(risks, n: int) -> np.ndarray:
    """1-d finite float64 vector of length ``n``."""
    arr = np.asarray(risks, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise DataError(f"expected {n} risk scores, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("risk scores contain NaN or inf")
    return arr


def survival_records(reports: Sequence[ReportRecord]) -> list[SurvivalRecord]:
    return [SurvivalRecord(r.scan_id, float(r.survival[0]), bool(r.survival[1])) for r in reports]
