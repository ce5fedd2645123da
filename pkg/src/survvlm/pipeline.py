"""Glue between files on disk, training and evaluation.

A cohort directory holds ``reports.jsonl`` (one report per scan with
clinical covariates and optional ``time``/``event``), ``volumes/<scan_id>``
(sidecar JSON + raw float32), and optionally ``qa.jsonl`` and ``split.json``
(``{"train": [...], "test": [...]}``).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataprep import (
    DataError,
    HU_MAX,
    HU_MIN,
    QAPair,
    QAPairExtractor,
    ReportRecord,
    clinical_to_sentence,
    preprocess_volume,
    read_qa,
    read_reports,
    read_volume,
)
from .model import ModelParams, PatientInputs, encode_all, ensemble_predict, generate
from .survstats import (
    RiskGroup,
    StepFunction,
    SurvivalRecord,
    concordance_index,
    km_estimate,
    log_rank_test,
    stratify_median,
    token_f1,
)
from .text import Tokenizer

TARGET_SPACING = (1.5, 1.5, 3.0)
METRIC_KEYS = ("c_index", "token_f1_mean", "log_rank_p", "log_rank_degenerate", "n", "n_censored")


@dataclass
class CohortData:
    reports: list[ReportRecord]
    volumes: dict[str, np.ndarray]
    qa: list[QAPair]
    split: dict[str, list[str]] | None

    def records(self, ids: Sequence[str] | None = None) -> list[SurvivalRecord]:
        wanted = None if ids is None else set(ids)
        return [
            SurvivalRecord(r.scan_id, float(r.survival[0]), bool(r.survival[1]))
            for r in self.reports
            if r.survival is not None and (wanted is None or r.scan_id in wanted)
        ]

    def subset(self, ids: Sequence[str]) -> list[ReportRecord]:
        wanted = set(ids)
        return [r for r in self.reports if r.scan_id in wanted]

    def part(self, name: str) -> list[str]:
        """Scan ids of split part ``name``, or every scan without a split file."""
        if self.split is None:
            return [r.scan_id for r in self.reports]
        if name not in self.split:
            raise DataError(f"split has no {name!r} part")
        return list(self.split[name])


def load_volume(base, volume_shape: Sequence[int]) -> np.ndarray:
    vol, spacing = read_volume(base)
    if vol.shape == tuple(volume_shape) and np.allclose(spacing, TARGET_SPACING):
        return np.clip(vol, HU_MIN, HU_MAX)
    return preprocess_volume(vol, spacing, TARGET_SPACING, volume_shape)


def load_cohort_dir(path, volume_shape: Sequence[int] | None, templates=None) -> CohortData:
    """Read a cohort directory; ``volume_shape=None`` skips the volumes."""
    path = Path(path)
    if not (path / "reports.jsonl").exists():
        raise DataError(f"{path}: missing reports.jsonl")
    reports = read_reports(path / "reports.jsonl")
    volumes = {}
    for r in reports if volume_shape is not None else ():
        base = path / "volumes" / r.scan_id
        if not base.with_suffix(".json").exists():
            raise DataError(f"{path}: no volume for scan {r.scan_id!r}")
        volumes[r.scan_id] = load_volume(base, volume_shape)
    if (path / "qa.jsonl").exists():
        qa = read_qa(path / "qa.jsonl")
    else:
        qa = QAPairExtractor(templates=templates).fit(reports).transform(reports)
    split = None
    if (path / "split.json").exists():
        try:
            split = {k: [str(x) for x in v] for k, v in json.loads((path / "split.json").read_text("utf-8")).items()}
        except (ValueError, AttributeError, TypeError) as exc:
            raise DataError(f"{path / 'split.json'}: {exc}") from exc
        known = {r.scan_id for r in reports}
        for part, ids in split.items():
            if missing := [x for x in ids if x not in known]:
                raise DataError(f"split part {part!r} names unknown scans: {missing[:3]}")
    return CohortData(reports, volumes, qa, split)


def patient_inputs(reports: Sequence[ReportRecord], visual_tokens: dict[str, np.ndarray], tokenizer: Tokenizer) -> list[PatientInputs]:
    return [
        PatientInputs(r.scan_id, visual_tokens[r.scan_id], tokenizer.encode(clinical_to_sentence(r.clinical)))
        for r in reports
    ]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def predict_risks(params: ModelParams, patients: Sequence[PatientInputs], question_ids, threads: int = 1) -> list[float]:
    """Prompt-ensemble risk per patient; order of ``patients`` is kept."""
    return _map(lambda p: ensemble_predict(params, p, question_ids, n_questions=None), patients, threads)


def answer_f1(
    params: ModelParams,
    tokenizer: Tokenizer,
    patients: Sequence[PatientInputs],
    question_ids,
    qa: Sequence[QAPair],
    max_tokens: int = 32,
    threads: int = 1,
) -> float | None:
    """Mean token F1 of greedy answers against the reference answers.

    References pass through the tokenizer so both sides share its
    normalisation (lowercase, punctuation dropped, unknown words marked).
    """
    by_key = {(q.scan_id, q.question_id - 1): q.answer for q in qa}
    jobs = [(p, k) for p in patients for k in range(len(question_ids)) if (p.scan_id, k) in by_key]
    if not jobs:
        return None

    def one(job):
        p, k = job
        ids = generate(params, p, question_ids[k], max_tokens, tokenizer.eoa_id)
        return token_f1(tokenizer.decode(ids), tokenizer.normalize(by_key[(p.scan_id, k)]))

    scores = _map(one, jobs, threads)
    return math.fsum(scores) / len(scores)


@dataclass
class Evaluation:
    metrics: dict
    km_high: StepFunction | None
    km_low: StepFunction | None
    groups: list[RiskGroup]


def evaluate_risks(records: Sequence[SurvivalRecord], risks: Sequence[float], token_f1_mean: float | None = None) -> Evaluation:
    """c-index, median split, Kaplan-Meier curves and log-rank test.

    When the split leaves a group empty or without events to compare, the
    log-rank p-value is reported as 1 and ``log_rank_degenerate`` is set.
    """
    if len(records) < 2:
        raise DataError("cohort smaller than 2")
    if len(records) != len(risks):
        raise ValueError("one risk per record required")
    risks = [float(r) for r in risks]
    if not all(math.isfinite(r) for r in risks):
        raise ValueError("non-finite risk")
    c = concordance_index(records, risks)
    groups = stratify_median(risks)
    high = [r for r, g in zip(records, groups) if g is RiskGroup.HIGH]
    low = [r for r, g in zip(records, groups) if g is RiskGroup.LOW]
    degenerate = False
    try:
        stat, p = log_rank_test(high, low)
        if stat == 0.0 and p == 1.0:
            degenerate = True
    except ValueError:
        p, degenerate = 1.0, True
    metrics = {
        "c_index": c,
        "token_f1_mean": token_f1_mean,
        "log_rank_p": p,
        "log_rank_degenerate": degenerate,
        "n": len(records),
        "n_censored": sum(not r.event for r in records),
    }
    return Evaluation(
        metrics,
        km_estimate(high) if high else None,
        km_estimate(low) if low else None,
        groups,
    )


def visual_tokens_for(params: ModelParams, volumes: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return encode_all(params, volumes)
