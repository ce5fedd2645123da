"""Corpus ingestion and data preparation.

Report parsing and QA-pair construction, clinical covariates as a sentence,
CT volume preprocessing, time-grid construction and a synthetic cohort
generator with a known risk law.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import TimeGrid
from .rng import stream
from .survstats import SurvivalRecord
from .text import words

FALLBACK_ANSWER = "No relevant findings reported."
HU_MIN, HU_MAX = -1000.0, 1000.0
DEFAULT_STOPLIST = frozenset(
    "a an and are as at be by for from has have in is it its measuring measures no not of on or "
    "seen the there this to up was were with without".split()
)


class DataError(ValueError):
    """Input file could not be parsed or violates its schema."""


@dataclass(frozen=True)
class ReportRecord:
    scan_id: str
    report_text: str
    clinical: dict = field(default_factory=dict)
    survival: tuple[float, bool] | None = None

    def __post_init__(self):
        if not self.scan_id:
            raise DataError("scan_id must be nonempty")
        if not self.report_text.strip():
            raise DataError(f"{self.scan_id}: empty report")


@dataclass(frozen=True)
class QAPair:
    scan_id: str
    question_id: int
    question: str
    answer: str

    def to_json(self) -> dict:
        return {"scan_id": self.scan_id, "question_id": self.question_id, "question": self.question, "answer": self.answer}


@dataclass(frozen=True)
class QuestionTemplate:
    question_id: int
    question: str
    triggers: tuple[str, ...]


def load_templates(path=None) -> list[QuestionTemplate]:
    """Question templates with trigger keywords, ordered by question id."""
    if path is None:
        raw = json.loads(resources.files("survvlm").joinpath("data/templates.json").read_text("utf-8"))
    else:
        raw = json.loads(Path(path).read_text("utf-8"))
    out = [
        QuestionTemplate(int(k), v["question"], tuple(t.lower() for t in v["triggers"]))
        for k, v in raw.items()
    ]
    return sorted(out, key=lambda t: t.question_id)


# -- word frequencies -------------------------------------------------------
def word_frequency(corpus: Iterable[ReportRecord], stoplist=DEFAULT_STOPLIST, top_k: int = 100) -> list[tuple[str, int]]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    counts = Counter()
    stop = {w.lower() for w in stoplist}
    for rec in corpus:
        counts.update(w for w in words(rec.report_text) if w not in stop and not w.isdigit())
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]


# -- answer extraction -----------------------------------------------------
_SENTENCE_RE = re.compile(r"[^.!?]+[.!?]?")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.findall(text) if s.strip()]


def _trigger_pattern(triggers: Sequence[str]) -> re.Pattern:
    alts = "|".join(r"\s+".join(map(re.escape, t.split())) for t in triggers)
    return re.compile(rf"\b(?:{alts})\b", re.IGNORECASE)


def extract_answers(report: ReportRecord, templates: Sequence[QuestionTemplate]) -> list[QAPair]:
    """One QA pair per template: the report sentences mentioning any of the
    template's trigger keywords, in document order."""
    sentences = split_sentences(report.report_text)
    pairs = []
    for tpl in templates:
        pat = _trigger_pattern(tpl.triggers)
        hits = [s for s in sentences if pat.search(s)]
        pairs.append(QAPair(report.scan_id, tpl.question_id, tpl.question, " ".join(hits) or FALLBACK_ANSWER))
    return pairs


class QAPairExtractor(TransformerMixin, BaseEstimator):
    """Reports -> QA pairs.  ``fit`` records corpus word frequencies."""

    def __init__(self, templates=None, top_k: int = 100, stoplist=None):
        self.templates = templates
        self.top_k = top_k
        self.stoplist = stoplist

    def _templates(self) -> list[QuestionTemplate]:
        if self.templates is None or isinstance(self.templates, (str, Path)):
            return load_templates(self.templates)
        return list(self.templates)

    def fit(self, X: Sequence[ReportRecord], y=None):
        stop = DEFAULT_STOPLIST if self.stoplist is None else self.stoplist
        self.word_freq_ = word_frequency(X, stop, self.top_k)
        self.templates_ = self._templates()
        return self

    def transform(self, X: Sequence[ReportRecord]) -> list[QAPair]:
        check_is_fitted(self, "templates_")
        return [qa for rec in X for qa in extract_answers(rec, self.templates_)]


# -- clinical covariates ------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return str(v)


def clinical_to_sentence(covariates: Mapping, schema: str = "lung") -> str:
    """Serialise clinical covariates into one sentence; absent keys drop their phrase."""
    c = {k: v for k, v in covariates.items() if v is not None and v != ""}
    if not c:
        return ""
    if schema == "lung":
        head = []
        if "age" in c:
            head.append(f"{_fmt(c['age'])} year-old")
        if "gender" in c:
            head.append(str(c["gender"]))
        if "smoking" in c:
            head.append(f"{c['smoking']} smoker")
        head.append("lung cancer patient")
        tail = []
        if "stage" in c:
            tail.append(f"stage {_fmt(c['stage'])}")
        for k in ("T", "N", "M"):
            if k in c:
                tail.append(f"{k} stage is {c[k]}")
        return ", ".join([" ".join(head)] + tail) + "."
    if schema == "pe":
        subject = " ".join(
            p for p in (f"{_fmt(c['age'])}-year-old" if "age" in c else "", str(c.get("gender", "patient"))) if p
        )
        parts = [f"A {subject}"]
        if "pe_positive" in c:
            if c["pe_positive"]:
                kind = "acute" if c.get("pe_acute") else "chronic"
                limited = "limited to" if c.get("pe_subsegmentalonly") else "not limited to"
                parts.append(f"{kind} pulmonary embolism ({limited} subsegmental arteries)")
            else:
                parts.append("no pulmonary embolism")
        units = (("temperature", "temperature {}°F"), ("respiratory_rate", "respiratory rate {} breaths per minute"),
                 ("mean_arterial_pressure", "mean arterial pressure {} mmHg"), ("pulse", "pulse {} bpm"))
        parts += [fmt.format(c[k]) for k, fmt in units if k in c]
        return ", ".join(parts) + "."
    raise ValueError(f"unknown clinical schema {schema!r}")


# -- CT volumes -------------------------------------------------------------------
def preprocess_volume(
    raw: np.ndarray,
    spacing_mm: Sequence[float],
    target_spacing: Sequence[float] = (1.5, 1.5, 3.0),
    target_shape: Sequence[int] = (24, 24, 16),
) -> np.ndarray:
    """Clip to [-1000, 1000] HU, trilinearly resample to ``target_spacing``,
    then centre-crop or pad (with -1000) to ``target_shape``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.size == 0:
        raise ValueError("expected a nonempty 3-D volume")
    if len(spacing_mm) != 3 or min(spacing_mm) <= 0 or min(target_spacing) <= 0:
        raise ValueError("spacings must be positive")
    vol = np.clip(raw, HU_MIN, HU_MAX)
    axes = []
    for n, s_in, s_out in zip(vol.shape, spacing_mm, target_spacing):
        n_out = int(math.floor((n - 1) * s_in / s_out + 1e-9)) + 1
        axes.append(np.arange(n_out) * (s_out / s_in))
    coords = np.meshgrid(*axes, indexing="ij")
    vol = ndimage.map_coordinates(vol, coords, order=1, mode="nearest")
    out = np.full(tuple(target_shape), HU_MIN)
    src, dst = [], []
    for n, t in zip(vol.shape, target_shape):
        if n >= t:
            a = (n - t) // 2
            src.append(slice(a, a + t))
            dst.append(slice(0, t))
        else:
            a = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(a, a + n))
    out[tuple(dst)] = vol[tuple(src)]
    # interpolation is convex, but keep the bound exact against rounding
    return np.clip(out, HU_MIN, HU_MAX)


class VolumePreprocessor(TransformerMixin, BaseEstimator):
    """sklearn wrapper around :func:`preprocess_volume` for (volume, spacing) pairs."""

    def __init__(self, target_spacing=(1.5, 1.5, 3.0), target_shape=(24, 24, 16)):
        self.target_spacing = target_spacing
        self.target_shape = target_shape

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[np.ndarray]:
        return [preprocess_volume(v, s, self.target_spacing, self.target_shape) for v, s in X]


def write_volume(base_path, volume: np.ndarray, spacing_mm: Sequence[float]) -> None:
    """Sidecar ``<base>.json`` plus little-endian float32 ``<base>.raw`` (x fastest)."""
    base = Path(base_path)
    meta = {"dims": list(volume.shape), "spacing_mm": [float(s) for s in spacing_mm]}
    base.with_suffix(".json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    base.with_suffix(".raw").write_bytes(np.asarray(volume, dtype="<f4").tobytes(order="F"))


def read_volume(base_path) -> tuple[np.ndarray, tuple[float, float, float]]:
    base = Path(base_path)
    try:
        meta = json.loads(base.with_suffix(".json").read_text("utf-8"))
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{base}.json: {exc}") from exc
    payload = base.with_suffix(".raw").read_bytes()
    if len(payload) != 4 * int(np.prod(dims)):
        raise DataError(f"{base}.raw: expected {4 * int(np.prod(dims))} bytes, got {len(payload)}")
    vol = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float64)
    return vol, spacing


# -- JSON Lines --------------------------------------------------------------
def read_reports(path) -> list[ReportRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                survival = None
                if obj.get("time") is not None and obj.get("event") is not None:
                    survival = (float(obj["time"]), bool(obj["event"]))
                out.append(ReportRecord(str(obj["scan_id"]), obj["report"], dict(obj.get("clinical") or {}), survival))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no reports")
    seen = set()
    for r in out:
        if r.scan_id in seen:
            raise DataError(f"{path}: duplicate scan_id {r.scan_id!r}")
        seen.add(r.scan_id)
    return out


def write_reports(path, reports: Iterable[ReportRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            obj = {"scan_id": r.scan_id, "report": r.report_text, "clinical": r.clinical}
            obj["time"], obj["event"] = (r.survival[0], int(r.survival[1])) if r.survival else (None, None)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def write_qa(path, pairs: Iterable[QAPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qa in pairs:
            fh.write(json.dumps(qa.to_json(), ensure_ascii=False) + "\n")


def read_qa(path) -> list[QAPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                o = json.loads(line)
                out.append(QAPair(str(o["scan_id"]), int(o["question_id"]), o["question"], o["answer"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


# -- time grid -----------------------------------------------------------------
def build_time_grid(records: Sequence[SurvivalRecord], k: int) -> TimeGrid:
    """Equal-frequency bins at quantiles of the uncensored event times."""
    if k < 2:
        raise ValueError("k must be >= 2")
    event_times = np.array([r.time for r in records if r.event], dtype=np.float64)
    n_distinct = len(np.unique(event_times))
    if n_distinct < k:
        raise ValueError(f"only {n_distinct} distinct event times for k={k}; use a smaller k")
    t_max = max(r.time for r in records)
    inner = np.quantile(event_times, np.arange(1, k) / k)
    edges = np.unique(np.concatenate([[0.0], inner, [t_max]]))
    return TimeGrid(tuple(edges))


# -- synthetic cohort -------------------------------------------------------
RISK_LAWS = ("LinearInLesionSize", "TwoGroup")
_LOBES = ("right upper lobe", "right middle lobe", "right lower lobe", "left upper lobe", "left lower lobe")
_STATIONS = ("mediastinal", "hilar", "subcarinal", "paratracheal")
_SIDE_MIN, _SIDE_MAX = 3, 12


@dataclass(frozen=True)
class SynthCohortConfig:
    n_patients: int = 400
    censor_rate: float = 0.25
    feature_dim: int = 4
    risk_law: str = "LinearInLesionSize"
    seed: int = 0
    beta: float = 1.0
    volume_shape: tuple[int, int, int] = (24, 24, 16)
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 3.0)
    base_hazard: float = 1.0 / 365.0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError("censor_rate must lie in [0, 1)")
        if self.risk_law not in RISK_LAWS:
            raise ValueError(f"risk_law must be one of {RISK_LAWS}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        object.__setattr__(self, "volume_shape", tuple(int(v) for v in self.volume_shape))
        object.__setattr__(self, "spacing_mm", tuple(float(v) for v in self.spacing_mm))
        deepest = max(1, int(round(_SIDE_MAX * self.spacing_mm[0] / self.spacing_mm[2])))
        X, Y, Z = self.volume_shape
        if min(X, Y) < _SIDE_MAX or Z < deepest:
            raise ValueError(f"volume_shape must be at least ({_SIDE_MAX}, {_SIDE_MAX}, {deepest}) to hold the largest lesion")


@dataclass
class SynthCohort:
    config: SynthCohortConfig
    reports: list[ReportRecord]
    volumes: dict[str, np.ndarray]
    records: list[SurvivalRecord]
    oracle_risks: np.ndarray
    features: np.ndarray


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _patient(cfg: SynthCohortConfig, i: int):
    rng = stream(cfg.seed, "synth/patient", i)
    side = int(rng.integers(_SIDE_MIN, _SIDE_MAX + 1))
    mid = (_SIDE_MIN + _SIDE_MAX) / 2
    sd = math.sqrt(((_SIDE_MAX - _SIDE_MIN + 1) ** 2 - 1) / 12.0)
    s = (side - mid) / sd  # unit-variance lesion size score
    if cfg.risk_law == "LinearInLesionSize":
        log_risk = cfg.beta * s
    else:
        log_risk = cfg.beta * float(side > mid)

    X, Y, Z = cfg.volume_shape
    vol = -850.0 + 30.0 * rng.standard_normal(cfg.volume_shape)
    side_z = max(1, int(round(side * cfg.spacing_mm[0] / cfg.spacing_mm[2])))
    x0 = int(rng.integers(0, X - side + 1))
    y0 = int(rng.integers(0, Y - side + 1))
    z0 = int(rng.integers(0, Z - side_z + 1))
    vol[x0:x0 + side, y0:y0 + side, z0:z0 + side_z] = 40.0 + 10.0 * rng.standard_normal((side, side, side_z))

    t_event = -math.log(1.0 - rng.random()) / (cfg.base_hazard * math.exp(log_risk))
    u_censor = 1.0 - rng.random()  # (0, 1]

    size_mm = int(side * cfg.spacing_mm[0] + 0.5)
    nodes = rng.random() < _sigmoid(1.5 * s - 0.5)
    effusion = rng.random() < _sigmoid(1.5 * s - 1.5)
    mets = rng.random() < _sigmoid(1.5 * s - 2.5)
    vessel = rng.random() < _sigmoid(1.5 * s - 1.0)
    bone_mentioned = rng.random() < 0.5
    lobe = _LOBES[int(rng.integers(len(_LOBES)))]
    station = _STATIONS[int(rng.integers(len(_STATIONS)))]
    node_mm = int(10 + 10 * rng.random())
    pleural_side = "right" if lobe.startswith("right") else "left"

    sentences = [f"A {size_mm} mm spiculated mass is seen in the {lobe}."]
    sentences.append(f"Enlarged {station} lymph nodes measure up to {node_mm} mm." if nodes else "No enlarged lymph nodes.")
    sentences.append("Heart size is normal.")
    sentences.append(f"Small {pleural_side} pleural effusion." if effusion else "No pleural effusion.")
    sentences.append("The tumor abuts the pulmonary artery." if vessel else "The major vessels are patent.")
    sentences.append("Adrenal metastasis is suspected." if mets else "No distant metastases.")
    if bone_mentioned:
        sentences.append("No lytic or sclerotic bone lesions.")
    report = " ".join(sentences)

    t_stage = 1 if side <= 4 else 2 if side <= 7 else 3 if side <= 10 else 4
    stage = 4 if mets else (3 if t_stage >= 3 else 2) if nodes else (1 if t_stage <= 2 else 2)
    clinical = {
        "age": int(45 + int(rng.integers(0, 41))),
        "gender": "male" if rng.random() < 0.5 else "female",
        "smoking": ("never", "former", "current")[int(rng.integers(3))],
        "stage": stage,
        "T": f"T{t_stage}",
        "N": "N1" if nodes else "N0",
        "M": "M1" if mets else "M0",
    }
    noise = rng.standard_normal(max(cfg.feature_dim - 1, 0))
    features = np.concatenate([[s], noise])
    return vol, report, clinical, log_risk, t_event, u_censor, features


def generate_synth_cohort(config: SynthCohortConfig) -> SynthCohort:
    """Cohort whose log-risk is a known function of a planted lesion's size.

    Each volume contains a bright cube in noisy lung-density background; the
    report describes the lesion and findings whose frequency grows with its
    size.  Event times are exponential with rate ``base_hazard * exp(log-risk)``;
    censoring times are uniform on ``[0, c_max]`` with ``c_max`` chosen so the
    censored fraction equals ``censor_rate`` to within 1/n.
    """
    cfg = config
    rows = [_patient(cfg, i) for i in range(cfg.n_patients)]
    t_event = np.array([r[4] for r in rows])
    u = np.array([r[5] for r in rows])
    n_cens = int(round(cfg.censor_rate * cfg.n_patients))
    ratio = np.sort(t_event / u)[::-1]  # censored iff c_max < t_event / u
    if n_cens == 0:
        c_max = math.inf
    elif n_cens >= cfg.n_patients:
        c_max = 0.5 * ratio[-1]
    else:
        c_max = 0.5 * (ratio[n_cens - 1] + ratio[n_cens])
    reports, volumes, records = [], {}, []
    for i, (vol, text, clinical, _, te, ui, _) in enumerate(rows):
        pid = f"P{i:04d}"
        c = ui * c_max
        event = bool(te <= c)
        t = round(float(min(te, c)), 3)
        rec = SurvivalRecord(pid, t, event)
        records.append(rec)
        volumes[pid] = vol
        reports.append(ReportRecord(pid, text, clinical, (t, event)))
    return SynthCohort(
        config=cfg,
        reports=reports,
        volumes=volumes,
        records=records,
        oracle_risks=np.array([r[3] for r in rows]),
        features=np.stack([r[6] for r in rows]),
    )


def train_test_split_ids(ids: Sequence[str], test_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic shuffled split of ids (order within each part preserved)."""
    ids = list(ids)
    perm = stream(seed, "split").permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = set(perm[:n_test].tolist())
    return [x for i, x in enumerate(ids) if i not in test], [x for i, x in enumerate(ids) if i in test]
