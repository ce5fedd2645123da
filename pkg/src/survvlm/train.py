"""Two-stage training.

Stage 1 (``Pretrain``) fits the projection and decoder on question-answer
sequences with the language-model loss only.  Stage 2 (``Finetune``) freezes
encoder and projection and trains decoder, adaptor and the active survival
head on the sum of the language-model, survival, dispersion and alignment
terms.

Batches are drawn from a global item cursor over epoch permutations, so the
contents of step ``s`` depend only on ``(seed, s)``; resuming from a
checkpoint replays exactly the same trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .dataprep import QAPair, ReportRecord, build_time_grid, clinical_to_sentence
from .losses import (
    LossBreakdown,
    TimeGrid,
    alignment_loss,
    cox_loss,
    deephit_loss,
    dispersion_continuous,
    dispersion_discrete,
    total_loss,
)
from .model import (
    GROUP_ORDER,
    ModelConfig,
    ModelParams,
    batch_embeddings,
    decode_embeddings,
    pack_sequence,
    pool_hidden,
    project_visual,
    survival_branch,
)
from .optim import AdamWState, adamw_step, cosine_warmup_lr
from .rng import stream
from .survstats import SurvivalRecord
from .text import Tokenizer

log = logging.getLogger(__name__)

STAGES = ("Pretrain", "Finetune")
HEAD_KINDS = ("Continuous", "Discrete")

FREEZE_POLICY: dict[str, frozenset[str]] = {
    "Pretrain": frozenset({"projection", "decoder"}),
    # the active head is added at run time
    "Finetune": frozenset({"decoder", "adaptor"}),
}


class NumericError(RuntimeError):
    """A loss became non-finite; ``last_good`` holds the last finite checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "Pretrain"
    lr_peak: float = 3e-4
    warmup_steps: int = 20
    total_steps: int = 200
    batch_size: int = 16
    grad_accum_steps: int = 1
    alpha: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    head: str = "Continuous"
    k_bins: int = 5
    sigma: float | None = None
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.k_bins < 2:
            raise ValueError("k_bins must be >= 2")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        b1, b2 = (float(b) for b in self.betas)
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", (b1, b2))

    @property
    def model_head(self) -> str:
        return self.head.lower()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def large_scale_preset(stage: str) -> TrainConfig:
    """Large-scale settings for reference: peak 1e-6 on the decoder stage,
    1e-4 otherwise, 500 warmup steps, alpha 0.5, local batch 12 with 8
    accumulation steps.  Far too slow to converge for the tiny model."""
    return TrainConfig(
        stage=stage,
        lr_peak=1e-6 if stage == "Pretrain" else 1e-4,
        warmup_steps=500,
        total_steps=5000,
        batch_size=12,
        grad_accum_steps=8,
        alpha=0.5,
    )


def trainable_groups(stage: str, head: str) -> frozenset[str]:
    groups = FREEZE_POLICY[stage]
    if stage == "Finetune":
        groups = groups | {f"head_{head.lower()}"}
    return groups


# -- training data -------------------------------------------------------------
@dataclass
class PatientExample:
    scan_id: str
    z_v: np.ndarray
    clinical_ids: list[int]
    answers: dict[int, list[int]]
    record: SurvivalRecord | None = None


@dataclass
class TrainingData:
    tokenizer: Tokenizer
    questions: list[str]
    examples: list[PatientExample]
    question_ids: list[list[int]] = field(init=False)

    def __post_init__(self):
        self.question_ids = [self.tokenizer.encode_question(q) for q in self.questions]

    def qa_items(self) -> list[tuple[int, int]]:
        """(example index, question index) for every answered question."""
        return [(i, q) for i, ex in enumerate(self.examples) for q in range(len(self.questions)) if q in ex.answers]

    def survival_examples(self) -> list[int]:
        return [i for i, ex in enumerate(self.examples) if ex.record is not None]


def fit_tokenizer(reports: Sequence[ReportRecord], qa_pairs: Sequence[QAPair], questions: Sequence[str], max_vocab: int = 2000) -> Tokenizer:
    texts = list(questions) + [qa.answer for qa in qa_pairs] + [clinical_to_sentence(r.clinical) for r in reports]
    return Tokenizer(max_vocab=max_vocab).fit(texts)


def build_training_data(
    reports: Sequence[ReportRecord],
    qa_pairs: Sequence[QAPair],
    visual_tokens: dict[str, np.ndarray],
    tokenizer: Tokenizer,
    questions: Sequence[str],
) -> TrainingData:
    """Join reports, QA pairs and cached visual tokens by scan id.

    ``questions`` is ordered by question id; pair ``question_id`` k maps to
    ``questions[k - 1]``.  Reports without visual tokens are skipped.
    """
    by_scan: dict[str, dict[int, list[int]]] = {}
    for qa in qa_pairs:
        by_scan.setdefault(qa.scan_id, {})[qa.question_id - 1] = tokenizer.encode_answer(qa.answer)
    examples = []
    for rep in reports:
        if rep.scan_id not in visual_tokens:
            continue
        record = None
        if rep.survival is not None:
            record = SurvivalRecord(rep.scan_id, float(rep.survival[0]), bool(rep.survival[1]))
        examples.append(PatientExample(
            scan_id=rep.scan_id,
            z_v=np.asarray(visual_tokens[rep.scan_id], dtype=np.float64),
            clinical_ids=tokenizer.encode(clinical_to_sentence(rep.clinical)),
            answers=by_scan.get(rep.scan_id, {}),
            record=record,
        ))
    return TrainingData(tokenizer, list(questions), examples)


# -- batching ------------------------------------------------------------------
def batch_indices(n_items: int, seed: int, stream_name: str, start: int, count: int) -> list[int]:
    """Items ``start .. start+count-1`` of the endless epoch-shuffled order."""
    out = []
    perms: dict[int, np.ndarray] = {}
    for pos in range(start, start + count):
        epoch, k = divmod(pos, n_items)
        if epoch not in perms:
            perms[epoch] = stream(seed, stream_name, epoch).permutation(n_items)
        out.append(int(perms[epoch][k]))
    return out


def _micro_batches(config: TrainConfig, step: int, n_items: int, name: str) -> list[list[int]]:
    per_step = config.batch_size * config.grad_accum_steps
    flat = batch_indices(n_items, config.seed, name, step * per_step, per_step)
    return [flat[a * config.batch_size:(a + 1) * config.batch_size] for a in range(config.grad_accum_steps)]


def _sequences(w, data: TrainingData, pairs: Sequence[tuple[int, int]]):
    seqs = []
    for ei, qi in pairs:
        ex = data.examples[ei]
        h_v = project_visual(Tensor(ex.z_v), w["projection"]["W"])
        seqs.append(pack_sequence(ex.clinical_ids, h_v, data.question_ids[qi], ex.answers[qi], w["decoder"]["tok_emb"]))
    return seqs


def sequence_lm_loss(logits: Tensor, seqs) -> Tensor:
    """Per-sequence mean next-token NLL on answer tokens, averaged over sequences.

    Averaging per sequence first makes a batch of B the exact mean of any
    split into equal micro-batches.
    """
    rows, cols, targets, weights = [], [], [], []
    for b, s in enumerate(seqs):
        pos = np.nonzero(s.loss_mask[1:])[0]  # position i predicts token i + 1
        if not len(pos):
            raise ValueError("no supervised tokens")
        rows += [b] * len(pos)
        cols += pos.tolist()
        targets += s.ids[pos + 1].tolist()
        weights += [1.0 / (len(pos) * len(seqs))] * len(pos)
    logp = ad.log_softmax(logits[np.array(rows), np.array(cols)], axis=-1)
    picked = logp[np.arange(len(targets)), np.array(targets)]
    return -(picked * np.array(weights)).sum()


# -- stage runners -----------------------------------------------------------------
@dataclass
class StepLog:
    step: int
    lr: float
    lm: float
    surv: float
    dispersion: float
    alignment: float
    total: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _grads(w) -> dict[str, dict[str, np.ndarray | None]]:
    return {g: {n: t.grad for n, t in arrs.items()} for g, arrs in w.items()}


def _check_model_matches(params: ModelParams, config: TrainConfig, data: TrainingData) -> None:
    mc = params.config
    if mc.head != config.model_head:
        raise ValueError(f"checkpoint head {mc.head!r} does not match config head {config.head!r}")
    if mc.head == "discrete" and mc.k_bins != config.k_bins:
        raise ValueError(f"checkpoint has {mc.k_bins} bins, config asks for {config.k_bins}")
    if mc.vocab_size != data.tokenizer.vocab_size:
        raise ValueError("checkpoint vocabulary does not match the training data")
    p_v = {ex.z_v.shape for ex in data.examples}
    if p_v and p_v != {(mc.n_visual_tokens, mc.d_vis)}:
        raise ValueError("visual tokens do not match the model's encoder output")


def _start(
    data: TrainingData, config: TrainConfig, init: Checkpoint
) -> tuple[ModelParams, AdamWState, int, Checkpoint]:
    _check_model_matches(init.params, config, data)
    if init.stage == config.stage:
        if init.train_config is not None and TrainConfig.from_dict(init.train_config) != config.replace(total_steps=init.train_config["total_steps"]):
            raise ValueError("resume checkpoint was written with a different training config")
        if init.step > config.total_steps:
            raise ValueError(f"checkpoint step {init.step} is past total_steps {config.total_steps}")
        params = init.params.copy()
        opt = init.optimizer.copy() if init.optimizer is not None else AdamWState()
        return params, opt, init.step, init
    params = init.params.copy()
    return params, AdamWState(), 0, init


def _make_checkpoint(params, opt, step, config, data, base: Checkpoint, grid=None, sigma=None) -> Checkpoint:
    return Checkpoint(
        params=params.copy(),
        vocab=list(data.tokenizer.vocab_),
        questions=list(data.questions),
        stage=config.stage,
        step=step,
        seed=config.seed,
        train_config=config.to_dict(),
        optimizer=opt.copy(),
        time_grid=None if grid is None else list(grid.edges),
        sigma=sigma,
        extra={"rng": "philox", "item_cursor": step * config.batch_size * config.grad_accum_steps},
    )


def checkpoint_every(total_steps: int) -> int:
    return max(1, total_steps // 10)


def _loop(
    data, config, init, step_fn, on_step, on_checkpoint, grid=None, sigma=None
) -> tuple[Checkpoint, list[StepLog]]:
    params, opt, start, base = _start(data, config, init)
    params.freeze(trainable_groups(config.stage, config.head))
    every = checkpoint_every(config.total_steps)
    history: list[StepLog] = []
    last_good = _make_checkpoint(params, opt, start, config, data, base, grid, sigma)
    for step in range(start, config.total_steps):
        lr = cosine_warmup_lr(step + 1, config)
        w = params.tensors()
        parts = step_fn(w, step)
        entry = StepLog(step + 1, lr, *(math.fsum(p[k] for p in parts) / len(parts) for k in ("lm", "surv", "dispersion", "alignment", "total")))
        if not all(math.isfinite(v) for v in (entry.lm, entry.surv, entry.dispersion, entry.alignment, entry.total)):
            raise NumericError(f"non-finite loss at step {step + 1}", last_good)
        adamw_step(params.groups, _grads(w), opt, lr, config.betas, config.weight_decay, frozen=params.frozen)
        history.append(entry)
        if on_step is not None:
            on_step(entry)
        done = step + 1
        if done % every == 0 or done == config.total_steps:
            last_good = _make_checkpoint(params, opt, done, config, data, base, grid, sigma)
            if on_checkpoint is not None:
                on_checkpoint(last_good)
    final = _make_checkpoint(params, opt, config.total_steps, config, data, base, grid, sigma)
    return final, history


def initial_checkpoint(data: TrainingData, model_config: ModelConfig, seed: int) -> Checkpoint:
    params = ModelParams.init(model_config, seed)
    return Checkpoint(params, list(data.tokenizer.vocab_), list(data.questions), stage="Init", seed=seed)


def run_stage1(
    data: TrainingData,
    config: TrainConfig,
    init: Checkpoint,
    on_step: Callable[[StepLog], None] | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> tuple[Checkpoint, list[StepLog]]:
    """Language-model pre-training of projection and decoder.

    ``init`` is either a fresh initialisation or a Stage 1 checkpoint to
    resume from.
    """
    if config.stage != "Pretrain":
        raise ValueError("run_stage1 needs a Pretrain config")
    items = data.qa_items()
    if not items:
        raise ValueError("empty training corpus")
    cfg_model = init.params.config

    def step_fn(w, step):
        parts = []
        for mb in _micro_batches(config, step, len(items), "stage1/epoch"):
            seqs = _sequences(w, data, [items[i] for i in mb])
            x, _ = batch_embeddings(seqs)
            _, logits = decode_embeddings(w["decoder"], x, cfg_model, fixed_length=False)
            lm = sequence_lm_loss(logits, seqs)
            (lm * (1.0 / config.grad_accum_steps)).backward()
            v = lm.item()
            parts.append({"lm": v, "surv": 0.0, "dispersion": 0.0, "alignment": 0.0, "total": v})
        return parts

    return _loop(data, config, init, step_fn, on_step, on_checkpoint)


def default_sigma(records: Sequence[SurvivalRecord]) -> float:
    """Median absolute pairwise difference of the event times."""
    t = np.array([r.time for r in records if r.event], dtype=np.float64)
    if len(t) < 2:
        raise ValueError("need two events to set sigma")
    diff = np.abs(t[:, None] - t[None, :])[np.triu_indices(len(t), 1)]
    s = float(np.median(diff))
    return s if s > 0 else 1.0


def _group_means(z: Tensor, records: Sequence[SurvivalRecord], grid: TimeGrid) -> Tensor | None:
    """Unit-normalised mean embedding per occupied event-time bin."""
    idx_by_bin: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        if r.event:
            idx_by_bin.setdefault(min(grid.bin_of(min(r.time, grid.edges[-1])), grid.K), []).append(i)
    if len(idx_by_bin) < 2:
        return None
    means = [z[np.array(ix)].mean(axis=0) for _, ix in sorted(idx_by_bin.items())]
    mu = ad.stack(means)
    return mu / ad.norm(mu, axis=-1).reshape(-1, 1)


def stage2_batch_loss(w, data: TrainingData, pairs, config: TrainConfig, cfg_model: ModelConfig, grid, sigma) -> LossBreakdown:
    """All four loss terms on one batch of (example, question) pairs."""
    seqs = _sequences(w, data, pairs)
    records = [data.examples[ei].record for ei, _ in pairs]
    x, lengths = batch_embeddings(seqs)
    hidden, logits = decode_embeddings(w["decoder"], x, cfg_model, fixed_length=False)
    lm = sequence_lm_loss(logits, seqs)
    ends = np.array([s.prompt_length - 1 for s in seqs])
    h_last = hidden[np.arange(len(seqs)), ends]
    head = f"head_{cfg_model.head}"
    z, out = survival_branch(w["adaptor"], w[head], h_last, cfg_model.head)
    events = np.array([r.event for r in records], dtype=bool)
    if cfg_model.head == "continuous":
        if events.any():
            surv = cox_loss(out, records)
        else:
            log.warning("batch without events; survival term skipped")
            surv = Tensor(0.0)
        ev = np.nonzero(events)[0]
        disp = dispersion_continuous(z[ev], [records[i].time for i in ev], sigma) if len(ev) > 1 else Tensor(0.0)
    else:
        surv = deephit_loss(out, records, grid)
        mu = _group_means(z, records, grid)
        disp = dispersion_discrete(mu, config.tau) if mu is not None else Tensor(0.0)
    pooled = pool_hidden(hidden, lengths)
    align = alignment_loss(z, pooled).mean()
    return total_loss(lm, surv, disp, align, config.alpha)


def run_stage2(
    data: TrainingData,
    config: TrainConfig,
    init: Checkpoint,
    on_step: Callable[[StepLog], None] | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> tuple[Checkpoint, list[StepLog]]:
    """Joint fine-tuning of decoder, adaptor and the active survival head.

    ``init`` is a Stage 1 checkpoint, a fresh initialisation, or a Stage 2
    checkpoint to resume from.  Each item is one patient with one of its
    questions, chosen by the item cursor.
    """
    if config.stage != "Finetune":
        raise ValueError("run_stage2 needs a Finetune config")
    pats = data.survival_examples()
    if len(pats) < 2:
        raise ValueError("need at least two patients with survival labels")
    records = [data.examples[i].record for i in pats]
    if not any(r.event for r in records):
        raise ValueError("no events in the training cohort")
    cfg_model = init.params.config
    resuming = init.stage == config.stage
    grid = sigma = None
    if cfg_model.head == "discrete":
        grid = TimeGrid(tuple(init.time_grid)) if resuming and init.time_grid else build_time_grid(records, config.k_bins)
        if grid.K != cfg_model.k_bins:
            raise ValueError(f"time grid has {grid.K} bins, model has {cfg_model.k_bins}; use a smaller k_bins")
    else:
        sigma = init.sigma if resuming and init.sigma else (config.sigma or default_sigma(records))

    def step_fn(w, step):
        parts = []
        for a, mb in enumerate(_micro_batches(config, step, len(pats), "stage2/epoch")):
            pairs = []
            for j, i in enumerate(mb):
                ex = data.examples[pats[i]]
                qs = sorted(ex.answers)
                pos = (step * config.grad_accum_steps + a) * config.batch_size + j
                q = qs[int(stream(config.seed, "stage2/question", pos).integers(len(qs)))] if qs else None
                if q is None:
                    raise ValueError(f"{ex.scan_id}: no answered questions")
                pairs.append((pats[i], q))
            br = stage2_batch_loss(w, data, pairs, config, cfg_model, grid, sigma)
            (br.graph * (1.0 / config.grad_accum_steps)).backward()
            parts.append(br.as_dict())
        return parts

    return _loop(data, config, init, step_fn, on_step, on_checkpoint, grid=grid, sigma=sigma)
