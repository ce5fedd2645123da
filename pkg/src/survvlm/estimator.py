"""scikit-learn style wrapper around the two-stage training pipeline."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .dataprep import QAPairExtractor, ReportRecord, load_templates
from .model import ModelConfig, ModelParams
from .pipeline import patient_inputs, predict_risks, visual_tokens_for
from .survstats import concordance_index
from .text import Tokenizer
from .train import TrainConfig, build_training_data, fit_tokenizer, run_stage1, run_stage2
from .validation import check_reports, check_risks, check_volumes, survival_records


class SurvivalVLM(BaseEstimator):
    """Pretrain then fine-tune a survival VLM on reports and CT volumes.

    ``fit``, ``predict`` and ``score`` take a list of ``ReportRecord`` and a
    mapping from scan id to a preprocessed volume of ``model_config.volume_shape``.
    ``predict`` returns one risk per report (higher means earlier event) and
    ``score`` the c-index of those risks.

    Parameters
    ----------
    model_config : ModelConfig or dict, optional
        Model shape.  ``vocab_size``, ``head`` and ``k_bins`` are filled in
        from the tokenizer and ``finetune`` config.
    pretrain, finetune : TrainConfig, optional
        Stage configs; ``None`` uses the defaults for that stage.
    templates : path or list of QuestionTemplate, optional
    seed : int
        Overrides the seed of both stage configs.
    threads : int
        Workers for prediction.
    """

    def __init__(self, model_config=None, pretrain=None, finetune=None, templates=None, seed=0, threads=1):
        self.model_config = model_config
        self.pretrain = pretrain
        self.finetune = finetune
        self.templates = templates
        self.seed = seed
        self.threads = threads

    def _stage_config(self, given, stage: str) -> TrainConfig:
        cfg = given if given is not None else TrainConfig(stage=stage)
        if cfg.stage != stage:
            raise ValueError(f"{stage.lower()} config has stage {cfg.stage!r}")
        return cfg.replace(seed=self.seed)

    def _model_config(self, vocab_size: int, finetune: TrainConfig) -> ModelConfig:
        base = self.model_config if self.model_config is not None else ModelConfig()
        raw = base.to_dict() if isinstance(base, ModelConfig) else {**ModelConfig().to_dict(), **dict(base)}
        raw.update(vocab_size=vocab_size, head=finetune.model_head, k_bins=finetune.k_bins)
        return ModelConfig.from_dict(raw)

    def fit(self, reports: Sequence[ReportRecord], volumes: Mapping[str, np.ndarray]) -> "SurvivalVLM":
        reports = check_reports(reports, require_survival=True)
        s1 = self._stage_config(self.pretrain, "Pretrain")
        s2 = self._stage_config(self.finetune, "Finetune")
        templates = self.templates if isinstance(self.templates, list) else load_templates(self.templates)
        questions = [t.question for t in templates]
        qa = QAPairExtractor(templates=templates).fit(reports).transform(reports)
        tokenizer = fit_tokenizer(reports, qa, questions)
        mc = self._model_config(tokenizer.vocab_size, s2)
        vols = check_volumes(volumes, [r.scan_id for r in reports], mc.volume_shape)
        init = Checkpoint(ModelParams.init(mc, self.seed), list(tokenizer.vocab_), questions, stage="Init", seed=self.seed)
        data = build_training_data(reports, qa, visual_tokens_for(init.params, vols), tokenizer, questions)
        ck1, self.pretrain_history_ = run_stage1(data, s1, init)
        self.checkpoint_, self.finetune_history_ = run_stage2(data, s2, ck1)
        self.tokenizer_ = tokenizer
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, threads: int = 1) -> "SurvivalVLM":
        """Wrap a trained checkpoint for prediction only."""
        est = cls(model_config=checkpoint.params.config, seed=checkpoint.seed, threads=threads)
        est.checkpoint_ = checkpoint
        est.tokenizer_ = Tokenizer.from_vocab(checkpoint.vocab)
        est.pretrain_history_ = est.finetune_history_ = []
        return est

    def predict(self, reports: Sequence[ReportRecord], volumes: Mapping[str, np.ndarray]) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        reports = check_reports(reports)
        params = self.checkpoint_.params
        vols = check_volumes(volumes, [r.scan_id for r in reports], params.config.volume_shape)
        qids = [self.tokenizer_.encode_question(q) for q in self.checkpoint_.questions]
        patients = patient_inputs(reports, visual_tokens_for(params, vols), self.tokenizer_)
        return check_risks(predict_risks(params, patients, qids, self.threads), len(reports))

    def score(self, reports: Sequence[ReportRecord], volumes: Mapping[str, np.ndarray]) -> float:
        reports = check_reports(reports, require_survival=True)
        return concordance_index(survival_records(reports), self.predict(reports, volumes))

