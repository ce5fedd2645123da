from functools import lru_cache

import pytest

from survvlm.dataprep import QAPairExtractor, SynthCohortConfig, generate_synth_cohort, load_templates
from survvlm.model import ModelConfig, ModelParams, encode_all
from survvlm.train import build_training_data, fit_tokenizer, initial_checkpoint

TINY_VOLUME = (12, 12, 8)


def tiny_config(vocab_size: int, head: str = "continuous", k_bins: int = 3) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_text=16, d_vis=4, n_layers=1, n_heads=2, d_ff=32, max_len=80,
        volume_shape=TINY_VOLUME, encoder_strides=((2, 2, 2), (2, 2, 1)), encoder_channels=(4, 4),
        head=head, k_bins=k_bins,
    )


@lru_cache(maxsize=None)
def _tiny_setup(n_patients: int, seed: int):
    cohort = generate_synth_cohort(SynthCohortConfig(n_patients=n_patients, seed=seed, volume_shape=TINY_VOLUME))
    questions = [t.question for t in load_templates()]
    qa = QAPairExtractor().fit(cohort.reports).transform(cohort.reports)
    tok = fit_tokenizer(cohort.reports, qa, questions)
    return cohort, qa, tok, questions


def make_data(n_patients: int = 24, seed: int = 0, head: str = "continuous", k_bins: int = 3):
    """Small synthetic cohort, its training data and a fresh checkpoint."""
    cohort, qa, tok, questions = _tiny_setup(n_patients, seed)
    cfg = tiny_config(tok.vocab_size, head, k_bins)
    zv = encode_all(ModelParams.init(cfg, seed), cohort.volumes)
    data = build_training_data(cohort.reports, qa, zv, tok, questions)
    return data, initial_checkpoint(data, cfg, seed)


@pytest.fixture
def tiny():
    return make_data()
