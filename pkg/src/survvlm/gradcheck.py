"""Tape gradients against central finite differences.

Each selector builds a small random problem from ``seed``, differentiates it
with the tape and with central differences (step 1e-3, float64) and returns
the relative error ``max|tape - numeric| / max(max|tape|, max|numeric|)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (
    TimeGrid,
    alignment_loss,
    cox_loss,
    deephit_loss,
    dispersion_continuous,
    dispersion_discrete,
    lm_loss,
)
from .model import ModelConfig, ModelParams
from .rng import stream
from .survstats import SurvivalRecord
from .text import SPECIALS, Tokenizer

STEP = 1e-3
SELECTORS = (
    "lm",
    "cox",
    "deephit",
    "dispersion_continuous",
    "dispersion_discrete",
    "alignment",
    "total",
    "total_discrete",
)


def relative_error(tape: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(tape).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
    return float(np.abs(tape - numeric).max(initial=0.0) / scale)


def compare(
    fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    coords_per_array: int | None = None,
    rng: np.random.Generator | None = None,
    step: float = STEP,
) -> float:
    """Relative error of ``fn``'s tape gradient w.r.t. every array.

    With ``coords_per_array`` only that many randomly chosen entries of each
    array are differentiated numerically.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(leaves).backward()
    tape, numeric = [], []
    for k, a in enumerate(arrays):
        grad = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        flat = np.arange(a.size)
        if coords_per_array is not None and a.size > coords_per_array:
            flat = np.sort(rng.choice(a.size, coords_per_array, replace=False))
        for i in flat:
            idx = np.unravel_index(i, a.shape)
            orig = a[idx]
            a[idx] = orig + step
            up = fn([Tensor(x) for x in arrays]).item()
            a[idx] = orig - step
            down = fn([Tensor(x) for x in arrays]).item()
            a[idx] = orig
            numeric.append((up - down) / (2 * step))
            tape.append(grad[idx])
    return relative_error(np.array(tape), np.array(numeric))


def _records(rng, n: int, event_rate: float = 0.6) -> list[SurvivalRecord]:
    times = np.round(rng.uniform(0.5, 10.0, n), 1)
    events = rng.random(n) < event_rate
    events[rng.integers(n)] = True
    return [SurvivalRecord(f"p{i}", float(t), bool(e)) for i, (t, e) in enumerate(zip(times, events))]


def tiny_model_config(head: str = "continuous", vocab_size: int = 16) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_text=8, d_vis=4, n_layers=1, n_heads=2, d_ff=16, max_len=40,
        volume_shape=(8, 8, 2), encoder_strides=((2, 2, 2), (2, 2, 1)), encoder_channels=(4, 4),
        head=head, k_bins=3,
    )


def _total_problem(seed: int, head: str):
    from .train import PatientExample, TrainConfig, TrainingData, default_sigma, stage2_batch_loss
    from .dataprep import build_time_grid

    rng = stream(seed, f"gradcheck/total_{head}")
    words = [f"w{i}" for i in range(12)]
    tok = Tokenizer.from_vocab(list(SPECIALS) + words)
    cfg = tiny_model_config(head, tok.vocab_size)
    params = ModelParams.init(cfg, seed)
    for g in ("adaptor", f"head_{head}"):
        for a in params.groups[g].values():
            a[...] = rng.standard_normal(a.shape) * 0.5
    # unit-scale embeddings: the 0.02 init gives layer norms tiny input
    # variance and curvature that swamps a 1e-3 difference step
    for k in ("tok_emb", "pos_emb"):
        params.groups["decoder"][k][...] = rng.standard_normal(params.groups["decoder"][k].shape)
    n = 6
    while True:
        records = _records(rng, n, 0.7)
        if len({r.time for r in records if r.event}) >= cfg.k_bins:
            grid = build_time_grid(records, cfg.k_bins)
            if grid.K == cfg.k_bins:
                break
    examples = [
        PatientExample(
            scan_id=r.patient_id,
            z_v=rng.standard_normal((cfg.n_visual_tokens, cfg.d_vis)),
            clinical_ids=[int(x) for x in rng.integers(4, tok.vocab_size, 3)],
            answers={0: [int(x) for x in rng.integers(4, tok.vocab_size, 3)] + [tok.eoa_id]},
            record=r,
        )
        for r in records
    ]
    data = TrainingData(tok, ["w1 w2 w3"], examples)
    config = TrainConfig(stage="Finetune", head=head.capitalize(), k_bins=cfg.k_bins)
    grid = grid if head == "discrete" else None
    sigma = default_sigma(records) if head == "continuous" else None
    pairs = [(i, 0) for i in range(n)]
    trainable = ["decoder", "adaptor", f"head_{head}"]
    names = [(g, k) for g in trainable for k in params.groups[g]]
    arrays = [params.groups[g][k] for g, k in names]

    def fn(ts):
        w = {g: {k: Tensor(a) for k, a in arrs.items()} for g, arrs in params.groups.items()}
        for (g, k), t in zip(names, ts):
            w[g][k] = t
        return stage2_batch_loss(w, data, pairs, config, cfg, grid, sigma).graph

    return fn, arrays, rng


def gradcheck(selector: str, seed: int) -> float:
    """Max relative error between tape and finite-difference gradients."""
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; choose from {SELECTORS}")
    if selector.startswith("total"):
        fn, arrays, rng = _total_problem(seed, "discrete" if selector == "total_discrete" else "continuous")
        return compare(fn, arrays, coords_per_array=2, rng=rng)
    rng = stream(seed, f"gradcheck/{selector}")
    if selector == "lm":
        L, V = int(rng.integers(2, 7)), int(rng.integers(2, 12))
        targets = rng.integers(0, V, L)
        mask = rng.random(L) < 0.6
        mask[rng.integers(L)] = True
        return compare(lambda t: lm_loss(t[0], targets, mask), [rng.standard_normal((L, V)) * 2])
    if selector == "cox":
        records = _records(rng, int(rng.integers(2, 12)))
        return compare(lambda t: cox_loss(t[0], records), [rng.standard_normal(len(records))])
    if selector == "deephit":
        n, K = int(rng.integers(1, 8)), int(rng.integers(2, 6))
        records = _records(rng, n)
        grid = TimeGrid(tuple(np.concatenate([[0.0], np.sort(rng.uniform(0.5, 9.5, K - 1)), [10.0]])))
        return compare(lambda t: deephit_loss(ad.softmax(t[0], axis=-1), records, grid), [rng.standard_normal((n, K))])
    if selector == "dispersion_continuous":
        M, D = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        times = rng.uniform(0.0, 10.0, M)
        sigma = float(rng.uniform(0.5, 5.0))
        return compare(lambda t: dispersion_continuous(t[0], times, sigma), [rng.standard_normal((M, D))])
    if selector == "dispersion_discrete":
        K, D = int(rng.integers(2, 6)), int(rng.integers(1, 6))
        tau = float(rng.uniform(0.2, 2.0))
        return compare(lambda t: dispersion_discrete(t[0], tau), [rng.standard_normal((K, D))])
    D = int(rng.integers(1, 17))
    return compare(lambda t: alignment_loss(t[0], t[1]), [rng.standard_normal(D), rng.standard_normal(D)])
