"""Acceptance criteria 1-10.

Each test prints one ``criterion N: PASS|FAIL ...`` line straight to the
terminal (also under output capture) and then asserts.  Run alone with
``pytest tests/test_acceptance.py``.  Criteria 5 and 6 share one
synthetic run, which takes a few minutes on a laptop CPU.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_data
from survvlm.autodiff import Tensor
from survvlm.cli import main
from survvlm.dataprep import QAPairExtractor, preprocess_volume, word_frequency
from survvlm.gradcheck import SELECTORS, gradcheck
from survvlm.losses import TimeGrid, cox_loss, deephit_loss, dispersion_discrete, lm_loss
from survvlm.model import ModelConfig, ModelParams, PatientInputs, discrete_risk_score, ensemble_predict, predict_prompt
from survvlm.optim import cosine_warmup_lr
from survvlm.rng import stream
from survvlm.survstats import concordance_index, km_estimate, log_rank_test
from survvlm.train import TrainConfig, large_scale_preset, run_stage1, run_stage2
from test_dataprep import FIXTURE
from test_survstats import _cohort, brute_force_cindex, hand_log_rank, random_cohort


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return report


def _digest(params, groups):
    h = hashlib.sha256()
    for g in groups:
        h.update(params.group_bytes(g))
    return h.hexdigest()


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    worst = {}
    for s in SELECTORS:
        worst[s] = max(gradcheck(s, seed) for seed in range(50))
    elapsed = time.perf_counter() - t0
    tol = {s: 1e-3 if s.startswith("total") else 1e-4 for s in SELECTORS}
    ok = all(worst[s] < tol[s] for s in SELECTORS) and elapsed < 120
    detail = ", ".join(f"{s} {worst[s]:.1e}" for s in SELECTORS)
    verdict(1, ok, f"{detail}; {elapsed:.0f} s")


def test_criterion_02_oracles(verdict):
    mismatches = 0
    for seed in range(200):
        rng = stream(seed, "acceptance/cindex")
        n = int(rng.integers(2, 31))
        records = random_cohort(rng, n)
        risks = rng.integers(0, 5, n).astype(float)
        try:
            expected = brute_force_cindex(records, risks)
        except ZeroDivisionError:
            continue
        mismatches += concordance_index(records, risks) != expected
    km_ok = (
        np.allclose(km_estimate(_cohort([1, 2, 3], [1, 1, 1])).values, [2 / 3, 1 / 3, 0], rtol=0, atol=1e-15)
        and len(km_estimate(_cohort([1, 2, 3], [0, 0, 0]))) == 0
        and np.allclose(km_estimate(_cohort([1, 2, 3], [1, 0, 1])).values, [2 / 3, 0], rtol=0, atol=1e-15)
    )
    lr_err = 0.0
    for seed in range(50):
        rng = stream(seed, "acceptance/logrank")
        a = random_cohort(rng, int(rng.integers(2, 15)))
        b = [r.__class__("b" + r.patient_id, r.time, r.event) for r in random_cohort(rng, int(rng.integers(2, 15)))]
        lr_err = max(lr_err, abs(log_rank_test(a, b)[0] - hand_log_rank(a, b)))
    ok = mismatches == 0 and km_ok and lr_err <= 1e-6
    verdict(2, ok, f"c-index mismatches {mismatches}/200, KM examples {'ok' if km_ok else 'wrong'}, log-rank err {lr_err:.1e}")


def test_criterion_03_closed_forms(verdict):
    grid = TimeGrid((0.0, 1.0, 2.0, 3.0, 4.0))
    errors = {
        "cox": cox_loss(Tensor(np.zeros(2)), _cohort([1, 2], [1, 1])).item() - math.log(2) / 2,
        "deephit": deephit_loss(Tensor(np.full((1, 4), 0.25)), _cohort([2.5], [1]), grid).item() - math.log(4),
        "dispersion": dispersion_discrete(Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])), 1.0).item() - (1 - math.log(2)),
        "lm": lm_loss(Tensor(np.zeros((5, 8))), [1, 2, 3, 4, 5], [1] * 5).item() - math.log(8),
    }
    ok = all(abs(e) <= 1e-12 for e in errors.values())
    verdict(3, ok, ", ".join(f"{k} {abs(e):.1e}" for k, e in errors.items()))


def test_criterion_04_freeze(verdict):
    data, init = make_data()
    s1 = TrainConfig(stage="Pretrain", lr_peak=3e-3, warmup_steps=10, total_steps=100, batch_size=4)
    s2 = TrainConfig(stage="Finetune", lr_peak=3e-3, warmup_steps=10, total_steps=100, batch_size=8, k_bins=3)
    frozen1 = ["encoder", "adaptor", "head_continuous", "head_discrete"]
    frozen2 = ["encoder", "projection"]
    ck1, _ = run_stage1(data, s1, init)
    ck2, _ = run_stage2(data, s2, ck1)
    ok1 = _digest(ck1.params, frozen1) == _digest(init.params, frozen1)
    ok2 = _digest(ck2.params, frozen2) == _digest(ck1.params, frozen2)
    moved = _digest(ck1.params, ["decoder"]) != _digest(init.params, ["decoder"])
    moved &= _digest(ck2.params, ["head_continuous"]) != _digest(ck1.params, ["head_continuous"])
    verdict(4, ok1 and ok2 and moved, f"stage 1 frozen {'identical' if ok1 else 'CHANGED'}, "
            f"stage 2 frozen {'identical' if ok2 else 'CHANGED'}, trainable groups {'moved' if moved else 'STUCK'}")


# -- criteria 5 and 6: one synthetic run per head --------------------------------
STAGE1 = {"total_steps": 150, "warmup_steps": 15, "lr_peak": 1e-3, "batch_size": 16}
# alpha 2 rather than the default 0.5: see the README on survival-weight choice
STAGE2 = {"total_steps": 300, "warmup_steps": 20, "lr_peak": 3e-4, "batch_size": 32, "alpha": 2.0}


def _cli(*args):
    code = main([str(a) for a in args])
    if code != 0:
        raise RuntimeError(f"survvlm {args[0]} exited with {code}")


def synthetic_run(root: Path):
    """Synth n=400 at 25% censoring, then both heads end to end; returns metrics and wall time."""
    t0 = time.perf_counter()
    (root / "synth.json").write_text(json.dumps({"n_patients": 400, "censor_rate": 0.25}))
    _cli("synth", "--config", root / "synth.json", "--out", root / "cohort")
    _cli("evaluate", "--risks", root / "cohort" / "oracle_risks.csv", "--data", root / "cohort", "--out", root / "oracle")
    out = {"oracle": json.loads((root / "oracle" / "metrics.json").read_text())}
    for head, extra in (("continuous", {}), ("discrete", {"head": "Discrete", "k_bins": 5})):
        (root / f"s1_{head}.json").write_text(json.dumps({**STAGE1, **extra}))
        (root / f"s2_{head}.json").write_text(json.dumps({**STAGE2, **extra}))
        _cli("pretrain", "--config", root / f"s1_{head}.json", "--data", root / "cohort", "--out", root / f"pre_{head}")
        _cli("finetune", "--config", root / f"s2_{head}.json", "--data", root / "cohort",
             "--checkpoint", root / f"pre_{head}" / "checkpoint.bin", "--out", root / f"fine_{head}")
        _cli("evaluate", "--checkpoint", root / f"fine_{head}" / "checkpoint.bin", "--data", root / "cohort",
             "--max-answer-tokens", 0, "--out", root / f"eval_{head}")
        out[head] = json.loads((root / f"eval_{head}" / "metrics.json").read_text())
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    return synthetic_run(tmp_path_factory.mktemp("synthetic"))


def test_criterion_05_synthetic_recovery(verdict, synthetic):
    ceiling = synthetic["oracle"]["c_index"]
    cont, disc = synthetic["continuous"]["c_index"], synthetic["discrete"]["c_index"]
    ok = ceiling - cont <= 0.10 and ceiling - disc <= 0.12 and synthetic["seconds"] < 900
    verdict(5, ok, f"oracle {ceiling:.4f}, continuous {cont:.4f}, discrete K=5 {disc:.4f}, "
            f"{synthetic['seconds']:.0f} s")


def test_criterion_06_log_rank(verdict, synthetic):
    p = synthetic["continuous"]["log_rank_p"]
    verdict(6, p < 0.01, f"continuous p {p:.2e}, discrete p {synthetic['discrete']['log_rank_p']:.2e}")


def test_criterion_07_ensemble(verdict):
    worst_rep = worst_perm = 0.0
    questions = [[7, 8, 2], [9, 10, 2], [11, 2], [12, 13, 14, 2], [15, 2], [16, 17, 2]]
    for head in ("continuous", "discrete"):
        cfg = ModelConfig(vocab_size=50, d_text=16, d_vis=8, n_layers=2, n_heads=4, d_ff=32, max_len=24,
                          encoder_channels=(4, 4, 8), head=head)
        for seed in range(5):
            params = ModelParams.init(cfg, seed)
            patient = PatientInputs("p", stream(seed, "acceptance/zv").standard_normal((9, 8)), [5, 6])
            q = questions[seed]
            single = predict_prompt(params, patient, q)
            if head == "discrete":
                single = discrete_risk_score(single)
            worst_rep = max(worst_rep, abs(ensemble_predict(params, patient, [q] * 6) - single))
            base = ensemble_predict(params, patient, questions)
            for perm in range(5):
                order = stream(perm, "acceptance/perm").permutation(6)
                worst_perm = max(worst_perm, abs(ensemble_predict(params, patient, [questions[i] for i in order]) - base))
    ok = worst_rep <= 1e-12 and worst_perm == 0.0
    verdict(7, ok, f"six identical prompts err {worst_rep:.1e}, permutation err {worst_perm:.1e}")


def test_criterion_08_scheduler(verdict):
    cfg = large_scale_preset("Pretrain")
    peak, total, warm = cfg.lr_peak, cfg.total_steps, cfg.warmup_steps
    mid = warm + (total - warm) // 2
    errors = [
        cosine_warmup_lr(0, cfg),
        cosine_warmup_lr(500, cfg) - peak,
        cosine_warmup_lr(total, cfg),
        cosine_warmup_lr(mid, cfg) - peak / 2,
    ]
    ok = warm == 500 and (total - warm) % 2 == 0 and all(abs(e) <= 1e-12 for e in errors)
    verdict(8, ok, f"warmup {warm}, max err {max(abs(e) for e in errors):.1e}")


def _full_pipeline(root):
    model = {"d_text": 16, "d_vis": 4, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_len": 80,
             "volume_shape": [12, 12, 8], "encoder_strides": [[2, 2, 2], [2, 2, 1]], "encoder_channels": [4, 4]}
    (root / "model.json").write_text(json.dumps(model))
    (root / "synth.json").write_text(json.dumps({"n_patients": 30, "volume_shape": [12, 12, 8]}))
    (root / "s1.json").write_text(json.dumps({"total_steps": 6, "warmup_steps": 2, "lr_peak": 3e-3, "batch_size": 4}))
    (root / "s2.json").write_text(json.dumps({"total_steps": 6, "warmup_steps": 2, "lr_peak": 3e-3, "batch_size": 8, "k_bins": 3}))
    _cli("synth", "--config", root / "synth.json", "--seed", 11, "--out", root / "cohort")
    _cli("pretrain", "--config", root / "s1.json", "--model-config", root / "model.json", "--seed", 11,
         "--data", root / "cohort", "--out", root / "pre")
    _cli("finetune", "--config", root / "s2.json", "--seed", 11, "--data", root / "cohort",
         "--checkpoint", root / "pre" / "checkpoint.bin", "--out", root / "fine")
    _cli("evaluate", "--checkpoint", root / "fine" / "checkpoint.bin", "--data", root / "cohort",
         "--max-answer-tokens", 6, "--out", root / "eval")
    return [(root / rel).read_bytes() for rel in ("pre/checkpoint.bin", "fine/checkpoint.bin", "eval/metrics.json")]


def test_criterion_09_determinism(verdict, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _full_pipeline(tmp_path / "a"), _full_pipeline(tmp_path / "b")
    same = [x == y for x, y in zip(a, b)]
    verdict(9, all(same), "pretrain checkpoint, finetune checkpoint, metrics.json: "
            + ", ".join("identical" if s else "DIFFERENT" for s in same))


def test_criterion_10_data_pipeline(verdict):
    n_pairs = len(QAPairExtractor().fit(FIXTURE).transform(FIXTURE))
    # hand tally of the two fixture reports after the default stoplist and digit filter
    singles = ("spiculated mass right upper lobe enlarged hilar lymph nodes heart size normal pleural effusion "
               "subcarinal node tumor abuts aorta lytic lesion rib adrenal metastasis suspected").split()
    counts = dict(word_frequency(FIXTURE, top_k=100))
    freq_ok = counts == {"mm": 2, **{w: 1 for w in singles}}
    lo = hi = 0.0
    for seed in range(20):
        raw = stream(seed, "acceptance/hu").standard_normal((7, 6, 5)) * 10.0 ** (seed % 6)
        raw.flat[0], raw.flat[1] = np.finfo(np.float64).max, -np.finfo(np.float64).max
        out = preprocess_volume(raw, (1.0, 1.0, 2.0), target_shape=(6, 6, 4))
        lo, hi = min(lo, out.min()), max(hi, out.max())
    ok = n_pairs == 12 and freq_ok and lo >= -1000.0 and hi <= 1000.0
    verdict(10, ok, f"QA pairs {n_pairs}, word counts {'match' if freq_ok else counts}, HU range [{lo:g}, {hi:g}]")
