import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from survvlm.autodiff import Tensor
from survvlm.model import (
    ModelConfig,
    ModelParams,
    PatientInputs,
    Segment,
    decode,
    discrete_risk_score,
    encode_volume,
    ensemble_predict,
    generate,
    pack_sequence,
    pool_hidden,
    predict_prompt,
    project_visual,
    survival_branch,
)
from survvlm.rng import stream

SMALL = ModelConfig(
    vocab_size=50, d_text=16, d_vis=8, n_layers=2, n_heads=4, d_ff=32, max_len=24, encoder_channels=(4, 4, 8)
)


def _params(head="continuous", seed=3):
    cfg = ModelConfig(**{**SMALL.to_dict(), "head": head})
    return ModelParams.init(cfg, seed)


def _patient(seed=0, clinical=(5, 6)):
    return PatientInputs("p", stream(seed, "test/zv").standard_normal((9, 8)), list(clinical))


QUESTIONS = [[7, 8, 2], [9, 10, 2], [11, 2], [12, 13, 14, 2], [15, 2], [16, 17, 2]]


class TestEncodeVolume:
    def test_default_shape(self):
        cfg = ModelConfig()
        out = encode_volume(ModelParams.init(cfg, 0).tensors()["encoder"], np.zeros(cfg.volume_shape), cfg)
        assert out.shape == (9, 32)

    def test_zero_volume_zero_bias(self):
        p = ModelParams.init(SMALL, 0)
        for a in p.groups["encoder"].values():
            if a.ndim == 1:
                a[...] = 0.0
        out = encode_volume(p.tensors()["encoder"], np.zeros(SMALL.volume_shape), SMALL)
        assert_array_equal(out.data, 0.0)

    def test_slab_permutation_invariance(self):
        # last stride along z is 1 and the grid has 4 slabs of 4 slices
        p = ModelParams.init(SMALL, 0)
        vol = stream(0, "test/vol").uniform(-1000, 1000, SMALL.volume_shape)
        slabs = vol.reshape(24, 24, 4, 4)
        permuted = slabs[:, :, [2, 0, 3, 1], :].reshape(24, 24, 16)
        enc = p.tensors()["encoder"]
        assert_array_equal(encode_volume(enc, vol, SMALL).data, encode_volume(enc, permuted, SMALL).data)

    def test_indivisible_shape(self):
        cfg = ModelConfig(volume_shape=(24, 24, 15))
        with pytest.raises(ValueError, match="divisible"):
            encode_volume(ModelParams.init(ModelConfig(), 0).tensors()["encoder"], np.zeros((24, 24, 15)), cfg)


class TestProjection:
    def test_identity(self):
        z = stream(0, "test/proj").standard_normal((9, 8))
        assert_array_equal(project_visual(Tensor(z), Tensor(np.eye(8))).data, z)

    def test_zero(self):
        z = stream(0, "test/proj").standard_normal((9, 8))
        assert_array_equal(project_visual(Tensor(z), Tensor(np.zeros((16, 8)))).data, 0.0)

    def test_matches_triple_loop(self):
        rng = stream(1, "test/proj")
        z, w = rng.standard_normal((9, 8)), rng.standard_normal((16, 8))
        expect = [[sum(w[d, k] * z[p, k] for k in range(8)) for d in range(16)] for p in range(9)]
        assert_allclose(project_visual(Tensor(z), Tensor(w)).data, expect, rtol=1e-12, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            project_visual(Tensor(np.zeros((9, 8))), Tensor(np.zeros((16, 7))))


class TestPackSequence:
    emb = Tensor(np.arange(50 * 16, dtype=float).reshape(50, 16))
    h_v = Tensor(np.full((9, 16), -1.0))

    def test_lengths(self):
        seq = pack_sequence([], self.h_v, [1, 2, 3, 4, 5], [6, 7, 8], self.emb)
        assert len(seq) == 17 and seq.loss_mask.sum() == 3
        assert Segment.CLINICAL not in seq.segments
        seq = pack_sequence(list(range(10, 22)), self.h_v, [1, 2, 3, 4, 5], [6, 7, 8], self.emb)
        assert len(seq) == 29

    def test_segments_and_mask(self):
        seq = pack_sequence([10, 11], self.h_v, [1, 2], [3], self.emb)
        order = [s for i, s in enumerate(seq.segments) if i == 0 or seq.segments[i - 1] is not s]
        assert order == [Segment.CLINICAL, Segment.IMAGE, Segment.QUESTION, Segment.ANSWER]
        assert_array_equal(seq.loss_mask, [s is Segment.ANSWER for s in seq.segments])
        assert_array_equal(seq.embeddings.data[2:11], -1.0)  # visual tokens, not embeddings
        assert_array_equal(seq.embeddings.data[0], self.emb.data[10])

    def test_inference_mode(self):
        seq = pack_sequence([], self.h_v, [1, 2], [], self.emb)
        assert not seq.loss_mask.any() and seq.prompt_length == len(seq)

    def test_out_of_vocab(self):
        with pytest.raises(ValueError):
            pack_sequence([], self.h_v, [50], [], self.emb)


class TestDecode:
    def _seq(self, w, answer=(11, 3)):
        h_v = Tensor(stream(0, "golden").standard_normal((9, 16)) * 0.1)
        return pack_sequence([5, 6, 7], h_v, [8, 9, 10], list(answer), w["decoder"]["tok_emb"])

    def test_causality_on_append(self):
        p = _params()
        w = p.tensors()
        _, short = decode(w["decoder"], self._seq(w, (11,)), p.config)
        _, longer = decode(w["decoder"], self._seq(w, (11, 3, 4)), p.config)
        assert_array_equal(longer.data[: short.shape[0]], short.data)

    def test_perturbing_later_positions(self):
        p = _params()
        w = p.tensors()
        seq = self._seq(w)
        h0, _ = decode(w["decoder"], seq, p.config)
        seq.embeddings.data[10:] += 5.0
        h1, _ = decode(w["decoder"], seq, p.config)
        assert_array_equal(h0.data[:10], h1.data[:10])
        assert not np.array_equal(h0.data[10:], h1.data[10:])

    def test_golden_hidden_state(self):
        p = _params()
        w = p.tensors()
        hidden, logits = decode(w["decoder"], self._seq(w), p.config)
        assert hidden.shape == (17, 16) and logits.shape == (17, 50)
        # recorded once from seed 3
        assert_allclose(np.abs(hidden.data).sum(), 213.3399021494542, rtol=1e-12)

    def test_tied_output(self):
        p = _params()
        w = p.tensors()
        hidden, logits = decode(w["decoder"], self._seq(w), p.config)
        assert_allclose(logits.data, hidden.data @ p.groups["decoder"]["tok_emb"].T, rtol=1e-12, atol=1e-12)


class TestPool:
    def test_single_row(self):
        assert_array_equal(pool_hidden(Tensor(np.array([[1.0, 2.0]]))).data, [1.0, 2.0])

    def test_two_rows(self):
        assert_array_equal(pool_hidden(Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]))).data, [1.0, 1.0])

    def test_column_mean(self):
        h = stream(0, "test/pool").standard_normal((7, 64))
        assert_allclose(pool_hidden(Tensor(h)).data, [sum(h[:, j]) / 7 for j in range(64)], rtol=1e-12)

    def test_padded_batch(self):
        h = stream(1, "test/pool").standard_normal((2, 5, 3))
        out = pool_hidden(Tensor(h), [5, 2]).data
        assert_allclose(out, [h[0].mean(0), h[1, :2].mean(0)], rtol=1e-12)


class TestSurvivalBranch:
    def test_zero_up_is_identity(self):
        p = _params()
        w = p.tensors()
        h = stream(0, "test/branch").standard_normal(16)
        z, _ = survival_branch(w["adaptor"], w["head_continuous"], Tensor(h), "continuous")
        assert_array_equal(z.data, h)

    def test_zero_weight_gives_bias(self):
        p = _params()
        p.groups["head_continuous"]["w"][...] = 0.0
        p.groups["head_continuous"]["b"][...] = 0.7
        w = p.tensors()
        h = stream(0, "test/branch").standard_normal((4, 16))
        _, risk = survival_branch(w["adaptor"], w["head_continuous"], Tensor(h), "continuous")
        assert_array_equal(risk.data, 0.7)

    def test_discrete_zero_logits_uniform(self):
        p = _params("discrete")
        for a in p.groups["head_discrete"].values():
            a[...] = 0.0
        w = p.tensors()
        _, probs = survival_branch(w["adaptor"], w["head_discrete"], Tensor(np.ones(16)), "discrete")
        assert_allclose(probs.data, np.full(5, 0.2), rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_discrete_rows_normalized(self, seed):
        p = _params("discrete", seed)
        w = p.tensors()
        h = stream(seed, "test/branch").standard_normal((6, 16)) * 5
        _, probs = survival_branch(w["adaptor"], w["head_discrete"], Tensor(h), "discrete")
        assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)


class TestDiscreteRiskScore:
    def test_examples(self):
        assert discrete_risk_score([1, 0, 0]) == 3.0
        assert discrete_risk_score([0, 0, 1]) == 1.0
        assert_allclose(discrete_risk_score(np.full(4, 0.25)), 2.5)


class TestEnsemble:
    def test_identical_prompts(self):
        p, pat = _params(), _patient()
        single = predict_prompt(p, pat, QUESTIONS[0])
        assert_allclose(ensemble_predict(p, pat, [QUESTIONS[0]] * 6), single, rtol=0, atol=1e-12)

    def test_order_invariance(self):
        for head in ("continuous", "discrete"):
            p, pat = _params(head), _patient()
            a = ensemble_predict(p, pat, QUESTIONS)
            b = ensemble_predict(p, pat, QUESTIONS[::-1])
            c = ensemble_predict(p, pat, [QUESTIONS[i] for i in (3, 1, 5, 0, 2, 4)])
            assert a == b == c

    def test_mean_of_six(self):
        p, pat = _params(), _patient()
        per = [predict_prompt(p, pat, q) for q in QUESTIONS]
        assert_allclose(ensemble_predict(p, pat, QUESTIONS), math.fsum(per) / 6, rtol=1e-15)

    def test_discrete_averages_probabilities(self):
        # one-hot rows on each of K=6 bins average to uniform: risk 1/6 + 2/6 + ... + 6/6 = 3.5
        cfg = ModelConfig(**{**SMALL.to_dict(), "head": "discrete", "k_bins": 6})
        p = ModelParams.init(cfg, 0)
        pat = _patient()
        probs = np.mean([predict_prompt(p, pat, q) for q in QUESTIONS], axis=0)
        assert_allclose(ensemble_predict(p, pat, QUESTIONS), discrete_risk_score(probs), rtol=1e-12)
        assert_allclose(discrete_risk_score(np.mean(np.eye(6), axis=0)), 3.5)

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            ensemble_predict(_params(), _patient(), QUESTIONS[:5])


class TestGenerate:
    def test_zero_tokens(self):
        assert generate(_params(), _patient(), QUESTIONS[0], 0, eoa_id=3) == []

    def test_forced_argmax(self):
        p = _params()
        # a huge bias on the final layer norm along token 7's embedding makes 7 the argmax everywhere
        emb = p.groups["decoder"]["tok_emb"]
        p.groups["decoder"]["lnf.g"][...] = 0.0
        p.groups["decoder"]["lnf.b"][...] = emb[7] * 100
        assert generate(p, _patient(), QUESTIONS[0], 5, eoa_id=3) == [7] * 5

    def test_stops_at_eoa(self):
        p = _params()
        emb = p.groups["decoder"]["tok_emb"]
        p.groups["decoder"]["lnf.g"][...] = 0.0
        p.groups["decoder"]["lnf.b"][...] = emb[3] * 100
        assert generate(p, _patient(), QUESTIONS[0], 5, eoa_id=3) == []

    def test_deterministic(self):
        p = _params()
        assert generate(p, _patient(), QUESTIONS[1], 6, 3) == generate(p, _patient(), QUESTIONS[1], 6, 3)


class TestParams:
    def test_adaptor_up_zero_and_bottleneck(self):
        p = ModelParams.init(ModelConfig(), 0)
        assert p.groups["adaptor"]["down"].shape == (16, 64)
        assert_array_equal(p.groups["adaptor"]["up"], 0.0)

    def test_init_deterministic(self):
        a, b = ModelParams.init(SMALL, 9), ModelParams.init(SMALL, 9)
        for g in a.groups:
            assert a.group_bytes(g) == b.group_bytes(g)

    def test_bad_head(self):
        with pytest.raises(ValueError):
            ModelConfig(head="cox")
