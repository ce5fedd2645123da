import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import TINY_VOLUME, _tiny_setup
from survvlm.dataprep import DataError, ReportRecord
from survvlm.estimator import SurvivalVLM
from survvlm.survstats import concordance_index
from survvlm.train import TrainConfig
from survvlm.validation import check_reports, check_risks, check_volume, check_volumes, survival_records

MODEL = dict(d_text=16, d_vis=4, n_layers=1, n_heads=2, d_ff=32, max_len=80, volume_shape=TINY_VOLUME,
             encoder_strides=((2, 2, 2), (2, 2, 1)), encoder_channels=(4, 4))
S1 = TrainConfig(stage="Pretrain", lr_peak=3e-3, warmup_steps=1, total_steps=3, batch_size=4)
S2 = TrainConfig(stage="Finetune", lr_peak=3e-3, warmup_steps=1, total_steps=3, batch_size=8, k_bins=3)


def _report(sid, survival=(1.0, True)):
    return ReportRecord(sid, "Mass in the lobe.", {}, survival)


@pytest.fixture(scope="module")
def fitted():
    cohort = _tiny_setup(24, 0)[0]
    est = SurvivalVLM(model_config=MODEL, pretrain=S1, finetune=S2).fit(cohort.reports, cohort.volumes)
    return est, cohort


class TestValidation:
    def test_reports_ok(self):
        out = check_reports((_report("a"), _report("b")))
        assert [r.scan_id for r in out] == ["a", "b"]

    @pytest.mark.parametrize("bad", [[], "abc", [{"scan_id": "a"}], [_report("a"), _report("a")]])
    def test_reports_bad(self, bad):
        with pytest.raises(DataError):
            check_reports(bad)

    def test_survival_required(self):
        with pytest.raises(DataError, match="no survival"):
            check_reports([_report("a", None)], require_survival=True)
        with pytest.raises(DataError, match="finite"):
            check_reports([_report("a", (float("inf"), True))], require_survival=True)
        check_reports([_report("a", None)])

    def test_volume(self):
        out = check_volume(np.zeros((2, 2, 2), dtype=np.float32), (2, 2, 2))
        assert out.dtype == np.float64
        with pytest.raises(DataError, match="shape"):
            check_volume(np.zeros((2, 2)), (2, 2, 2))
        with pytest.raises(DataError, match="NaN"):
            check_volume(np.full((2, 2, 2), np.nan), (2, 2, 2))

    def test_volumes_missing(self):
        with pytest.raises(DataError, match="no volume"):
            check_volumes({"a": np.zeros((1, 1, 1))}, ["a", "b"], (1, 1, 1))
        with pytest.raises(DataError):
            check_volumes([np.zeros((1, 1, 1))], ["a"], (1, 1, 1))

    def test_risks(self):
        assert_array_equal(check_risks([1, 2], 2), [1.0, 2.0])
        for bad in ([1.0], [[1.0, 2.0]], [1.0, np.nan]):
            with pytest.raises(DataError):
                check_risks(bad, 2)

    def test_survival_records(self):
        recs = survival_records([_report("a", (2.0, False))])
        assert recs[0].patient_id == "a" and recs[0].time == 2.0 and not recs[0].event


class TestSurvivalVLM:
    def test_params_roundtrip(self):
        est = SurvivalVLM(model_config=MODEL, seed=3)
        assert est.get_params()["seed"] == 3
        assert clone(est).get_params()["model_config"] == MODEL

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SurvivalVLM().predict([_report("a")], {})

    def test_fit_shapes(self, fitted):
        est, cohort = fitted
        assert est.checkpoint_.stage == "Finetune" and est.checkpoint_.step == 3
        assert len(est.pretrain_history_) == 3 and len(est.finetune_history_) == 3
        risks = est.predict(cohort.reports, cohort.volumes)
        assert risks.shape == (24,) and np.isfinite(risks).all()

    def test_score_is_c_index(self, fitted):
        est, cohort = fitted
        risks = est.predict(cohort.reports, cohort.volumes)
        assert est.score(cohort.reports, cohort.volumes) == concordance_index(cohort.records, risks)

    def test_predict_order_follows_input(self, fitted):
        est, cohort = fitted
        risks = est.predict(cohort.reports, cohort.volumes)
        rev = est.predict(cohort.reports[::-1], cohort.volumes)
        assert_allclose(rev, risks[::-1], rtol=0, atol=0)

    def test_deterministic_fit(self, fitted):
        est, cohort = fitted
        again = clone(est).fit(cohort.reports, cohort.volumes)
        assert again.checkpoint_.to_bytes() == est.checkpoint_.to_bytes()

    def test_from_checkpoint(self, fitted):
        est, cohort = fitted
        wrapped = SurvivalVLM.from_checkpoint(est.checkpoint_)
        assert_array_equal(wrapped.predict(cohort.reports[:4], cohort.volumes), est.predict(cohort.reports[:4], cohort.volumes))

    def test_wrong_volume_shape(self, fitted):
        est, cohort = fitted
        vols = {k: v[:, :, :4] for k, v in cohort.volumes.items()}
        with pytest.raises(DataError, match="shape"):
            est.predict(cohort.reports, vols)

    def test_stage_mismatch(self):
        cohort = _tiny_setup(24, 0)[0]
        with pytest.raises(ValueError, match="stage"):
            SurvivalVLM(model_config=MODEL, pretrain=S2).fit(cohort.reports, cohort.volumes)

    def test_fit_needs_outcomes(self):
        cohort = _tiny_setup(24, 0)[0]
        reports = [ReportRecord(r.scan_id, r.report_text, r.clinical, None) for r in cohort.reports]
        with pytest.raises(DataError, match="survival"):
            SurvivalVLM(model_config=MODEL).fit(reports, cohort.volumes)
