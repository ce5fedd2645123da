import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import make_data
from survvlm.checkpoint import Checkpoint
from survvlm.model import GROUP_ORDER
from survvlm.train import TrainConfig, run_stage1


@pytest.fixture(scope="module")
def trained():
    data, init = make_data()
    cfg = TrainConfig(stage="Pretrain", lr_peak=1e-3, warmup_steps=1, total_steps=2, batch_size=4)
    return run_stage1(data, cfg, init)[0]


class TestCheckpoint:
    def test_byte_exact_roundtrip(self, trained):
        blob = trained.to_bytes()
        again = Checkpoint.from_bytes(blob)
        assert again.to_bytes() == blob
        for g in GROUP_ORDER:
            for k, a in trained.params.groups[g].items():
                assert_array_equal(again.params.groups[g][k], a)
        assert again.optimizer.t == trained.optimizer.t

    def test_header_fields(self, trained):
        blob = trained.to_bytes()
        header = json.loads(blob[: blob.index(b"\n")])
        assert header["format"] == "survvlm-checkpoint" and header["step"] == 2
        assert header["frozen"]["encoder"] and not header["frozen"]["decoder"]
        assert list(header["shapes"]) == sorted(GROUP_ORDER)
        # payload is little-endian float64 in declared group order
        first = trained.params.groups["encoder"]["conv0.w"]
        start = blob.index(b"\n") + 1
        assert_array_equal(np.frombuffer(blob, "<f8", first.size, start).reshape(first.shape), first)

    def test_payload_order_survives_sorted_header(self, trained):
        # names inside a group are not alphabetical; a key-sorted shape map would scramble them
        names = list(trained.params.groups["decoder"])
        assert names != sorted(names)
        again = Checkpoint.from_bytes(trained.to_bytes())
        assert list(again.params.groups["decoder"]) == names

    def test_truncated(self, trained):
        with pytest.raises(ValueError, match="truncated"):
            Checkpoint.from_bytes(trained.to_bytes()[:-8])

    def test_trailing_bytes(self, trained):
        with pytest.raises(ValueError, match="trailing"):
            Checkpoint.from_bytes(trained.to_bytes() + b"\0" * 8)

    def test_not_a_checkpoint(self):
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(b'{"format": "x"}\n')

    def test_save_load(self, trained, tmp_path):
        trained.save(tmp_path / "c.bin")
        assert not (tmp_path / "c.bin.tmp").exists()
        assert Checkpoint.load(tmp_path / "c.bin").to_bytes() == trained.to_bytes()
