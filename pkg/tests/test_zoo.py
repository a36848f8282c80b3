import dataclasses
import struct

import numpy as np
import pytest

from kdf import zoo
from kdf.configfile import ConfigError
from kdf.tensor import Tensor

# Frozen reference totals (trainable parameters).
EXPECTED = {
    "resemotenet": 80_238_599,
    "student_a": 20_069_383,
    "student_b": 5_022_215,
    "student_c": 1_259_911,
}


@pytest.fixture(scope="module")
def shells():
    """Uninitialised models: enough for counting, quick to build."""
    return {name: zoo.build(zoo.preset(name), init=False) for name in EXPECTED}


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_reference_totals(name, shells):
    assert zoo.total_parameters(shells[name]).trainable == EXPECTED[name]


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_enumeration_oracle_agrees(name, shells):
    assert zoo.count_by_enumeration(shells[name]) == zoo.total_parameters(shells[name])


def test_toy_count_matches_serialised_tensors():
    model = zoo.build(zoo.TOY_TEACHER)
    n = sum(v.size for v in model.state_dict().values())
    assert zoo.total_parameters(model).total == n


def test_reduction_16_student_c_delta_sits_in_se_row():
    cfg = dataclasses.replace(zoo.STUDENT_C, se_reduction=16)
    report = zoo.inspect(zoo.build(cfg, init=False), EXPECTED["student_c"])
    assert report.delta == -1920
    assert report.rel_error < 0.005
    reference_rows = {r.name: r.trainable for r in zoo.inspect(zoo.build(zoo.STUDENT_C, init=False)).rows}
    differing = [r.name for r in report.rows if r.trainable != reference_rows[r.name]]
    assert differing == ["se"]


def test_sizes():
    teacher = zoo.model_size(EXPECTED["resemotenet"])
    assert teacher.bytes == 320_954_396
    assert round(teacher.mb, 2) == 320.95
    assert round(teacher.mib, 2) == 306.09
    assert round(zoo.model_size(EXPECTED["student_a"]).mib, 2) == 76.56
    assert round(zoo.model_size(EXPECTED["student_b"]).mib, 2) == 19.16


def test_halve_channels_schedules():
    c = zoo.halve_channels(zoo.TEACHER, 8)
    assert c.conv_channels == (8, 16, 32)
    assert c.se_channels == 32
    assert c.residual_channels == (32, 64, 128)
    assert c.head_widths[-1] == 7
    a = zoo.halve_channels(zoo.TEACHER, 2)
    assert a.conv_channels == (32, 64, 128) and a.residual_channels == (128, 256, 512)
    assert zoo.halve_channels(zoo.TEACHER, 1) == zoo.TEACHER


def test_halve_channels_refuses_to_round():
    with pytest.raises(ConfigError, match="not divisible"):
        zoo.halve_channels(zoo.TEACHER, 3)


def test_config_collects_all_problems():
    cfg = dataclasses.replace(zoo.TEACHER, se_channels=100, dropout_rate=1.5)
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert len(info.value.problems) >= 3


def test_config_text_round_trip():
    assert zoo.ModelConfig.from_text(zoo.STUDENT_B.to_text()) == zoo.STUDENT_B


def test_forward_shape_and_inspect_rows():
    model = zoo.build(zoo.STUDENT_C)
    model.eval()
    out = model(Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32)))
    assert out.shape == (2, 7)
    report = zoo.inspect(model)
    assert report.rows[-1].cumulative == EXPECTED["student_c"]
    assert report.rows[-1].output_shape == (7,)
    assert "MATCH" in report.checksum_line()


def test_inspect_prints_delta():
    report = zoo.inspect(zoo.build(zoo.STUDENT_C, init=False), reference=1_000_000)
    assert report.checksum_line().startswith("DELTA")


# -- checkpoints ------------------------------------------------------------------

@pytest.fixture
def toy_model():
    model = zoo.build(zoo.TOY_TEACHER, seed=3)
    model(Tensor(np.random.default_rng(0).random((4, 3, 8, 8), dtype=np.float32)))  # move BN stats
    return model


def test_round_trip_is_byte_identical(toy_model, tmp_path):
    a = zoo.save(toy_model, tmp_path / "a.ckpt")
    b = zoo.save(zoo.load(a), tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_preserves_outputs(toy_model):
    x = Tensor(np.random.default_rng(1).random((2, 3, 8, 8), dtype=np.float32))
    toy_model.eval()
    clone = zoo.loads(zoo.dumps(toy_model))
    np.testing.assert_array_equal(clone(x).data, toy_model(x).data)
    assert clone.config == toy_model.config


def test_truncation_is_reported(toy_model):
    blob = zoo.dumps(toy_model)
    with pytest.raises(zoo.TruncatedPayloadError):
        zoo.loads(blob[:-1])


def test_bad_magic(toy_model):
    blob = zoo.dumps(toy_model)
    with pytest.raises(zoo.CorruptHeaderError):
        zoo.loads(b"XXXX" + blob[4:])


def test_bad_version(toy_model):
    blob = zoo.dumps(toy_model)
    with pytest.raises(zoo.CorruptHeaderError):
        zoo.loads(blob[:4] + struct.pack("<I", 99) + blob[8:])


def test_dimension_mismatch(toy_model):
    # swap in a config whose first conv is wider than the stored tensors
    blob = zoo.dumps(toy_model)
    old = toy_model.config.to_text().encode()
    new = dataclasses.replace(toy_model.config, conv_channels=(24, 32)).to_text().encode()
    patched = blob.replace(struct.pack("<I", len(old)) + old, struct.pack("<I", len(new)) + new)
    assert patched != blob
    with pytest.raises(zoo.DimensionMismatchError):
        zoo.loads(patched)


def test_unknown_preset():
    with pytest.raises(KeyError, match="unknown model"):
        zoo.preset("student_z")
