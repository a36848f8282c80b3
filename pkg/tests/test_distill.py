import math

import numpy as np
import pytest

from kdf import distill
from kdf.configfile import ConfigError
from kdf.distill import DistillConfig, combined_loss, cross_entropy, kl_div_loss, softmax_t
from kdf.tensor import ShapeError, Tensor, check_gradients


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# 64-bit reference evaluations, written independently of the tensor code.
def ref_softmax(z, temp):
    z = np.asarray(z, dtype=np.float64) / temp
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_kl(p, q):
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def ref_ce(z, y, w):
    logp = np.log(ref_softmax(z, 1.0))
    picked = np.array([logp[i, c] for i, c in enumerate(y)])
    wy = np.asarray(w, dtype=np.float64)[y]
    return float(-(wy * picked).sum() / wy.sum())


# -- softmax_T ------------------------------------------------------------------

def test_uniform_logits_give_uniform_rows():
    for temp in (0.5, 1.0, 7.0):
        np.testing.assert_allclose(softmax_t(t64(np.full((2, 7), 3.3)), temp).data, 1 / 7, rtol=1e-12)


def test_temperature_one_is_plain_softmax(rng):
    z = rng.normal(size=(3, 7))
    np.testing.assert_allclose(softmax_t(t64(z), 1.0).data, ref_softmax(z, 1.0), rtol=1e-12)


def test_softmax_t_reference_row():
    got = softmax_t(t64([[2.0, 1.0, 0.0]]), 3.0).data[0]
    e = np.exp((np.array([2.0, 1.0, 0.0]) - 2.0) / 3.0)
    np.testing.assert_allclose(got, e / e.sum(), atol=1e-7)


def test_float32_softmax_t_reference_row():
    got = softmax_t(Tensor([[2.0, 1.0, 0.0]]), 3.0).data[0]
    np.testing.assert_allclose(got, ref_softmax([2.0, 1.0, 0.0], 3.0), atol=1e-7)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_nonpositive_temperature_rejected(temp):
    with pytest.raises(ValueError):
        softmax_t(Tensor([[1.0, 2.0]]), temp)


def test_huge_temperature_flattens(rng):
    z = rng.uniform(-10, 10, size=(20, 7))
    p = softmax_t(t64(z), 1e6).data
    assert (p.max(axis=1) - p.min(axis=1)).max() <= 1e-4


# -- KL -----------------------------------------------------------------------------

def test_kl_self_is_zero(rng):
    p = ref_softmax(rng.normal(size=(5, 7)), 1.0)
    assert abs(kl_div_loss(t64(p), t64(p)).item()) < 1e-10


def test_kl_one_hot_vs_uniform_is_log7():
    p = np.eye(7)[[2]]
    q = np.full((1, 7), 1 / 7)
    assert kl_div_loss(t64(p), t64(q)).item() == pytest.approx(math.log(7), abs=1e-9)


def test_kl_matches_direct_sum(rng):
    p = ref_softmax(rng.normal(size=(6, 7)), 1.0)
    q = ref_softmax(rng.normal(size=(6, 7)), 1.0)
    assert kl_div_loss(t64(p), t64(q)).item() == pytest.approx(ref_kl(p, q), abs=1e-6)


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_div_loss(t64(np.full((2, 7), 1 / 7)), t64(np.full((2, 6), 1 / 6)))


# -- cross-entropy ----------------------------------------------------------------

def test_confident_correct_tends_to_zero():
    z = np.full((2, 7), -50.0)
    z[[0, 1], [3, 5]] = 50.0
    assert cross_entropy(t64(z), np.array([3, 5])).item() < 1e-12


def test_uniform_weights_equal_unweighted(rng):
    z = t64(rng.normal(size=(8, 7)))
    y = rng.integers(0, 7, 8)
    a = cross_entropy(z, y).item()
    b = cross_entropy(z, y, np.full(7, 2.5)).item()
    assert abs(a - b) < 1e-9


def test_weighted_ce_hand_case():
    z = np.array([[2.0, -1.0, 0.5], [0.1, 0.2, 3.0]])
    y = np.array([0, 1])
    w = np.array([0.5, 2.0, 1.0])
    assert cross_entropy(t64(z), y, w).item() == pytest.approx(ref_ce(z, y, w), abs=1e-6)


@pytest.mark.parametrize("labels", [np.array([0, 7]), np.array([-1, 0])])
def test_out_of_range_label(labels):
    with pytest.raises(ValueError, match="outside"):
        cross_entropy(Tensor(np.zeros((2, 7))), labels)


def test_labels_must_be_integers():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 7))), np.array([0.0, 1.0]))


# -- combined ------------------------------------------------------------------

def test_alpha_zero_is_bitwise_weighted_ce(rng):
    z = Tensor(rng.normal(size=(4, 7)))
    zt = Tensor(rng.normal(size=(4, 7)))
    y = rng.integers(0, 7, 4)
    cfg = DistillConfig(temperature=3.0, alpha=0.0, hard_weight=0.7)
    parts = combined_loss(z, zt, y, cfg)
    assert parts.total.data.tobytes() == (cross_entropy(z, y) * 0.7).data.tobytes()
    assert parts.kl == 0.0


def test_identical_networks_have_no_kl(rng):
    z = rng.normal(size=(4, 7))
    parts = combined_loss(t64(z), t64(z), rng.integers(0, 7, 4), DistillConfig())
    assert parts.kl < 1e-10
    assert parts.total.item() == pytest.approx(0.8 * parts.ce, abs=1e-10)


def test_combined_matches_composed_oracle(rng):
    zs, zt = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    y = rng.integers(0, 7, 5)
    w = rng.uniform(0.5, 2.0, 7)
    cfg = DistillConfig(temperature=3.0, alpha=0.2, class_weights=tuple(w))
    expected = 0.8 * ref_ce(zs, y, w) + 0.2 * 9 * ref_kl(ref_softmax(zt, 3), ref_softmax(zs, 3))
    assert combined_loss(t64(zs), t64(zt), y, cfg).total.item() == pytest.approx(expected, abs=1e-6)


def test_independent_hard_weight():
    assert DistillConfig(alpha=0.2).ce_weight == pytest.approx(0.8)
    assert DistillConfig(alpha=0.2, hard_weight=1.0).ce_weight == 1.0


def test_teacher_must_be_detached():
    with pytest.raises(ValueError, match="detached"):
        combined_loss(Tensor(np.zeros((1, 7))), Tensor(np.zeros((1, 7)), requires_grad=True), np.array([0]),
                      DistillConfig())


def test_config_errors_are_collected():
    with pytest.raises(ConfigError) as info:
        DistillConfig(temperature=0, alpha=2, hard_weight=-1).validate()
    assert len(info.value.problems) == 3


# -- gradients (64-bit oracle) --------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 6), rng.integers(2, 8)
    z = t64(rng.normal(size=(n, c)), grad=True)
    y = rng.integers(0, c, n)
    w = rng.uniform(0.2, 3.0, c)
    assert check_gradients(lambda: cross_entropy(z, y, w), [z]).ok(1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_kl_gradient(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 6), rng.integers(2, 8)
    zs = t64(rng.normal(size=(n, c)), grad=True)
    zt = t64(rng.normal(size=(n, c)))
    temp = float(rng.uniform(0.5, 5.0))
    loss = lambda: distill.kl_div_from_log(distill.log_softmax_t(zt, temp), distill.log_softmax_t(zs, temp))
    assert check_gradients(loss, [zs]).ok(1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_combined_gradient(seed):
    rng = np.random.default_rng(seed)
    zs = t64(rng.normal(size=(3, 7)), grad=True)
    zt = t64(rng.normal(size=(3, 7)))
    y = rng.integers(0, 7, 3)
    cfg = DistillConfig(temperature=float(rng.uniform(1, 5)), alpha=float(rng.uniform(0, 1)))
    assert check_gradients(lambda: combined_loss(zs, zt, y, cfg).total, [zs]).ok(1e-4)
