import numpy as np
import pytest

from conftest import GRAD_RTOL, gradcheck_block
from kdf import nn
from kdf.nn import ChannelMismatchError
from kdf.tensor import Tensor

SEEDS = range(20)

BLOCKS = {
    "conv_block": (lambda: nn.ConvBlock(3, 4), (2, 3, 5, 5), True),
    "conv_block_eval": (lambda: nn.ConvBlock(3, 4), (2, 3, 5, 5), False),
    "conv_block_no_bn": (lambda: nn.ConvBlock(3, 4, batchnorm=False), (2, 3, 5, 5), True),
    "se_block": (lambda: nn.SEBlock(4, 2), (2, 4, 3, 3), True),
    "se_block_bias": (lambda: nn.SEBlock(4, 2, bias=True), (2, 4, 3, 3), True),
    "residual_projection": (lambda: nn.ResidualBlock(3, 4, 2), (2, 3, 5, 5), True),
    "residual_identity": (lambda: nn.ResidualBlock(4, 4, 1), (2, 4, 4, 4), True),
    "linear": (lambda: nn.Linear(5, 3), (4, 5), True),
    "conv_pool": (lambda: nn.Sequential(nn.ConvBlock(3, 4), nn.MaxPool2d(2)), (2, 3, 6, 6), True),
    "avgpool_head": (lambda: nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(3, 2)),
                     (2, 3, 4, 4), True),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("block", sorted(BLOCKS))
def test_block_gradients(block, seed):
    make, shape, train = BLOCKS[block]
    result = gradcheck_block(make, shape, seed, train)
    assert result.ok(GRAD_RTOL), result


# -- closed-form counts ---------------------------------------------------------

def test_conv_block_count():
    c = nn.ConvBlock(3, 64).parameter_count()
    assert c.total == 64 * 27 + 64 + 4 * 64 == 2048
    assert c.buffers == 128


def test_linear_count():
    assert nn.Linear(512, 7).parameter_count().trainable == 3591


def test_se_counts():
    assert nn.SEBlock(256, 16, bias=True).parameter_count().trainable == 8464
    assert nn.SEBlock(256, 16).parameter_count().trainable == 8192


def test_se_hidden_never_zero():
    assert nn.SEBlock(8, 16).hidden == 1


# -- behaviour --------------------------------------------------------------------

def test_se_zero_excite_halves_input(rng):
    se = nn.SEBlock(4, 2, bias=True)
    nn.kaiming_init(se, rng)
    se.excite.weight.data[:] = 0
    se.excite.bias.data[:] = 0
    x = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(se(Tensor(x)).data, 0.5 * x, rtol=1e-6)


@pytest.mark.parametrize("train", [True, False])
def test_residual_zero_main_path_is_identity(train, rng):
    block = nn.ResidualBlock(4, 4, 1)
    block.train(train)
    for name, p in block.named_parameters():
        if "bn" not in name:
            p.data[:] = 0
    x = np.abs(rng.normal(size=(2, 4, 5, 5))).astype(np.float32)
    np.testing.assert_allclose(block(Tensor(x)).data, x, atol=1e-6)


def test_residual_projection_shapes():
    block = nn.ResidualBlock(8, 16, 2)
    assert block.output_shape((8, 9, 9)) == (16, 5, 5)
    assert block(Tensor(np.zeros((1, 8, 9, 9)))).shape == (1, 16, 5, 5)


def test_channel_mismatch_names_block():
    with pytest.raises(ChannelMismatchError, match="expected 4.*got 3|4.*3"):
        nn.SEBlock(4)(Tensor(np.zeros((1, 3, 2, 2))))


def test_batchnorm_running_stats_update(rng):
    bn = nn.BatchNorm2d(3, momentum=0.1)
    x = rng.normal(loc=2.0, scale=3.0, size=(8, 3, 4, 4)).astype(np.float32)
    bn(Tensor(x))
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * mean, rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, rtol=1e-5)


def test_batchnorm_eval_uses_running_stats(rng):
    bn = nn.BatchNorm2d(2).eval()
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 0.25]
    x = rng.normal(size=(1, 2, 2, 2)).astype(np.float32)
    expected = (x - np.array([1, -1]).reshape(1, 2, 1, 1)) / np.sqrt(np.array([4, 0.25]) + 1e-5).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(bn(Tensor(x)).data, expected, rtol=1e-5)


def test_dropout_identity_in_eval():
    d = nn.Dropout(0.5).eval()
    x = np.ones((4, 10), dtype=np.float32)
    np.testing.assert_array_equal(d(Tensor(x)).data, x)


def test_dropout_preserves_expectation():
    d = nn.Dropout(0.2, seed=3)
    out = d(Tensor(np.ones((200, 500), dtype=np.float32))).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.8)}


def test_state_dict_round_trip(rng):
    a, b = nn.ConvBlock(2, 3), nn.ConvBlock(2, 3)
    nn.kaiming_init(a, rng)
    a(Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32)))
    b.load_state_dict(a.state_dict())
    for (k1, v1), (k2, v2) in zip(a.state_dict().items(), b.state_dict().items()):
        assert k1 == k2
        np.testing.assert_array_equal(v1, v2)


def test_load_state_dict_rejects_wrong_shape():
    a = nn.Linear(3, 2)
    state = a.state_dict()
    state["weight"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(Exception, match="weight"):
        a.load_state_dict(state)


def test_kaiming_scale():
    conv = nn.Conv2d(64, 128, 3)
    nn.kaiming_init(conv, np.random.default_rng(0))
    assert conv.weight.data.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.02)
    assert not conv.bias.data.any()
