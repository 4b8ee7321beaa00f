import numpy as np
import pytest

from pumlc import tensor as T
from pumlc.lgconv import (BN_SCALE_INIT, LgConvBlock, global_branch_param_count, iter_blocks,
                          set_global_scale, wrap_model)
from pumlc.nn import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, Sequential, build_model
from pumlc.optim import Adam
from pumlc.tensor import Tape, Tensor, backward


def cnn(rng, channels=(6, 8), in_ch=3):
    return build_model({"kind": "cnn", "channels": list(channels)}, (in_ch, 8, 8), 4, rng)


def rel_sup(a, b):
    return np.abs(a - b).max() / (np.abs(b).max() + 1e-8)


def test_block_init_values():
    rng = np.random.default_rng(0)
    block = LgConvBlock(Conv2d(3, 5, 3, rng), rng)
    assert np.all(block.bn.scale.data == BN_SCALE_INIT)
    assert not block.bn.shift.data.any()


def test_block_output_shape_matches_local_branch():
    rng = np.random.default_rng(1)
    for stride in (1, 2):
        local = Conv2d(3, 5, 3, rng, stride=stride)
        x = Tensor(rng.normal(size=(2, 3, 7, 7)))
        assert LgConvBlock(local, rng)(x).shape == local(x).shape


def test_block_is_nearly_transparent_at_init():
    rng = np.random.default_rng(2)
    local = Conv2d(4, 6, 3, rng)
    block = LgConvBlock(local, rng)
    x = Tensor(rng.normal(size=(3, 4, 6, 6)))
    for mode in (True, False):
        block.train(mode)
        assert rel_sup(block(x).data, local(x).data) <= 1e-3


def test_zero_scale_is_bitwise_transparent():
    rng = np.random.default_rng(3)
    local = Conv2d(4, 6, 3, rng)
    block = LgConvBlock(local, rng)
    block.bn.scale.data[:] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    assert np.array_equal(block(x).data, local(x).data)


def test_attention_maps_are_normalized():
    rng = np.random.default_rng(4)
    block = LgConvBlock(Conv2d(3, 4, 3, rng), rng, heads=2)
    block(Tensor(rng.normal(size=(3, 3, 5, 6))))
    np.testing.assert_allclose(block.last_attention.sum(axis=-1), 1.0, atol=1e-6)
    assert block.last_attention.shape == (3, 2, 30)
    assert np.all((block.last_gate > 0) & (block.last_gate < 1))


def test_channel_mismatch():
    rng = np.random.default_rng(5)
    block = LgConvBlock(Conv2d(3, 4, 3, rng), rng)
    with pytest.raises(ValueError):
        block(Tensor(np.zeros((1, 2, 5, 5))))


def test_only_three_by_three_kernels_are_wrapped():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        LgConvBlock(Conv2d(3, 4, 1, rng), rng)


def test_wrapping_model_without_3x3_convs_changes_nothing():
    rng = np.random.default_rng(7)
    model = Sequential([Conv2d(2, 3, 1, rng), ReLU(), GlobalAvgPool(), Linear(3, 2, rng)])
    wrapped = wrap_model(model, rng)
    assert list(iter_blocks(wrapped)) == []
    assert wrapped.num_parameters() == model.num_parameters()
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    assert np.array_equal(wrapped(x).data, model(x).data)


def test_wrap_preserves_kernels_and_leaves_original_untouched():
    rng = np.random.default_rng(8)
    model = cnn(rng)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    wrapped = wrap_model(model, rng)
    assert all(np.array_equal(model.state_dict()[k], v) for k, v in before.items())
    blocks = list(iter_blocks(wrapped))
    assert len(blocks) == 2
    np.testing.assert_array_equal(blocks[0].local.weight.data, model.layers[0].weight.data)
    assert isinstance(wrapped.layers[1], BatchNorm2d) and isinstance(wrapped.layers[-1], Linear)


def test_parameter_count_formula():
    rng = np.random.default_rng(9)
    model = cnn(rng, channels=(6, 8), in_ch=3)
    wrapped = wrap_model(model, rng, heads=4)
    expected = global_branch_param_count(3, 6, 4) + global_branch_param_count(6, 8, 4)
    assert wrapped.num_parameters() - model.num_parameters() == expected
    # heads=4, 3 input channels -> hidden 4: fuse 6*4+4, heads 4*4, gate 4+1, proj 4*6, bn 12
    assert global_branch_param_count(3, 6, 4) == 28 + 16 + 5 + 24 + 12


def test_wrapped_model_output_is_nearly_unchanged():
    rng = np.random.default_rng(10)
    for _ in range(5):
        model = cnn(rng)
        wrapped = wrap_model(model, rng)
        x = Tensor(rng.normal(size=(4, 3, 8, 8)))
        model.eval(), wrapped.eval()
        assert rel_sup(wrapped(x).data, model(x).data) <= 1e-3
        set_global_scale(wrapped, 0.0)
        assert np.array_equal(wrapped(x).data, model(x).data)


def test_gradients_reach_the_global_branch():
    rng = np.random.default_rng(11)
    wrapped = wrap_model(cnn(rng), rng)
    x = Tensor(rng.normal(size=(4, 3, 8, 8)))
    opt = Adam(wrapped.parameters(), lr=1e-2)
    with Tape():
        backward(T.sum(wrapped(x) * rng.normal(size=(4, 4))))
    block = next(iter_blocks(wrapped))
    for p in (block.fuse.weight, block.attn_heads.weight, block.attn_gate.weight, block.proj.weight,
              block.bn.scale):
        assert p.grad is not None and np.abs(p.grad).max() > 0
    opt.step()


def test_lgconv_cnn_spec():
    rng = np.random.default_rng(12)
    model = build_model({"kind": "cnn", "channels": [4], "lgconv": True, "heads": 2}, (1, 16, 16), 3, rng)
    assert len(list(iter_blocks(model))) == 1
    assert model(Tensor(rng.normal(size=(2, 1, 16, 16)))).shape == (2, 3)
