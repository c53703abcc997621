import math

import numpy as np
import pytest

import gradcheck
from routerank import nncore as nn


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_gradients(name):
    rng = np.random.default_rng([7, len(name)])
    assert max(gradcheck.CHECKS[name](rng) for _ in range(20)) <= 1e-4


def test_dense_identity(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(nn.dense_forward(np.eye(4), np.zeros(4), x)[0], x)


def test_dense_shape_error():
    with pytest.raises(ValueError):
        nn.dense_forward(np.zeros((3, 2)), np.zeros(2), np.zeros((1, 4)))


def test_sigmoid_values():
    assert nn.sigmoid(np.array([0.0]))[0] == 0.5
    big = nn.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[1] == 1.0


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 5, 3))
    K = np.zeros((3, 3, 3))
    K[1] = np.eye(3)
    assert np.array_equal(nn.conv1d_forward(K, np.zeros(3), x)[0], x)


def test_conv_single_link(rng):
    x = rng.normal(size=(1, 1, 2))
    K = rng.normal(size=(3, 2, 4))
    y = nn.conv1d_forward(K, np.zeros(4), x)[0]
    assert np.allclose(y[0, 0], x[0, 0] @ K[1], rtol=0, atol=1e-15)


def test_conv_taps_direction():
    x = np.zeros((1, 3, 1))
    x[0, 0, 0] = 1.0
    K = np.zeros((3, 1, 1))
    K[0] = 1.0  # reads the previous link
    y = nn.conv1d_forward(K, np.zeros(1), x)[0]
    assert y[0, :, 0].tolist() == [0.0, 1.0, 0.0]


def test_residual_zero_tail_is_identity(rng):
    x = rng.normal(size=(2, 6, 4))
    p = {"K1": rng.normal(size=(3, 4, 4)), "b1": rng.normal(size=4), "K2": np.zeros((3, 4, 4)), "b2": np.zeros(4)}
    assert np.array_equal(nn.residual_block_forward(p, x)[0], x)


def test_receptive_field():
    assert nn.receptive_field(20) == 13
    assert nn.blocks_for_depth(20) == 3 and nn.blocks_for_depth(50) == 8
    with pytest.raises(ValueError):
        nn.blocks_for_depth(34)


def test_receptive_field_by_perturbation(rng):
    M, C, i = 21, 3, 10
    blocks = [
        {k: rng.normal(size=s) for k, s in (("K1", (3, C, C)), ("b1", (C,)), ("K2", (3, C, C)), ("b2", (C,)))}
        for _ in range(3)
    ]

    def run(x):
        for p in blocks:
            x = nn.residual_block_forward(p, x)[0]
        return x[0, i]

    x = rng.normal(size=(1, M, C))
    base = run(x)
    for j in range(M):
        y = x.copy()
        y[0, j] += 5.0
        if abs(i - j) > 6:
            assert np.array_equal(run(y), base)
    y = x.copy()
    y[0, i + 6] += 5.0
    assert not np.array_equal(run(y), base)


def test_sum_pool_all_masked(rng):
    x = rng.normal(size=(2, 4, 3))
    assert np.array_equal(nn.sum_pool_forward(x, np.zeros((2, 4)))[0], np.zeros((2, 3)))


def test_cross_layer_cases():
    x0 = np.array([[1.0, 2.0]])
    assert nn.cross_forward(np.eye(2), np.zeros(2), x0, x0)[0].tolist() == [[2.0, 6.0]]
    x = np.array([[3.0, -1.0]])
    assert np.array_equal(nn.cross_forward(np.zeros((2, 2)), np.zeros(2), x0, x)[0], x)


def test_exp_decay():
    assert nn.exp_decay(0) == 0.001
    assert nn.exp_decay(1000) == pytest.approx(0.0009, rel=1e-12)


def test_bce_values():
    assert nn.bce_loss([0.5], [1.0]) == pytest.approx(math.log(2), abs=1e-12)
    assert nn.bce_loss([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1e-7, rel=1e-3)
    p = 0.3
    both = nn.bce_loss([p, 1 - p], [1.0, 0.0])
    assert both == pytest.approx(-math.log(p), abs=1e-12)
    with pytest.raises(ValueError):
        nn.bce_loss([0.5, 0.5], [1.0])


def test_adam_first_step_moves_by_lr():
    params = nn.ModelParams(w=np.array([1.0, -2.0]))
    state = nn.AdamState.zeros(params)
    nn.adam_step(params, {"w": np.array([0.5, -3.0])}, state, 0.01)
    assert np.allclose(params["w"], [0.99, -1.99], atol=1e-9)


def test_checkpoint_roundtrip(tmp_path, rng):
    params = nn.ModelParams(a=rng.normal(size=(3, 2)), b=rng.normal(size=4))
    adam = nn.AdamState.zeros(params)
    nn.adam_step(params, {"a": np.ones((3, 2)), "b": np.ones(4)}, adam, 0.1)
    nn.save_checkpoint(tmp_path / "c.npz", nn.Checkpoint(params, {"note": "x"}, adam))
    back = nn.load_checkpoint(tmp_path / "c.npz")
    assert back.params.digest() == params.digest()
    assert back.adam.t == 1 and back.adam.m.digest() == adam.m.digest()
    assert back.meta["note"] == "x"


def test_flat_roundtrip(rng):
    params = nn.ModelParams(a=rng.normal(size=(3, 2)), b=rng.normal(size=4))
    assert params.from_flat(params.flat()).digest() == params.digest()
