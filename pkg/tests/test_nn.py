import math

import numpy as np
import pytest

from denoising_ger import checkpoint
from denoising_ger.autodiff import Tensor
from denoising_ger.nn import Adam


def test_warmup_is_linear_then_constant():
    opt = Adam([Tensor(np.zeros(2), requires_grad=True)], lr=1e-3, warmup_steps=100)
    assert opt.current_lr(1) == pytest.approx(1e-5)
    assert opt.current_lr(50) == pytest.approx(5e-4)
    assert opt.current_lr(100) == opt.current_lr(5000) == 1e-3


def test_first_step_moves_by_lr_times_sign():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    opt.step({w: np.array([3.0, -0.2, 0.0])})
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(w.data, [0.9, -1.9, 0.5], atol=1e-7)


def test_clipping_counts_and_scales():
    w = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([w], lr=0.1, clip_norm=1.0)
    assert opt.step({w: np.array([3.0, 4.0])}) == pytest.approx(5.0)
    assert opt.clip_events == 1
    opt.step({w: np.array([0.3, 0.4])})
    assert opt.clip_events == 1


def test_missing_gradient_counts_as_zero():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    Adam([a, b], lr=0.1).step({a: np.ones(2)})
    np.testing.assert_array_equal(b.data, np.ones(2))


def test_state_round_trip_continues_identically():
    def run(split):
        w = Tensor(np.array([0.3, -0.7]), requires_grad=True)
        opt = Adam([w], lr=0.05, warmup_steps=3)
        for i in range(6):
            if i == split:
                state, data = opt.state(), w.data.copy()
                w = Tensor(data, requires_grad=True)
                opt = Adam([w], lr=0.05, warmup_steps=3)
                opt.load_state(state)
            opt.step({w: np.array([math.sin(i), math.cos(i)])})
        return w.data

    np.testing.assert_array_equal(run(split=-1), run(split=3))


def test_checkpoint_round_trip(tmp_path):
    blocks = {"a.w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "scalar": np.array(2.0)}
    checkpoint.save(tmp_path / "m.ckpt", blocks)
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert list(back) == list(blocks)
    for k in blocks:
        np.testing.assert_array_equal(back[k], blocks[k])
        assert back[k].shape == blocks[k].shape


@pytest.mark.parametrize("mangle", [lambda d: b"XXXX" + d[4:], lambda d: d[:-8], lambda d: d + b"\0" * 8,
                                    lambda d: d[:14]])
def test_corrupt_checkpoints_rejected(mangle):
    data = checkpoint.encode({"w": np.ones((2, 2))})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(mangle(data))


def test_missing_checkpoint():
    with pytest.raises(FileNotFoundError):
        checkpoint.load("/nonexistent/model.ckpt")
