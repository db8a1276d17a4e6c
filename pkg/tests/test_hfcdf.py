import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denoising_ger import hfcdf
from denoising_ger.autodiff import ShapeError, Tensor, grad_check_leaves, ops
from denoising_ger.hfcdf import FusionConfig
from denoising_ger.nn import ParamSet

RNG = np.random.default_rng(0)


def rand(*shape):
    return Tensor(RNG.normal(size=shape))


def test_k_zero_takes_acoustic_side():
    x, y = rand(3, 4), rand(3, 4)
    xc, yc = hfcdf.compensate(x, y, FusionConfig(k=0.0))
    np.testing.assert_array_equal(xc.data, x.data)
    np.testing.assert_allclose(yc.data, x.data, atol=1e-15)


def test_k_one_takes_text_side():
    x, y = rand(3, 4), rand(3, 4)
    xc, yc = hfcdf.compensate(x, y, FusionConfig(k=1.0))
    np.testing.assert_allclose(xc.data, y.data, atol=1e-15)
    np.testing.assert_array_equal(yc.data, y.data)


def test_hand_example_k_07():
    xc, yc = hfcdf.compensate(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), FusionConfig(k=0.7))
    np.testing.assert_allclose(xc.data, [[0.3, 0.7]], atol=1e-15)
    np.testing.assert_allclose(yc.data, [[0.3, 0.7]], atol=1e-15)


def test_variant_mode_keeps_streams_apart():
    x, y = rand(5, 4), rand(5, 4)
    xc, yc = hfcdf.compensate(x, y, FusionConfig(k_a=0.7, k_t=0.3, paper_mode=False))
    assert np.abs(xc.data - yc.data).max() > 1e-3


def test_variant_with_equal_strengths_matches_paper_mode():
    x, y = rand(5, 4), rand(5, 4)
    a = hfcdf.compensate(x, y, FusionConfig(k_a=0.4, k_t=0.4, paper_mode=False))
    b = hfcdf.compensate(x, y, FusionConfig(k=0.4))
    for u, v in zip(a, b):
        np.testing.assert_allclose(u.data, v.data, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
def test_paper_mode_streams_coincide(k, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    xc, yc = hfcdf.compensate(x, y, FusionConfig(k=k))
    assert np.abs(xc.data - yc.data).max() <= 1e-12


def test_config_range_checked():
    with pytest.raises(ValueError):
        FusionConfig(k=1.2)
    with pytest.raises(ValueError):
        FusionConfig(k_t=-0.1)


def test_equal_similarities_give_half():
    v = rand(4, 3)
    assert hfcdf.dynamic_weight(v, v, rand(4, 3)).item() == pytest.approx(0.5, abs=1e-15)


def _unit_rows(n, cos_a, cos_t):
    """Streams whose row cosines with the target e1 are cos_a and cos_t."""
    def row(c):
        return [c, math.sqrt(max(0.0, 1 - c * c))]
    target = np.tile([1.0, 0.0], (n, 1))
    return np.tile(row(cos_a), (n, 1)), np.tile(row(cos_t), (n, 1)), target


def test_mu_for_ra_1_rt_0():
    x, y, t = _unit_rows(3, 1.0, 0.0)
    assert hfcdf.dynamic_weight(x, y, t).item() == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert round(hfcdf.dynamic_weight(x, y, t).item(), 4) == 0.7311


def test_mu_complement():
    x, y, t = _unit_rows(3, 0.0, 1.0)
    assert round(hfcdf.dynamic_weight(x, y, t).item(), 4) == 0.2689
    a = hfcdf.dynamic_weight(x, y, t).item()
    b = hfcdf.dynamic_weight(y, x, t).item()
    assert a + b == pytest.approx(1.0, abs=1e-15)


def test_similarity_mask_ignores_padding_rows():
    x, y, t = RNG.normal(size=(2, 4, 3)), RNG.normal(size=(2, 4, 3)), RNG.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1.0]])
    ra, _ = hfcdf.similarity_scores(x, y, t, mask)
    ra0, _ = hfcdf.similarity_scores(x[0, :2], y[0, :2], t[0, :2])
    assert ra.data[0] == pytest.approx(ra0.item(), abs=1e-14)
    x2 = x.copy()
    x2[0, 2:] = 99.0
    assert hfcdf.similarity_scores(x2, y, t, mask)[0].data[0] == ra.data[0]


def test_zero_norm_rows_score_zero():
    x = np.zeros((2, 3))
    ra, rt = hfcdf.similarity_scores(x, np.ones((2, 3)), np.ones((2, 3)))
    assert ra.item() == 0.0 and rt.item() == pytest.approx(1.0)


def test_length_mismatch_truncates_with_warning(caplog):
    with caplog.at_level("WARNING"):
        xc, _ = hfcdf.compensate(rand(5, 3), rand(4, 3), FusionConfig())
    assert xc.shape == (4, 3)
    assert "truncating" in caplog.text


def test_width_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError):
        hfcdf.compensate(rand(4, 3), rand(4, 2), FusionConfig())


def test_symmetric_fuse():
    v = rand(3, 4)
    out = hfcdf.fuse(v, v, 0.5).x_mmc.data
    np.testing.assert_allclose(out, np.concatenate([0.5 * v.data, 0.5 * v.data], axis=-1))


def test_first_half_is_mu_times_acoustic():
    x, y = rand(3, 4), rand(3, 4)
    out = hfcdf.fuse(x, y, 0.3).x_mmc.data
    np.testing.assert_array_equal(out[:, :4], 0.3 * x.data)


def test_fuse_homogeneous():
    x, y = rand(3, 4), rand(3, 4)
    a = hfcdf.fuse(x, y, 0.42).x_mmc.data
    b = hfcdf.fuse(ops.scale(x, 2.0), ops.scale(y, 2.0), 0.42).x_mmc.data
    np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


def test_fuse_batched_mu_and_range():
    x, y = rand(2, 3, 4), rand(2, 3, 4)
    out = hfcdf.fuse(x, y, np.array([0.2, 0.9])).x_mmc.data
    np.testing.assert_allclose(out[1, :, :4], 0.9 * x.data[1])
    with pytest.raises(ValueError):
        hfcdf.fuse(x, y, 1.0)


def test_add_with_zero_text_is_acoustic():
    x = rand(3, 4)
    np.testing.assert_array_equal(hfcdf.baseline_fusions(x, np.zeros((3, 4)), hfcdf.ADD).data, x.data)


def test_concat_width():
    assert hfcdf.baseline_fusions(rand(3, 4), rand(3, 4), hfcdf.CONCAT).shape == (3, 8)


def test_linguistic_only_ignores_acoustic():
    y = rand(3, 4)
    a = hfcdf.baseline_fusions(rand(3, 4), y, hfcdf.LINGUISTIC_ONLY).data
    b = hfcdf.baseline_fusions(rand(3, 4), y, hfcdf.LINGUISTIC_ONLY).data
    np.testing.assert_array_equal(a, b)


def test_transformer_baseline_starts_at_text_stream():
    p = ParamSet()
    hfcdf.add_mixer_params(p, np.random.default_rng(0), 4)
    y = rand(3, 4)
    out = hfcdf.baseline_fusions(rand(5, 4)[:3], y, hfcdf.TRANSFORMER, p)
    np.testing.assert_allclose(out.data, y.data)
    with pytest.raises(ValueError):
        hfcdf.baseline_fusions(rand(3, 4), y, hfcdf.TRANSFORMER)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        hfcdf.baseline_fusions(rand(3, 4), rand(3, 4), "gated")


def test_slot_layouts():
    x, y, t = rand(3, 4), rand(3, 4), rand(3, 4)
    cfg = FusionConfig()
    lin, mu = hfcdf.fusion_slots(x, y, hfcdf.LINGUISTIC_ONLY, cfg, t)
    assert mu is None
    np.testing.assert_array_equal(lin.data[:, :4], 0)
    np.testing.assert_array_equal(lin.data[:, 4:], y.data)
    ac, _ = hfcdf.fusion_slots(x, y, hfcdf.ACOUSTIC_ONLY, cfg, t)
    np.testing.assert_array_equal(ac.data[:, 4:], 0)
    fused, mu = hfcdf.fusion_slots(x, y, hfcdf.HFCDF, cfg, t)
    assert mu.item() == pytest.approx(0.5)
    fixed, mu = hfcdf.fusion_slots(x, y, hfcdf.HFCDF, FusionConfig(paper_mode=False), t, fixed_mu=0.5)
    assert mu.item() == 0.5


def test_composition_gradient():
    x, y, t = (Tensor(RNG.normal(size=(4, 3)), requires_grad=True) for _ in range(3))
    cfg = FusionConfig(paper_mode=False)
    w = RNG.normal(size=(4, 6))

    def f():
        xc, yc = hfcdf.compensate(x, y, cfg)
        return ops.sum(ops.mul(hfcdf.fuse(xc, yc, hfcdf.dynamic_weight(xc, yc, t)).x_mmc, w))

    assert grad_check_leaves(f, [x, y, t]) < 1e-6
