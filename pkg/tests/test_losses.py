import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients
from ramnet.losses import (align_log_offset, gradient_matching_loss, label_loss, metrics,
                           scale_invariant_loss, total_sequence_loss)
from ramnet.tensor import Tensor, float64_mode

KX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
KY = KX.T


def naive_grad_loss(residual, mask, scales=4):
    """Loop-based pyramid + Sobel reference for one (H, W) image."""
    r, m = residual.astype(float), mask.astype(bool)
    total = 0.0
    for s in range(scales):
        if s:
            h, w = r.shape
            r = np.array([[r[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(w // 2)] for i in range(h // 2)])
            m = np.array([[m[2 * i:2 * i + 2, 2 * j:2 * j + 2].all() for j in range(w // 2)] for i in range(h // 2)])
        h, w = r.shape
        pad = np.pad(r, 1)
        acc, n = 0.0, 0
        for y in range(1, h - 1):
            for x in range(1, w - 1):
                if not m[y - 1:y + 2, x - 1:x + 2].all():
                    continue
                patch = pad[y:y + 3, x:x + 3]
                acc += abs((patch * KX).sum()) + abs((patch * KY).sum())
                n += 1
        if n:
            total += acc / n
    return total


def t4(a):
    return Tensor(np.asarray(a, dtype=np.float64)[None, None])


# ------------------------------------------------------------------ SI loss

def test_si_zero_and_offset_invariant():
    rng = np.random.default_rng(0)
    gt = rng.uniform(0, 1, (2, 1, 8, 8))
    with float64_mode():
        assert float(scale_invariant_loss(Tensor(gt), gt).data) == 0.0
        assert float(scale_invariant_loss(Tensor(gt + 0.3), gt).data) == pytest.approx(0.0, abs=1e-12)


def test_si_hand_value():
    with float64_mode():
        v = scale_invariant_loss(t4([[0.0, 0.0], [1.0, 1.0]]), np.zeros((1, 1, 2, 2)))
    assert float(v.data) == pytest.approx(0.25, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_si_offset_property(seed, c):
    rng = np.random.default_rng(seed)
    pred, gt = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    mask = rng.random((2, 1, 4, 4)) < 0.7
    mask[:, :, 0, 0] = True
    a = float(scale_invariant_loss(Tensor(pred), gt, mask).data)
    b = float(scale_invariant_loss(Tensor(pred + c), gt, mask).data)
    assert abs(a - b) <= 1e-6 and a >= 0


def test_si_needs_valid_pixels():
    with pytest.raises(ValueError):
        scale_invariant_loss(Tensor(np.ones((1, 1, 2, 2))), np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2), bool))


# ------------------------------------------------------------------ gradient loss

def test_grad_loss_zero_cases():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 1, (1, 1, 16, 16))
    with float64_mode():
        assert float(gradient_matching_loss(Tensor(gt), gt).data) == 0.0
        assert float(gradient_matching_loss(Tensor(gt + 0.7), gt).data) == pytest.approx(0.0, abs=1e-9)


def test_grad_loss_unit_ramp():
    # interior |d/dx| of a unit ramp is 8 at full scale and doubles per level;
    # at 2x2 no pixel has a full 3x3 neighbourhood
    ramp = np.tile(np.arange(16, dtype=float), (16, 1))
    with float64_mode():
        v = float(gradient_matching_loss(t4(ramp), np.zeros((1, 1, 16, 16))).data)
    assert v == pytest.approx(8 + 16 + 32 + 0, abs=1e-9)
    assert v == pytest.approx(naive_grad_loss(ramp, np.ones((16, 16), bool)), abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_grad_loss_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((2, 1, 16, 16))
    mask = rng.random((2, 1, 16, 16)) < 0.9
    with float64_mode():
        v = float(gradient_matching_loss(Tensor(r), np.zeros_like(r), mask).data)
    want = np.mean([naive_grad_loss(r[i, 0], mask[i, 0]) for i in range(2)])
    assert v == pytest.approx(want, abs=1e-5)


def test_grad_loss_shape_errors():
    with pytest.raises(ValueError):
        gradient_matching_loss(Tensor(np.ones((1, 1, 12, 12))), np.ones((1, 1, 12, 12)))
    with pytest.raises(ValueError):
        gradient_matching_loss(Tensor(np.ones((1, 12, 12))), np.ones((1, 12, 12)))


# ------------------------------------------------------------------ gradients of both losses

@pytest.mark.parametrize("loss", [scale_invariant_loss, gradient_matching_loss])
def test_loss_gradients_finite_differences(loss):
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(200 + i)
        gt = rng.uniform(0, 1, (2, 1, 8, 8))
        mask = rng.random((2, 1, 8, 8)) < 0.95
        worst = max(worst, check_gradients(lambda p: loss(p, gt, mask), [rng.uniform(0, 1, (2, 1, 8, 8))], seed=i))
    assert worst <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masking_locality(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(0, 1, (1, 1, 8, 8)), rng.uniform(0, 1, (1, 1, 8, 8))
    mask = rng.random((1, 1, 8, 8)) < 0.8
    mask[0, 0, 2:6, 2:6] = True
    other = np.where(mask, pred, rng.uniform(0, 1, pred.shape))
    gt_other = np.where(mask, gt, rng.uniform(0, 1, gt.shape))
    for fn in (scale_invariant_loss, gradient_matching_loss):
        a = float(fn(Tensor(pred), gt, mask).data)
        b = float(fn(Tensor(other), gt_other, mask).data)
        assert a == b and a >= 0
    ma = metrics(np.exp(pred), np.exp(gt), mask)
    mb = metrics(np.exp(other), np.exp(gt_other), mask)
    assert ma == mb


# ------------------------------------------------------------------ totals

def test_total_loss_weighting():
    si, grad = Tensor(0.2), Tensor(0.4)
    total, s, g = total_sequence_loss([[(si, grad)]])
    assert float(total.data) == pytest.approx(0.3)
    total, _, _ = total_sequence_loss([[(si, grad)], [(Tensor(0.1), Tensor(1.0))]], weight=0.0)
    assert float(total.data) == pytest.approx(0.3)
    dual, _, _ = total_sequence_loss([[(si, grad), (si, grad)]])
    assert float(dual.data) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        total_sequence_loss([])


def test_label_loss_combines_terms():
    rng = np.random.default_rng(3)
    pred, gt = rng.uniform(0, 1, (1, 1, 8, 8)), rng.uniform(0, 1, (1, 1, 8, 8))
    with float64_mode():
        total, si, grad = label_loss(Tensor(pred), gt)
    assert float(total.data) == pytest.approx(float(si.data) + 0.25 * float(grad.data), rel=1e-12)


# ------------------------------------------------------------------ metrics

def test_metric_examples():
    d = np.array([5.0, 10.0, 30.0])
    m = metrics(d, d)
    assert m["abs_rel"] == 0 and m["mean_abs_depth_error"] == 0
    assert metrics(2 * d, d)["abs_rel"] == pytest.approx(1.0)
    m = metrics(np.array([12.0, 50.0]), np.array([10.0, 40.0]), cutoff_m=30)
    assert m["abs_rel"] == pytest.approx(0.2) and m["mean_abs_depth_error"] == pytest.approx(2.0)
    m = metrics(np.array([12.0]), np.array([40.0]), cutoff_m=30)
    assert m == {"abs_rel": None, "mean_abs_depth_error": None}


def test_align_log_offset_is_si_optimal():
    rng = np.random.default_rng(4)
    pred, gt = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
    aligned = align_log_offset(pred, gt)
    assert np.mean(aligned - gt) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(aligned - pred, np.mean(gt - pred))
