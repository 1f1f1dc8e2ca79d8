import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from tsubf import ops
from tsubf.gradcheck import BLOCK_TOL, check_losses
from tsubf.losses import (SOBEL, SOBEL_X_PRINTED, SOBEL_Y_PRINTED, SOBEL_Z_PRINTED, DomainError, LossConfig,
                          dice_ce_loss, loss_components, one_hot, sobel_gradients, sobel_loss, total_loss)
from tsubf.tensor import Tensor

# Reference kernel values, rows written [z][y][x].
REF_X = [[[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], [[-2, 0, 2], [-4, 0, 4], [-2, 0, 2]],
         [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]]
REF_Y = [[[-1, -2, -1], [0, 0, 0], [1, 2, 1]], [[-2, -4, -2], [0, 0, 0], [2, 4, 2]],
         [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]]
REF_Z = [[[1, 2, 1], [2, 4, 2], [1, 2, 1]], [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
         [[-1, -2, -1], [-2, -4, -2], [-1, -2, -1]]]


def sobel_loop(vol, ref):
    """Valid-region response with the kernel read as ref[z][y][x] and the volume as vol[x, y, z]."""
    nx, ny, nz = (n - 2 for n in vol.shape)
    out = np.zeros((nx, ny, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = sum(vol[i + a, j + b, k + c] * ref[c][b][a]
                                   for a in range(3) for b in range(3) for c in range(3))
    return out


def sobel_loss_loop(p, lam, signed=False):
    total = 0.0
    for i in range(p.shape[-1]):
        g = [sobel_loop(p[..., i], ref) for ref in (REF_X, REF_Y, REF_Z)]
        g = [r.mean() if signed else np.abs(r).mean() for r in g]
        total += math.sqrt(sum(v * v for v in g))
    return lam * total


def dice_ce_loop(y, p, eps=1e-5):
    v, l = y.shape
    dice = []
    for c in range(l):
        num = 2 * sum(y[i, c] * p[i, c] for i in range(v))
        den = sum(y[i, c] ** 2 for i in range(v)) + sum(p[i, c] ** 2 for i in range(v)) + eps
        dice.append(num / den)
    ce = -sum(y[i, c] * math.log(p[i, c] + eps) for i in range(v) for c in range(l)) / v
    return 1 - sum(dice) / l + ce


# ----------------------------------------------------------------- kernels

def test_kernels_match_reference_values():
    np.testing.assert_array_equal(SOBEL_X_PRINTED, REF_X)
    np.testing.assert_array_equal(SOBEL_Y_PRINTED, REF_Y)
    np.testing.assert_array_equal(SOBEL_Z_PRINTED, REF_Z)


@pytest.mark.parametrize("axis,k", [(0, SOBEL.hx), (1, SOBEL.hy), (2, SOBEL.hz)])
def test_kernel_identities(axis, k):
    assert k.sum() == 0
    np.testing.assert_array_equal(np.flip(k, axis=axis), -k)
    deriv, smooth = np.array([-1, 0, 1]), np.array([1, 2, 1])
    factors = [smooth, smooth, smooth]
    factors[axis] = deriv
    outer = np.einsum("i,j,k->ijk", *factors)
    sign = -1 if axis == 2 else 1
    np.testing.assert_array_equal(k, sign * outer)


def test_unit_ramp_responses():
    vol = np.broadcast_to(np.arange(7.0)[:, None, None], (7, 6, 5)).copy()
    resp = ops.conv3d(Tensor(vol[..., None]), SOBEL.stacked(np.float64), padding="valid").data
    np.testing.assert_array_equal(resp[..., 0], 32)
    np.testing.assert_array_equal(resp[..., 1], 0)
    np.testing.assert_array_equal(resp[..., 2], 0)
    np.testing.assert_array_equal(resp[..., 0], sobel_loop(vol, REF_X))
    gx, gy, gz = sobel_gradients(Tensor(vol))
    assert (gx.item(), gy.item(), gz.item()) == (32.0, 0.0, 0.0)
    assert sobel_loss(Tensor(vol[..., None]), LossConfig(lam=0.1)).item() == pytest.approx(3.2, abs=1e-12)


def test_z_ramp_sign():
    vol = np.broadcast_to(np.arange(5.0), (5, 5, 5)).copy()
    _, _, gz = sobel_gradients(Tensor(vol), LossConfig(aggregation="signed-mean"))
    np.testing.assert_array_equal(sobel_loop(vol, REF_Z), -32)
    assert gz.item() == -32


def test_impulse_matches_loop_oracle():
    vol = np.zeros((5, 5, 5))
    vol[2, 2, 2] = 1
    resp = ops.conv3d(Tensor(vol[..., None]), SOBEL.stacked(np.float64), padding="valid").data
    for i, ref in enumerate((REF_X, REF_Y, REF_Z)):
        np.testing.assert_array_equal(resp[..., i], sobel_loop(vol, ref))
    for mode in ("absolute-mean", "signed-mean"):
        g = [t.item() for t in sobel_gradients(Tensor(vol), LossConfig(aggregation=mode))]
        ref = [sobel_loop(vol, r) for r in (REF_X, REF_Y, REF_Z)]
        expect = [np.abs(r).mean() if mode == "absolute-mean" else r.mean() for r in ref]
        np.testing.assert_allclose(g, expect, atol=1e-14)


@pytest.mark.parametrize("mode", ["absolute-mean", "signed-mean"])
def test_constant_volume_zero(mode):
    cfg = LossConfig(lam=1.0, aggregation=mode)
    assert [t.item() for t in sobel_gradients(Tensor(np.full((4, 5, 6), 0.75)), cfg)] == [0, 0, 0]
    assert sobel_loss(Tensor(np.full((4, 4, 4, 2), 0.5)), cfg).item() == 0


def test_sobel_loss_matches_loop(rng):
    p = rng.random((5, 4, 6, 2))
    for mode, signed in (("absolute-mean", False), ("signed-mean", True)):
        got = sobel_loss(Tensor(p), LossConfig(lam=0.3, aggregation=mode)).item()
        assert got == pytest.approx(sobel_loss_loop(p, 0.3, signed), abs=1e-12)


@given(st.floats(0, 5), st.integers(0, 2**31 - 1))
def test_lambda_zero_and_linearity(lam, seed):
    p = np.random.default_rng(seed).random((4, 4, 4, 2))
    assert sobel_loss(Tensor(p), LossConfig(lam=0.0)).item() == 0
    base = sobel_loss(Tensor(p), LossConfig(lam=1.0)).item()
    assert sobel_loss(Tensor(p), LossConfig(lam=lam)).item() == pytest.approx(lam * base, rel=1e-12)


@given(st.permutations(range(3)), st.lists(st.booleans(), min_size=3, max_size=3))
def test_class_permutation_invariance(perm, mask):
    p = np.random.default_rng(0).random((4, 5, 4, 3))
    a = sobel_loss(Tensor(p), LossConfig(class_mask=tuple(mask))).item()
    b = sobel_loss(Tensor(p[..., list(perm)]), LossConfig(class_mask=tuple(mask[i] for i in perm))).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_blurred_step_scores_below_hard_step():
    """Step along x in a 12^3 box; the blur tail reaches the edge of the valid region."""
    n = 12
    step = np.zeros((n, n, n))
    step[n // 2:] = 1.0
    blurred = gaussian_filter(step, 2.0, mode="nearest")
    hard = sobel_loss_loop(step[..., None], 1.0)
    soft = sobel_loss_loop(blurred[..., None], 1.0)
    assert soft < hard
    assert sobel_loss(Tensor(step[..., None]), LossConfig(lam=1.0)).item() == pytest.approx(hard, abs=1e-12)
    assert sobel_loss(Tensor(blurred[..., None]), LossConfig(lam=1.0)).item() == pytest.approx(soft, abs=1e-12)


def test_sobel_needs_three_voxels():
    with pytest.raises(DomainError):
        sobel_loss(Tensor(np.zeros((2, 4, 4, 1))))


# ----------------------------------------------------------------- dice + ce

def test_dice_ce_perfect_prediction():
    y = one_hot(np.array([0, 1, 1, 0, 1]), 2, dtype=np.float64)
    val = dice_ce_loss(y, Tensor(y)).item()
    assert abs(val) < 1e-4  # log(1 + eps) makes it slightly negative


def test_dice_ce_uniform_closed_form():
    v = 8
    y = one_hot(np.arange(v) % 2, 2, dtype=np.float64)
    p = Tensor(np.full((v, 2), 0.5))
    eps = 1e-5
    dice = 2 * (v / 2 * 0.5) / (v / 2 + v / 4 + eps)
    expected = (1 - dice) - math.log(0.5 + eps)
    assert dice_ce_loss(y, p).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(1 / 3 + math.log(2), abs=1e-4)
    assert dice_ce_loss(y, p).item() == pytest.approx(dice_ce_loop(y, p.data), abs=1e-12)


def test_dice_ce_matches_loop(rng):
    y = one_hot(rng.integers(0, 3, size=20), 3, dtype=np.float64)
    z = rng.normal(size=(20, 3))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert dice_ce_loss(y, Tensor(p)).item() == pytest.approx(dice_ce_loop(y, p), abs=1e-12)


def test_literal_form_flag():
    y = one_hot(np.array([0, 1]), 2, dtype=np.float64)
    p = np.array([[0.8, 0.2], [0.3, 0.7]])
    eps = 1e-5
    dice = [2 * 0.8 / (1 + 0.64 + 0.09 + eps), 2 * 0.7 / (1 + 0.04 + 0.49 + eps)]
    ylogp = [math.log(0.8 + eps), math.log(0.7 + eps)]
    literal = 1 - sum(d + l for d, l in zip(dice, ylogp))
    assert dice_ce_loss(y, Tensor(p), LossConfig(literal_dice_ce=True)).item() == pytest.approx(literal, abs=1e-12)


def test_negative_probabilities_rejected():
    with pytest.raises(DomainError):
        dice_ce_loss(np.zeros((2, 2)), Tensor(np.array([[-0.1, 1.1], [0.5, 0.5]])))


# ----------------------------------------------------------------- total

def test_lambda_zero_total_is_dice_ce_bitwise(rng):
    y = one_hot(rng.integers(0, 2, size=(6, 6, 6)), 2, dtype=np.float64)
    z = rng.normal(size=(6, 6, 6, 2))
    p = Tensor(np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True))
    total = total_loss(y, p, LossConfig(lam=0.0)).item()
    base = dice_ce_loss(y.reshape(-1, 2), ops.reshape(p, (-1, 2))).item()
    assert np.float64(total).tobytes() == np.float64(base).tobytes()
    t, b, s = loss_components(y, p, LossConfig(lam=0.0))
    assert t is b and s.item() == 0


def test_one_hot_region_boundary():
    lab = np.zeros((8, 8, 8), int)
    y = one_hot(lab, 2, dtype=np.float64)
    total, base, sob = loss_components(y, Tensor(y), LossConfig(lam=0.1))
    assert sob.item() == 0
    # the absent class has dice 0 / eps = 0, so only half of the dice term vanishes
    assert base.item() == pytest.approx(0.5, abs=1e-4)
    lab[4:] = 1
    y = one_hot(lab, 2, dtype=np.float64)
    _, _, sob = loss_components(y, Tensor(y), LossConfig(lam=0.1))
    assert sob.item() > 0


def test_one_hot_bounds():
    with pytest.raises(DomainError):
        one_hot(np.array([0, 2]), 2)
    np.testing.assert_array_equal(one_hot(np.array([True, False]), 2), [[0, 1], [1, 0]])


def test_losses_gradient_finite_differences():
    for r in check_losses(seed=5):
        assert r.max_rel_error < BLOCK_TOL, r
