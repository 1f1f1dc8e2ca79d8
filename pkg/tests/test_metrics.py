import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from tsubf.losses import LossConfig, sobel_loss
from tsubf.metrics import (REPORT_COLUMNS, EvalReport, LabelVolume, dsc, evaluate_many, hd95, hd95_details, iou,
                           nearest_rank_95, smoothness_score, surface_voxels, surface_voxels_oracle)
from tsubf.tensor import ShapeError, Tensor


def random_mask(rng, shape, density=None):
    density = rng.uniform(0.05, 0.6) if density is None else density
    return rng.random(shape) < density


def blob(rng, shape):
    """Smoothed random field thresholded into a compact-ish mask."""
    field = gaussian_filter(rng.normal(size=shape), 1.5)
    return field > np.quantile(field, rng.uniform(0.4, 0.9))


# ----------------------------------------------------------------- surface

def test_surface_hand_counts():
    assert len(surface_voxels(np.ones((3, 3, 3), bool))) == 26
    one = np.zeros((4, 4, 4), bool)
    one[1, 2, 3] = True
    assert surface_voxels(one).tolist() == [[1, 2, 3]]
    assert len(surface_voxels(np.zeros((3, 3, 3), bool))) == 0


def test_surface_matches_loop(rng):
    for _ in range(5):
        m = random_mask(rng, (8, 8, 8))
        a = {tuple(r) for r in surface_voxels(m)}
        b = {tuple(r) for r in surface_voxels_oracle(m)}
        assert a == b


# ----------------------------------------------------------------- hd95

def test_hd95_examples():
    y = np.zeros((8, 3, 3), int)
    p = np.zeros((8, 3, 3), int)
    y[1, 1, 1] = 1
    p[4, 1, 1] = 1
    assert hd95(y, p, 1) == 3.0
    assert hd95(LabelVolume(y, (0.3, 1, 1)), LabelVolume(p, (0.3, 1, 1)), 1) == pytest.approx(0.9, abs=1e-15)
    assert hd95(y, p, 1, spacing=(0.3, 1, 1), oracle=True) == hd95(y, p, 1, spacing=(0.3, 1, 1))
    assert hd95(y, y, 1) == 0.0


def test_hd95_voxel_units_and_literal_sum():
    y = np.zeros((8, 3, 3), int)
    p = np.zeros((8, 3, 3), int)
    y[1, 1, 1] = 1
    p[4, 1, 1] = 1
    assert hd95(y, p, 1, spacing=(2, 1, 1), units="voxel") == 3.0
    assert hd95(y, p, 1, literal_sum=True) == 6.0


def test_hd95_empty_surfaces():
    empty = np.zeros((4, 4, 4), int)
    some = empty.copy()
    some[1, 1, 1] = 1
    assert hd95_details(empty, empty, 1).value == 0.0
    res = hd95_details(some, empty, 1, spacing=(1, 2, 2))
    assert res.sentinel and res.value == pytest.approx(np.sqrt(16 + 64 + 64))


def test_nearest_rank():
    assert nearest_rank_95(np.arange(1.0, 21.0)) == 19.0  # ceil(0.95 * 20) = 19
    assert nearest_rank_95(np.arange(1.0, 101.0)) == 95.0
    assert nearest_rank_95(np.array([4.0])) == 4.0
    assert nearest_rank_95(np.arange(1.0, 22.0)) == 20.0  # ceil(19.95) = 20


@given(st.integers(0, 2**31 - 1))
def test_hd95_fast_equals_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(3, 13, size=3))
    gen = blob if rng.random() < 0.5 else random_mask
    y, p = gen(rng, shape), gen(rng, shape)
    spacing = tuple(rng.uniform(0.3, 2.0, size=3))
    assert hd95(y, p, spacing=spacing) == hd95(y, p, spacing=spacing, oracle=True)


@given(st.integers(0, 2**31 - 1))
def test_hd95_symmetric(seed):
    rng = np.random.default_rng(seed)
    y, p = blob(rng, (10, 9, 8)), blob(rng, (10, 9, 8))
    assert hd95(y, p) == hd95(p, y)


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.25, 0.5, 2.0, 4.0]))
def test_hd95_spacing_linearity_exact(seed, s):
    rng = np.random.default_rng(seed)
    y, p = blob(rng, (9, 9, 9)), blob(rng, (9, 9, 9))
    base = (0.7, 1.1, 0.3)
    assert hd95(y, p, spacing=tuple(s * b for b in base)) == s * hd95(y, p, spacing=base)
    assert dsc(y, p) == dsc(y, p) and iou(y, p) == iou(y, p)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_hd95_spacing_linearity_general(seed, s):
    rng = np.random.default_rng(seed)
    y, p = blob(rng, (8, 8, 8)), blob(rng, (8, 8, 8))
    assert hd95(y, p, spacing=(s, s, s)) == pytest.approx(s * hd95(y, p), rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.tuples(*[st.integers(0, 3)] * 3))
def test_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    y, p = np.zeros((14, 14, 14), bool), np.zeros((14, 14, 14), bool)
    y[1:9, 1:9, 1:9] = blob(rng, (8, 8, 8))
    p[1:9, 1:9, 1:9] = blob(rng, (8, 8, 8))
    move = lambda m: np.roll(m, shift, axis=(0, 1, 2))  # noqa: E731
    assert hd95(move(y), move(p)) == hd95(y, p)
    assert dsc(move(y), move(p)) == dsc(y, p)
    assert iou(move(y), move(p)) == iou(y, p)


# ----------------------------------------------------------------- overlap

def test_overlap_examples():
    y = np.zeros(300, bool)
    p = np.zeros(300, bool)
    y[:100] = True
    p[50:150] = True
    y, p = y.reshape(10, 10, 3), p.reshape(10, 10, 3)
    assert dsc(y, p) == 0.5
    assert iou(y, p) == pytest.approx(1 / 3)
    assert dsc(y, y) == 1.0 and iou(y, y) == 1.0
    disjoint = np.roll(y, 150)
    assert dsc(y, disjoint) == 0.0 and iou(y, disjoint) == 0.0
    empty = np.zeros_like(y)
    assert dsc(empty, empty) == 1.0 and iou(empty, empty) == 1.0


@given(st.integers(0, 2**31 - 1))
def test_overlap_identity_and_oracle(seed):
    rng = np.random.default_rng(seed)
    y, p = random_mask(rng, (6, 7, 5)), random_mask(rng, (6, 7, 5))
    d, j = dsc(y, p), iou(y, p)
    assert d == dsc(y, p, oracle=True) and j == iou(y, p, oracle=True)
    assert abs(d - 2 * j / (1 + j)) <= 1e-12
    assert d == dsc(p, y) and j == iou(p, y)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# ----------------------------------------------------------------- smoothness

def test_smoothness_examples():
    assert smoothness_score(np.full((5, 5, 5, 2), 0.5)) == 0.0
    ramp = np.broadcast_to(np.linspace(0, 1, 6)[:, None, None], (6, 5, 5))
    p = np.stack([1 - ramp, ramp], axis=-1)
    expected = sobel_loss(Tensor(p), LossConfig(lam=1.0, class_mask=(False, True))).item()
    assert smoothness_score(p) == expected
    assert smoothness_score(p, per_class=True) == [0.0, expected]


def test_smoothness_blurred_step_lower():
    step = np.zeros((12, 12, 12))
    step[6:] = 1
    soft = gaussian_filter(step, 2.0, mode="nearest")
    two = lambda v: np.stack([1 - v, v], -1)  # noqa: E731
    assert smoothness_score(two(soft)) < smoothness_score(two(step))


# ----------------------------------------------------------------- reports

def _pairs(rng, n):
    items = []
    for i in range(n):
        y = LabelVolume(blob(rng, (8, 8, 8)).astype(int))
        p = LabelVolume(blob(rng, (8, 8, 8)).astype(int))
        items.append((f"v{i}", y, p, None))
    return items


def test_report_self_evaluation(rng):
    items = [(vid, y, y, None) for vid, y, _, _ in _pairs(rng, 3)]
    rep = evaluate_many(items, 2)
    for r in rep.volume_rows:
        assert (r.hd95, r.iou, r.dsc) == (0.0, 1.0, 1.0)
    assert rep.mean("dsc") == 1.0


def test_report_parallel_matches_serial(rng):
    items = _pairs(rng, 6)
    assert evaluate_many(items, 2, workers=4).to_csv() == evaluate_many(items, 2).to_csv()


def test_report_error_rows(rng):
    items = _pairs(rng, 2) + [("broken", FileNotFoundError("label missing"), None, None)]
    rep = evaluate_many(items, 2)
    assert rep.failed
    assert [r.volume_id for r in rep.volume_rows] == ["v0", "v1", "broken"]
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert "label missing" in lines[3]
    summary = rep.summary()
    assert summary["volumes"] == 3 and len(summary["errors"]) == 1


def test_report_oracle_mode_agrees(rng):
    items = _pairs(rng, 3)
    assert evaluate_many(items, 2, oracle=True).to_csv() == evaluate_many(items, 2).to_csv()


def test_empty_report():
    assert EvalReport().to_csv().strip() == ",".join(REPORT_COLUMNS)
