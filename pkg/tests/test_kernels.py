import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqdet import kernels

from conftest import mc_iou, random_boxes

HAVE_COMPILED = "compiled" in kernels.available_backends()


def test_identical_boxes_iou_one():
    rng = np.random.default_rng(0)
    boxes = random_boxes(rng, 50)
    np.testing.assert_allclose(kernels.iou_pairs(boxes, boxes), 1.0, atol=1e-12)


def test_unit_squares_offset_half():
    a = np.array([[0.0, 0.0, 1.0, 1.0, 0.0]])
    b = np.array([[0.5, 0.0, 1.0, 1.0, 0.0]])
    assert kernels.iou_pairs(a, b)[0] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_symmetry_and_range():
    rng = np.random.default_rng(1)
    a = random_boxes(rng, 200)
    b = random_boxes(rng, 200)
    ab = kernels.iou_pairs(a, b)
    ba = kernels.iou_pairs(b, a)
    np.testing.assert_array_equal(ab, ba)
    assert np.all((ab >= 0.0) & (ab <= 1.0))


def test_degenerate_box_iou_zero():
    a = np.array([[0.0, 0.0, 0.0, 1.0, 0.3]])
    b = np.array([[0.0, 0.0, 1.0, 1.0, 0.0]])
    assert kernels.iou_pairs(a, b)[0] == 0.0


def test_rigid_motion_invariance():
    rng = np.random.default_rng(2)
    a = random_boxes(rng, 100)
    b = random_boxes(rng, 100)
    base = kernels.iou_pairs(a, b)
    for seed in range(3):
        r = np.random.default_rng(seed)
        tx, ty = r.uniform(-20, 20, 2)
        ang = r.uniform(-np.pi, np.pi)
        c, s = np.cos(ang), np.sin(ang)

        def move(boxes):
            out = boxes.copy()
            x, y = boxes[:, 0], boxes[:, 1]
            out[:, 0] = c * x - s * y + tx
            out[:, 1] = s * x + c * y + ty
            out[:, 4] = boxes[:, 4] + ang
            return out

        np.testing.assert_allclose(kernels.iou_pairs(move(a), move(b)), base,
                                   atol=1e-9)


def test_monte_carlo_agreement_small():
    rng = np.random.default_rng(3)
    a = random_boxes(rng, 40, pos=2.0, size_lo=1.0)
    b = a + rng.normal(0.0, 0.8, a.shape)
    b[:, 2:4] = np.abs(b[:, 2:4]) + 1.0
    exact = kernels.iou_pairs(a, b)
    for i in range(len(a)):
        approx = mc_iou(a[i], b[i], 200_000, np.random.default_rng(500 + i))
        assert exact[i] == pytest.approx(approx, abs=1e-3)


def test_iou_matrix_matches_pairs():
    rng = np.random.default_rng(4)
    a = random_boxes(rng, 13)
    b = random_boxes(rng, 7)
    mat = kernels.iou_matrix(a, b)
    for i in range(13):
        row = kernels.iou_pairs(np.repeat(a[i:i + 1], 7, axis=0), b)
        np.testing.assert_allclose(mat[i], row, atol=1e-13)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled backend not built")
def test_backends_agree():
    rng = np.random.default_rng(5)
    a = random_boxes(rng, 500)
    b = a + rng.normal(0.0, 1.0, a.shape)
    b[:, 2:4] = np.abs(b[:, 2:4]) + 0.4
    fast = kernels.iou_pairs(a, b, backend="compiled")
    pure = kernels.iou_pairs(a, b, backend="pure")
    np.testing.assert_allclose(fast, pure, atol=1e-12)
    mf = kernels.iou_matrix(a[:40], b[:60], backend="compiled")
    mp = kernels.iou_matrix(a[:40], b[:60], backend="pure")
    np.testing.assert_allclose(mf, mp, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 4), st.floats(0.2, 4),
       st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_self_iou_and_containment(cx, cy, l, w, yaw, yaw2):
    box = np.array([[cx, cy, l, w, yaw]])
    assert kernels.iou_pairs(box, box)[0] == pytest.approx(1.0, abs=1e-9)
    # a box strictly inside another: iou = area ratio
    inner = np.array([[cx, cy, l / 2, w / 2, yaw]])
    expect = (l / 2 * w / 2) / (l * w)
    assert kernels.iou_pairs(box, inner)[0] == pytest.approx(expect, abs=1e-9)
