import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as nph

from segcal.core import (
    CORRECT, IGNORE, IGNORED, INCORRECT, SegImage, argmax_predict, correctness_mask, pixel_entropy,
    softmax_with_temperature,
)
from segcal.errors import DimensionMismatch, InputError, NonFiniteInput, NonPositiveTemperature

logit_rows = nph.arrays(
    np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
    elements=st.floats(-50, 50, allow_nan=False),
)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax_with_temperature([math.log(3), 0.0]), [0.75, 0.25], atol=1e-15)


def test_softmax_huge_temperature_is_uniform():
    np.testing.assert_allclose(softmax_with_temperature([2.0, 0.0], 1e10), [0.5, 0.5], atol=1e-9)


def test_softmax_symmetric_logits():
    np.testing.assert_allclose(softmax_with_temperature([5.0, 5.0, 5.0], 0.01), [1 / 3] * 3, atol=1e-15)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(t):
    with pytest.raises(NonPositiveTemperature):
        softmax_with_temperature([1.0, 2.0], t)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NonFiniteInput):
        softmax_with_temperature([1.0, bad])


@given(logit_rows, st.floats(0.01, 100))
def test_rows_sum_to_one(z, t):
    p = softmax_with_temperature(z, t)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@given(logit_rows, st.floats(-100, 100), st.floats(0.1, 10))
def test_shift_invariance(z, c, t):
    np.testing.assert_allclose(softmax_with_temperature(z + c, t), softmax_with_temperature(z, t), atol=1e-9)


def _top_gap(z):
    top2 = np.sort(z, axis=-1)[:, -2:]
    return float((top2[:, 1] - top2[:, 0]).min())


@given(logit_rows, st.floats(0.05, 50))
def test_temperature_keeps_argmax(z, t):
    # gaps below float64 resolution after dividing by t collapse into ties
    assume(_top_gap(z) / t > 1e-9)
    assert np.array_equal(argmax_predict(softmax_with_temperature(z, t)).predicted, z.argmax(axis=-1))


@given(logit_rows)
def test_unit_temperature_ranking(z):
    assume(_top_gap(z) > 1e-9)
    assert np.array_equal(argmax_predict(softmax_with_temperature(z, 1.0)).predicted, z.argmax(axis=-1))


def test_argmax_examples():
    pred = argmax_predict(np.array([[0.2, 0.5, 0.3], [0.5, 0.5, 0.0], [1 / 3, 1 / 3, 1 / 3]]))
    assert pred.predicted.tolist() == [1, 0, 0]
    np.testing.assert_allclose(pred.confidence, [0.5, 0.5, 1 / 3])


def test_correctness_mask():
    assert correctness_mask(np.array([0, 1]), np.array([0, 2])).tolist() == [CORRECT, INCORRECT]
    assert correctness_mask(np.array([3, 1]), np.array([IGNORE, IGNORE])).tolist() == [IGNORED, IGNORED]
    same = np.arange(12).reshape(3, 4)
    assert (correctness_mask(same, same) == CORRECT).all()
    with pytest.raises(DimensionMismatch):
        correctness_mask(np.zeros(3, int), np.zeros(4, int))


def test_pixel_entropy_examples():
    e = pixel_entropy(np.array([[1.0, 0.0], [math.exp(-1), 1 - math.exp(-1)], [0.5, 0.5]]))
    # second row: the max class is 1 - e^-1, not e^-1
    assert e[0] == 0.0
    np.testing.assert_allclose(e[2], 0.5 * math.log(2), rtol=1e-12)
    three = np.array([math.exp(-1), (1 - math.exp(-1)) / 2, (1 - math.exp(-1)) / 2])
    np.testing.assert_allclose(pixel_entropy(three), math.exp(-1), rtol=1e-12)


def test_seg_image_invariants():
    img = SegImage(3, np.zeros((2, 3, 4)), np.full((2, 3), IGNORE))
    assert img.num_classes == 4 and img.logits.dtype == np.float32
    with pytest.raises(DimensionMismatch):
        SegImage(0, np.zeros((2, 3, 4)), np.zeros((3, 2)))
    with pytest.raises(InputError):
        SegImage(0, np.zeros((2, 3, 1)), np.zeros((2, 3)))
    with pytest.raises(InputError):
        SegImage(0, np.zeros((1, 1, 3)), np.array([[3]]))
    with pytest.raises(NonFiniteInput):
        SegImage(0, np.full((1, 1, 2), np.nan), np.zeros((1, 1)))
