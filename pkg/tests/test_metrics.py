import numpy as np
import pytest
from hypothesis import given, strategies as st

from segcal.core import IGNORE, softmax_with_temperature
from segcal.data import SyntheticConfig, generate_synthetic
from segcal.errors import AllPixelsIgnored, EmptyDataset, EmptyInput, LengthMismatch
from segcal.metrics import (
    BinningConfig, BoundaryConfig, ReliabilityBins, binned_ece, boundary_mask, dataset_ece,
    ece_boxplot_stats, image_bins, image_ece, regional_ece, reliability_diagram_data,
    split_ece_by_correctness,
)

from oracles import brute_boundary, direct_ece

samples = st.lists(
    st.tuples(st.floats(1e-6, 1.0), st.booleans()), min_size=1, max_size=40,
)


def onehot_probs(pred, conf, k):
    """Probability rows with ``conf`` on ``pred`` and the rest spread evenly."""
    pred = np.asarray(pred)
    conf = np.asarray(conf, dtype=np.float64)
    p = np.repeat(((1 - conf) / (k - 1))[..., None], k, axis=-1)
    np.put_along_axis(p, pred[..., None], conf[..., None], axis=-1)
    return p


def test_single_sample_ece():
    ece, bins = binned_ece([0.8], [True])
    assert ece == pytest.approx(0.2, abs=1e-15)
    assert bins.counts.tolist()[7] == 1


def test_single_bin_ece():
    ece, _ = binned_ece([0.9, 0.6], [True, False], BinningConfig(1))
    assert ece == pytest.approx(0.25, abs=1e-15)


def test_random_samples_match_direct_oracle(rng):
    conf = rng.uniform(0.1, 1.0, 20)
    hit = rng.random(20) < conf
    assert binned_ece(conf, hit)[0] == direct_ece(conf, hit, 10)


def test_edges_right_closed():
    # 0.3 * 10 rounds above 3 in floating point; it must still land in (0.2, 0.3]
    _, bins = binned_ece([0.3, 0.1, 1.0, 0.30000000000000004], [True] * 4)
    assert bins.counts.tolist() == [1, 0, 1, 1, 0, 0, 0, 0, 0, 1]


def test_binned_errors():
    with pytest.raises(EmptyInput):
        binned_ece([], [])
    with pytest.raises(LengthMismatch):
        binned_ece([0.5], [True, False])


@given(samples, st.integers(1, 20))
def test_ece_properties(data, m):
    conf = [c for c, _ in data]
    hit = [h for _, h in data]
    ece, bins = binned_ece(conf, hit, BinningConfig(m))
    assert 0.0 <= ece <= 1.0
    assert bins.total == len(conf)
    assert ece == direct_ece(conf, hit, m)
    perm = np.random.default_rng(len(conf)).permutation(len(conf))
    assert binned_ece(np.asarray(conf)[perm], np.asarray(hit)[perm], BinningConfig(m))[0] == pytest.approx(ece, abs=1e-12)
    acc, avg = bins.accuracy, bins.confidence
    edges = BinningConfig(m).edges
    for i in np.flatnonzero(bins.counts):
        assert 0 <= acc[i] <= 1
        assert edges[i] - 1e-12 <= avg[i] <= edges[i + 1] + 1e-12


def test_ece_zero_when_confidence_matches_bin_accuracy():
    conf = [0.75] * 4 + [0.5] * 2
    hit = [True, True, True, False, True, False]
    assert binned_ece(conf, hit)[0] == 0.0


def test_image_ece_extremes():
    labels = np.zeros((4, 4), int)
    p = onehot_probs(np.zeros((4, 4), int), np.ones((4, 4)), 3)
    assert image_ece(p, labels) == 0.0
    assert image_ece(p, labels + 1) == 1.0


def test_image_ece_calibrated_generator():
    cfg = SyntheticConfig(num_images=1, height=64, width=64, seed=5)
    img = generate_synthetic(cfg).dataset.images[0]
    assert image_ece(softmax_with_temperature(img.logits), img.labels) <= 0.05


def test_all_ignored_names_image():
    p = np.full((2, 2, 2), 0.5)
    with pytest.raises(AllPixelsIgnored, match="image 7"):
        image_ece(p, np.full((2, 2), IGNORE), image_id=7)


def test_ignored_pixels_excluded():
    p = onehot_probs(np.zeros((1, 3), int), np.full((1, 3), 0.9), 2)
    labels = np.array([[0, IGNORE, 0]])
    assert image_bins(p, labels).total == 2
    assert image_ece(p, labels) == pytest.approx(0.1)


def _items(probs_labels):
    return [(i, p, l) for i, (p, l) in enumerate(probs_labels)]


def test_dataset_ece_mean_of_images():
    a = (onehot_probs(np.zeros((1, 10), int), np.full((1, 10), 0.9), 2), np.zeros((1, 10), int))
    b = (onehot_probs(np.zeros((1, 10), int), np.full((1, 10), 0.7), 2), np.zeros((1, 10), int))
    report = dataset_ece(_items([a, b]))
    assert [e for _, e, _ in report.per_image] == pytest.approx([0.1, 0.3])
    assert report.dataset_ece == pytest.approx(0.2)
    single = dataset_ece(_items([a]))
    assert single.dataset_ece == image_ece(*a)
    with pytest.raises(EmptyDataset):
        dataset_ece([])


def test_dataset_ece_report_consistency(calibrated):
    items = [(img.image_id, softmax_with_temperature(img.logits), img.labels) for img in calibrated.dataset]
    report = dataset_ece(items)
    assert abs(report.dataset_ece - np.mean([e for _, e, _ in report.per_image])) < 1e-12
    assert report.bins.total == sum(n for _, _, n in report.per_image)
    doc = report.to_json()
    assert set(doc) == {"dataset_ece", "accuracy", "bins", "per_image"}
    assert set(doc["bins"][0]) == {"low", "high", "acc", "conf", "count", "gap"}
    assert set(doc["per_image"][0]) == {"id", "ece", "pixels"}


def test_dataset_ece_deterministic_with_threads(monkeypatch, calibrated):
    items = [(img.image_id, softmax_with_temperature(img.logits), img.labels) for img in calibrated.dataset]
    serial = dataset_ece(items).to_json()
    monkeypatch.setenv("SEGCAL_THREADS", "4")
    assert dataset_ece(items).to_json() == serial


def test_pooled_equals_imagewise_for_identical_images(calibrated):
    img = calibrated.dataset.images[0]
    p = softmax_with_temperature(img.logits)
    report = dataset_ece([(i, p, img.labels) for i in range(3)])
    assert report.dataset_ece == pytest.approx(report.bins.ece(), abs=1e-12)


def test_many_calibrated_images():
    data = generate_synthetic(SyntheticConfig(num_images=100, seed=3)).dataset
    report = dataset_ece((img.image_id, softmax_with_temperature(img.logits), img.labels) for img in data)
    assert report.dataset_ece <= 0.02


def test_split_by_correctness_examples():
    p = onehot_probs(np.zeros((1, 2), int), np.ones((1, 2)), 2)
    good, bad, counts = split_ece_by_correctness(p, np.zeros((1, 2), int), BinningConfig(1))
    assert good == 0.0 and bad is None and counts == {"correct": 2, "incorrect": 0}
    p = onehot_probs(np.zeros((1, 2), int), np.array([[0.9, 0.7]]), 2)
    good, bad, _ = split_ece_by_correctness(p, np.ones((1, 2), int), BinningConfig(1))
    assert good is None and bad == pytest.approx(0.8)


def test_incorrect_subset_ece_is_mean_confidence(overconfident):
    for img in overconfident.dataset.images[:5]:
        p = softmax_with_temperature(img.logits)
        _, bad, _ = split_ece_by_correctness(p, img.labels)
        wrong = (p.argmax(-1) != img.labels)
        assert abs(bad - p.max(-1)[wrong].mean()) < 1e-12


def test_misprediction_dominates_on_overconfident_data(overconfident):
    for img in overconfident.dataset.images:
        good, bad, _ = split_ece_by_correctness(softmax_with_temperature(img.logits), img.labels)
        assert bad > good


def test_boundary_examples():
    assert not boundary_mask(np.full((5, 5), 2)).any()
    checker = np.indices((6, 6)).sum(axis=0) % 2
    assert boundary_mask(checker, BoundaryConfig(1)).all()
    half = np.zeros((8, 8), int)
    half[:, 4:] = 1
    mask = boundary_mask(half, BoundaryConfig(2))
    assert np.array_equal(mask, brute_boundary(half, 2))
    assert np.flatnonzero(mask.any(axis=0)).tolist() == [2, 3, 4, 5]
    assert mask[:, 2:6].all()


@given(st.integers(0, 3), st.sampled_from([4, 8]), st.integers(0, 2 ** 31))
def test_boundary_matches_brute_force(radius, connectivity, seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, (7, 9)).astype(np.int64)
    labels[r.random((7, 9)) < 0.15] = IGNORE
    got = boundary_mask(labels, BoundaryConfig(radius, connectivity))
    assert np.array_equal(got, brute_boundary(labels, radius, connectivity))
    assert not got[labels == IGNORE].any()
    if radius == 0:
        assert not got.any()


def test_regional_ece_partition(calibrated):
    img = calibrated.dataset.images[0]
    p = softmax_with_temperature(img.logits)
    everything = np.ones(img.shape, bool)
    inside, outside = regional_ece(p, img.labels, everything)
    assert inside == image_ece(p, img.labels) and outside is None
    mask = boundary_mask(img.labels)
    conf = p.max(-1)
    hit = p.argmax(-1) == img.labels
    b_in = ReliabilityBins.from_samples(conf[mask], hit[mask])
    b_out = ReliabilityBins.from_samples(conf[~mask], hit[~mask])
    full = image_bins(p, img.labels)
    assert np.array_equal((b_in + b_out).counts, full.counts)


def test_boxplot_examples():
    s = ece_boxplot_stats([0.1, 0.1, 0.1])
    assert s.min == s.q25 == s.median == s.q75 == s.max == 0.1 and s.outliers == []
    assert s.mean == pytest.approx(0.1)
    s = ece_boxplot_stats([1, 2, 3, 4, 5])
    assert (s.q25, s.median, s.q75) == (2, 3, 4)
    s = ece_boxplot_stats([0.1] * 9 + [10.0])
    assert s.outliers == [10.0]
    with pytest.raises(EmptyInput):
        ece_boxplot_stats([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_boxplot_order(values):
    s = ece_boxplot_stats(values)
    assert s.min <= s.q25 <= s.median <= s.q75 <= s.max


def test_diagram_single_sample():
    _, bins = binned_ece([0.95], [True])
    rows = reliability_diagram_data(bins)
    assert rows[-1]["low"] == 0.9 and rows[-1]["high"] == 1.0
    assert rows[-1]["gap"] == pytest.approx(0.05)
    assert all(r["count"] == 0 and r["gap"] == 0 for r in rows[:-1])


def test_diagram_perfect_calibration():
    _, bins = binned_ece([1.0, 1.0, 0.5, 0.5], [True, True, True, False])
    assert all(r["gap"] == 0 for r in reliability_diagram_data(bins))


def test_diagram_overconfident_gap_location():
    data = generate_synthetic(SyntheticConfig(num_images=1, height=40, width=25, sharpness=3.0, concentration=10, seed=2))
    img = data.dataset.images[0]
    bins = image_bins(softmax_with_temperature(img.logits), img.labels)
    assert bins.total == 1000
    gaps = [r["gap"] * r["count"] for r in reliability_diagram_data(bins)]
    assert int(np.argmax(gaps)) >= 8
