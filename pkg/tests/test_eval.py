import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from cmdistill.config import SyntheticSpec
from cmdistill.data import gen_synthetic
from cmdistill.encoder import init_params
from cmdistill.errors import ConfigError, UsageError
from cmdistill.eval import (
    FeatureTable, export_features, extract_features, linear_probe, metrics_csv, retrieval_eval, stratified_sample,
)
from cmdistill.trainer import parse_tensors


def oracle_metrics(feats, labels, metric="cosine"):
    f = np.asarray(feats, dtype=np.float64)
    if metric == "cosine":
        f = f / np.maximum(np.sqrt((f * f).sum(axis=1, keepdims=True)), 1e-12)
        sims = [[float((f[q] * f[j]).sum()) for j in range(len(f))] for q in range(len(f))]
    else:
        sims = [[-float(((f[q] - f[j]) ** 2).sum()) for j in range(len(f))] for q in range(len(f))]
    ranks, m = oracles.brute_retrieval(sims, list(labels))
    return float(ranks[1]), float(ranks[5]), float(m)


# feature extraction ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    return gen_synthetic(SyntheticSpec(n_fine_classes=2, samples_per_class=6, image_px=16, glyph_px=4, seed=4))


def _params(seed=0):
    return {n: np.asarray(getattr(t, "data", t)) for n, t in init_params(np.random.default_rng(seed), 4, 8, 8, 6).items()}


def test_zero_encoder_gives_zero_features(small_data):
    params = {n: np.zeros_like(a) for n, a in _params().items()}
    t = extract_features(small_data, params, 16)
    assert t.features.shape == (12, 8)
    assert not t.features.any()


def test_identical_images_give_identical_rows(small_data):
    ds = small_data.subset(np.array([0, 0, 1]))
    t = extract_features(ds, _params(), 16)
    assert np.array_equal(t.features[0], t.features[1])


def test_extraction_is_deterministic(small_data):
    a = extract_features(small_data, _params(), 16).features
    b = extract_features(small_data, _params(), 16).features
    assert np.array_equal(a, b)
    c = extract_features(small_data, _params(), 16, chunk=5).features
    np.testing.assert_allclose(a, c, atol=1e-6)


def test_checkpoint_config_mismatch(small_data):
    with pytest.raises(ConfigError):
        extract_features(small_data, _params(), 18)


def test_export_features_roundtrip(small_data, tmp_path):
    t = extract_features(small_data, _params(), 16)
    export_features(t, tmp_path / "f.bin")
    _, _, tensors = parse_tensors((tmp_path / "f.bin").read_bytes())
    assert np.array_equal(tensors["features"], t.features.astype(np.float32))
    assert np.array_equal(tensors["labels"], t.labels)


# linear probe ---------------------------------------------------------------


def _table(x, y, rng):
    split = np.where(rng.random(len(y)) < 0.5, "train", "test")
    return FeatureTable(x, y, split)


def test_probe_separable_toy_is_perfect():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 100)
    x = rng.standard_normal((200, 3))
    x[:, 0] += np.where(y == 1, 5.0, -5.0)
    assert linear_probe(_table(x, y, rng)) == 100.0


def test_probe_permuted_labels_is_chance():
    """Features carry no label information: mean accuracy over seeds sits at 50 +- 5."""
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        y = rng.permutation(np.repeat([0, 1], 200))
        x = rng.standard_normal((400, 4))
        accs.append(linear_probe(_table(x, y, rng), seed=seed, epochs=20))
    assert abs(np.mean(accs) - 50.0) <= 5.0


@pytest.mark.parametrize("fraction", [1.0, 0.5, 0.2])
def test_probe_label_fraction_grid(fraction):
    rng = np.random.default_rng(1)
    y = np.repeat(np.arange(4), 50)
    x = np.eye(4)[y] * 3 + 0.3 * rng.standard_normal((200, 4))
    assert linear_probe(_table(x, y, rng), fraction, epochs=30) > 90.0


def test_stratified_sample_keeps_class_shares():
    y = np.repeat([0, 1, 2], [10, 20, 30])
    idx = stratified_sample(y, 0.5, np.random.default_rng(0))
    assert np.bincount(y[idx]).tolist() == [5, 10, 15]
    assert len(set(idx.tolist())) == len(idx)


def test_stratification_error():
    y = np.repeat([0, 1], [1, 40])
    with pytest.raises(UsageError, match="no training examples"):
        stratified_sample(y, 0.2, np.random.default_rng(0))
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(UsageError):
            stratified_sample(y, bad, np.random.default_rng(0))


# retrieval ------------------------------------------------------------------


def test_two_samples_same_label():
    assert retrieval_eval(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([3, 3])) == (100.0, 100.0, 100.0)


def test_hand_set_gallery_against_all_orderings():
    """Four vectors with a known ranking; AP checked against enumeration of the induced ordering."""
    f = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.6, 0.8]])
    y = np.array([0, 1, 0, 1])
    r1, r5, m = retrieval_eval(f, y)
    # query 0 ranks 1, 3, 2 -> hits at 3: AP 1/3; query 1 ranks 0, 3, 2 -> hit at 2: AP 1/2
    # query 2 ranks 3, 1, 0 -> hit at 3: AP 1/3; query 3 ranks 2, 1, 0 -> hit at 2: AP 1/2
    aps = [Fraction(1, 3), Fraction(1, 2), Fraction(1, 3), Fraction(1, 2)]
    assert r1 == 0.0 and r5 == 100.0
    assert abs(m - float(100 * sum(aps) / 4)) < 1e-9
    # exhaustive: among all orderings of the gallery, the one induced by the scores is the descending one
    for q in range(4):
        others = [j for j in range(4) if j != q]
        sims = {j: float(np.dot(f[q], f[j]) / np.linalg.norm(f[q]) / np.linalg.norm(f[j])) for j in others}
        best = max(itertools.permutations(others), key=lambda p: [sims[j] for j in p])
        hits = [y[j] == y[q] for j in best]
        pos = [i + 1 for i, h in enumerate(hits) if h]
        assert Fraction(sum(Fraction(k + 1, p) for k, p in enumerate(pos)), len(pos)) == aps[q]


def test_identical_features_use_index_ties():
    f = np.ones((6, 3))
    y = np.array([0, 1, 0, 1, 1, 0])
    got = retrieval_eval(f, y)
    want = oracle_metrics(f, y)
    assert np.allclose(got, want, atol=1e-9, rtol=0)


def test_query_without_positive_scores_zero():
    f = np.array([[1.0, 0.0], [0.0, 1.0], [0.1, 1.0]])
    r1, r5, m = retrieval_eval(f, np.array([0, 1, 1]))
    assert r1 == pytest.approx(200 / 3) and r5 == pytest.approx(200 / 3)
    assert m == pytest.approx(200 / 3)


@pytest.mark.parametrize("bad", [np.zeros((1, 2)), np.zeros((0, 2))])
def test_retrieval_needs_two_samples(bad):
    with pytest.raises(UsageError):
        retrieval_eval(bad, np.zeros(len(bad)))


def test_unknown_metric():
    with pytest.raises(UsageError):
        retrieval_eval(np.eye(2), np.zeros(2), "manhattan")


@given(st.integers(0, 2**31 - 1), st.sampled_from(["cosine", "euclidean"]))
def test_retrieval_matches_fraction_oracle(seed, metric):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    # small integer features make exact ties common
    f = rng.integers(-2, 3, size=(n, int(rng.integers(1, 5)))).astype(float)
    y = rng.integers(0, 3, n)
    assert np.allclose(retrieval_eval(f, y, metric), oracle_metrics(f, y, metric), atol=1e-9, rtol=0)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_cosine_metrics_invariant_to_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((12, 4))
    y = rng.integers(0, 3, 12)
    a = retrieval_eval(f, y)
    b = retrieval_eval(f * c, y)
    assert np.allclose(a, b, atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((15, 3))
    r1, r5, m = retrieval_eval(f, rng.integers(0, 4, 15))
    assert 0 <= r1 <= r5 <= 100 and 0 <= m <= 100


def test_metrics_csv():
    assert metrics_csv({"top1": 50.0, "mAP": 1.5}) == "metric,value\ntop1,50.0\nmAP,1.5\n"
