import json

import numpy as np
import pytest

from dasecount.convnet import CnnSubmodel, FeatureExtractor, FeatureTap, build_submodel
from dasecount.csidata import MotionType
from dasecount.errors import ConfigError, ShapeError, TrainingError, ValidationError
from dasecount.fewshot import (
    ClassifierConfig,
    ClassifierKind,
    FeatureMatrix,
    LinearSVMClassifier,
    LRClassifier,
    Modality,
    NearestNeighborClassifier,
    classify,
    export_classifier,
    extract_features,
    raw_feature_matrix,
    sample_episode,
    train_classifier,
)
from dasecount.preprocess import Sample, SampleStore


def make_task_store(n_per_class=30, classes=range(9), tw=8, nsc=8, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for c in classes:
        for i in range(n_per_class):
            amp = rng.standard_normal((2, tw, nsc)).astype(np.float32) + 0.5 * c
            phd = rng.standard_normal((1, tw, nsc)).astype(np.float32)
            samples.append(Sample(amp=amp, phd=phd, label=c, source=("rec", i)))
    return SampleStore(
        {("roomB", MotionType.MIXED): samples},
        num_classes=max(classes) + 1, tw=tw, nsc=nsc, nrt=2, npd=1,
    )


TASK = ("roomB", MotionType.MIXED)


def test_episode_counts_and_disjointness():
    store = make_task_store()
    ep = sample_episode(store, TASK, k=5, q=20, seed=0)
    assert len(ep.support) == 45 and len(ep.query) == 180
    assert not set(ep.support_indices) & set(ep.query_indices)
    hist = {}
    for s in ep.support:
        hist[s.label] = hist.get(s.label, 0) + 1
    assert hist == {c: 5 for c in range(9)}

    ep1 = sample_episode(store, TASK, k=1, q=2, seed=3)
    assert len(ep1.support) == 9


def test_episode_deterministic_and_seed_sensitive():
    store = make_task_store()
    a = sample_episode(store, TASK, 5, 20, seed=11)
    b = sample_episode(store, TASK, 5, 20, seed=11)
    assert np.array_equal(a.support_indices, b.support_indices)
    assert np.array_equal(a.query_indices, b.query_indices)
    c = sample_episode(store, TASK, 5, 20, seed=12)
    assert not np.array_equal(a.support_indices, c.support_indices)


def test_episode_insufficient_samples_names_class():
    store = make_task_store(n_per_class=3)
    with pytest.raises(ValidationError, match="class 0"):
        sample_episode(store, TASK, k=5, q=20, seed=0)


def test_feature_shapes_paper_dims():
    # default architecture: CNN2 gives 576 per submodel, 1152 combined
    extractor = FeatureExtractor(
        amp=build_submodel(6, 9, seed=0), phd=build_submodel(4, 9, seed=1), generation=0
    )
    rng = np.random.default_rng(0)
    support = [
        Sample(
            amp=rng.standard_normal((6, 200, 114)).astype(np.float32),
            phd=rng.standard_normal((4, 200, 114)).astype(np.float32),
            label=i % 9,
            source=("r", i),
        )
        for i in range(45)
    ]
    feats = extract_features(extractor, support, FeatureTap.CNN2, Modality.BOTH, duplication_factor=5)
    assert feats.rows.shape == (225, 1152)  # 5-shot, 9 classes
    assert feats.labels.shape == (225,)

    one_shot = extract_features(extractor, support[:9], "cnn2", "both", duplication_factor=5)
    assert one_shot.rows.shape == (45, 1152)

    single = extract_features(extractor, support[:1], FeatureTap.FC, Modality.BOTH, 1)
    assert single.rows.shape == (1, 18)

    amp_only = extract_features(extractor, support[:2], FeatureTap.CNN2, Modality.AMP, 1)
    phd_only = extract_features(extractor, support[:2], FeatureTap.CNN2, Modality.PHD, 1)
    both = extract_features(extractor, support[:2], FeatureTap.CNN2, Modality.BOTH, 1)
    assert amp_only.dim == phd_only.dim == 576
    assert both.dim == amp_only.dim + phd_only.dim
    np.testing.assert_array_equal(both.rows[:, :576], amp_only.rows)
    np.testing.assert_array_equal(both.rows[:, 576:], phd_only.rows)

    cnn1 = extract_features(extractor, support[:2], FeatureTap.CNN1, Modality.BOTH, 1)
    assert cnn1.dim == 128


def test_duplication_repeats_rows_consecutively():
    rows = np.arange(6, dtype=np.float32).reshape(3, 2)
    labels = np.array([0, 1, 2])
    rep = np.repeat(rows, 2, axis=0)
    assert np.array_equal(rep[0], rep[1])
    # and through the public API
    extractor = FeatureExtractor(
        amp=CnnSubmodel(2, 2, seed=0, input_hw=(8, 8), channels=4, pools=[(2, 2), (2, 2)]),
        phd=CnnSubmodel(1, 2, seed=1, input_hw=(8, 8), channels=4, pools=[(2, 2), (2, 2)]),
    )
    samples = [
        Sample(
            amp=np.random.default_rng(i).standard_normal((2, 8, 8)).astype(np.float32),
            phd=np.random.default_rng(i).standard_normal((1, 8, 8)).astype(np.float32),
            label=i % 2,
            source=("r", i),
        )
        for i in range(3)
    ]
    feats = extract_features(extractor, samples, FeatureTap.CNN1, Modality.BOTH, duplication_factor=3)
    assert feats.rows.shape[0] == 9
    for i in range(3):
        block = feats.rows[3 * i : 3 * i + 3]
        assert np.array_equal(block[0], block[1]) and np.array_equal(block[1], block[2])
        assert len(set(feats.labels[3 * i : 3 * i + 3])) == 1


def test_raw_feature_dimension_paper():
    rng = np.random.default_rng(0)
    samples = [
        Sample(
            amp=rng.standard_normal((6, 200, 114)).astype(np.float32),
            phd=rng.standard_normal((4, 200, 114)).astype(np.float32),
            label=i,
            source=("r", i),
        )
        for i in range(2)
    ]
    feats = raw_feature_matrix(samples)
    assert feats.rows.shape == (2, (6 + 4) * 200 * 114)
    assert feats.rows.shape[1] == 228000


def _toy_features(vals, labels):
    return FeatureMatrix(
        rows=np.array(vals, dtype=np.float32).reshape(-1, 1),
        labels=np.array(labels, dtype=np.int64),
        tap=FeatureTap.CNN2,
        modality=Modality.BOTH,
    )


def test_lr_separable_toy():
    feats = _toy_features([-1.0, -1.0, 1.0, 1.0], [0, 0, 1, 1])
    cfg = ClassifierConfig(kind="lr", learning_rate=0.5, max_iters=2000, l2_strength=0.01)
    clf = train_classifier(feats, cfg)
    preds, proba = classify(clf, feats)
    assert np.array_equal(preds, feats.labels)  # 100% support accuracy
    assert proba[2][1] > 0.9 and proba[3][1] > 0.9  # confident on +1
    # decision boundary flips sign at 0
    probe = _toy_features([-0.01, 0.01], [0, 1])
    p, _ = classify(clf, probe)
    assert p[0] == 0 and p[1] == 1
    # loss history is non-increasing for this small learning rate
    hist = clf.state.loss_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_lr_duplication_invariance_exact():
    rng = np.random.default_rng(4)
    rows = rng.standard_normal((12, 7)).astype(np.float32)
    labels = np.repeat(np.arange(3), 4)
    cfg = ClassifierConfig(kind="lr", learning_rate=0.2, max_iters=300)
    f1 = _toy_features_rows(rows, labels, 1)
    f5 = _toy_features_rows(rows, labels, 5)
    w1 = train_classifier(f1, cfg).state
    w5 = train_classifier(f5, cfg).state
    assert np.abs(w1.weights - w5.weights).max() <= 1e-9
    assert np.abs(w1.bias - w5.bias).max() <= 1e-9
    # gradient-at-every-iterate equality manifests as identical histories
    assert w1.loss_history == w5.loss_history


def test_svm_duplication_invariance_exact():
    rng = np.random.default_rng(5)
    rows = rng.standard_normal((9, 4)).astype(np.float32)
    labels = np.repeat(np.arange(3), 3)
    cfg = ClassifierConfig(kind="svm", learning_rate=0.1, max_iters=200)
    w1 = train_classifier(_toy_features_rows(rows, labels, 1), cfg).state
    w5 = train_classifier(_toy_features_rows(rows, labels, 5), cfg).state
    assert np.abs(w1.weights - w5.weights).max() <= 1e-9
    assert w1.loss_history == w5.loss_history


def _toy_features_rows(rows, labels, dup):
    return FeatureMatrix(
        rows=np.repeat(rows, dup, axis=0),
        labels=np.repeat(labels, dup, axis=0),
        tap=FeatureTap.CNN2,
        modality=Modality.BOTH,
    )


def test_nn_self_classification():
    rng = np.random.default_rng(6)
    rows = rng.standard_normal((10, 5)).astype(np.float32)
    labels = np.arange(10) % 3
    feats = _toy_features_rows(rows, labels, 1)
    clf = train_classifier(feats, ClassifierConfig(kind="nn", k_neighbors=1))
    preds, proba = classify(clf, feats)
    assert np.array_equal(preds, labels)
    assert proba is None


def test_nn_tie_break_smallest_label():
    rows = np.array([[0.0], [2.0]], dtype=np.float32)
    labels = np.array([1, 0])
    clf = train_classifier(_toy_features_rows(rows, labels, 1), ClassifierConfig(kind="nn", k_neighbors=2))
    # query equidistant-ish: both neighbors vote once each -> smaller label wins
    preds = clf.predict(np.array([[1.0]], dtype=np.float32))
    assert preds[0] == 0


def test_zero_weight_lr_uniform_probabilities():
    feats = _toy_features([-1.0, 1.0, 0.3], [0, 1, 2])
    clf = train_classifier(feats, ClassifierConfig(kind="lr", max_iters=0))
    _, proba = classify(clf, feats)
    np.testing.assert_allclose(proba, 1.0 / 3.0, atol=1e-12)


def test_softmax_shift_invariance():
    feats = _toy_features([-1.0, -0.2, 0.4, 1.0], [0, 0, 1, 1])
    clf = train_classifier(feats, ClassifierConfig(kind="lr", learning_rate=0.5, max_iters=100))
    before_preds, before_proba = classify(clf, feats)
    clf.state.bias = clf.state.bias + 3.7  # same constant added to every logit
    after_preds, after_proba = classify(clf, feats)
    assert np.array_equal(before_preds, after_preds)
    np.testing.assert_allclose(before_proba, after_proba, atol=1e-12)


def test_dimension_mismatch_rejected():
    feats = _toy_features([-1.0, 1.0], [0, 1])
    clf = train_classifier(feats, ClassifierConfig(kind="lr", max_iters=10))
    bad = FeatureMatrix(
        rows=np.zeros((2, 3), dtype=np.float32),
        labels=np.array([0, 1]),
        tap=FeatureTap.CNN2,
        modality=Modality.BOTH,
    )
    with pytest.raises(ShapeError):
        classify(clf, bad)


def test_single_class_and_nonfinite_rejected():
    with pytest.raises(TrainingError):
        train_classifier(_toy_features([1.0, 2.0], [1, 1]), ClassifierConfig(kind="lr"))
    with pytest.raises(ValidationError):
        train_classifier(_toy_features([np.nan, 2.0], [0, 1]), ClassifierConfig(kind="lr"))


def test_lr_descent_with_halving_safeguard():
    # documented safeguard: start at eta=0.1; halve and retry (<= 4 times)
    # if the loss sequence ever increases
    rng = np.random.default_rng(7)
    for trial in range(5):
        rows = rng.standard_normal((20, 6)).astype(np.float32) * (1.0 + 3 * trial)
        labels = rng.integers(0, 3, size=20)
        if len(set(labels.tolist())) < 2:
            continue
        feats = _toy_features_rows(rows, labels, 1)
        eta = 0.1
        ok = False
        for _ in range(5):
            clf = train_classifier(
                feats, ClassifierConfig(kind="lr", learning_rate=eta, max_iters=150)
            )
            hist = clf.state.loss_history
            if all(b <= a + 1e-12 for a, b in zip(hist, hist[1:])):
                ok = True
                break
            eta /= 2
        assert ok, f"loss not non-increasing even after halving to eta={eta}"


def test_standardize_option():
    rng = np.random.default_rng(8)
    rows = np.concatenate([rng.normal(0, 1, (10, 3)), rng.normal(5, 1, (10, 3))]).astype(np.float32)
    labels = np.repeat([0, 1], 10)
    feats = _toy_features_rows(rows, labels, 1)
    clf = train_classifier(feats, ClassifierConfig(kind="lr", standardize=True, learning_rate=0.5, max_iters=200))
    preds, _ = classify(clf, feats)
    assert (preds == labels).mean() == 1.0
    assert clf.state.mean is not None


def test_export_classifier(tmp_path):
    feats = _toy_features([-1.0, 1.0], [0, 1])
    cfg = ClassifierConfig(kind="lr", learning_rate=0.5, max_iters=50)
    clf = train_classifier(feats, cfg)
    path = export_classifier(clf, feats, tmp_path / "classifier.json")
    doc = json.loads(path.read_text())
    assert doc["kind"] == "lr"
    assert doc["dim"] == 1
    assert doc["tap"] == "cnn2" and doc["modality"] == "both"
    assert len(doc["weights"]) == 1

    nn = train_classifier(feats, ClassifierConfig(kind="nn"))
    doc2 = json.loads(export_classifier(nn, feats, tmp_path / "nn.json").read_text())
    assert doc2["rows"] == [[-1.0], [1.0]]


def test_classifier_config_validation():
    with pytest.raises(ConfigError):
        ClassifierConfig(duplication_factor=0)
    with pytest.raises(ConfigError):
        ClassifierConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        ClassifierConfig(kind="forest")
