"""Downstream segmentation and classification consumers."""

import numpy as np
import pytest
import torch

from geogan.data import default_scheme, generate_toy_dataset
from geogan.downstream import (
    DownstreamConfig,
    classify,
    segment,
    train_classifier,
    train_segmenter,
)
from geogan.metrics import classification_metrics, dice

SCHEME = default_scheme()


def test_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        DownstreamConfig(epochs=-1)
    with pytest.raises(ValueError, match="batch"):
        DownstreamConfig(batch=0)
    with pytest.raises(ValueError, match="lr"):
        DownstreamConfig(lr=0.0)


@pytest.fixture(scope="module")
def toy_train():
    return generate_toy_dataset(48, infected_fraction=0.5, seed=5)


@pytest.fixture(scope="module")
def toy_test():
    return generate_toy_dataset(24, infected_fraction=0.5, seed=91)


@pytest.fixture(scope="module")
def trained_segmenter(toy_train):
    net, trace = train_segmenter(toy_train, SCHEME, DownstreamConfig(epochs=10, seed=0))
    return net, trace


@pytest.fixture(scope="module")
def trained_classifier(toy_train):
    net, trace = train_classifier(toy_train, DownstreamConfig(epochs=6, seed=0))
    return net, trace


# --------------------------------------------------------------- segmentation
def test_segmenter_trains_and_traces(trained_segmenter, toy_train):
    net, trace = trained_segmenter
    assert len(trace) == 10 * ((len(toy_train) + 7) // 8)
    assert all(np.isfinite(v) for v in trace)
    assert np.mean(trace[-5:]) < np.mean(trace[:5])


def test_segmenter_learns_union_overlap(trained_segmenter, toy_test):
    net, _ = trained_segmenter
    scores = [
        dice((segment(net, s.image) > 0).astype(int), (s.mask > 0).astype(int))
        for s in toy_test if s.class_label == 1
    ]
    assert np.mean(scores) > 0.5


def test_segment_codomain_and_determinism(trained_segmenter, toy_test):
    net, _ = trained_segmenter
    image = toy_test[0].image
    m1 = segment(net, image)
    m2 = segment(net, image)
    assert np.array_equal(m1, m2)
    assert set(np.unique(m1)) <= set(range(SCHEME.n))


def test_segment_on_clean_image_mostly_background(trained_segmenter, toy_test):
    net, _ = trained_segmenter
    clean = next(s for s in toy_test if s.class_label == 0)
    mask = segment(net, clean.image)
    assert (mask == 0).mean() >= 0.95


def test_segment_rejects_bad_dims(trained_segmenter):
    net, _ = trained_segmenter
    with pytest.raises(ValueError, match="divisible"):
        segment(net, np.zeros((30, 30)))


def test_segmenter_empty_dataset_error():
    with pytest.raises(ValueError, match="at least one"):
        train_segmenter([], SCHEME, DownstreamConfig(epochs=1))


def test_segmenter_single_label_warns(toy_train):
    clean = [s for s in toy_train if s.class_label == 0][:4]
    with pytest.warns(UserWarning, match="single-label"):
        train_segmenter(clean, SCHEME, DownstreamConfig(epochs=1, seed=0))


def test_segmenter_zero_epochs_and_determinism(toy_train):
    few = toy_train[:8]
    net0, trace0 = train_segmenter(few, SCHEME, DownstreamConfig(epochs=0, seed=3))
    assert trace0 == []
    _, t1 = train_segmenter(few, SCHEME, DownstreamConfig(epochs=2, seed=3))
    _, t2 = train_segmenter(few, SCHEME, DownstreamConfig(epochs=2, seed=3))
    assert t1 == t2


# ------------------------------------------------------------- classification
def test_classifier_trains_deterministically(trained_classifier, toy_train):
    _, trace = trained_classifier
    assert all(np.isfinite(v) for v in trace)
    _, again = train_classifier(toy_train, DownstreamConfig(epochs=6, seed=0))
    assert trace == again


def test_classifier_separates_toy_classes(trained_classifier, toy_test):
    net, _ = trained_classifier
    scores = [classify(net, s.image) for s in toy_test]
    labels = [s.class_label for s in toy_test]
    assert classification_metrics(scores, labels).auc > 0.8


def test_classify_codomain_and_determinism(trained_classifier, toy_test):
    net, _ = trained_classifier
    p1 = classify(net, toy_test[0].image)
    p2 = classify(net, toy_test[0].image)
    assert p1 == p2
    assert 0.0 <= p1 <= 1.0


def test_untrained_classifier_is_chance_level(toy_train):
    net, trace = train_classifier(toy_train, DownstreamConfig(epochs=0, seed=0))
    assert trace == []
    scores = [classify(net, s.image) for s in toy_train]
    labels = [s.class_label for s in toy_train]
    assert all(s == 0.5 for s in scores)
    assert classification_metrics(scores, labels).auc == pytest.approx(0.5, abs=0.1)


def test_classifier_scores_make_valid_roc(trained_classifier, toy_test):
    net, _ = trained_classifier
    scores = [classify(net, s.image) for s in toy_test]
    labels = [s.class_label for s in toy_test]
    pos = sum(labels)
    neg = len(labels) - pos
    points = []
    for t in [2.0] + sorted(set(scores), reverse=True) + [-1.0]:
        tp = sum(1 for s, y in zip(scores, labels) if s > t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > t and y == 0)
        points.append((fp / neg, tp / pos))
    fprs = [p[0] for p in points]
    tprs = [p[1] for p in points]
    assert fprs == sorted(fprs)
    assert tprs == sorted(tprs)
    assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)


def test_classifier_single_class_error(toy_train):
    infected = [s for s in toy_train if s.class_label == 1]
    with pytest.raises(ValueError, match="both classes"):
        train_classifier(infected, DownstreamConfig(epochs=1))


def test_classify_rejects_tiny_images(trained_classifier):
    net, _ = trained_classifier
    with pytest.raises(ValueError, match="too small"):
        classify(net, np.zeros((4, 4)))
