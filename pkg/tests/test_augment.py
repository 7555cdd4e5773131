"""Synthetic dataset production: cardinality, policies, provenance, layout."""

import hashlib

import numpy as np
import pytest
import torch

from geogan.augment import (
    AugmentationPlan,
    augment_samples,
    build_augmented_dataset,
    generate_samples,
    write_provenance,
)
from geogan.data import ImageSample, default_scheme, generate_toy_dataset, load_dataset
from geogan.gan import GeneratorConfig, train
from geogan.shape_prior import ShapePriorConfig, pretrain_shape_prior

SCHEME = default_scheme()


@pytest.fixture(scope="module")
def models():
    samples = generate_toy_dataset(16, infected_fraction=0.5, seed=77)
    masks = [s.mask for s in samples if s.class_label == 1]
    prior, _ = pretrain_shape_prior(masks, SCHEME, ShapePriorConfig(epochs=4, seed=0))
    cfg = GeneratorConfig(steps=120, batch=8, width=8, disc_width=8, seed=0)
    generator, stn, _, _ = train(samples, prior, SCHEME, cfg)
    return samples, generator, stn


def test_plan_validation():
    with pytest.raises(ValueError, match="samples_per_base"):
        AugmentationPlan(samples_per_base=0)
    with pytest.raises(ValueError, match="policy"):
        AugmentationPlan(policy="shuffle")


def test_generate_samples_cardinality_and_conditions(models):
    samples, generator, stn = models
    base = next(s for s in samples if s.class_label == 1)
    plan = AugmentationPlan(samples_per_base=3, seed=5)
    out, rows = generate_samples(generator, stn, SCHEME, base, plan)
    assert len(out) == 3 and len(rows) == 3
    assert len({s.id for s in out}) == 3
    for sample, row in zip(out, rows):
        assert sample.class_label == base.class_label
        sample.validate(SCHEME)
        assert row.origin == "synthetic"
        assert row.base_id == base.id
        assert len(row.affine) == 6
        assert all(np.isfinite(v) for v in row.affine)


def test_clean_bases_produce_empty_masks(models):
    samples, generator, stn = models
    base = next(s for s in samples if s.class_label == 0)
    out, _ = generate_samples(
        generator, stn, SCHEME, base, AugmentationPlan(samples_per_base=2)
    )
    for sample in out:
        assert sample.class_label == 0
        assert not sample.mask.any()


def test_sampled_draws_differ(models):
    samples, generator, stn = models
    base = next(s for s in samples if s.class_label == 1)
    out, _ = generate_samples(
        generator, stn, SCHEME, base, AugmentationPlan(samples_per_base=2, seed=3)
    )
    assert np.any(out[0].mask != out[1].mask)


def test_generation_is_deterministic(models):
    samples, generator, stn = models
    base = next(s for s in samples if s.class_label == 1)
    plan = AugmentationPlan(samples_per_base=2, seed=9)
    a, _ = generate_samples(generator, stn, SCHEME, base, plan)
    b, _ = generate_samples(generator, stn, SCHEME, base, plan)
    for s1, s2 in zip(a, b):
        assert np.array_equal(s1.image, s2.image)
        assert np.array_equal(s1.mask, s2.mask)


def test_dims_incompatible_with_model_error(models):
    _, generator, stn = models
    bad = ImageSample("odd", np.zeros((48, 48)), np.zeros((48, 48), dtype=np.int64), 0)
    with pytest.raises(ValueError, match="divisible"):
        generate_samples(generator, stn, SCHEME, bad, AugmentationPlan())


def test_preserve_policy_keeps_class_ratio(models):
    samples, generator, stn = models
    bases = samples[:6]
    plan = AugmentationPlan(samples_per_base=2, policy="preserve", seed=1)
    out, rows = augment_samples(generator, stn, SCHEME, bases, plan)
    assert len(out) == 6 + 12
    assert len(rows) == len(out)
    for base in bases:
        drawn = [s for s in out if s.id.startswith(f"{base.id}-g")]
        assert len(drawn) == 2
        assert all(s.class_label == base.class_label for s in drawn)


def test_balance_policy_equalizes_classes(models):
    samples, generator, stn = models
    infected = [s for s in samples if s.class_label == 1][:6]
    clean = [s for s in samples if s.class_label == 0][:2]
    bases = infected + clean
    plan = AugmentationPlan(samples_per_base=2, policy="balance", seed=1)
    out, _ = augment_samples(generator, stn, SCHEME, bases, plan)
    assert len(out) == len(bases) * 3  # reals plus samples_per_base * len(bases)
    n1 = sum(1 for s in out if s.class_label == 1)
    assert n1 == len(out) - n1


def test_balance_with_single_class_warns(models):
    samples, generator, stn = models
    bases = [s for s in samples if s.class_label == 1][:3]
    plan = AugmentationPlan(samples_per_base=1, policy="balance")
    with pytest.warns(UserWarning, match="single-class"):
        out, _ = augment_samples(generator, stn, SCHEME, bases, plan)
    assert len(out) == 6


def _tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_build_augmented_dataset_layout(models, tmp_path):
    samples, generator, stn = models
    bases = samples[:10]
    plan = AugmentationPlan(samples_per_base=2, seed=4)
    out_root = tmp_path / "aug"
    dataset = build_augmented_dataset(generator, stn, SCHEME, bases, plan, out_root)
    assert len(dataset.splits["train"]) == 30

    loaded = load_dataset(out_root, splits=("train",))
    assert len(loaded.splits["train"]) == 30
    ids = {s.id for s in loaded.splits["train"]}

    prov = (out_root / "provenance.csv").read_text().splitlines()
    assert prov[0] == "id,origin,base_id,condition,a00,a01,a02,a10,a11,a12"
    rows = [line.split(",") for line in prov[1:]]
    assert {r[0] for r in rows} == ids
    origins = {r[0]: r[1] for r in rows}
    assert sum(1 for v in origins.values() if v == "real") == 10
    assert sum(1 for v in origins.values() if v == "synthetic") == 20
    for r in rows:
        if r[1] == "synthetic":
            assert r[2] in {b.id for b in bases}
            assert all(field for field in r[4:])
        else:
            assert all(field == "" for field in r[4:])


def test_build_is_deterministic(models, tmp_path):
    samples, generator, stn = models
    bases = samples[:4]
    plan = AugmentationPlan(samples_per_base=2, seed=11)
    build_augmented_dataset(generator, stn, SCHEME, bases, plan, tmp_path / "a")
    build_augmented_dataset(generator, stn, SCHEME, bases, plan, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_empty_bases_warn_and_write_empty_tree(models, tmp_path):
    _, generator, stn = models
    with pytest.warns(UserWarning, match="empty"):
        dataset = build_augmented_dataset(
            generator, stn, SCHEME, [], AugmentationPlan(), tmp_path / "e"
        )
    assert dataset.splits["train"] == []
    assert (tmp_path / "e" / "provenance.csv").exists()
