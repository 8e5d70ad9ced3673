import numpy as np
import pytest
import torch

from attrgan.core import ExperimentConfig
from attrgan.networks import parameter_checksum
from attrgan.regularizers import (
    IngredientClassifier,
    ViewRegressor,
    freeze,
    load_classifier,
    load_regressor,
    predict_ingredients,
    predict_view,
    predict_view_batch,
    pseudo_label_views,
    save_classifier,
    save_regressor,
    train_ingredient_classifier,
    train_view_regressor,
)
from attrgan.synthdata import SceneDataset, generate_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = generate_dataset(48, 32, seed=11, out_dir=out)
    return SceneDataset(manifest)


def test_classifier_outputs_finite_probabilities(small_dataset):
    torch.manual_seed(0)
    model = freeze(IngredientClassifier(32, width=8))
    probs = predict_ingredients(model, small_dataset.image_batch(range(8)))
    assert probs.shape == (8, 10)
    assert np.isfinite(probs).all()
    assert ((probs > 0) & (probs < 1)).all()


def test_batch_of_one_equals_batch_of_eight(small_dataset):
    torch.manual_seed(0)
    model = freeze(IngredientClassifier(32, width=8))
    imgs = small_dataset.image_batch(range(8))
    full = predict_ingredients(model, imgs)
    single = predict_ingredients(model, imgs[:1])
    np.testing.assert_allclose(single[0], full[0], atol=1e-5)


def test_predictions_repeatable(small_dataset):
    torch.manual_seed(0)
    model = freeze(ViewRegressor(32, width=8))
    imgs = small_dataset.image_batch(range(4))
    a = predict_view_batch(model, imgs)
    b = predict_view_batch(model, imgs)
    np.testing.assert_array_equal(a, b)


def test_view_predictions_clipped_to_ranges(small_dataset):
    torch.manual_seed(0)
    model = freeze(ViewRegressor(32, width=8))
    views = predict_view(model, small_dataset.image_batch(range(6)))
    for v in views:
        assert 0.0 <= v.angle <= 75.0
        assert 1.0 <= v.scale <= 3.0


def test_constant_image_finite_prediction():
    torch.manual_seed(0)
    model = freeze(ViewRegressor(32, width=8))
    const = np.full((1, 32, 32, 3), 0.5, dtype=np.float32)
    pred = predict_view_batch(model, const)
    assert np.isfinite(pred).all()


def test_resize_to_model_resolution():
    torch.manual_seed(0)
    model = freeze(IngredientClassifier(32, width=8))
    imgs = np.random.rand(2, 64, 64, 3).astype(np.float32)
    probs = predict_ingredients(model, imgs)
    assert probs.shape == (2, 10)


def test_pseudo_labels_idempotent_and_separate(small_dataset):
    torch.manual_seed(0)
    model = freeze(ViewRegressor(32, width=8))
    first = pseudo_label_views(model, small_dataset)
    second = pseudo_label_views(model, small_dataset)
    np.testing.assert_array_equal(first, second)
    assert first.shape == (len(small_dataset), 4)
    # ground truth unchanged
    assert small_dataset.views.shape == (len(small_dataset), 4)


def test_pseudo_labels_require_frozen(small_dataset):
    model = ViewRegressor(32, width=8)
    with pytest.raises(Exception, match="frozen"):
        pseudo_label_views(model, small_dataset)


def test_training_rejects_empty_dataset(tmp_path):
    manifest = generate_dataset(2, 32, seed=1, out_dir=tmp_path)
    ds = SceneDataset(manifest)
    ds.manifest = manifest
    import dataclasses

    empty = SceneDataset(dataclasses.replace(manifest, records=(), count=0))
    with pytest.raises(ValueError):
        train_ingredient_classifier(empty, epochs=1)
    with pytest.raises(ValueError):
        train_view_regressor(empty, steps=1)


def test_short_training_runs_and_freezes(small_dataset):
    model, val_map = train_ingredient_classifier(small_dataset, epochs=1, seed=0)
    assert model.frozen
    assert 0.0 <= val_map <= 1.0
    reg, rmse = train_view_regressor(small_dataset, steps=5, seed=0)
    assert reg.frozen
    assert set(rmse) == {"angle", "scale", "dx", "dy"}
    assert all(np.isfinite(v) for v in rmse.values())


def test_checkpoint_roundtrip_preserves_parameters(tmp_path, small_dataset):
    torch.manual_seed(3)
    cfg = ExperimentConfig(image_resolution=32)
    cls = freeze(IngredientClassifier(32, width=8))
    save_classifier(tmp_path / "c.pt", cls, cfg, val_map=0.5)
    loaded, extra = load_classifier(tmp_path / "c.pt")
    assert parameter_checksum(loaded) == parameter_checksum(cls)
    assert extra["val_map"] == 0.5
    assert extra["checksum"] == parameter_checksum(cls)

    reg = freeze(ViewRegressor(32, width=8))
    save_regressor(tmp_path / "r.pt", reg, cfg, rmse={"angle": 1.0})
    loaded_r, extra_r = load_regressor(tmp_path / "r.pt")
    assert parameter_checksum(loaded_r) == parameter_checksum(reg)
    assert extra_r["val_rmse"] == {"angle": 1.0}


def test_frozen_model_stable_under_use(small_dataset):
    torch.manual_seed(1)
    model = freeze(IngredientClassifier(32, width=8))
    checksum = parameter_checksum(model)
    predict_ingredients(model, small_dataset.image_batch(range(8)))
    assert parameter_checksum(model) == checksum


def _quick_dataset(tmp_path_factory, n=1200, seed=21):
    out = tmp_path_factory.mktemp("ctrl")
    return SceneDataset(generate_dataset(n, 32, seed=seed, out_dir=out))


def test_shuffled_validation_labels_score_chance(tmp_path_factory):
    # A trained classifier scored against label-shuffled validation data
    # lands at chance level (mean label prevalence).
    from attrgan.evaluation import mean_ap

    ds = _quick_dataset(tmp_path_factory)
    model, _ = train_ingredient_classifier(ds, epochs=6, seed=0)
    rng = np.random.default_rng(0)
    idx = np.arange(len(ds))[:600]
    scores = predict_ingredients(model, ds.image_batch(idx))
    labels = ds.ingredients[idx].copy()
    for j in range(10):
        rng.shuffle(labels[:, j])
    _, shuffled_map = mean_ap(scores, labels)
    prevalence = float(ds.ingredients[idx].mean())
    assert shuffled_map == pytest.approx(prevalence, abs=0.05)


def test_label_corruption_drops_category_to_chance(tmp_path_factory):
    # Permuting one category's training labels sends that category's AP to
    # chance while the others stay high.
    from attrgan.evaluation import average_precision
    import dataclasses

    ds = _quick_dataset(tmp_path_factory, seed=22)
    corrupted = []
    rng = np.random.default_rng(1)
    perm = rng.permutation(len(ds))
    for i, rec in enumerate(ds.manifest.records):
        new = dict(rec)
        new["ingredients"] = list(rec["ingredients"])
        new["ingredients"][4] = ds.manifest.records[perm[i]]["ingredients"][4]
        corrupted.append(new)
    bad = SceneDataset(dataclasses.replace(ds.manifest, records=tuple(corrupted)))
    model, _ = train_ingredient_classifier(bad, epochs=14, seed=0)

    idx = np.arange(600)
    scores = predict_ingredients(model, ds.image_batch(idx))
    truth = ds.ingredients[idx]
    ap_corrupted = average_precision(scores[:, 4], truth[:, 4])
    others = [average_precision(scores[:, j], truth[:, j])
              for j in (0, 2, 7) if truth[:, j].sum() > 0]
    prevalence = truth[:, 4].mean()
    assert ap_corrupted < prevalence + 0.25
    assert min(others) > ap_corrupted + 0.3


def test_training_loss_non_increasing_smoothed(tmp_path_factory):
    # Sanity: smoothed (window 5) training losses do not increase.
    ds = _quick_dataset(tmp_path_factory, n=600, seed=23)
    bce_log = []
    train_ingredient_classifier(
        ds, epochs=6, seed=0,
        log=lambda s: bce_log.append(float(s.rsplit(" ", 1)[1]))
        if "train BCE" in s else None)
    smooth = np.convolve(bce_log, np.ones(5) / 5, mode="valid")
    assert all(b <= a + 1e-9 for a, b in zip(smooth, smooth[1:]))


def test_pseudo_labels_close_to_ground_truth(desk):
    # On a ground-truth-labeled dataset the imputed views stay within
    # 1.5x the regressor's validation RMSE per attribute (mean abs error).
    from conftest import require
    from attrgan.synthdata import load_manifest

    reg_path = require(desk, "reg/regressor.pt")
    data_path = require(desk, "data_gan/manifest.jsonl")
    model, extra = load_regressor(reg_path)
    ds = SceneDataset(load_manifest(data_path))
    import dataclasses

    subset = SceneDataset(dataclasses.replace(ds.manifest,
                                              records=ds.manifest.records[:800],
                                              count=800))
    pseudo = pseudo_label_views(model, subset)
    for j, name in enumerate(("angle", "scale", "dx", "dy")):
        mean_abs = float(np.mean(np.abs(pseudo[:, j] - subset.views[:, j])))
        assert mean_abs <= extra["val_rmse"][name] * 1.5, (
            f"{name}: mean |pseudo - truth| {mean_abs} vs "
            f"1.5x val RMSE {extra['val_rmse'][name]}")
