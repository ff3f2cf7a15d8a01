import numpy as np
import pytest
import torch

from deepmir.augment import AugmentConfig
from deepmir.model import UNetConfig
from deepmir.phantom import CohortConfig, PhantomConfig, generate_cohort
from deepmir.preprocess import Slice2D
from deepmir.train import (
    TrainConfig, TrainingError, audit_leakage, decode_labels, fit, iou_from_predictions, loocv,
    run_manifest, split_participants, study_slices, task_labels,
)


def ids(n):
    return [f"S{i:02d}" for i in range(n)]


@pytest.mark.parametrize("n,n_train,n_val", [(23, 17, 6), (4, 3, 1), (7, 5, 2), (2, 1, 1)])
def test_split_sizes(n, n_train, n_val):
    train, val = split_participants(ids(n), 0.25, seed=1)
    assert (len(train), len(val)) == (n_train, n_val)
    assert set(train).isdisjoint(val) and set(train) | set(val) == set(ids(n))


def test_split_deterministic_and_seed_dependent():
    assert split_participants(ids(23), 0.25, 5) == split_participants(ids(23), 0.25, 5)
    splits = {tuple(split_participants(ids(23), 0.25, s)[1]) for s in range(10)}
    assert len(splits) > 1


def test_split_errors():
    with pytest.raises(ValueError):
        split_participants(["a"], 0.25, 0)


def test_iou_examples():
    g = np.zeros((1, 4, 4), int)
    g[0, 0, :2] = 1
    assert iou_from_predictions(g, g, 1) == 1.0
    p = np.zeros_like(g)
    p[0, 3, :2] = 1
    assert iou_from_predictions(p, g, 1) == 0.0
    p = np.zeros_like(g)
    p[0, 0, 1:3] = 1
    assert iou_from_predictions(p, g, 1) == pytest.approx(1 / 3)


def test_iou_multiclass_mean_and_empty_class():
    g = np.zeros((1, 4, 4), int)
    g[0, 0, 0] = 1
    # class 2 absent everywhere scores 1; class 1 perfect
    assert iou_from_predictions(g, g, 3) == 1.0
    p = g.copy()
    p[0, 3, 3] = 2
    assert iou_from_predictions(p, g, 3) == pytest.approx(0.5)


def test_task_labels():
    lab = np.array([0, 1, 2, 1])
    assert task_labels(lab, "multiclass").tolist() == [0, 1, 2, 1]
    assert task_labels(lab, "single-cmb").tolist() == [0, 1, 0, 1]
    assert task_labels(lab, "single-iron").tolist() == [0, 0, 1, 0]
    assert decode_labels(task_labels(lab, "single-iron"), "single-iron").tolist() == [0, 0, 2, 0]
    assert decode_labels(task_labels(lab, "multiclass"), "multiclass").tolist() == [0, 1, 2, 1]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(modalities=("QSM",))
    with pytest.raises(ValueError):
        TrainConfig(task="binary")
    cfg = TrainConfig(augment={"n_translations": 0})
    assert isinstance(cfg.augment, AugmentConfig)


@pytest.fixture(scope="module")
def small_cohort():
    base = PhantomConfig(dims=(32, 32, 8), min_separation_vox=6, qsm_spikes=4)
    tpl = CohortConfig(base=base, cmb_range=(1, 2), iron_range=(1, 1), calcification_range=(0, 1))
    return generate_cohort(4, tpl, master_seed=2)


def _slices(cohort, modalities=("SWI",)):
    return [s for st in cohort for s in study_slices(st, modalities, "multiclass", (32, 32))]


def _tiny_unet(**kw):
    return UNetConfig(**{"n_levels": 5, "base_width": 4, "canvas": (32, 32), "n_classes": 3,
                         "head": "linear_softmax", **kw})


def test_fit_loss_decreases(small_cohort):
    sl = [s for s in _slices(small_cohort[:1]) if s.has_label()][:4]
    cfg = TrainConfig(max_epochs=15, batch_size=4, lr=1e-2, class_weights=(1, 20, 20),
                      augment=AugmentConfig.none())
    _, hist = fit(sl, sl, _tiny_unet(), cfg)
    losses = [e["loss"] for e in hist["epochs"]]
    assert losses[-1] < losses[0]
    assert len(hist["epochs"]) == 15
    assert hist["best_epoch"] == 1 + int(np.argmax([e["val_iou"] for e in hist["epochs"]]))


def test_fit_one_epoch_returns_that_snapshot(small_cohort):
    sl = _slices(small_cohort[:1])[:4]
    cfg = TrainConfig(max_epochs=1, batch_size=2, augment=AugmentConfig.none())
    model, hist = fit(sl, sl, _tiny_unet(), cfg)
    assert hist["best_epoch"] == 1 and len(hist["epochs"]) == 1
    assert not model.training


def test_fit_is_deterministic(small_cohort):
    sl = _slices(small_cohort[:1])[:4]
    cfg = TrainConfig(max_epochs=2, batch_size=2, augment=AugmentConfig.none(), seed=4)
    a, _ = fit(sl, sl, _tiny_unet(), cfg)
    b, _ = fit(sl, sl, _tiny_unet(), cfg)
    for x, y in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(x, y)


def test_fit_rejects_non_finite_input():
    bad = Slice2D(np.full((1, 32, 32), np.nan), np.zeros((32, 32)))
    cfg = TrainConfig(max_epochs=1, batch_size=2, augment=AugmentConfig.none())
    with pytest.raises(TrainingError, match="non-finite"):
        fit([bad, bad], [bad], _tiny_unet(), cfg)


def test_fit_channel_mismatch(small_cohort):
    sl = _slices(small_cohort[:1], ("SWI", "QSM"))[:2]
    with pytest.raises(ValueError, match="channels"):
        fit(sl, sl, _tiny_unet(), TrainConfig(max_epochs=1, augment=AugmentConfig.none()))


def test_loocv_structure_and_leakage(small_cohort, tmp_path):
    cfg = TrainConfig(max_epochs=1, batch_size=8, modalities=("SWI", "QSM"),
                      augment=AugmentConfig(n_translations=1, n_rotations=0, flip_lr=True,
                                            translation_range=(-3, 3)))
    folds = loocv(small_cohort, _tiny_unet(), cfg, out_dir=tmp_path)
    assert [f.error for f in folds] == [None] * 4
    assert sorted(f.held_out_participant for f in folds) == sorted(
        s.participant_id for s in small_cohort)
    assert len({f.seed for f in folds}) == 4
    for f in folds:
        assert f.predicted_labels.dims == (32, 32, 8)
        assert len(f.rows) == 2
        assert (tmp_path / "checkpoints" / f"{f.held_out_participant}.ckpt").exists()
    manifest = run_manifest(folds, _tiny_unet(), cfg)
    assert audit_leakage(manifest) == []
    tampered = dict(manifest)
    fold0 = dict(manifest["folds"][0])
    fold0["train_provenance"] = fold0["train_provenance"] + [[fold0["held_out"], 0]]
    tampered["folds"] = [fold0] + manifest["folds"][1:]
    assert len(audit_leakage(tampered)) == 1


def test_loocv_missing_modality_names_study(small_cohort):
    from deepmir.volume_io import Study
    broken = list(small_cohort)
    s = broken[2]
    broken[2] = Study(s.participant_id, {"SWI": s.modalities["SWI"]}, s.labels)
    cfg = TrainConfig(max_epochs=1, modalities=("SWI", "QSM"), augment=AugmentConfig.none())
    folds = loocv(broken, _tiny_unet(), cfg)
    assert all(f.error and s.participant_id in f.error for f in folds)
