import json
import shutil

import numpy as np
import pytest

from deepmir.cli import ExperimentConfig, main
from deepmir.evaluate import MetricsReport, MetricsRow, report_from_rows
from deepmir.volume_io import Study, Volume3D, load_study, save_study
from oracles import wilcoxon_enumeration


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps({
        "cohort": {"base": {"dims": [32, 32, 8], "min_separation_vox": 6, "qsm_spikes": 4},
                   "cmb_range": [0, 2], "iron_range": [1, 1], "calcification_range": [0, 1]},
        "unet": {"n_levels": 5, "base_width": 4, "canvas": [32, 32], "head": "linear_softmax"},
        "train": {"max_epochs": 1, "batch_size": 8,
                  "augment": {"n_translations": 0, "n_rotations": 0, "flip_lr": False}},
    }))
    return path


@pytest.fixture(scope="module")
def cohort(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("cohort")
    assert main(["phantom", "--config", str(small_config), "--n", "4", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def loocv_runs(tmp_path_factory, cohort, small_config):
    runs = {}
    for mods in ("SWI", "SWI,QSM"):
        out = tmp_path_factory.mktemp("run")
        code = main(["loocv", "--config", str(small_config), "--cohort", str(cohort),
                     "--out", str(out), "--modalities", mods, "--seed", "1"])
        runs[mods] = (code, out)
    return runs


def test_phantom_writes_studies(cohort):
    names = sorted(p.name for p in cohort.iterdir() if p.is_dir())
    assert names == ["P001", "P002", "P003", "P004"]
    cfg = json.loads((cohort / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["n_participants"] == 4


def test_phantom_rerun_bit_identical(cohort, small_config, tmp_path):
    main(["phantom", "--config", str(small_config), "--n", "4", "--seed", "7",
          "--out", str(tmp_path)])
    a, b = tree_bytes(cohort), tree_bytes(tmp_path)
    a = {k: v for k, v in a.items() if k.name != "config.json"}
    b = {k: v for k, v in b.items() if k.name != "config.json"}
    assert a == b


def test_phantom_invalid_dims(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--n", "2", "--dims", "4,4,4", "--out", str(tmp_path)])
    assert exc.value.code != 0
    assert "dims" in capsys.readouterr().err


def test_modalities_must_include_swi(tmp_path):
    with pytest.raises(SystemExit):
        main(["loocv", "--cohort", str(tmp_path), "--out", str(tmp_path), "--modalities", "QSM"])


def test_loocv_outputs(loocv_runs):
    code, out = loocv_runs["SWI,QSM"]
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["folds"]) == 4 and manifest["leakage_audit"] == []
    rep = MetricsReport.from_json(out / "reports" / "cmb.json")
    assert len(rep.rows) == 4
    assert (out / "reports" / "iron.csv").exists()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["modalities"] == ["SWI", "QSM"]
    assert cfg["unet"]["in_channels"] == 2
    assert len(list((out / "predictions").iterdir())) == 4


def test_loocv_missing_modality(cohort, small_config, tmp_path, capsys):
    broken = tmp_path / "cohort"
    shutil.copytree(cohort, broken)
    s = load_study(broken / "P002")
    shutil.rmtree(broken / "P002")
    save_study(Study(s.participant_id, {"SWI": s.modalities["SWI"]}, s.labels), broken / "P002")
    code = main(["loocv", "--config", str(small_config), "--cohort", str(broken),
                 "--out", str(tmp_path / "run"), "--modalities", "SWI,QSM"])
    assert code == 1
    assert "P002" in capsys.readouterr().err


def test_stats_on_two_runs(loocv_runs, tmp_path, capsys):
    a = loocv_runs["SWI"][1] / "reports" / "cmb.json"
    b = loocv_runs["SWI,QSM"][1] / "reports" / "cmb.json"
    code = main(["stats", str(a), str(b), "--out", str(tmp_path / "cmp.json")])
    if code == 0:
        cmp = json.loads((tmp_path / "cmp.json").read_text())
        assert set(cmp["tests"]) == {"S", "P", "m"}
    else:
        # one-epoch models can produce identical rows; that must be the reported reason
        assert "undefined" in capsys.readouterr().err


def test_stats_self_comparison_fails(loocv_runs, capsys):
    a = loocv_runs["SWI"][1] / "reports" / "cmb.json"
    assert main(["stats", str(a), str(a)]) == 1
    assert "undefined" in capsys.readouterr().err


def _report(tmp_path, name, values, ids=None):
    ids = ids or [f"P{i}" for i in range(len(values))]
    rows = [MetricsRow(i, 1, 1, 0, 0, s, p, 1, 1, 3.4, 3.4) for i, (s, p) in zip(ids, values)]
    _, path = report_from_rows(rows, 3.0, label=name).write(tmp_path / name)
    return path


def test_stats_three_participants_match_enumeration(tmp_path):
    base = [(0.5, 0.2), (0.6, 0.3), (0.7, 0.1)]
    var = [(0.9, 0.25), (0.8, 0.6), (1.0, 0.5)]
    a, b = _report(tmp_path, "a", base), _report(tmp_path, "b", var)
    assert main(["stats", str(a), str(b), "--out", str(tmp_path / "c.json")]) == 0
    cmp = json.loads((tmp_path / "c.json").read_text())
    _, p_ref = wilcoxon_enumeration([v[0] for v in var], [v[0] for v in base])
    assert cmp["tests"]["S"]["p"] == pytest.approx(p_ref)
    assert cmp["tests"]["S"]["significant"] is False


def test_stats_disjoint_participants(tmp_path, capsys):
    a = _report(tmp_path, "a", [(0.5, 0.5)] * 3)
    b = _report(tmp_path, "b", [(0.6, 0.5)] * 3, ids=["X1", "X2", "X3"])
    assert main(["stats", str(a), str(b)]) == 1
    assert "differ" in capsys.readouterr().err


def test_predict_and_evaluate(loocv_runs, cohort, tmp_path):
    _, run = loocv_runs["SWI,QSM"]
    ckpt = run / "checkpoints" / "P001.ckpt"
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert main(["predict", "--checkpoint", str(ckpt), "--study", str(cohort / "P001"),
                 "--out", str(out1)]) == 0
    main(["predict", "--checkpoint", str(ckpt), "--study", str(cohort / "P001"),
          "--out", str(out2)])
    assert tree_bytes(out1) == tree_bytes(out2)
    pred = load_study(out1)
    assert pred.labels.dims == load_study(cohort / "P001").dims
    # the held-out prediction written during LOOCV came from the same checkpoint
    assert np.array_equal(pred.labels.data, load_study(run / "predictions" / "P001").labels.data)
    assert main(["predict", "--checkpoint", str(ckpt), "--study", str(cohort / "P001"),
                 "--out", str(tmp_path / "bad"), "--modalities", "SWI"]) == 1


def test_evaluate_identity_empty_and_swap(cohort, tmp_path):
    ref = cohort / "P003"
    s = load_study(ref)
    assert main(["evaluate", "--pred", str(ref), "--ref", str(ref),
                 "--out", str(tmp_path / "same")]) == 0
    rows = json.loads((tmp_path / "same.json").read_text())
    assert all(float(r["S"]) == 1.0 and float(r["P"]) == 1.0 for r in rows)

    empty = Volume3D(np.zeros(s.dims, np.uint8), s.spacing_mm, "u8")
    save_study(Study("E", {"SWI": s.modalities["SWI"]}, empty), tmp_path / "empty")
    main(["evaluate", "--pred", str(tmp_path / "empty"), "--ref", str(ref),
          "--out", str(tmp_path / "e")])
    iron = json.loads((tmp_path / "e.json").read_text())[1]
    assert float(iron["S"]) == 0.0 and int(iron["FN"]) == int(iron["ref_count"]) >= 1

    main(["evaluate", "--pred", str(ref), "--ref", str(tmp_path / "empty"),
          "--out", str(tmp_path / "swap")])
    swapped = json.loads((tmp_path / "swap.json").read_text())[1]
    assert int(swapped["FP"]) == int(iron["FN"]) and int(swapped["FN"]) == int(iron["FP"])


def test_evaluate_dims_mismatch(cohort, tmp_path):
    small = Volume3D(np.zeros((8, 8, 8), np.uint8), dtype="u8")
    save_study(Study("S", {"SWI": Volume3D(np.zeros((8, 8, 8)))}, small), tmp_path / "s")
    assert main(["evaluate", "--pred", str(tmp_path / "s"), "--ref", str(cohort / "P001"),
                 "--out", str(tmp_path / "x")]) == 1


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(tolerance_cmb=0)
    cfg = ExperimentConfig.from_dict(ExperimentConfig().to_dict())
    assert cfg.tolerances[1] == 3.0 and cfg.tolerances[2] == 5.0
