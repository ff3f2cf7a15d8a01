"""Desk-scale LOOCV comparison of SWI+QSM against SWI alone on a phantom cohort.

One call per master seed: generate the cohort, run both modality sets with
identical training seeds, and summarise mean sensitivity and precision per
class. Used by ``scripts/run_desk_loocv.py`` and the acceptance suite.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cli import ExperimentConfig
from .evaluate import class_name, cohort_report
from .phantom import generate_cohort
from .train import audit_leakage, loocv, run_manifest
from .volume_io import LabelClass

MODALITY_SETS = (("SWI", "QSM"), ("SWI",))


@dataclass
class DeskThresholds:
    cmb_sensitivity: float = 0.80
    iron_sensitivity: float = 0.70


def run_modalities(studies, cfg: ExperimentConfig, modalities, out_dir=None) -> dict:
    train = replace(cfg.train, modalities=tuple(modalities))
    unet = replace(cfg.unet, in_channels=len(modalities), n_classes=train.n_classes)
    t0 = time.perf_counter()
    folds = loocv(studies, unet, train, out_dir=out_dir)
    manifest = run_manifest(folds, unet, train)
    manifest["leakage_audit"] = audit_leakage(manifest)
    errors = [f"{f.held_out_participant}: {f.error}" for f in folds if not f.ok]
    out = {"modalities": list(modalities), "seconds": time.perf_counter() - t0,
           "errors": errors, "manifest": manifest, "classes": {}}
    ok = [f for f in folds if f.ok]
    for code in train.label_codes:
        if not ok:
            break
        rep = cohort_report(ok, code, cfg.tolerances[LabelClass(code)], cfg.magacc,
                            modalities=modalities, label="+".join(modalities))
        if out_dir is not None:
            rep.write(Path(out_dir) / "reports" / class_name(code).lower())
        out["classes"][class_name(code).lower()] = {
            "S": float(np.mean([r.S for r in rep.rows])),
            "P": float(np.mean([r.P for r in rep.rows])),
            "counts": [[r.id, r.TP, r.FP, r.FN] for r in rep.rows],
        }
    return out


def run_seed(cfg: ExperimentConfig, master_seed: int, out_dir=None,
             thresholds: DeskThresholds | None = None) -> dict:
    """Both modality sets on one phantom cohort; returns the verdict and its inputs."""
    th = thresholds or DeskThresholds()
    cfg = replace(cfg, seed=master_seed, train=replace(cfg.train, seed=master_seed))
    studies = generate_cohort(cfg.n_participants, cfg.cohort, master_seed=master_seed)
    runs = {}
    for mods in MODALITY_SETS:
        sub = None if out_dir is None else Path(out_dir) / f"seed{master_seed}" / "+".join(mods)
        runs["+".join(mods)] = run_modalities(studies, cfg, mods, sub)
    both, swi = runs["SWI+QSM"], runs["SWI"]
    checks = {}
    if both["errors"] or swi["errors"]:
        checks["folds_ok"] = False
    else:
        checks["cmb_sensitivity"] = both["classes"]["cmb"]["S"] >= th.cmb_sensitivity
        checks["iron_sensitivity"] = both["classes"]["iron"]["S"] >= th.iron_sensitivity
        checks["qsm_raises_cmb_precision"] = (both["classes"]["cmb"]["P"]
                                             > swi["classes"]["cmb"]["P"])
    result = {"master_seed": master_seed, "runs": runs, "checks": checks,
              "passed": all(checks.values()), "thresholds": asdict(th)}
    if out_dir is not None:
        path = Path(out_dir) / f"seed{master_seed}" / "summary.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result, indent=2))
    return result


def run_seeds(cfg: ExperimentConfig, seeds=(0, 1, 2), need: int = 2, out_dir=None,
              stop_early: bool = True) -> dict:
    """Run master seeds until ``need`` pass, or until that becomes impossible."""
    results = []
    for i, seed in enumerate(seeds):
        results.append(run_seed(cfg, seed, out_dir))
        passed = sum(r["passed"] for r in results)
        remaining = len(seeds) - i - 1
        if stop_early and (passed >= need or passed + remaining < need):
            break
    passed = sum(r["passed"] for r in results)
    return {"results": results, "passed": passed, "need": need, "verdict": passed >= need,
            "seeds_run": [r["master_seed"] for r in results], "seeds_planned": list(seeds)}


def summary_lines(result: dict) -> list[str]:
    lines = []
    for r in result["runs"].values():
        c = r["classes"]
        if not c:
            lines.append(f"  {'+'.join(r['modalities'])}: failed folds {r['errors']}")
            continue
        lines.append(f"  {'+'.join(r['modalities']):8s} S_cmb={c['cmb']['S']:.3f} "
                     f"S_iron={c['iron']['S']:.3f} P_cmb={c['cmb']['P']:.3f} "
                     f"P_iron={c['iron']['P']:.3f} ({r['seconds']:.0f}s)")
    return lines
