"""Command-line entry point: phantom, loocv, predict, evaluate, stats.

Every command accepts ``--config`` (JSON) whose values are overridden by
explicit flags, and writes the resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import stats
from .evaluate import (
    MetricsReport, binarize, class_name, cohort_report, compare_reports, evaluate_participant,
    write_rows_csv,
)
from .model import UNetConfig, load_checkpoint, predict_volume
from .phantom import CohortConfig, write_cohort
from .preprocess import prepare_study
from .train import TASKS, TrainConfig, audit_leakage, loocv, run_manifest
from .volume_io import LabelClass, MODALITIES, Study, load_study, save_study

log = logging.getLogger("deepmir")

MAGACC_FLAGS = {"pooled": "pooled", "per-participant": "per_participant"}


class CliError(RuntimeError):
    """A failure reported to the user as a one-line message with exit status 1."""


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(n_classes=3))
    train: TrainConfig = field(default_factory=TrainConfig)
    tolerance_cmb: float = 3.0
    tolerance_iron: float = 5.0
    physical_distance: bool = False
    magacc: str = "per_participant"
    n_participants: int = 8
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.tolerance_cmb <= 0 or self.tolerance_iron <= 0:
            raise ValueError("tolerances must be > 0")
        if self.magacc not in MAGACC_FLAGS.values():
            raise ValueError(f"unknown magnitude-accuracy variant {self.magacc!r}")

    @property
    def tolerances(self) -> dict[int, float]:
        return {LabelClass.CMB: self.tolerance_cmb, LabelClass.IRON: self.tolerance_iron}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "cohort" in d:
            d["cohort"] = CohortConfig.from_dict(d["cohort"])
        if "unet" in d:
            d["unet"] = UNetConfig.from_dict(d["unet"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid config {path}: {exc}") from exc


def _replace(obj, **kw):
    # rebuild through the constructor so __post_init__ validation runs again
    return type(obj)(**{**asdict(obj), **kw})


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    train, unet, top = {}, {}, {}
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
        train["seed"] = args.seed
    if getattr(args, "modalities", None):
        train["modalities"] = tuple(args.modalities)
    if getattr(args, "classes", None):
        train["task"] = args.classes
    if getattr(args, "epochs", None) is not None:
        train["max_epochs"] = args.epochs
    if getattr(args, "levels", None) is not None:
        unet["n_levels"] = args.levels
    if getattr(args, "magacc", None):
        top["magacc"] = MAGACC_FLAGS[args.magacc]
    if getattr(args, "n", None) is not None:
        top["n_participants"] = args.n
    if getattr(args, "out", None):
        top["out"] = str(args.out)
    for flag, key in (("tol_cmb", "tolerance_cmb"), ("tol_iron", "tolerance_iron")):
        if getattr(args, flag, None) is not None:
            top[key] = getattr(args, flag)
    cohort = cfg.cohort
    if getattr(args, "dims", None):
        cohort = CohortConfig(**{**asdict(cohort), "base": _replace(cohort.base, dims=args.dims)})
    t = _replace(cfg.train, **train)
    u = _replace(cfg.unet, **unet, in_channels=len(t.modalities), n_classes=t.n_classes)
    base = asdict(cfg)
    base.update(top)
    base.update(cohort=asdict(cohort), unet=asdict(u), train=asdict(t))
    return ExperimentConfig.from_dict(base)


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


# --- argument types --------------------------------------------------------------

def modality_list(text: str) -> list[str]:
    mods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in mods if m not in MODALITIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown modality {', '.join(bad)}; choose from "
                                         f"{', '.join(MODALITIES)}")
    if "SWI" not in mods:
        raise argparse.ArgumentTypeError("modalities must include SWI")
    if len(set(mods)) != len(mods):
        raise argparse.ArgumentTypeError("duplicate modality")
    return mods


def dims_triple(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be three integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 8:
        raise argparse.ArgumentTypeError(f"dims must be three integers >= 8, got {text!r}")
    return dims


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def positive_float(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


# --- commands ----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = resolve_config(args)
    if not cfg.out:
        raise CliError("--out is required")
    out = Path(cfg.out)
    paths = write_cohort(out, cfg.n_participants, cfg.cohort, cfg.seed)
    _write_config(cfg, out)
    print(f"wrote {len(paths)} studies to {out}")
    return 0


def load_cohort(cohort_dir) -> list[Study]:
    root = Path(cohort_dir)
    if not root.is_dir():
        raise CliError(f"cohort directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise CliError(f"no studies (meta.json) under {root}")
    return [load_study(d) for d in dirs]


def cmd_loocv(args) -> int:
    cfg = resolve_config(args)
    if not cfg.out:
        raise CliError("--out is required")
    studies = load_cohort(args.cohort)
    for s in studies:
        missing = [m for m in cfg.train.modalities if m not in s.modalities]
        if missing:
            raise CliError(f"study {s.participant_id} lacks requested modality "
                           f"{', '.join(missing)}")
    out = Path(cfg.out)
    _write_config(cfg, out)
    folds = loocv(studies, cfg.unet, cfg.train, out_dir=out, jobs=args.jobs)
    manifest = run_manifest(folds, cfg.unet, cfg.train)
    leaks = audit_leakage(manifest)
    manifest["leakage_audit"] = leaks
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    label = "+".join(cfg.train.modalities)
    ok = [f for f in folds if f.ok]
    for code in cfg.train.label_codes:
        if not ok:
            break
        rep = cohort_report(ok, code, cfg.tolerances[LabelClass(code)], cfg.magacc,
                            modalities=cfg.train.modalities, label=label,
                            physical=cfg.physical_distance)
        rep.write(out / "reports" / class_name(code).lower())
        s = rep.summary()
        print(f"{class_name(code)}: S={s['sensitivity']['mean']:.3f} "
              f"P={s['precision']['mean']:.3f} m={s['magnitude_accuracy']['value']:.3f}")
    failed = [f for f in folds if not f.ok]
    for f in failed:
        print(f"fold {f.held_out_participant} failed: {f.error}", file=sys.stderr)
    for msg in leaks:
        print(f"leakage: {msg}", file=sys.stderr)
    return 1 if failed or leaks else 0


def cmd_predict(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    modalities = tuple(args.modalities or extra.get("modalities", ("SWI",)))
    if len(modalities) != model.config.in_channels:
        raise CliError(f"checkpoint expects {model.config.in_channels} channels, "
                       f"got modalities {','.join(modalities)}")
    study = load_study(args.study)
    missing = [m for m in modalities if m not in study.modalities]
    if missing:
        raise CliError(f"study {study.participant_id} lacks modality {', '.join(missing)}")
    task = extra.get("task", "multiclass" if model.config.n_classes == 3 else "single-cmb")
    probs = predict_volume(model, prepare_study(study, extra.get("qsm_k", 5.0)), modalities)
    if model.config.n_classes == 1:
        pred = binarize(probs, "single", label_code=TASKS[task][1][0])
    else:
        pred = binarize(probs, "multiclass")
    save_study(Study(study.participant_id, {"SWI": study.modalities["SWI"]}, pred), args.out)
    print(f"wrote prediction for {study.participant_id} to {args.out}")
    return 0


def _label_volume(path):
    study = load_study(path)
    if study.labels is None:
        raise CliError(f"{path} has no label volume")
    return study.participant_id, study.labels


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    pid, pred = _label_volume(args.pred)
    _, ref = _label_volume(args.ref)
    if pred.dims != ref.dims:
        raise CliError(f"prediction dims {pred.dims} do not match reference {ref.dims}")
    rows = [evaluate_participant(pid, pred, ref, code, cfg.tolerances[code],
                                 cfg.physical_distance)
            for code in (LabelClass.CMB, LabelClass.IRON)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out.with_suffix(".csv"))
    out.with_suffix(".json").write_text(json.dumps([r.as_csv_row() for r in rows], indent=2))
    for r in rows:
        print(f"{class_name(r.class_code)}: TP={r.TP} FP={r.FP} FN={r.FN} S={r.S:.3f} P={r.P:.3f}")
    return 0


def cmd_stats(args) -> int:
    a = MetricsReport.from_json(args.baseline)
    b = MetricsReport.from_json(args.variant)
    if a.class_code != b.class_code:
        raise CliError(f"reports cover different classes ({class_name(a.class_code)} vs "
                       f"{class_name(b.class_code)})")
    try:
        comparison = compare_reports(a, b, alpha=0.05)
    except stats.UndefinedTestError as exc:
        raise CliError(f"Wilcoxon test undefined: {exc}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    comparison["baseline_summary"] = a.summary()
    comparison["variant_summary"] = b.summary()
    text = json.dumps(comparison, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    for metric, t in comparison["tests"].items():
        if t["p"] is None:
            print(f"{metric}: undefined ({t['error']})")
        else:
            flag = "significant" if t["significant"] else "n.s."
            print(f"{metric}: W={t['W']:g} p={t['p']:.4g} {flag}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepmir", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", required=out_required, help="output location")

    ph = sub.add_parser("phantom", help="generate a synthetic cohort")
    common(ph)
    ph.add_argument("--n", type=positive_int, help="number of participants")
    ph.add_argument("--dims", type=dims_triple, help="volume size, e.g. 64,64,32")
    ph.set_defaults(func=cmd_phantom)

    lo = sub.add_parser("loocv", help="leave-one-out cross-validation on a cohort")
    common(lo)
    lo.add_argument("--cohort", required=True, help="directory of MVOL studies")
    lo.add_argument("--modalities", type=modality_list, help="e.g. SWI,QSM")
    lo.add_argument("--classes", choices=sorted(TASKS))
    lo.add_argument("--levels", type=int, choices=(5, 6))
    lo.add_argument("--epochs", type=positive_int, help="max epochs")
    lo.add_argument("--jobs", type=positive_int, default=1, help="parallel folds")
    lo.add_argument("--magacc", choices=sorted(MAGACC_FLAGS))
    lo.add_argument("--tol-cmb", type=positive_float)
    lo.add_argument("--tol-iron", type=positive_float)
    lo.set_defaults(func=cmd_loocv)

    pr = sub.add_parser("predict", help="label one study with a trained checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--study", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--modalities", type=modality_list)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="score a predicted label study against a reference")
    ev.add_argument("--config")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", required=True, help="output stem for .csv/.json")
    ev.add_argument("--tol-cmb", type=positive_float)
    ev.add_argument("--tol-iron", type=positive_float)
    ev.set_defaults(func=cmd_evaluate)

    st = sub.add_parser("stats", help="paired comparison of two cohort reports")
    st.add_argument("baseline", help="report JSON of the baseline model")
    st.add_argument("variant", help="report JSON of the compared model")
    st.add_argument("--out", help="comparison JSON")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DEEPMIR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
