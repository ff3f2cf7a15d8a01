"""Lesion-level detection scoring and cohort reports.

Lesions are 26-connected components; a predicted and a reference lesion are
paired when their centroids lie within a tolerance (voxel units by default).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import stats
from .volume_io import LabelClass, Volume3D

DEFAULT_TOLERANCE = {LabelClass.CMB: 3.0, LabelClass.IRON: 5.0}
CSV_COLUMNS = ["id", "class", "TP", "FP", "FN", "S", "P", "m",
               "pred_count", "ref_count", "pred_vol_mm3", "ref_vol_mm3"]
_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)


def class_name(code: int) -> str:
    return {1: "CMB", 2: "iron"}[int(code)]


def class_code(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return {"cmb": 1, "iron": 2}[str(name).lower()]


def binarize(probs, mode: str = "single", threshold: float = 0.5,
             label_code: int = 1, spacing_mm=None) -> Volume3D:
    """Label volume from per-class probabilities.

    ``probs`` is a sequence of probability volumes (or an array with the
    class axis first). ``single`` writes ``label_code`` where p > threshold;
    ``multiclass`` takes the per-voxel argmax, ties going to the lower code.
    """
    if isinstance(probs, np.ndarray):
        arr = probs
    else:
        probs = list(probs)
        spacing_mm = spacing_mm or probs[0].spacing_mm
        arr = np.stack([p.data for p in probs])
    spacing_mm = spacing_mm or (1.5, 1.5, 1.5)
    if mode == "single":
        out = np.where(arr[0] > threshold, label_code, 0)
    elif mode == "multiclass":
        out = np.argmax(arr, axis=0)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return Volume3D(out.astype(np.uint8), spacing_mm, "u8")


@dataclass(frozen=True, eq=False)
class Lesion:
    voxels: np.ndarray
    class_code: int
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)

    @property
    def centroid(self) -> np.ndarray:
        return self.voxels.mean(axis=0)

    @property
    def voxel_count(self) -> int:
        return int(len(self.voxels))

    @property
    def volume_mm3(self) -> float:
        return self.voxel_count * float(np.prod(self.spacing_mm))


def connected_components_3d(labels: Volume3D, class_code: int) -> list[Lesion]:
    """Maximal 26-connected components of voxels carrying ``class_code``."""
    comp, n = ndimage.label(labels.data == class_code, structure=_CONNECTIVITY)
    if n == 0:
        return []
    coords = np.argwhere(comp > 0)
    ids = comp[tuple(coords.T)]
    order = np.argsort(ids, kind="stable")
    coords, ids = coords[order], ids[order]
    splits = np.flatnonzero(np.diff(ids)) + 1
    return [Lesion(v, int(class_code), labels.spacing_mm) for v in np.split(coords, splits)]


@dataclass
class MatchResult:
    TP: int
    FP: int
    FN: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def _distances(pred: Sequence[Lesion], ref: Sequence[Lesion], scale) -> np.ndarray:
    if not pred or not ref:
        return np.zeros((len(pred), len(ref)))
    pc = np.array([p.centroid for p in pred]) * scale
    rc = np.array([r.centroid for r in ref]) * scale
    return np.linalg.norm(pc[:, None, :] - rc[None, :, :], axis=-1)


def match_centroids(dist: np.ndarray, tolerance: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one pairing in ascending distance (ties: pred, then ref index)."""
    cand = [(float(dist[i, j]), i, j) for i, j in zip(*np.nonzero(dist <= tolerance))]
    cand.sort()
    used_p, used_r, pairs = set(), set(), []
    for d, i, j in cand:
        if i not in used_p and j not in used_r:
            used_p.add(i)
            used_r.add(j)
            pairs.append((int(i), int(j), d))
    return pairs


def match_lesions(pred: Sequence[Lesion], ref: Sequence[Lesion], tolerance: float,
                  physical: bool = False) -> MatchResult:
    """Pair lesions whose centroids are within ``tolerance``.

    Distances are in voxel index units; ``physical=True`` measures them in mm
    using each lesion's spacing instead.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    scale = 1.0
    if physical and (pred or ref):
        scale = np.asarray((pred or ref)[0].spacing_mm)
    pairs = match_centroids(_distances(pred, ref, scale), tolerance)
    tp = len(pairs)
    return MatchResult(tp, len(pred) - tp, len(ref) - tp, pairs)


def sensitivity(m: MatchResult) -> float:
    return 1.0 if m.TP + m.FN == 0 else m.TP / (m.TP + m.FN)


def precision(m: MatchResult) -> float:
    return 1.0 if m.TP + m.FP == 0 else m.TP / (m.TP + m.FP)


def voxel_accuracy(pred: Volume3D, ref: Volume3D, class_code: int) -> float:
    """(TP + TN) / all voxels for one class, counted voxel by voxel."""
    if pred.dims != ref.dims:
        raise ValueError(f"dims mismatch {pred.dims} vs {ref.dims}")
    p = pred.data == class_code
    r = ref.data == class_code
    return float((p == r).sum()) / p.size


@dataclass
class MetricsRow:
    id: str
    class_code: int
    TP: int
    FP: int
    FN: int
    S: float
    P: float
    pred_count: int
    ref_count: int
    pred_vol_mm3: float
    ref_vol_mm3: float

    @property
    def m(self) -> float:
        return math.hypot(self.S, self.P)

    def as_csv_row(self) -> dict:
        return {
            "id": self.id, "class": class_name(self.class_code),
            "TP": self.TP, "FP": self.FP, "FN": self.FN,
            "S": repr(self.S), "P": repr(self.P), "m": repr(self.m),
            "pred_count": self.pred_count, "ref_count": self.ref_count,
            "pred_vol_mm3": repr(self.pred_vol_mm3), "ref_vol_mm3": repr(self.ref_vol_mm3),
        }

    @classmethod
    def from_csv_row(cls, row: dict) -> "MetricsRow":
        return cls(
            row["id"], class_code(row["class"]), int(row["TP"]), int(row["FP"]), int(row["FN"]),
            float(row["S"]), float(row["P"]), int(row["pred_count"]), int(row["ref_count"]),
            float(row["pred_vol_mm3"]), float(row["ref_vol_mm3"]),
        )


def evaluate_participant(participant_id: str, pred: Volume3D, ref: Volume3D,
                         class_code: int, tolerance: float | None = None,
                         physical: bool = False) -> MetricsRow:
    if pred.dims != ref.dims:
        raise ValueError(f"{participant_id}: prediction {pred.dims} vs reference {ref.dims}")
    tolerance = tolerance or DEFAULT_TOLERANCE[LabelClass(class_code)]
    pl = connected_components_3d(pred, class_code)
    rl = connected_components_3d(ref, class_code)
    m = match_lesions(pl, rl, tolerance, physical)
    return MetricsRow(
        participant_id, int(class_code), m.TP, m.FP, m.FN, sensitivity(m), precision(m),
        len(pl), len(rl), sum(l.volume_mm3 for l in pl), sum(l.volume_mm3 for l in rl),
    )


def magnitude_accuracy(rows: Sequence[MetricsRow], variant: str = "pooled") -> float:
    """``pooled``: hypot of mean S and mean P. ``per_participant``: mean of each row's hypot."""
    if not rows:
        raise ValueError("no rows")
    if variant == "pooled":
        return math.hypot(np.mean([r.S for r in rows]), np.mean([r.P for r in rows]))
    if variant == "per_participant":
        return float(np.mean([r.m for r in rows]))
    raise ValueError(f"unknown magnitude-accuracy variant {variant!r}")


MAGACC_NOTE = (
    "pooled = sqrt(mean(S)^2 + mean(P)^2); per_participant = mean_i sqrt(S_i^2 + P_i^2). "
    "The per-participant variant is the one consistent with an 'average +/- SEM' "
    "presentation; the pooled variant is the formula applied to the averages. "
    "They differ in general."
)


@dataclass
class MetricsReport:
    class_code: int
    tolerance: float
    rows: list[MetricsRow]
    magacc_variant: str = "per_participant"
    modalities: list[str] = field(default_factory=list)
    label: str = ""
    baseline: "MetricsReport | None" = None

    @property
    def correlation_quantity(self) -> str:
        return "count" if self.class_code == LabelClass.CMB else "volume_mm3"

    def paired_quantities(self) -> tuple[list[float], list[float]]:
        if self.correlation_quantity == "count":
            return [r.pred_count for r in self.rows], [r.ref_count for r in self.rows]
        return [r.pred_vol_mm3 for r in self.rows], [r.ref_vol_mm3 for r in self.rows]

    def summary(self) -> dict:
        rows = self.rows
        pooled = magnitude_accuracy(rows, "pooled")
        per = magnitude_accuracy(rows, "per_participant")
        m_stats = stats.mean_sem_ci([r.m for r in rows])
        out = {
            "class": class_name(self.class_code),
            "label": self.label,
            "modalities": list(self.modalities),
            "tolerance": self.tolerance,
            "n": len(rows),
            "sensitivity": stats.mean_sem_ci([r.S for r in rows]),
            "precision": stats.mean_sem_ci([r.P for r in rows]),
            "magnitude_accuracy": {
                "variant": self.magacc_variant,
                "value": per if self.magacc_variant == "per_participant" else pooled,
                "pooled": pooled,
                "per_participant": per,
                "per_participant_sem": m_stats["sem"],
                "per_participant_ci": m_stats["ci"],
                "tables_consistent_variant": "per_participant",
                "note": MAGACC_NOTE,
            },
        }
        x, y = self.paired_quantities()
        try:
            r, p = stats.pearson(x, y)
            out["pearson"] = {"quantity": self.correlation_quantity, "r": r, "p": p}
        except ValueError as exc:
            out["pearson"] = {"quantity": self.correlation_quantity, "r": None, "p": None,
                              "error": str(exc)}
        if len(rows) >= 2:
            md, lo, hi = stats.bland_altman(x, y)
            out["bland_altman"] = {"quantity": self.correlation_quantity,
                                   "md": md, "lower": lo, "upper": hi}
        else:
            out["bland_altman"] = None
        out["wilcoxon_vs_baseline"] = (
            compare_reports(self.baseline, self) if self.baseline is not None else None
        )
        out["rows"] = [r.as_csv_row() for r in rows]
        return out

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        write_rows_csv(self.rows, csv_path)
        json_path.write_text(json.dumps(self.summary(), indent=2))
        return csv_path, json_path

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        rows = [MetricsRow.from_csv_row(r) for r in d["rows"]]
        return cls(class_code(d["class"]), d["tolerance"], rows,
                   d["magnitude_accuracy"]["variant"], d.get("modalities", []), d.get("label", ""))


def write_rows_csv(rows: Iterable[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r.as_csv_row())


def read_rows_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv_row(r) for r in csv.DictReader(fh)]


def compare_reports(baseline: MetricsReport, variant: MetricsReport,
                    alpha: float = 0.05) -> dict:
    """Paired Wilcoxon tests of S, P and m, variant against baseline.

    Raises UndefinedTestError when every metric has only zero differences.
    """
    a = {r.id: r for r in baseline.rows}
    b = {r.id: r for r in variant.rows}
    if set(a) != set(b):
        raise ValueError(f"participant sets differ: {sorted(set(a) ^ set(b))}")
    ids = sorted(a)
    out = {"baseline": baseline.label, "variant": variant.label, "alpha": alpha, "tests": {}}
    for metric in ("S", "P", "m"):
        xa = [getattr(a[i], metric) for i in ids]
        xb = [getattr(b[i], metric) for i in ids]
        try:
            res = stats.wilcoxon_signed_rank(xb, xa)
            out["tests"][metric] = {"W": res.statistic, "p": res.pvalue, "n": res.n,
                                    "method": res.method, "significant": res.pvalue < alpha}
        except stats.UndefinedTestError as exc:
            out["tests"][metric] = {"W": None, "p": None, "error": str(exc), "significant": False}
    if all(t["p"] is None for t in out["tests"].values()):
        raise stats.UndefinedTestError("all paired differences are zero for every metric")
    return out


def cohort_report(fold_results, class_code: int, tolerance: float | None = None,
                  magacc_variant: str = "per_participant", baseline: MetricsReport | None = None,
                  modalities: Sequence[str] = (), label: str = "",
                  physical: bool = False) -> MetricsReport:
    """Score every held-out prediction against its reference and aggregate."""
    if not fold_results:
        raise ValueError("no folds")
    tolerance = tolerance or DEFAULT_TOLERANCE[LabelClass(class_code)]
    rows = [
        evaluate_participant(f.held_out_participant, f.predicted_labels, f.reference_labels,
                             class_code, tolerance, physical)
        for f in fold_results if f.predicted_labels is not None
    ]
    return MetricsReport(class_code, tolerance, rows, magacc_variant, list(modalities), label,
                         baseline)


def report_from_rows(rows: Sequence[MetricsRow], tolerance: float, **kw) -> MetricsReport:
    return MetricsReport(rows[0].class_code, tolerance, list(rows), **kw)
