"""Training loop, participant splits, IoU model selection and leave-one-out CV."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentConfig, build_training_set
from .evaluate import MetricsRow, binarize, evaluate_participant, DEFAULT_TOLERANCE
from .model import DeepMIR, UNetConfig, build, predict_volume, save_checkpoint, predict_slices
from .preprocess import Slice2D, pad_to_canvas, prepare_study, slice_axial
from .seeding import derive_seed
from .volume_io import LabelClass, Study, Volume3D, save_study

log = logging.getLogger(__name__)

TASKS = {
    # task -> (n_classes, label codes kept, in order of output class index)
    "multiclass": (3, (1, 2)),
    "single-cmb": (1, (1,)),
    "single-iron": (1, (2,)),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    val_fraction: float = 0.25
    modalities: tuple[str, ...] = ("SWI",)
    task: str = "multiclass"
    qsm_k: float = 5.0
    # per-class loss weights (background first); None = unweighted
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.modalities = tuple(self.modalities)
        self.betas = tuple(self.betas)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if "SWI" not in self.modalities:
            raise ValueError("modalities must include SWI")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def n_classes(self) -> int:
        return TASKS[self.task][0]

    @property
    def label_codes(self) -> tuple[int, ...]:
        return TASKS[self.task][1]


def split_participants(ids: Sequence[str], val_fraction: float, seed: int):
    """Random participant-level split; the validation side gets round(f*n), at least 1."""
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 participants to split")
    n_val = min(max(1, round(val_fraction * len(ids))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def task_labels(labels: np.ndarray, task: str) -> np.ndarray:
    """Map label codes to training targets (class index) for a task."""
    codes = TASKS[task][1]
    out = np.zeros_like(labels)
    for k, code in enumerate(codes, start=1):
        out[labels == code] = k
    return out


def decode_labels(targets: np.ndarray, task: str) -> np.ndarray:
    codes = (0,) + TASKS[task][1]
    return np.asarray(codes, dtype=np.uint8)[targets]


def study_slices(study: Study, modalities: Sequence[str], task: str, canvas,
                 qsm_k: float = 5.0) -> list[Slice2D]:
    """Preprocess, slice and pad a study; label planes hold task targets."""
    prepared = prepare_study(study, qsm_k)
    out = []
    for s in slice_axial(prepared, modalities):
        if s.label_plane is not None:
            s = s.replace(label_plane=task_labels(s.label_plane, task))
        out.append(pad_to_canvas(s, canvas))
    return out


def _to_arrays(slices: Sequence[Slice2D]):
    x = np.stack([s.channels for s in slices]).astype(np.float32)
    y = np.stack([s.label_plane for s in slices]).astype(np.int64)
    return x, y


def _predict_classes(probs: np.ndarray) -> np.ndarray:
    if probs.shape[1] == 1:
        return (probs[:, 0] > 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def iou_from_predictions(pred: np.ndarray, target: np.ndarray, n_classes: int) -> float:
    """Pooled IoU; multiclass averages the non-background classes.

    A class absent from both prediction and target scores 1.
    """
    classes = [1] if n_classes == 1 else list(range(1, n_classes))
    scores = []
    for c in classes:
        p, g = pred == c, target == c
        union = np.logical_or(p, g).sum()
        scores.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(scores))


def validation_iou(model: DeepMIR, val_slices: Sequence[Slice2D], batch_size: int = 16) -> float:
    if not val_slices:
        raise ValueError("empty validation set")
    x, y = _to_arrays(val_slices)
    pred = _predict_classes(predict_slices(model, x, batch_size))
    return iou_from_predictions(pred, y, model.config.n_classes)


def _optimizer(model: DeepMIR, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)


def fit(train_slices: Sequence[Slice2D], val_slices: Sequence[Slice2D],
        unet_config: UNetConfig, train_config: TrainConfig):
    """Train for up to max_epochs and keep the weights with the best validation IoU.

    Ties go to the earliest epoch. Returns the model (best weights loaded) and
    a log with one entry per epoch.
    """
    if not train_slices or not val_slices:
        raise ValueError("training and validation sets must be non-empty")
    cfg = train_config
    torch.manual_seed(derive_seed("torch", cfg.seed) % 2**63)
    rng = np.random.default_rng(derive_seed("shuffle", cfg.seed))
    model = build(unet_config)
    opt = _optimizer(model, cfg)
    x_all, y_all = _to_arrays(train_slices)
    if x_all.shape[1] != unet_config.in_channels:
        raise ValueError(f"slices have {x_all.shape[1]} channels, model expects "
                         f"{unet_config.in_channels}")
    x_all, y_all = torch.from_numpy(x_all), torch.from_numpy(y_all)
    weight = None
    if cfg.class_weights is not None:
        weight = torch.tensor(cfg.class_weights, dtype=torch.float32)
        if len(weight) != max(2, unet_config.n_classes):
            raise ValueError(f"class_weights needs {max(2, unet_config.n_classes)} entries")
    nll = torch.nn.NLLLoss(weight=weight)

    history, best_state, best_iou, best_epoch = [], None, -1.0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(x_all))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad()
            loss = nll(model.log_probs(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // cfg.batch_size}; "
                    f"input range [{xb.min().item():.3g}, {xb.max().item():.3g}]"
                )
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        iou = validation_iou(model, val_slices)
        entry = {"epoch": epoch, "loss": total / count, "val_iou": iou,
                 "seconds": time.perf_counter() - t0}
        history.append(entry)
        log.info("epoch %d loss %.5f val_iou %.4f", epoch, entry["loss"], iou)
        if iou > best_iou:
            best_iou, best_epoch = iou, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, {"epochs": history, "best_epoch": best_epoch, "best_val_iou": best_iou}


@dataclass
class FoldResult:
    held_out_participant: str
    seed: int
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    best_epoch: int = 0
    best_val_iou: float = 0.0
    predicted_labels: Volume3D | None = None
    reference_labels: Volume3D | None = None
    rows: list[MetricsRow] = field(default_factory=list)
    log: dict = field(default_factory=dict)
    train_provenance: list[tuple[str, int]] = field(default_factory=list)
    val_provenance: list[tuple[str, int]] = field(default_factory=list)
    checkpoint: str | None = None
    prediction: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def manifest_entry(self) -> dict:
        return {
            "held_out": self.held_out_participant,
            "seed": self.seed,
            "train_ids": self.train_ids,
            "val_ids": self.val_ids,
            "best_epoch": self.best_epoch,
            "best_val_iou": self.best_val_iou,
            "log": self.log,
            "train_provenance": [list(p) for p in self.train_provenance],
            "val_provenance": [list(p) for p in self.val_provenance],
            "checkpoint": self.checkpoint,
            "prediction": self.prediction,
            "rows": [r.as_csv_row() for r in self.rows],
            "error": self.error,
        }


def _augmented(slices_by_id: dict, ids: Sequence[str], aug: AugmentConfig) -> list[Slice2D]:
    pooled = [s for pid in ids for s in slices_by_id[pid]]
    return build_training_set(pooled, aug)


def run_fold(index: int, studies: Sequence[Study], unet_config: UNetConfig,
             train_config: TrainConfig, out_dir=None,
             slices_by_id: dict | None = None) -> FoldResult:
    tc = train_config
    held = studies[index]
    pid = held.participant_id
    fold_seed = derive_seed("fold", tc.seed, index)
    result = FoldResult(pid, fold_seed)
    try:
        for s in studies:
            missing = [m for m in tc.modalities if m not in s.modalities]
            if missing:
                raise KeyError(f"study {s.participant_id} lacks modality {', '.join(missing)}")
        canvas = unet_config.canvas
        if slices_by_id is None:
            slices_by_id = {s.participant_id: study_slices(s, tc.modalities, tc.task, canvas,
                                                           tc.qsm_k) for s in studies}
        others = [s.participant_id for s in studies if s.participant_id != pid]
        train_ids, val_ids = split_participants(others, tc.val_fraction, fold_seed)
        aug = tc.augment
        train_set = _augmented(slices_by_id, train_ids,
                               _with_seed(aug, derive_seed("augment-train", fold_seed)))
        val_set = _augmented(slices_by_id, val_ids,
                             _with_seed(aug, derive_seed("augment-val", fold_seed)))
        ucfg = UNetConfig(**{**asdict(unet_config), "in_channels": len(tc.modalities),
                             "n_classes": tc.n_classes,
                             "seed": derive_seed("init", fold_seed)})
        fold_tc = TrainConfig(**{**asdict(tc), "seed": derive_seed("train", fold_seed)})
        model, history = fit(train_set, val_set, ucfg, fold_tc)

        probs = predict_volume(model, prepare_study(held, tc.qsm_k), tc.modalities)
        if tc.n_classes == 1:
            pred = binarize(probs, "single", label_code=tc.label_codes[0])
        else:
            pred = binarize(probs, "multiclass")
        result.train_ids, result.val_ids = train_ids, val_ids
        result.train_provenance = [s.provenance for s in train_set]
        result.val_provenance = [s.provenance for s in val_set]
        result.log = history
        result.best_epoch = history["best_epoch"]
        result.best_val_iou = history["best_val_iou"]
        result.predicted_labels = pred
        result.reference_labels = held.labels
        if held.labels is not None:
            result.rows = [
                evaluate_participant(pid, pred, held.labels, code,
                                     DEFAULT_TOLERANCE[LabelClass(code)])
                for code in tc.label_codes
            ]
        if out_dir is not None:
            out_dir = Path(out_dir)
            ckpt = out_dir / "checkpoints" / f"{pid}.ckpt"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, ckpt, {"modalities": list(tc.modalities), "task": tc.task,
                                          "qsm_k": tc.qsm_k, "held_out": pid})
            pred_dir = out_dir / "predictions" / pid
            save_study(Study(pid, {"SWI": held.modalities["SWI"]}, pred), pred_dir)
            result.checkpoint, result.prediction = str(ckpt), str(pred_dir)
    except Exception as exc:  # a failed fold is recorded and the run continues
        log.exception("fold %d (%s) failed", index, pid)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _with_seed(aug: AugmentConfig, seed: int) -> AugmentConfig:
    return AugmentConfig(**{**asdict(aug), "seed": seed})


def _run_fold_worker(args):
    torch.set_num_threads(1)
    return run_fold(*args)


def loocv(studies: Sequence[Study], unet_config: UNetConfig, train_config: TrainConfig,
          out_dir=None, jobs: int = 1) -> list[FoldResult]:
    """Leave-one-participant-out cross-validation.

    Fold i trains and validates on the other participants only (split by
    participant) and predicts study i with the best-IoU weights.
    """
    if len(studies) < 3:
        raise ValueError("loocv needs at least 3 studies")
    ids = [s.participant_id for s in studies]
    if len(set(ids)) != len(ids):
        raise ValueError("participant ids must be unique")
    tc = train_config
    if jobs > 1:
        args = [(i, studies, unet_config, tc, out_dir) for i in range(len(studies))]
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_fold_worker, args))
    slices_by_id = {s.participant_id: study_slices(s, tc.modalities, tc.task, unet_config.canvas,
                                                   tc.qsm_k)
                    for s in studies
                    if all(m in s.modalities for m in tc.modalities)}
    return [run_fold(i, studies, unet_config, tc, out_dir, slices_by_id)
            for i in range(len(studies))]


def run_manifest(folds: Sequence[FoldResult], unet_config: UNetConfig,
                 train_config: TrainConfig) -> dict:
    return {
        "unet_config": asdict(unet_config),
        "train_config": asdict(train_config),
        "folds": [f.manifest_entry() for f in folds],
    }


def audit_leakage(manifest: dict) -> list[str]:
    """Violations where a fold's training or validation data touches its held-out participant."""
    problems = []
    for fold in manifest["folds"]:
        held = fold["held_out"]
        if held in fold["train_ids"] or held in fold["val_ids"]:
            problems.append(f"{held}: listed in its own training/validation ids")
        if set(fold["train_ids"]) & set(fold["val_ids"]):
            problems.append(f"{held}: training and validation ids overlap")
        for part in ("train_provenance", "val_provenance"):
            n = sum(1 for p, _ in fold[part] if p == held)
            if n:
                problems.append(f"{held}: {n} {part.split('_')[0]} slices from held-out participant")
    return problems
