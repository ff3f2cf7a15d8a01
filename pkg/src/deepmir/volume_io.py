"""In-memory volumes and the MVOL on-disk container.

An MVOL study is a directory holding ``meta.json`` plus one headerless raw
file per volume. Modalities are float32, labels and masks uint8, all
little-endian with x varying fastest, then y, then z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np

SCHEMA_VERSION = 1
MODALITIES = ("SWI", "QSM", "T2w")

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class LabelClass(IntEnum):
    BACKGROUND = 0
    CMB = 1
    IRON = 2

    @property
    def label(self) -> str:
        return {0: "background", 1: "CMB", 2: "iron deposit"}[int(self)]


class FormatError(ValueError):
    """Malformed or inconsistent MVOL container."""


class AlignmentError(ValueError):
    """Volumes of a study do not share one grid."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A scalar volume indexed ``data[x, y, z]``.

    The array is stored read-only; build a new volume to change values.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype tag {self.dtype!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3D and non-empty, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        arr = np.array(arr, dtype=_DTYPES[self.dtype].newbyteorder("="), copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def with_data(self, data: np.ndarray, dtype: str | None = None) -> "Volume3D":
        return Volume3D(data, self.spacing_mm, dtype or self.dtype)

    def to_bytes(self) -> bytes:
        return self.data.astype(_DTYPES[self.dtype]).tobytes(order="F")

    @classmethod
    def from_bytes(cls, raw: bytes, dims, spacing_mm, dtype: str = "f32") -> "Volume3D":
        dt = _DTYPES[dtype]
        n = int(np.prod(dims))
        if len(raw) != n * dt.itemsize:
            raise FormatError(
                f"payload holds {len(raw) / dt.itemsize:g} samples, dims {tuple(dims)} need {n}"
            )
        arr = np.frombuffer(raw, dtype=dt).reshape(tuple(dims), order="F")
        return cls(arr, tuple(spacing_mm), dtype)


@dataclass(frozen=True, eq=False)
class Study:
    participant_id: str
    modalities: Mapping[str, Volume3D]
    labels: Volume3D | None = None
    brain_mask: Volume3D | None = None

    def __post_init__(self):
        mods = dict(self.modalities)
        for name, vol in mods.items():
            if name not in MODALITIES:
                raise FormatError(f"unknown modality {name!r}")
            if vol.dtype != "f32":
                raise FormatError(f"modality {name} must be f32")
        if "SWI" not in mods:
            raise FormatError(f"study {self.participant_id}: SWI is required")
        if self.labels is not None:
            if self.labels.dtype != "u8":
                raise FormatError("labels must be u8")
            bad = np.setdiff1d(np.unique(self.labels.data), [0, 1, 2])
            if bad.size:
                raise FormatError(f"invalid label values {bad.tolist()}")
        if self.brain_mask is not None:
            if self.brain_mask.dtype != "u8":
                raise FormatError("brain mask must be u8")
            if np.setdiff1d(np.unique(self.brain_mask.data), [0, 1]).size:
                raise FormatError("brain mask must be 0/1")
        object.__setattr__(self, "modalities", {k: mods[k] for k in MODALITIES if k in mods})

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.modalities["SWI"].dims

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return self.modalities["SWI"].spacing_mm

    def volumes(self) -> dict[str, Volume3D]:
        out = dict(self.modalities)
        if self.labels is not None:
            out["labels"] = self.labels
        if self.brain_mask is not None:
            out["brain_mask"] = self.brain_mask
        return out


def validate_alignment(study: Study) -> None:
    """Raise AlignmentError naming the first volume off the SWI grid."""
    ref = study.modalities["SWI"]
    for name, vol in study.volumes().items():
        if vol.dims != ref.dims or not np.allclose(vol.spacing_mm, ref.spacing_mm, rtol=0, atol=1e-9):
            raise AlignmentError(
                f"{name} grid {vol.dims} @ {vol.spacing_mm} differs from SWI "
                f"{ref.dims} @ {ref.spacing_mm}"
            )


def save_study(study: Study, path) -> None:
    validate_alignment(study)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "participant_id": study.participant_id,
        "dims": list(study.dims),
        "spacing_mm": list(study.spacing_mm),
        "modalities": [],
    }
    for name, vol in study.modalities.items():
        fname = f"{name}.f32"
        (path / fname).write_bytes(vol.to_bytes())
        meta["modalities"].append({"name": name, "file": fname})
    if study.labels is not None:
        (path / "labels.u8").write_bytes(study.labels.to_bytes())
        meta["labels"] = {"file": "labels.u8"}
    if study.brain_mask is not None:
        (path / "brain_mask.u8").write_bytes(study.brain_mask.to_bytes())
        meta["brain_mask"] = {"file": "brain_mask.u8"}
    (path / "meta.json").write_text(json.dumps(meta, indent=2))


def _read_payload(path: Path, entry: dict, dims, spacing, dtype: str) -> Volume3D:
    fpath = path / entry["file"]
    if not fpath.is_file():
        raise FileNotFoundError(f"missing payload {fpath}")
    return Volume3D.from_bytes(fpath.read_bytes(), dims, spacing, dtype)


def load_study(path) -> Study:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {meta.get('schema_version')!r}")
    dims = tuple(int(n) for n in meta["dims"])
    spacing = tuple(float(s) for s in meta["spacing_mm"])
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"bad dims {meta['dims']}")

    modalities = {}
    for entry in meta["modalities"]:
        name = entry["name"]
        if name not in MODALITIES:
            raise FormatError(f"unknown modality {name!r}")
        modalities[name] = _read_payload(path, entry, dims, spacing, "f32")
    labels = mask = None
    if meta.get("labels"):
        labels = _read_payload(path, meta["labels"], dims, spacing, "u8")
    if meta.get("brain_mask"):
        mask = _read_payload(path, meta["brain_mask"], dims, spacing, "u8")
    return Study(str(meta["participant_id"]), modalities, labels, mask)
