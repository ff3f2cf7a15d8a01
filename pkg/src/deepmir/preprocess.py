"""Intensity normalisation, QSM truncation, SWI synthesis, slicing and padding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume_io import Study, Volume3D, validate_alignment


@dataclass(frozen=True)
class NormalizationParams:
    mean: float
    std: float


@dataclass(frozen=True, eq=False)
class Slice2D:
    """One axial slice: ``channels`` has shape (C, w, h), indexed [c, x, y]."""

    channels: np.ndarray
    label_plane: np.ndarray | None = None
    provenance: tuple[str, int] = ("", 0)
    modalities: tuple[str, ...] = ()

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3:
            raise ValueError(f"channels must be (C, w, h), got {ch.shape}")
        object.__setattr__(self, "channels", ch)
        if self.label_plane is not None:
            lab = np.asarray(self.label_plane, dtype=np.uint8)
            if lab.shape != ch.shape[1:]:
                raise ValueError(f"label plane {lab.shape} does not match channels {ch.shape[1:]}")
            object.__setattr__(self, "label_plane", lab)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.channels.shape[1:])

    def replace(self, channels=None, label_plane=None) -> "Slice2D":
        return Slice2D(
            self.channels if channels is None else channels,
            self.label_plane if label_plane is None else label_plane,
            self.provenance,
            self.modalities,
        )

    def has_label(self) -> bool:
        return self.label_plane is not None and bool(self.label_plane.any())


def _stats_values(data: np.ndarray, mask: Volume3D | None) -> np.ndarray:
    if mask is None:
        return data.astype(np.float64).ravel()
    return data[mask.data.astype(bool)].astype(np.float64)


def zscore_normalize(volume: Volume3D, mask: Volume3D | None = None):
    """Shift/scale a volume to zero mean and unit population variance.

    Statistics cover every voxel unless ``mask`` is given. A constant volume
    maps to all zeros with ``std`` recorded as 0.
    """
    values = _stats_values(volume.data, mask)
    mean = float(values.mean())
    std = float(values.std())
    data = volume.data.astype(np.float64) - mean
    if std > 0:
        data /= std
    else:
        data[:] = 0.0
    return volume.with_data(data.astype(np.float32), "f32"), NormalizationParams(mean, std)


def _f32_at_most(x: float) -> np.float32:
    v = np.float32(x)
    if float(v) > x:
        v = np.nextafter(v, np.float32(-np.inf))
    return v


def qsm_truncate(volume: Volume3D, k: float = 5.0, sigma: float | None = None,
                 mask: Volume3D | None = None) -> Volume3D:
    """Clip a QSM volume to the band [-k*sigma, k*sigma].

    ``sigma`` defaults to the population standard deviation of the input.
    Passing it explicitly fixes the band, which makes repeated application a
    no-op.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if sigma is None:
        sigma = float(_stats_values(volume.data, mask).std())
    bound = _f32_at_most(k * sigma)
    data = np.clip(volume.data.astype(np.float32), -bound, bound)
    return volume.with_data(data, "f32")


def _window_1d(n: int, size: int, kind: str) -> np.ndarray:
    """Frequency-domain taper in FFT index order, symmetric about DC."""
    freqs = np.fft.fftfreq(n) * n
    inside = np.abs(freqs) < size / 2
    if kind == "hamming":
        w = 0.54 + 0.46 * np.cos(2 * np.pi * freqs / size)
    elif kind == "boxcar":
        w = np.ones(n)
    else:
        raise ValueError(f"unknown window type {kind!r}")
    return np.where(inside, w, 0.0)


def homodyne_phase(magnitude: np.ndarray, phase: np.ndarray, window=(64, 64),
                   window_type: str = "hamming") -> np.ndarray:
    """High-pass phase of a stack of axial slices, arrays indexed [x, y, z]."""
    nx, ny = magnitude.shape[:2]
    if window[0] > nx or window[1] > ny:
        raise ValueError(f"window {tuple(window)} larger than slice {(nx, ny)}")
    z = magnitude.astype(np.float64) * np.exp(1j * phase.astype(np.float64))
    taper = np.outer(_window_1d(nx, window[0], window_type), _window_1d(ny, window[1], window_type))
    low = np.fft.ifft2(np.fft.fft2(z, axes=(0, 1)) * taper[..., None], axes=(0, 1))
    return np.angle(z * np.conj(low))


def negative_phase_mask(phase_hp: np.ndarray) -> np.ndarray:
    return np.where(phase_hp < 0, np.clip((phase_hp + np.pi) / np.pi, 0.0, 1.0), 1.0)


def compute_swi(magnitude: Volume3D, phase: Volume3D, window=(64, 64), power: int = 4,
                window_type: str = "hamming") -> Volume3D:
    """Susceptibility-weighted image from magnitude and phase (radians).

    Each axial slice is homodyne filtered: the complex image is divided by
    its k-space low-passed copy, the resulting phase drives a negative phase
    mask in [0, 1], and the magnitude is multiplied by mask**power.
    """
    if magnitude.dims != phase.dims:
        raise ValueError(f"magnitude {magnitude.dims} and phase {phase.dims} differ")
    phase_hp = homodyne_phase(magnitude.data, phase.data, window, window_type)
    swi = magnitude.data.astype(np.float64) * negative_phase_mask(phase_hp) ** power
    return magnitude.with_data(swi.astype(np.float32), "f32")


def prepare_study(study: Study, k: float = 5.0, use_mask: bool = False) -> Study:
    """Truncate QSM, then z-score every modality over the whole volume."""
    validate_alignment(study)
    mask = study.brain_mask if use_mask else None
    mods = {}
    for name, vol in study.modalities.items():
        if name == "QSM":
            vol = qsm_truncate(vol, k, mask=mask)
        mods[name], _ = zscore_normalize(vol, mask)
    return Study(study.participant_id, mods, study.labels, study.brain_mask)


def slice_axial(study: Study, modalities: Sequence[str] | None = None) -> list[Slice2D]:
    validate_alignment(study)
    modalities = tuple(modalities or study.modalities)
    missing = [m for m in modalities if m not in study.modalities]
    if missing:
        raise KeyError(f"study {study.participant_id} lacks modality {', '.join(missing)}")
    stack = np.stack([study.modalities[m].data for m in modalities])
    labels = None if study.labels is None else study.labels.data
    return [
        Slice2D(
            stack[:, :, :, z],
            None if labels is None else labels[:, :, z],
            (study.participant_id, z),
            modalities,
        )
        for z in range(study.dims[2])
    ]


def restack(slices: Sequence[Slice2D]) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of slice_axial: (C, nx, ny, nz) channels and (nx, ny, nz) labels."""
    slices = sorted(slices, key=lambda s: s.provenance[1])
    channels = np.stack([s.channels for s in slices], axis=-1)
    labels = None
    if all(s.label_plane is not None for s in slices):
        labels = np.stack([s.label_plane for s in slices], axis=-1)
    return channels, labels


def canvas_offsets(dims, canvas) -> tuple[int, int]:
    if dims[0] > canvas[0] or dims[1] > canvas[1]:
        raise ValueError(f"slice {tuple(dims)} exceeds canvas {tuple(canvas)}")
    return (canvas[0] - dims[0]) // 2, (canvas[1] - dims[1]) // 2


def pad_to_canvas(slice_: Slice2D, canvas=(256, 256)) -> Slice2D:
    """Centre a slice on the canvas: images edge-replicated, labels zero-filled."""
    w, h = slice_.dims
    ox, oy = canvas_offsets((w, h), canvas)
    pad = ((ox, canvas[0] - w - ox), (oy, canvas[1] - h - oy))
    channels = np.pad(slice_.channels, ((0, 0),) + pad, mode="edge")
    labels = slice_.label_plane
    if labels is not None:
        labels = np.pad(labels, pad, mode="constant", constant_values=0)
    return slice_.replace(channels, labels)


def crop_from_canvas(array: np.ndarray, dims) -> np.ndarray:
    """Undo pad_to_canvas on the trailing two axes of ``array``."""
    ox, oy = canvas_offsets(dims, array.shape[-2:])
    return array[..., ox:ox + dims[0], oy:oy + dims[1]]
