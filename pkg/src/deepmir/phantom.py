"""Synthetic multimodal studies with planted lesions and calcification mimics.

The brain is an ellipsoid with a smooth low-frequency texture. Microbleeds
and iron deposits are dark on SWI and paramagnetic (positive) on QSM;
calcifications are just as dark on SWI but diamagnetic (negative) on QSM and
stay unlabelled. Iron deposits sit in a central "deep grey" region, the
other lesions anywhere in the brain.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .seeding import derive_seed
from .volume_io import LabelClass, Study, Volume3D, save_study

KIND_CMB, KIND_IRON, KIND_CALC = "cmb", "iron", "calcification"


class PlacementError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    n_cmb: int = 3
    n_iron: int = 2
    n_calcification: int = 2
    cmb_radius_vox: tuple[float, float] = (0.8, 1.1)
    iron_radius_vox: tuple[float, float] = (1.4, 1.9)
    calc_radius_vox: tuple[float, float] = (0.8, 1.1)
    min_separation_vox: float = 10.0
    brain_fraction: float = 0.85
    deep_fraction: float = 0.45
    texture_sigma_vox: float = 6.0
    texture_amplitude: float = 0.08
    noise_sigma: float = 0.03
    swi_contrast_cmb: float = 0.7
    swi_contrast_iron: float = 0.35
    swi_contrast_calcification: float = 0.7
    qsm_texture: float = 0.02
    qsm_noise: float = 0.01
    qsm_cmb: float = 0.25
    qsm_iron: float = 0.1
    qsm_calcification: float = -0.3
    qsm_spikes: int = 0
    qsm_spike_amplitude: float = 5.0
    t2w_contrast: float = 0.15
    local_window: int = 5
    max_retries: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be three values >= 8, got {self.dims}")
        if min(self.n_cmb, self.n_iron, self.n_calcification) < 0:
            raise ValueError("lesion counts must be >= 0")


@dataclass
class CohortConfig:
    base: PhantomConfig = field(default_factory=PhantomConfig)
    cmb_range: tuple[int, int] = (0, 4)
    iron_range: tuple[int, int] = (1, 3)
    calcification_range: tuple[int, int] = (1, 3)
    n_zero_cmb: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        d["base"] = PhantomConfig(**d.get("base", {}))
        return cls(**d)


def _smooth_field(shape, sigma, rng) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() or 1.0)


def _ellipsoid_voxels(center, radii, dims) -> np.ndarray:
    lo = np.maximum(np.floor(center - radii).astype(int), 0)
    hi = np.minimum(np.ceil(center + radii).astype(int) + 1, dims)
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    grid = grid.reshape(-1, 3)
    inside = (((grid - center) / radii) ** 2).sum(axis=1) <= 1.0
    vox = grid[inside]
    if len(vox) == 0:
        vox = np.clip(np.rint(center), 0, np.array(dims) - 1).astype(int)[None]
    return vox


def local_background_mean(image: np.ndarray, lesion_mask: np.ndarray, brain: np.ndarray,
                          size: int) -> np.ndarray:
    """Mean of ``image`` over brain, non-lesion voxels in a size^3 window."""
    valid = (brain & ~lesion_mask).astype(np.float64)
    num = ndimage.uniform_filter(image * valid, size, mode="constant")
    den = ndimage.uniform_filter(valid, size, mode="constant")
    return np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)


def swi_contrast(cfg: PhantomConfig) -> dict[int, float]:
    """Fractional SWI darkening per kind code (1 CMB, 2 iron, 3 calcification)."""
    return {1: cfg.swi_contrast_cmb, 2: cfg.swi_contrast_iron, 3: cfg.swi_contrast_calcification}


def _brain_ellipsoid(cfg: PhantomConfig):
    dims = np.array(cfg.dims)
    center = (dims - 1) / 2.0
    semi = cfg.brain_fraction * dims / 2.0
    idx = np.indices(cfg.dims).astype(np.float64)
    rho = sum(((idx[a] - center[a]) / semi[a]) ** 2 for a in range(3))
    return center, semi, rho


def generate_with_manifest(config: PhantomConfig, participant_id: str = "P000"):
    """Build one phantom study and the log of planted lesions."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    dims = np.array(cfg.dims)
    center, semi, rho = _brain_ellipsoid(cfg)
    brain = rho <= 1.0

    plan = ([KIND_IRON] * cfg.n_iron + [KIND_CMB] * cfg.n_cmb
            + [KIND_CALC] * cfg.n_calcification)
    radii_range = {KIND_CMB: cfg.cmb_radius_vox, KIND_IRON: cfg.iron_radius_vox,
                   KIND_CALC: cfg.calc_radius_vox}
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    kind_map = np.zeros(cfg.dims, dtype=np.int8)
    manifest, centroids = [], []
    for kind in plan:
        for _ in range(cfg.max_retries):
            # deep region for iron, the rest of the brain shell for everything else
            if kind == KIND_IRON:
                u = rng.uniform(-1, 1, 3) * cfg.deep_fraction
            else:
                u = rng.uniform(-0.8, 0.8, 3)
                if (u ** 2).sum() > 0.8 ** 2:
                    continue
            c = center + u * semi
            radii = rng.uniform(*radii_range[kind], size=3)
            radii[2] = min(radii[2], radii[:2].mean())
            vox = _ellipsoid_voxels(c, radii, dims)
            centroid = vox.mean(axis=0)
            if not brain[tuple(vox.T)].all():
                continue
            if any(np.linalg.norm(centroid - o) < cfg.min_separation_vox for o in centroids):
                continue
            break
        else:
            raise PlacementError(f"could not place {kind} after {cfg.max_retries} tries")
        centroids.append(centroid)
        code = {KIND_CMB: 1, KIND_IRON: 2, KIND_CALC: 3}[kind]
        kind_map[tuple(vox.T)] = code
        if kind != KIND_CALC:
            labels[tuple(vox.T)] = code
        manifest.append({"kind": kind, "centroid": centroid.tolist(),
                         "voxel_count": int(len(vox)), "voxels": vox.tolist()})

    lesion = kind_map > 0
    noise = lambda s: rng.normal(0.0, s, cfg.dims)
    tex = [_smooth_field(cfg.dims, cfg.texture_sigma_vox, rng) for _ in range(3)]

    swi = np.where(brain, 1.0 + cfg.texture_amplitude * tex[0] + noise(cfg.noise_sigma), 0.0)
    swi = swi.astype(np.float32).astype(np.float64)
    local = local_background_mean(swi, lesion, brain, cfg.local_window)
    contrast = np.zeros(cfg.dims)
    for code, c in swi_contrast(cfg).items():
        contrast[kind_map == code] = c
    dark = local * (1.0 - contrast) - np.abs(noise(cfg.noise_sigma))
    swi = np.where(lesion, dark, swi)

    qsm = np.where(brain, cfg.qsm_texture * tex[1] + noise(cfg.qsm_noise), 0.0)
    qsm_shift = {1: cfg.qsm_cmb, 2: cfg.qsm_iron, 3: cfg.qsm_calcification}
    for code, shift in qsm_shift.items():
        qsm[kind_map == code] += shift
    if cfg.qsm_spikes:
        shell = brain & ~ndimage.binary_erosion(brain, iterations=2)
        cand = np.argwhere(shell)
        pick = cand[rng.choice(len(cand), size=min(cfg.qsm_spikes, len(cand)), replace=False)]
        # bipolar streaks: each spike sits next to one of opposite sign
        sign = rng.choice([-1.0, 1.0], len(pick))
        step = np.eye(3, dtype=int)[rng.integers(0, 3, len(pick))] * rng.choice([-1, 1], (len(pick), 1))
        partner = np.clip(pick + step, 0, dims - 1)
        qsm[tuple(pick.T)] = cfg.qsm_spike_amplitude * sign
        qsm[tuple(partner.T)] = -cfg.qsm_spike_amplitude * sign

    t2w = np.where(brain, 1.0 + cfg.texture_amplitude * tex[2] + noise(cfg.noise_sigma), 0.0)
    t2w[lesion] *= 1.0 - cfg.t2w_contrast

    sp = cfg.spacing_mm
    study = Study(
        participant_id,
        {"SWI": Volume3D(swi, sp), "QSM": Volume3D(qsm, sp), "T2w": Volume3D(t2w, sp)},
        labels=Volume3D(labels, sp, "u8"),
        brain_mask=Volume3D(brain.astype(np.uint8), sp, "u8"),
    )
    return study, manifest


def generate(config: PhantomConfig, participant_id: str = "P000") -> Study:
    return generate_with_manifest(config, participant_id)[0]


def cohort_configs(n: int, template: CohortConfig, master_seed: int) -> list[PhantomConfig]:
    """Per-participant phantom configs with lesion counts drawn from the template ranges."""
    if n < 1:
        raise ValueError("cohort needs n >= 1")
    rng = np.random.default_rng(derive_seed("cohort", master_seed))
    zero_cmb = set()
    if template.cmb_range[0] == 0 and template.n_zero_cmb > 0:
        zero_cmb = set(rng.permutation(n)[:template.n_zero_cmb].tolist())
    out = []
    for i in range(n):
        lo = template.cmb_range[0]
        if zero_cmb:
            lo = max(1, lo)
        n_cmb = 0 if i in zero_cmb else int(rng.integers(lo, max(lo, template.cmb_range[1]),
                                                         endpoint=True))
        out.append(replace(
            template.base,
            n_cmb=n_cmb,
            n_iron=int(rng.integers(*template.iron_range, endpoint=True)),
            n_calcification=int(rng.integers(*template.calcification_range, endpoint=True)),
            seed=derive_seed("phantom", master_seed, i),
        ))
    return out


def participant_ids(n: int) -> list[str]:
    return [f"P{i + 1:03d}" for i in range(n)]


def generate_cohort_with_manifests(n: int, template: CohortConfig | None = None,
                                   master_seed: int = 0):
    template = template or CohortConfig()
    out = []
    for pid, cfg in zip(participant_ids(n), cohort_configs(n, template, master_seed)):
        out.append(generate_with_manifest(cfg, pid))
    return out


def generate_cohort(n: int, template: CohortConfig | None = None,
                    master_seed: int = 0) -> list[Study]:
    return [s for s, _ in generate_cohort_with_manifests(n, template, master_seed)]


def write_cohort(out_dir, n: int, template: CohortConfig, master_seed: int) -> list[Path]:
    """Save a cohort as MVOL studies, each with a placements.json manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    cohort = generate_cohort_with_manifests(n, template, master_seed)
    for (study, manifest), cfg in zip(cohort, cohort_configs(n, template, master_seed)):
        path = out_dir / study.participant_id
        save_study(study, path)
        (path / "placements.json").write_text(json.dumps(
            {"participant_id": study.participant_id, "config": asdict(cfg),
             "lesions": manifest}, indent=2))
        paths.append(path)
    (out_dir / "cohort.json").write_text(json.dumps(
        {"n": n, "master_seed": master_seed, "template": asdict(template),
         "participants": [p.name for p in paths]}, indent=2))
    return paths


LESION_CLASS = {KIND_CMB: LabelClass.CMB, KIND_IRON: LabelClass.IRON}
