"""Synthetic chest-CT cohort with planted severity couplings, plus volume preprocessing."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import io
from .radiomics import GGO, HEALTHY, OTHER, extract_radiomics
from .tabular import METADATA_COLUMNS, PatientRecord, read_metadata_csv, write_metadata_csv

HU_RANGE = (-1024.0, 150.0)

# abstract intensity per tissue after normalisation
AIR, BODY, LUNG, GGO_LEVEL, OTHER_LEVEL = 0.0, 0.55, 0.10, 0.32, 0.80

# (baseline, per-severity shift, noise sd, lower clip, upper clip)
_METADATA_MODEL = {
    "age": (58.0, 2.5, 14.0, 18.0, 95.0),
    "temperature": (37.6, 0.05, 0.8, 35.0, 41.5),
    "spo2": (94.5, -0.5, 3.0, 70.0, 100.0),
    "leukocytes": (6.7, 0.3, 3.5, 0.5, 40.0),
    "lymphocytes": (1.2, -0.04, 0.5, 0.05, 6.0),
    "crp": (6.1, 1.2, 5.0, 0.0, 60.0),
    "creatinine": (1.1, 0.05, 0.6, 0.3, 8.0),
    "d_dimer": (1.5, 0.1, 2.0, 0.1, 30.0),
    "ldh": (330.0, 8.0, 120.0, 80.0, 1500.0),
    "creatine_kinase": (150.0, 0.0, 120.0, 10.0, 2000.0),
    "troponin_t": (0.02, 0.002, 0.03, 0.0, 1.0),
    "il6": (40.0, 10.0, 60.0, 0.0, 800.0),
    "thrombocytes": (220.0, 0.0, 80.0, 20.0, 800.0),
}
_NEVER_MISSING = ("age", "sex")


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    shape: tuple = (32, 32, 32)
    spacing_mm: float = 3.6
    prevalence_icu: float = 0.40
    prevalence_vent: float = 0.29
    prevalence_mort: float = 0.14
    # mean pathology fraction of the lung per severity level 0..3
    burden_means: tuple = (0.06, 0.22, 0.30, 0.38)
    burden_sd: float = 0.06
    metadata_coupling: float = 1.0
    missing_rate: float = 0.05
    noise_sd: float = 0.04
    seed: int = 0

    def __post_init__(self):
        icu, vent, mort = self.prevalence_icu, self.prevalence_vent, self.prevalence_mort
        if not all(0.0 < p < 1.0 for p in (icu, vent, mort)):
            raise InfeasibleConfig("prevalences must lie strictly between 0 and 1")
        if not mort <= vent <= icu:
            raise InfeasibleConfig("nested outcomes need mort <= vent <= icu prevalence")
        if self.n_patients < 2:
            raise InfeasibleConfig("cohort needs at least two patients")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise InfeasibleConfig(f"volume shape {self.shape} is too small")
        if len(self.burden_means) != 4:
            raise InfeasibleConfig("burden_means needs one entry per severity level")
        if not 0.0 <= self.missing_rate < 1.0:
            raise InfeasibleConfig("missing_rate must lie in [0, 1)")

    @property
    def severity_probs(self) -> np.ndarray:
        icu, vent, mort = self.prevalence_icu, self.prevalence_vent, self.prevalence_mort
        return np.array([1 - icu, icu - vent, vent - mort, mort])

    @property
    def voxel_volume(self) -> float:
        return self.spacing_mm ** 3


@dataclass
class Cohort:
    records: list
    volumes: np.ndarray  # (n, D, H, W) float32 in [0, 1]
    masks: np.ndarray  # (n, D, H, W) uint8
    severity: np.ndarray
    radiomics: np.ndarray  # (n, 4) ground-truth radiomics features
    spacing_mm: float
    couplings: dict = field(default_factory=dict)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    @property
    def metadata(self) -> np.ndarray:
        return np.stack([r.metadata for r in self.records])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort(
            [self.records[i] for i in idx],
            self.volumes[idx],
            self.masks[idx],
            self.severity[idx],
            self.radiomics[idx],
            self.spacing_mm,
            dict(self.couplings),
        )


def _draw_severity(cfg: SynthConfig, rng) -> np.ndarray:
    """Severity counts are the rounded prevalences; order is shuffled."""
    n = cfg.n_patients
    cum = np.round(np.array([cfg.prevalence_icu, cfg.prevalence_vent, cfg.prevalence_mort]) * n).astype(int)
    sev = np.zeros(n, dtype=int)
    sev[: cum[0]] += 1
    sev[: cum[1]] += 1
    sev[: cum[2]] += 1
    return rng.permutation(sev)


def _lung_mask(shape, rng) -> tuple:
    d, h, w = shape
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    body_r = rng.uniform(0.82, 0.95, size=2)
    body = (y / body_r[0]) ** 2 + (x / body_r[1]) ** 2 <= 1.0
    lung = np.zeros(shape, dtype=bool)
    for side in (-1.0, 1.0):
        cx = side * rng.uniform(0.38, 0.44)
        cy = rng.uniform(-0.06, 0.06)
        rz, ry, rx = rng.uniform(0.80, 0.95), rng.uniform(0.58, 0.70), rng.uniform(0.30, 0.36)
        lung |= ((z / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2) <= 1.0
    return body, lung & body


def _pathology(lung: np.ndarray, fraction: float, other_share: float, rng) -> np.ndarray:
    """Label lung voxels; the top ``fraction`` of a smooth random field becomes pathology."""
    labels = np.zeros(lung.shape, dtype=np.uint8)
    labels[lung] = HEALTHY
    n_lung = int(lung.sum())
    n_path = int(round(fraction * n_lung))
    if n_path == 0:
        return labels
    field_ = ndimage.gaussian_filter(rng.standard_normal(lung.shape), sigma=2.5)
    # posterior and peripheral bias, as in typical viral pneumonia
    field_ += 0.3 * np.linspace(-1, 1, lung.shape[1])[None, :, None] * field_.std()
    idx = np.flatnonzero(lung.ravel())
    order = idx[np.argsort(-field_.ravel()[idx], kind="stable")]
    path = order[:n_path]
    labels.ravel()[path] = GGO
    n_other = int(round(other_share * n_path))
    if n_other:
        second = ndimage.gaussian_filter(rng.standard_normal(lung.shape), sigma=2.0).ravel()[path]
        labels.ravel()[path[np.argsort(-second, kind="stable")[:n_other]]] = OTHER
    return labels


def _render(body: np.ndarray, labels: np.ndarray, noise_sd: float, rng) -> np.ndarray:
    img = np.where(body, BODY, AIR).astype(np.float64)
    for cls, level in ((HEALTHY, LUNG), (GGO, GGO_LEVEL), (OTHER, OTHER_LEVEL)):
        img[labels == cls] = level
    img *= rng.uniform(0.95, 1.05)
    img += noise_sd * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _metadata(severity: int, cfg: SynthConfig, rng) -> np.ndarray:
    values = {}
    for name, (base, shift, sd, lo, hi) in _METADATA_MODEL.items():
        values[name] = float(np.clip(base + cfg.metadata_coupling * shift * severity + sd * rng.standard_normal(), lo, hi))
    values["sex"] = float(rng.random() < 0.35)
    out = np.array([values[c] for c in METADATA_COLUMNS])
    for j, c in enumerate(METADATA_COLUMNS):
        if c not in _NEVER_MISSING and rng.random() < cfg.missing_rate:
            out[j] = np.nan
    return out


def generate(cfg: SynthConfig) -> Cohort:
    """Draw a cohort.  Equal configs give identical cohorts."""
    rng = np.random.default_rng(cfg.seed)
    severity = _draw_severity(cfg, rng)
    n = cfg.n_patients
    volumes = np.empty((n,) + tuple(cfg.shape), dtype=np.float32)
    masks = np.empty((n,) + tuple(cfg.shape), dtype=np.uint8)
    radiomics = np.empty((n, 4))
    records = []
    for i, s in enumerate(severity):
        body, lung = _lung_mask(cfg.shape, rng)
        fraction = float(np.clip(cfg.burden_means[s] + cfg.burden_sd * rng.standard_normal(), 0.0, 0.9))
        other_share = float(np.clip(0.15 + 0.08 * s + 0.05 * rng.standard_normal(), 0.0, 0.6))
        masks[i] = _pathology(lung, fraction, other_share, rng)
        volumes[i] = _render(body, masks[i], cfg.noise_sd, rng)
        radiomics[i] = extract_radiomics(masks[i], cfg.voxel_volume).features()
        records.append(
            PatientRecord(
                id=f"P{i:04d}",
                metadata=_metadata(int(s), cfg, rng),
                icu=bool(s >= 1),
                vent=bool(s >= 2),
                mort=bool(s >= 3),
            )
        )
    couplings = {name: cfg.metadata_coupling * m[1] for name, m in _METADATA_MODEL.items()}
    couplings["burden_means"] = list(cfg.burden_means)
    return Cohort(records, volumes, masks, severity, radiomics, cfg.spacing_mm, couplings)


def write_cohort(cohort: Cohort, out_dir, cfg: Optional[SynthConfig] = None) -> Path:
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    spacing = (cohort.spacing_mm,) * 3
    for rec, vol, mask in zip(cohort.records, cohort.volumes, cohort.masks):
        io.write_volume(out / "volumes" / f"{rec.id}.json", vol, spacing)
        io.write_volume(out / "masks" / f"{rec.id}.json", mask, spacing)
        rec.volume = f"volumes/{rec.id}.json"
        rec.mask = f"masks/{rec.id}.json"
    write_metadata_csv(out / "metadata.csv", cohort.records)
    truth = {
        "severity": cohort.severity.tolist(),
        "radiomics": cohort.radiomics.tolist(),
        "spacing_mm": cohort.spacing_mm,
        "couplings": cohort.couplings,
    }
    if cfg is not None:
        truth["config"] = asdict(cfg)
    (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")
    return out


def read_cohort(path) -> Cohort:
    root = Path(path)
    records = read_metadata_csv(root / "metadata.csv")
    vols, masks = [], []
    spacing = None
    for rec in records:
        if not rec.volume or not rec.mask:
            raise ValueError(f"patient {rec.id} lacks volume or mask references")
        v, spacing = io.read_volume(root / rec.volume)
        m, _ = io.read_volume(root / rec.mask)
        vols.append(v)
        masks.append(m)
    truth_path = root / "truth.json"
    truth = json.loads(truth_path.read_text(encoding="utf-8")) if truth_path.exists() else {}
    voxel = float(np.prod(spacing))
    radiomics = np.stack([extract_radiomics(m, voxel).features() for m in masks])
    severity = np.asarray(truth.get("severity", [int(r.icu) + int(r.vent) + int(r.mort) for r in records]))
    return Cohort(
        records,
        np.stack(vols),
        np.stack(masks),
        severity,
        radiomics,
        float(spacing[0]),
        truth.get("couplings", {}),
    )


def to_hounsfield(volume: np.ndarray) -> np.ndarray:
    """Map normalised synthetic intensities onto the clipping window in HU."""
    lo, hi = HU_RANGE
    return lo + np.asarray(volume, dtype=np.float64) * (hi - lo)


def preprocess_volume(raw: np.ndarray, spacing_mm, target_spacing: float = 3.6, clip=HU_RANGE) -> np.ndarray:
    """Resample to isotropic spacing (trilinear), clip, then min-max to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty volume")
    spacing = np.broadcast_to(np.asarray(spacing_mm, dtype=float), (raw.ndim,))
    if np.any(spacing <= 0) or target_spacing <= 0:
        raise ValueError(f"spacing must be positive, got {tuple(spacing)} -> {target_spacing}")
    factors = spacing / target_spacing
    if not np.allclose(factors, 1.0):
        raw = ndimage.zoom(raw, factors, order=1, mode="nearest", grid_mode=True)
    out = np.clip(raw, *clip)
    lo, hi = out.min(), out.max()
    if hi - lo <= 0:
        warnings.warn("constant volume after clipping; returning zeros", RuntimeWarning)
        return np.zeros(out.shape, dtype=np.float32)
    return ((out - lo) / (hi - lo)).astype(np.float32)
