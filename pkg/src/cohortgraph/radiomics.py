"""Volumetric radiomics from segmentation masks and two-group t-tests on summary statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

HEALTHY, GGO, OTHER = 1, 2, 3
FEATURE_NAMES = ("rel_healthy", "rel_ggo", "rel_other", "total_lung")


@dataclass(frozen=True)
class RadiomicsVector:
    abs_healthy: float
    abs_ggo: float
    abs_other: float
    total_lung: float
    rel_healthy: float
    rel_ggo: float
    rel_other: float
    degenerate: bool = False

    def features(self) -> np.ndarray:
        """Graph/fusion feature vector: three relative fractions and total lung volume."""
        return np.array([self.rel_healthy, self.rel_ggo, self.rel_other, self.total_lung])

    def absolute(self) -> np.ndarray:
        return np.array([self.abs_healthy, self.abs_ggo, self.abs_other])

    def relative(self) -> np.ndarray:
        return np.array([self.rel_healthy, self.rel_ggo, self.rel_other])


def class_counts(mask: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(mask, dtype=np.intp).ravel(), minlength=4)[:4]


def extract_radiomics(mask: np.ndarray, voxel_volume: float) -> RadiomicsVector:
    """Absolute and relative class volumes of a label mask.

    ``mask`` holds integer labels (0 background, 1 healthy, 2 GGO, 3 other) or
    per-class probabilities with the class axis first, which are reduced by
    argmax.  A mask without lung voxels yields zero fractions and
    ``degenerate=True``.
    """
    if voxel_volume <= 0:
        raise ValueError(f"voxel volume must be positive, got {voxel_volume}")
    mask = np.asarray(mask)
    if mask.dtype.kind == "f":
        mask = mask.argmax(axis=0)
    return radiomics_from_counts(class_counts(mask), voxel_volume)


def radiomics_from_counts(counts, voxel_volume: float, scale: float = 1.0) -> RadiomicsVector:
    """Radiomics from per-class voxel counts; ``scale`` multiplies the absolute volumes."""
    if voxel_volume <= 0:
        raise ValueError(f"voxel volume must be positive, got {voxel_volume}")
    counts = np.asarray(counts)
    n = int(counts[1:4].sum())
    if n == 0:
        return RadiomicsVector(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, degenerate=True)
    unit = voxel_volume * scale
    healthy, ggo, other = (float(c) * unit for c in counts[1:4])
    return RadiomicsVector(
        healthy, ggo, other, healthy + ggo + other, counts[1] / n, counts[2] / n, counts[3] / n
    )


@dataclass(frozen=True)
class GroupSummary:
    mean: float
    std: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"group needs n >= 2, got {self.n}")
        if self.std < 0:
            raise ValueError("standard deviation must be nonnegative")

    @classmethod
    def from_values(cls, values) -> "GroupSummary":
        v = np.asarray([x for x in values if x == x], dtype=float)
        return cls(float(v.mean()), float(v.std(ddof=1)), int(v.size))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularised incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def welch_t_test(a: GroupSummary, b: GroupSummary, equal_var: bool = False) -> TTestResult:
    """Two-sample t-test from summary statistics.

    By default the unequal-variance statistic with Satterthwaite degrees of
    freedom; ``equal_var=True`` gives the pooled-variance Student test.
    """
    va, vb = a.std ** 2, b.std ** 2
    diff = a.mean - b.mean
    if equal_var:
        df = a.n + b.n - 2
        pooled = ((a.n - 1) * va + (b.n - 1) * vb) / df
        se2 = pooled * (1.0 / a.n + 1.0 / b.n)
    else:
        qa, qb = va / a.n, vb / b.n
        se2 = qa + qb
        df = se2 ** 2 / (qa ** 2 / (a.n - 1) + qb ** 2 / (b.n - 1)) if se2 > 0 else a.n + b.n - 2
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, float(df), 1.0)
        return TTestResult(math.copysign(math.inf, diff), float(df), 0.0)
    t = diff / math.sqrt(se2)
    return TTestResult(t, float(df), student_t_sf2(t, df))


def student_t_test(a: GroupSummary, b: GroupSummary) -> TTestResult:
    return welch_t_test(a, b, equal_var=True)
