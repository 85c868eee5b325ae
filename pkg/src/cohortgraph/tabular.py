"""Metadata cleaning with a strict fit/transform split, node feature assembly and metadata CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METADATA_COLUMNS = (
    "age",
    "sex",
    "temperature",
    "spo2",
    "leukocytes",
    "lymphocytes",
    "crp",
    "creatinine",
    "d_dimer",
    "ldh",
    "creatine_kinase",
    "troponin_t",
    "il6",
    "thrombocytes",
)
LABEL_COLUMNS = ("icu", "vent", "mort")
_SEX_CODES = {"m": 0.0, "male": 0.0, "0": 0.0, "0.0": 0.0, "f": 1.0, "female": 1.0, "1": 1.0, "1.0": 1.0}


class MissingColumnError(ValueError):
    pass


@dataclass
class PatientRecord:
    id: str
    metadata: np.ndarray
    icu: bool = False
    vent: bool = False
    mort: bool = False
    volume: Optional[str] = None
    mask: Optional[str] = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.icu, self.vent, self.mort], dtype=float)


@dataclass(frozen=True)
class MeanImputer:
    """Column means fitted on training rows only."""

    means: np.ndarray
    columns: tuple = ()

    @classmethod
    def fit(cls, x: np.ndarray, columns: Sequence[str] = ()) -> "MeanImputer":
        x = np.asarray(x, dtype=float)
        observed = ~np.isnan(x)
        empty = np.where(observed.sum(axis=0) == 0)[0]
        if empty.size:
            names = [columns[i] if i < len(columns) else f"column {i}" for i in empty]
            raise MissingColumnError(f"no observed training values in {', '.join(names)}")
        means = np.nanmean(x, axis=0)
        return cls(means, tuple(columns))

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float)
        rows, cols = np.where(np.isnan(x))
        x[rows, cols] = self.means[cols]
        return x


@dataclass(frozen=True)
class ZScorer:
    """Standardise by training mean and standard deviation; constant columns map to 0."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "ZScorer":
        x = np.asarray(x, dtype=float)
        return cls(x.mean(axis=0), x.std(axis=0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        constant = self.std <= 1e-12 * np.maximum(1.0, np.abs(self.mean))
        safe = np.where(constant, 1.0, self.std)
        return np.where(constant, 0.0, (x - self.mean) / safe)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    columns: tuple
    imputer: Optional[MeanImputer] = None
    scaler: Optional[ZScorer] = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TabularPipeline:
    """Mean imputation followed by z-scoring, both fitted on ``fit_rows``."""

    imputer: MeanImputer
    scaler: ZScorer
    columns: tuple = field(default=())

    @classmethod
    def fit(cls, x: np.ndarray, fit_rows, columns: Sequence[str] = ()) -> "TabularPipeline":
        x = np.asarray(x, dtype=float)
        train = x[np.asarray(fit_rows)]
        imputer = MeanImputer.fit(train, columns)
        scaler = ZScorer.fit(imputer.transform(train))
        return cls(imputer, scaler, tuple(columns))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.scaler.transform(self.imputer.transform(x))


def impute_mean(x: np.ndarray, fit_rows, columns: Sequence[str] = ()) -> FeatureMatrix:
    x = np.asarray(x, dtype=float)
    imputer = MeanImputer.fit(x[np.asarray(fit_rows)], columns)
    return FeatureMatrix(imputer.transform(x), tuple(columns), imputer=imputer)


def zscore(x: np.ndarray, fit_rows, columns: Sequence[str] = ()) -> FeatureMatrix:
    x = np.asarray(x, dtype=float)
    scaler = ZScorer.fit(x[np.asarray(fit_rows)])
    return FeatureMatrix(scaler.transform(x), tuple(columns), scaler=scaler)


def assemble_node_features(metadata: np.ndarray, radiomics: Optional[np.ndarray]) -> np.ndarray:
    """Concatenate metadata columns then radiomics columns per node."""
    metadata = np.atleast_2d(np.asarray(metadata, dtype=float))
    if radiomics is None:
        return metadata.copy()
    radiomics = np.atleast_2d(np.asarray(radiomics, dtype=float))
    if radiomics.shape[1] == 0:
        return metadata.copy()
    if radiomics.shape[0] != metadata.shape[0]:
        raise ValueError(
            f"metadata has {metadata.shape[0]} rows but radiomics has {radiomics.shape[0]}"
        )
    return np.concatenate([metadata, radiomics], axis=1)


def _parse_value(column: str, raw: str) -> float:
    raw = raw.strip()
    if raw == "":
        return float("nan")
    if column == "sex":
        code = _SEX_CODES.get(raw.lower())
        if code is None:
            raise ValueError(f"unrecognised sex code {raw!r}")
        return code
    return float(raw)


def _parse_bool(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "y")


def read_metadata_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("id",) + METADATA_COLUMNS + LABEL_COLUMNS if c not in header]
        if missing:
            raise MissingColumnError(f"metadata CSV lacks columns: {', '.join(missing)}")
        records, seen = [], set()
        for row in reader:
            pid = row["id"]
            if pid in seen:
                raise ValueError(f"duplicate patient id {pid!r}")
            seen.add(pid)
            meta = np.array([_parse_value(c, row[c]) for c in METADATA_COLUMNS])
            records.append(
                PatientRecord(
                    id=pid,
                    metadata=meta,
                    icu=_parse_bool(row["icu"]),
                    vent=_parse_bool(row["vent"]),
                    mort=_parse_bool(row["mort"]),
                    volume=row.get("volume") or None,
                    mask=row.get("mask") or None,
                )
            )
    return records


def write_metadata_csv(path, records: Sequence[PatientRecord]) -> None:
    extra = [c for c in ("volume", "mask") if any(getattr(r, c) for r in records)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("id",) + METADATA_COLUMNS + LABEL_COLUMNS + tuple(extra))
        for r in records:
            meta = ["" if np.isnan(v) else (str(int(v)) if c == "sex" else repr(float(v))) for c, v in zip(METADATA_COLUMNS, r.metadata)]
            labels = [str(int(bool(getattr(r, c)))) for c in LABEL_COLUMNS]
            writer.writerow([r.id] + meta + labels + [getattr(r, c) or "" for c in extra])
