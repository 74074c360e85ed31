"""Shared value types: recording metadata, batch metadata, dataset validation."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NORMAL = 0
ABNORMAL = 1

LABELS = ("normal", "abnormal")
FINE_LABELS = ("normal", "crackle", "wheeze", "both")
DOMAINS = ("stethoscope", "mobile")

STETHOSCOPE = 0
MOBILE = 1

SAMPLE_RATE = 16000


def label_index(label: str) -> int:
    return LABELS.index(label)


def domain_index(domain: str) -> int:
    return DOMAINS.index(domain)


def coarse_label(fine_label: str) -> str:
    """Collapse crackle/wheeze/both to ``abnormal``."""
    if fine_label not in FINE_LABELS:
        raise ValueError(f"unknown fine label {fine_label!r}")
    return "normal" if fine_label == "normal" else "abnormal"


@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    path: str
    label: str
    fine_label: str
    patient_id: str
    domain: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.fine_label not in FINE_LABELS:
            raise ValueError(f"unknown fine label {self.fine_label!r}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")

    @property
    def label_index(self) -> int:
        return label_index(self.label)

    @property
    def domain_index(self) -> int:
        return domain_index(self.domain)

    @property
    def consistent(self) -> bool:
        return coarse_label(self.fine_label) == self.label


@dataclass(frozen=True)
class BatchMeta:
    """Per-sample class, patient and domain ids for one mini-batch."""

    labels: np.ndarray
    patient_ids: tuple
    domain_ids: np.ndarray

    def __init__(self, labels, patient_ids, domain_ids):
        labels = np.asarray(labels, dtype=np.int64)
        domain_ids = np.asarray(domain_ids, dtype=np.int64)
        patient_ids = tuple(str(p) for p in patient_ids)
        if not (len(labels) == len(patient_ids) == len(domain_ids)):
            raise ValueError("labels, patient_ids and domain_ids must have equal length")
        if len(labels) < 2:
            raise ValueError("a batch needs at least 2 samples")
        if labels.ndim != 1 or domain_ids.ndim != 1:
            raise ValueError("labels and domain_ids must be 1-D")
        labels.setflags(write=False)
        domain_ids.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "patient_ids", patient_ids)
        object.__setattr__(self, "domain_ids", domain_ids)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[SampleMeta]) -> "BatchMeta":
        return cls(
            [s.label_index for s in samples],
            [s.patient_id for s in samples],
            [s.domain_index for s in samples],
        )

    def take(self, idx) -> "BatchMeta":
        idx = np.asarray(idx)
        return BatchMeta(
            self.labels[idx],
            [self.patient_ids[i] for i in idx],
            self.domain_ids[idx],
        )


@dataclass
class ValidationReport:
    duplicate_ids: list = field(default_factory=list)
    missing_files: list = field(default_factory=list)
    contradictions: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (self.duplicate_ids or self.missing_files or self.contradictions)

    def summary(self) -> str:
        if self.passed:
            return "ok"
        parts = []
        if self.duplicate_ids:
            parts.append(f"duplicate sample ids: {', '.join(self.duplicate_ids)}")
        if self.missing_files:
            parts.append(f"missing files: {', '.join(self.missing_files)}")
        if self.contradictions:
            parts.append(f"label/fine-label contradictions: {', '.join(self.contradictions)}")
        return "; ".join(parts)


def validate_dataset(index: Sequence[SampleMeta], check_files: bool = True) -> ValidationReport:
    """Collect duplicate ids, missing files and label contradictions.

    Never raises on bad entries; the report carries everything found.
    """
    if len(index) == 0:
        raise ValueError("empty dataset")
    report = ValidationReport()
    counts = Counter(s.sample_id for s in index)
    report.duplicate_ids = sorted(k for k, v in counts.items() if v > 1)
    for s in index:
        if check_files and not os.path.isfile(s.path):
            report.missing_files.append(s.path)
        if not s.consistent:
            report.contradictions.append(s.sample_id)
    return report
