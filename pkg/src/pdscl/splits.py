"""Leave-subject-out k-fold splits with mobile-only validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from pdscl.core import SampleMeta


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_patient: dict
    k: int = 5

    def patients_in(self, fold: int) -> set:
        return {p for p, f in self.fold_of_patient.items() if f == fold}

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.fold_of_patient.values() if f == i) for i in range(self.k)]


def make_folds(patient_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle of the (sorted, de-duplicated) patients, dealt round-robin into k folds."""
    patients = sorted(set(patient_ids))
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    return FoldAssignment({patients[j]: int(i % k) for i, j in enumerate(order)}, k)


def fold_partition(index: Sequence[SampleMeta], fa: FoldAssignment, fold: int):
    """(train, val) for one fold.

    Train holds every recording of patients outside the fold. Val holds only
    the mobile recordings of patients inside it; their stethoscope recordings
    are dropped from both sides.
    """
    if not 0 <= fold < fa.k:
        raise ValueError(f"fold {fold} out of range for k={fa.k}")
    missing = {s.patient_id for s in index} - set(fa.fold_of_patient)
    if missing:
        raise ValueError(f"patients without a fold: {sorted(missing)[:5]}")
    train, val = [], []
    for s in index:
        if fa.fold_of_patient[s.patient_id] != fold:
            train.append(s)
        elif s.domain == "mobile":
            val.append(s)
    return train, val


def write_fold_manifest(path, fa: FoldAssignment) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "fold"])
        for p in sorted(fa.fold_of_patient):
            w.writerow([p, fa.fold_of_patient[p]])


def read_fold_manifest(path, k: int = 5) -> FoldAssignment:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return FoldAssignment({r["patient_id"]: int(r["fold"]) for r in rows}, k)
