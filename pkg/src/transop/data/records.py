"""Clinical tables and stratified train/val/test splits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, StratificationError

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "val", "test")
MIN_RECORDS = 10


@dataclass
class ClinicalRecord:
    patient_id: str
    features: np.ndarray
    mrs: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mrs = int(self.mrs)
        if not 0 <= self.mrs <= 6:
            raise ValueError(f"{self.patient_id}: mRS {self.mrs} outside 0-6")

    @property
    def label(self) -> int:
        return int(self.mrs > 2)


def write_clinical_table(path, records: list[ClinicalRecord], feature_names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", *feature_names, "mrs"])
        for r in records:
            writer.writerow([r.patient_id, *(repr(float(x)) for x in r.features), r.mrs])


def read_clinical_table(path) -> tuple[list[ClinicalRecord], list[str]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty clinical table")
    header = rows[0]
    if len(header) < 2 or header[0] != "patient_id" or header[-1] != "mrs":
        raise FormatError(f"{path}: header must be patient_id,<features...>,mrs")
    names = header[1:-1]
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            records.append(ClinicalRecord(row[0], [float(x) for x in row[1:-1]], int(row[-1])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return records, names


def largest_remainder(n: int, fractions=SPLIT_FRACTIONS) -> list[int]:
    """Integer parts of ``n * fractions`` that sum to ``n`` (Hamilton rounding)."""
    ideal = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[str]:
        if name not in SPLIT_NAMES:
            raise KeyError(f"no split named {name!r}; available: {', '.join(SPLIT_NAMES)}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> DatasetSplit:
        d = json.loads(Path(path).read_text())
        missing = [k for k in SPLIT_NAMES if k not in d]
        if missing:
            raise FormatError(f"{path}: split manifest lacks {missing}")
        return cls(d["train"], d["val"], d["test"], d.get("seed"))


def split_dataset(records: list[ClinicalRecord], seed: int) -> DatasetSplit:
    """Stratified 70/15/15 split on the dichotomised outcome.

    Overall subset sizes follow largest-remainder rounding; each class is
    spread over the subsets as proportionally as those totals allow.
    """
    if len(records) < MIN_RECORDS:
        raise ValueError(f"need at least {MIN_RECORDS} records to split, got {len(records)}")
    rng = np.random.default_rng(seed)
    totals = largest_remainder(len(records))
    classes = sorted({r.label for r in records})
    members = {c: [r.patient_id for r in records if r.label == c] for c in classes}
    for c in classes:
        rng.shuffle(members[c])

    ideal = np.array([[len(members[c]) * f for f in SPLIT_FRACTIONS] for c in classes])
    alloc = np.floor(ideal).astype(int)
    row_left = np.array([len(members[c]) for c in classes]) - alloc.sum(axis=1)
    col_left = np.array(totals) - alloc.sum(axis=0)
    cells = sorted(np.ndindex(*alloc.shape), key=lambda ij: -(ideal[ij] - alloc[ij]))
    for limit in (1, None):
        for i, j in cells:
            take = min(row_left[i], col_left[j])
            if limit is not None:
                take = min(take, limit)
            if take > 0:
                alloc[i, j] += take
                row_left[i] -= take
                col_left[j] -= take

    # Rounding can leave a class out of a small subset. Move one member in from
    # that class's largest subset and swap one of the other class back; row and
    # column totals are unchanged.
    while len(classes) == 2 and (alloc == 0).any():
        i, j = (int(k) for k in np.argwhere(alloc == 0)[0])
        jj = int(np.argmax(alloc[i]))
        if alloc[i, jj] < 2 or alloc[1 - i, j] < 2:
            break
        alloc[i, j] += 1
        alloc[i, jj] -= 1
        alloc[1 - i, j] -= 1
        alloc[1 - i, jj] += 1

    subsets: list[list[str]] = [[], [], []]
    for i, c in enumerate(classes):
        bounds = np.cumsum(alloc[i])
        for j, chunk in enumerate(np.split(np.array(members[c], dtype=object), bounds[:-1])):
            subsets[j].extend(chunk.tolist())
    if len(classes) < 2 or (alloc == 0).any():
        raise StratificationError(
            f"cannot place every outcome class in every subset (per-class allocation {alloc.tolist()})"
        )
    return DatasetSplit(*(sorted(s) for s in subsets), seed=seed)
