"""Dataset directories: ``volumes/<id>.svl``, ``clinical.csv``, ``split.json``."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError
from .preprocess import prepare_for_model
from .records import DatasetSplit, read_clinical_table, write_clinical_table
from .synth import SynthCohort
from .volume import read_volume, write_volume

VOLUME_DIR = "volumes"
CLINICAL_TABLE = "clinical.csv"
SPLIT_MANIFEST = "split.json"
VOLUME_SUFFIX = ".svl"


def write_cohort(root, cohort: SynthCohort, split: DatasetSplit) -> list[Path]:
    root = Path(root)
    (root / VOLUME_DIR).mkdir(parents=True, exist_ok=True)
    written = []
    for pid, v in cohort.volumes.items():
        path = root / VOLUME_DIR / f"{pid}{VOLUME_SUFFIX}"
        write_volume(path, v)
        written.append(path)
    write_clinical_table(root / CLINICAL_TABLE, cohort.records, cohort.feature_names)
    split.save(root / SPLIT_MANIFEST)
    return written + [root / CLINICAL_TABLE, root / SPLIT_MANIFEST]


@dataclass
class Subset:
    ids: list[str]
    volumes: np.ndarray | None
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


class Dataset:
    """A dataset directory loaded into memory."""

    def __init__(self, root, crop=None, load_volumes: bool = True):
        self.root = Path(root)
        if not (self.root / CLINICAL_TABLE).exists():
            raise FormatError(f"{self.root}: no {CLINICAL_TABLE}")
        records, self.feature_names = read_clinical_table(self.root / CLINICAL_TABLE)
        self.records = {r.patient_id: r for r in records}
        split_path = self.root / SPLIT_MANIFEST
        self.split = DatasetSplit.load(split_path) if split_path.exists() else None
        self.crop = tuple(crop) if crop is not None else None
        self._volumes: dict[str, np.ndarray] = {}
        self.load_volumes = load_volumes

    def volume_path(self, pid: str) -> Path:
        return self.root / VOLUME_DIR / f"{pid}{VOLUME_SUFFIX}"

    def volume(self, pid: str) -> np.ndarray:
        if pid not in self._volumes:
            voxels = read_volume(self.volume_path(pid)).voxels
            self._volumes[pid] = prepare_for_model(voxels, self.crop) if self.crop else voxels
        return self._volumes[pid]

    def subset(self, name: str) -> Subset:
        if self.split is None:
            raise ConfigError(f"{self.root}: no split manifest")
        try:
            ids = self.split[name]
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
        return self.take(ids)

    def take(self, ids: list[str]) -> Subset:
        missing = [pid for pid in ids if pid not in self.records]
        if missing:
            raise FormatError(f"{self.root}: ids missing from {CLINICAL_TABLE}: {missing[:5]}")
        feats = np.stack([self.records[pid].features for pid in ids]) if ids else np.zeros((0, len(self.feature_names)))
        labels = np.array([self.records[pid].label for pid in ids], dtype=np.int64)
        vols = np.stack([self.volume(pid) for pid in ids]) if self.load_volumes and ids else None
        return Subset(list(ids), vols, feats, labels)
