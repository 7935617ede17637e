"""Image-only vs clinical-only vs multimodal comparison on synthetic cohorts."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data.dataset import Subset
from .data.preprocess import prepare_for_model
from .data.records import split_dataset
from .data.synth import synth_generate
from .evaluate import auc
from .model import TranSOP, TranSOPConfig, preset
from .train import TrainConfig, train_loop

log = logging.getLogger(__name__)

ARMS = {
    "image_only": dict(variant="vit", use_clinical=False),
    "clinic_dnn": dict(variant="clinic_dnn"),
    "multimodal_concat": dict(variant="vit", fusion="concat"),
}


def cohort_subsets(n: int, dims, n_features: int, seed: int) -> dict[str, Subset]:
    cohort = synth_generate(n, dims, n_features, seed)
    split = split_dataset(cohort.records, seed)
    by_id = {r.patient_id: r for r in cohort.records}
    out = {}
    for name in ("train", "val", "test"):
        ids = split[name]
        vols = np.stack([prepare_for_model(cohort.volumes[i].voxels, dims) for i in ids])
        feats = np.stack([by_id[i].features for i in ids])
        labels = np.array([by_id[i].label for i in ids])
        out[name] = Subset(ids, vols, feats, labels)
    return out


def held_out_auc(cfg: TranSOPConfig, train_cfg: TrainConfig, subsets: dict[str, Subset], seed: int) -> float:
    model = TranSOP(cfg, seed)
    result = train_loop(model, subsets["train"], subsets["val"], train_cfg)
    model.load_state(result.best_state)
    probs = model.predict_proba(subsets["test"].volumes, subsets["test"].features)
    return auc(probs[:, 1], subsets["test"].labels)


@dataclass
class Comparison:
    seeds: list[int]
    aucs: dict[str, list[float]]

    def mean(self, arm: str) -> float:
        return float(np.mean(self.aucs[arm]))

    def table(self) -> str:
        rows = [f"{'arm':<20}" + "".join(f"seed {s:<6}" for s in self.seeds) + "mean"]
        for arm, vals in self.aucs.items():
            rows.append(f"{arm:<20}" + "".join(f"{v:<11.3f}" for v in vals) + f"{np.mean(vals):.3f}")
        return "\n".join(rows)


def compare_fusion(
    seeds=(0, 1, 2),
    n: int = 500,
    dims=(8, 24, 16),
    n_features: int = 10,
    epochs: int = 60,
    preset_name: str = "tiny",
) -> Comparison:
    aucs: dict[str, list[float]] = {arm: [] for arm in ARMS}
    for seed in seeds:
        subsets = cohort_subsets(n, dims, n_features, seed)
        train_cfg = TrainConfig(epochs=epochs, seed=seed)
        for arm, overrides in ARMS.items():
            cfg = preset(preset_name, crop=tuple(dims), clinical_dim=n_features, **overrides)
            aucs[arm].append(held_out_auc(cfg, train_cfg, subsets, seed))
            log.info("seed %d %s test AUC %.3f", seed, arm, aucs[arm][-1])
    return Comparison(list(seeds), aucs)
