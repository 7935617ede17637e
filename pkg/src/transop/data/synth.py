"""Synthetic cohort with outcome signal split between the image and clinical views.

Each patient draws a latent severity ``u ~ U(0, 1)``; the outcome is bad
when ``u > 0.67``. The volume and the clinical vector each see their own
noisy copy of ``u``, so neither modality alone recovers it as well as both
together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .records import MIN_RECORDS, ClinicalRecord
from .volume import Volume

BAD_THRESHOLD = 0.67
VIEW_NOISE = 0.15
MIN_DIM = 8
SPACING = (3.0, 1.0, 1.0)

# Tissue model, in HU.
PARENCHYMA_HU = 35.0
TEXTURE_HU = 3.0
LESION_DROP_HU = (4.0, 16.0)  # contrast = a + b * u_img
LESION_EXTENT = (0.15, 0.30)  # semi-axis fraction of each dim = a + b * u_img
FEATURE_NOISE = 0.25  # per-feature noise on informative clinical columns, in units of u


@dataclass
class SynthCohort:
    volumes: dict[str, Volume]
    records: list[ClinicalRecord]
    feature_names: list[str]
    latent: np.ndarray


def _view(u: float, rng: np.random.Generator) -> float:
    return float(np.clip(u + rng.normal(0.0, VIEW_NOISE), 0.0, 1.0))


def mrs_from_latent(u: float) -> int:
    if u > BAD_THRESHOLD:
        return min(6, 3 + int((u - BAD_THRESHOLD) / (1.0 - BAD_THRESHOLD) * 4))
    return min(2, int(u / BAD_THRESHOLD * 3))


def lesion_mask(u_img: float, dims, rng: np.random.Generator) -> np.ndarray:
    """Ellipsoid whose semi-axes grow linearly with ``u_img``; centre jittered."""
    dims = np.asarray(dims)
    frac = LESION_EXTENT[0] + LESION_EXTENT[1] * u_img
    radii = np.maximum(frac * dims, 0.5)
    centre = (dims - 1) / 2.0 + rng.uniform(-0.15, 0.15, size=3) * dims
    grid = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii))
    return r2 <= 1.0


def synth_volume(u_img: float, dims, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    noise = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=1.5, mode="wrap")
    noise *= TEXTURE_HU / max(noise.std(), 1e-12)
    mask = lesion_mask(u_img, dims, rng)
    contrast = LESION_DROP_HU[0] + LESION_DROP_HU[1] * u_img
    return PARENCHYMA_HU + noise - contrast * mask, mask


_INFORMATIVE = (
    lambda u: 55.0 + 30.0 * u,  # age-like
    lambda u: 2.0 + 22.0 * u**1.5,  # stroke-scale-like
    lambda u: 5.0 + 6.0 * np.sqrt(u),  # glucose-like
    lambda u: 120.0 + 50.0 / (1.0 + np.exp(-6.0 * (u - 0.5))),  # blood-pressure-like
    lambda u: 60.0 * np.exp(1.2 * u),  # onset-time-like
)


def clinical_features(u_clin: float, n_features: int, rng: np.random.Generator) -> np.ndarray:
    n_inf = n_features // 2
    out = np.empty(n_features)
    for j in range(n_inf):
        g = _INFORMATIVE[j % len(_INFORMATIVE)]
        jitter = np.clip(u_clin + rng.normal(0.0, FEATURE_NOISE), 0.0, 1.0)
        out[j] = g(jitter)
    out[n_inf:] = rng.normal(0.0, 1.0, size=n_features - n_inf) * 10.0 + 50.0
    return out


def feature_names(n_features: int) -> list[str]:
    n_inf = n_features // 2
    return [f"inf{j}" for j in range(n_inf)] + [f"noise{j}" for j in range(n_features - n_inf)]


def synth_generate(n: int, dims=(8, 24, 16), n_features: int = 10, seed: int = 0) -> SynthCohort:
    if n < MIN_RECORDS:
        raise ValueError(f"need at least {MIN_RECORDS} patients, got {n}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise ConfigError(f"synthetic dims must be three values >= {MIN_DIM}, got {dims}")
    if n_features < 1:
        raise ConfigError("need at least one clinical feature")
    rng = np.random.default_rng(seed)
    volumes, records, latent = {}, [], np.empty(n)
    for i in range(n):
        pid = f"P{i:04d}"
        u = float(rng.random())
        latent[i] = u
        voxels, _ = synth_volume(_view(u, rng), dims, rng)
        volumes[pid] = Volume(voxels.astype(np.float32), SPACING)
        records.append(ClinicalRecord(pid, clinical_features(_view(u, rng), n_features, rng), mrs_from_latent(u)))
    return SynthCohort(volumes, records, feature_names(n_features), latent)
