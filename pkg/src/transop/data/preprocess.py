"""NCCT preprocessing: resample, HU clip, skull strip, centre crop, z-score, augment."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, DegenerateInputError
from .volume import Volume

TARGET_SPACING = (3.0, 1.0, 1.0)
HU_WINDOW = (0.0, 80.0)
CROP = (32, 192, 128)
STD_FLOOR = 1e-8
# SVL1 stores float32, so a z-scored volume read back is only normalised to ~1e-7.
ZSCORE_TOL = 1e-5


def resample(v: Volume, target_spacing=TARGET_SPACING) -> Volume:
    """Trilinear resampling onto a grid with ``target_spacing`` (mm/voxel).

    Output dims are ``round(dim * spacing / target)``; voxel centres are
    aligned so the field of view is preserved, and samples beyond the last
    input voxel take the edge value.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ConfigError(f"target spacing must be three positive values, got {target_spacing}")
    if v.spacing == target:
        return v.with_voxels(v.voxels.copy())
    dims = [max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(v.dims, v.spacing, target)]
    axes = [(np.arange(m) + 0.5) * (t / s) - 0.5 for m, s, t in zip(dims, v.spacing, target)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(v.voxels, coords, order=1, mode="nearest")
    return Volume(out, target)


def clip_hu(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    if not lo < hi:
        raise ConfigError(f"clip window needs lo < hi, got ({lo}, {hi})")
    return v.with_voxels(np.clip(v.voxels, lo, hi))


def brain_mask(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Largest 6-connected in-window component, smoothed by a 3x3x3 opening."""
    mask = (v.voxels > lo) & (v.voxels < hi)
    if not mask.any():
        raise DegenerateInputError("no voxels strictly inside the HU window; nothing to keep")
    labels, count = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if count > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        mask = labels == int(np.argmax(sizes))
    cube = np.ones((3, 3, 3), dtype=bool)
    opened = ndimage.binary_dilation(ndimage.binary_erosion(mask, cube, border_value=1), cube)
    opened &= mask
    # An opening can wipe out a component thinner than the cube; keep the raw component then.
    return opened if opened.any() else mask


def strip_skull(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    mask = brain_mask(v, lo, hi)
    return v.with_voxels(np.where(mask, v.voxels, lo))


def center_crop_pad(v: Volume, target=CROP) -> Volume:
    """Centre crop each axis to ``target``, zero-padding axes that are too short.

    With an odd surplus (or deficit) the extra voxel goes to the high side.
    """
    target = tuple(int(t) for t in target)
    x = v.voxels
    for axis, (n, t) in enumerate(zip(x.shape, target)):
        if n > t:
            start = (n - t) // 2
            x = np.take(x, np.arange(start, start + t), axis=axis)
        elif n < t:
            before = (t - n) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (before, t - n - before)
            x = np.pad(x, pad)
    return v.with_voxels(x)


def normalize(v: Volume) -> Volume:
    """Per-volume z-score."""
    x = v.voxels
    return v.with_voxels((x - x.mean()) / max(x.std(), STD_FLOOR))


def is_zscored(x: np.ndarray, tol: float = ZSCORE_TOL) -> bool:
    return abs(float(x.mean())) < tol and abs(float(x.std()) - 1.0) < tol


def preprocess(v: Volume, *, target=CROP, spacing=TARGET_SPACING, window=HU_WINDOW, skull_strip: bool = True) -> Volume:
    """resample -> clip -> skull strip -> crop/pad -> z-score.

    A volume that is already z-scored is no longer in HU, so the window
    steps are skipped for it, and it is not re-normalised if cropping left
    it z-scored. This makes the chain idempotent on its own output.
    """
    v = resample(v, spacing)
    done = is_zscored(v.voxels)
    if not done:
        v = clip_hu(v, *window)
        if skull_strip:
            v = strip_skull(v, *window)
    v = center_crop_pad(v, target)
    return v if done and is_zscored(v.voxels) else normalize(v)


def prepare_for_model(voxels: np.ndarray, crop) -> np.ndarray:
    """Crop/pad to the model's grid and z-score; idempotent on preprocessed input."""
    v = Volume(voxels)
    return normalize(center_crop_pad(v, crop)).voxels


def flip(x: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(x, axis=axis).copy()


def augment(x: np.ndarray, rng: np.random.Generator, p_flip: float = 0.5, noise_sigma: float = 0.05) -> np.ndarray:
    """Random W-axis and H-axis flips, then additive Gaussian noise.

    ``x`` is a ``[D, W, H]`` array. The rng is consumed in a fixed order
    (two flip draws, then the noise field) so a seed fixes the result.
    """
    flip_w, flip_h = rng.random(2) < p_flip
    if flip_w:
        x = flip(x, 1)
    if flip_h:
        x = flip(x, 2)
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    return x
