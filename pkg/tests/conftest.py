import numpy as np
import pytest

from transop.tensor import Tensor, no_grad


def fd_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(*x.shape):
            old = x.data[idx]
            x.data[idx] = old + h
            up = f().item()
            x.data[idx] = old - h
            down = f().item()
            x.data[idx] = old
            g[idx] = (up - down) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(f, leaves, h=1e-5) -> float:
    for x in leaves:
        x.zero_grad()
    f().backward()
    return max(rel_err(x.grad.copy(), fd_grad(f, x, h)) for x in leaves)


def leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def head_phantom(dims=(30, 40, 40), seed=0):
    """Brain ball (~30 HU), 2-voxel skull (1000 HU), 1-voxel scalp (40 HU), air (-1000 HU).

    Returns the volume and the true brain mask. The scalp is in the HU window
    but separated from the brain by bone, so only the largest component is brain.
    """
    from transop.data import Volume

    centre = (np.array(dims) - 1) / 2.0
    grid = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, centre)))
    brain = r <= 10.0
    vox = np.full(dims, -1000.0)
    vox[(r > 12.0) & (r <= 13.0)] = 40.0
    vox[(r > 10.0) & (r <= 12.0)] = 1000.0
    noise = np.random.default_rng(seed).normal(0.0, 2.0, dims)
    vox[brain] = 30.0 + noise[brain]
    return Volume(vox, (1.0, 1.0, 1.0)), brain


def iou(a, b):
    return float((a & b).sum() / (a | b).sum())


def tiny_subsets(n=40, seed=0, dims=(8, 24, 16), n_features=10):
    """Preprocessed train/val/test subsets of a small synthetic cohort."""
    from transop.experiment import cohort_subsets

    return cohort_subsets(n, dims, n_features, seed)


def overfit(max_steps=300, target=0.05, n=8, lr=1e-3, seed=0):
    """Full-batch training of the tiny model on ``n`` cases; returns the loss trace."""
    from transop.model import TranSOP, preset
    from transop.train import OptimState, fit_clinical_scaling, train_step

    sub = tiny_subsets(40, seed)["train"]
    idx = np.concatenate([np.flatnonzero(sub.labels == 0)[: n // 2], np.flatnonzero(sub.labels == 1)[: n - n // 2]])
    model = TranSOP(preset("tiny", p_drop=0.0), seed)
    fit_clinical_scaling(model, sub.features[idx])
    state = OptimState.for_params(model.parameters(), weight_decay=0.0)
    losses = []
    for _ in range(max_steps):
        losses.append(train_step(model, sub.volumes[idx], sub.features[idx], sub.labels[idx], state, lr, train=False))
        if losses[-1] < target:
            break
    return losses


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
