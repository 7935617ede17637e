"""Central finite-difference checks of every layer and of whole models.

A component is a closure returning a scalar loss plus the leaf tensors to
differentiate. For each leaf, analytic gradients at (up to) ``max_coords``
coordinates are compared to ``(f(x+h) - f(x-h)) / 2h``; the error is the
largest absolute discrepancy divided by the largest analytic gradient
magnitude of that leaf. A random-direction derivative over all leaves at
once covers coordinates the sampling skipped.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import TranSOP, preset
from .nn import (
    ConvStem,
    LayerNorm,
    Linear,
    MLPBlock,
    Module,
    MultiHeadSelfAttention,
    PatchEmbed,
    dropout,
)
from .model import EncoderBlock
from .tensor import Tensor, concat, no_grad
from .train import cross_entropy

LAYER_TOL = 1e-6
MODEL_TOL = 1e-4
STEP = 1e-5

Closure = Callable[[], Tensor]


def numeric_grad(f: Closure, x: Tensor, index, h: float = STEP) -> float:
    old = x.data[index]
    with no_grad():
        x.data[index] = old + h
        up = f().item()
        x.data[index] = old - h
        down = f().item()
    x.data[index] = old
    return (up - down) / (2.0 * h)


def directional_numeric(f: Closure, leaves: list[Tensor], dirs: list[np.ndarray], h: float = STEP) -> float:
    saved = [x.data.copy() for x in leaves]
    vals = []
    with no_grad():
        for sign in (1.0, -1.0):
            for x, d, s in zip(leaves, dirs, saved):
                x.data = s + sign * h * d
            vals.append(f().item())
    for x, s in zip(leaves, saved):
        x.data = s
    return (vals[0] - vals[1]) / (2.0 * h)


def check_closure(f: Closure, leaves: list[Tensor], rng: np.random.Generator, max_coords: int | None = None) -> float:
    """Largest relative gradient error over ``leaves``."""
    for x in leaves:
        x.zero_grad()
    f().backward()
    analytic = [x.grad.copy() for x in leaves]
    worst = 0.0
    for x, g in zip(leaves, analytic):
        coords = list(np.ndindex(*x.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        scale = max(float(np.abs(g).max()), 1e-12)
        for idx in coords:
            worst = max(worst, abs(g[idx] - numeric_grad(f, x, idx)) / scale)
    dirs = [rng.standard_normal(x.shape) for x in leaves]
    a = sum(float(np.sum(g * d)) for g, d in zip(analytic, dirs))
    n = directional_numeric(f, leaves, dirs)
    worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-12))
    return worst


def randomize(module: Module, rng: np.random.Generator) -> None:
    """Replace parameters with O(1) random values so no gradient is vanishingly small."""
    for name, p in module.named_parameters():
        if p.ndim == 2:
            p.data = rng.normal(0.0, 1.0 / np.sqrt(p.shape[0]), p.shape)
        elif name.endswith("gamma"):
            p.data = 1.0 + rng.normal(0.0, 0.2, p.shape)
        elif p.ndim == 0:
            p.data = np.asarray(1.0 + rng.normal(0.0, 0.2))
        else:
            p.data = rng.normal(0.0, 0.5, p.shape)


def _probe(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _layer_components(rng: np.random.Generator) -> dict[str, tuple[Closure, list[Tensor]]]:
    comps: dict[str, tuple[Closure, list[Tensor]]] = {}

    def add(name, module, x, fn):
        if module is not None:
            randomize(module, rng)
        w = _probe(rng, fn(x).shape)
        leaves = [x] + ([] if module is None else module.parameters())
        comps[name] = (lambda: (fn(x) * w).sum(), leaves)

    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    add("linear", lin := Linear(5, 4, rng), x, lin)

    x = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    add("layer_norm", ln := LayerNorm(6), x, ln)

    x = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    add("mhsa", attn := MultiHeadSelfAttention(6, 2, rng), x, attn)

    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    add("mlp_block", mlp := MLPBlock(4, 7, rng), x, mlp)

    x = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    add("dropout", None, x, lambda t: dropout(t, 0.3, True, np.random.default_rng(7)))

    x = Tensor(rng.standard_normal((2, 4, 6, 5, 1)), requires_grad=True)
    add("patch_embed", pe := PatchEmbed(2, 3, rng), x, pe)

    x = Tensor(rng.standard_normal((1, 4, 5, 4, 2)), requires_grad=True)
    add("conv_stem", stem := ConvStem([3, 4], rng, in_channels=2), x, stem)

    cfg = preset("tiny", embed_dim=8, heads=2, mlp_hidden=12)
    x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
    add("encoder_block", blk := EncoderBlock(cfg, rng), x, blk)

    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    wa = Tensor(rng.normal(1.0, 0.3), requires_grad=True)
    wb = Tensor(rng.normal(1.0, 0.3), requires_grad=True)
    wc = _probe(rng, (3, 8))
    comps["fusion_concat"] = (lambda: (concat([a, b], axis=-1) * wc).sum(), [a, b])
    wd = _probe(rng, (3, 4))
    comps["fusion_add"] = (lambda: ((wa * a + wb * b) * wd).sum(), [a, b, wa, wb])

    z = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    labels = rng.integers(0, 2, size=5)
    comps["cross_entropy"] = (lambda: cross_entropy(z, labels), [z])
    return comps


def _model_components(rng: np.random.Generator) -> dict[str, tuple[Closure, list[Tensor]]]:
    comps = {}
    arms = {
        "model_vit_concat": dict(variant="vit", fusion="concat"),
        "model_vit_add": dict(variant="vit", fusion="add"),
        "model_convit": dict(variant="convit"),
        "model_clinic_dnn": dict(variant="clinic_dnn"),
        "model_image_only": dict(variant="vit", use_clinical=False),
    }
    for name, overrides in arms.items():
        cfg = preset("tiny", p_drop=0.1, **overrides)
        model = TranSOP(cfg, seed=int(rng.integers(1 << 31)))
        randomize(model, rng)
        vols = rng.standard_normal((4, *cfg.crop))
        feats = rng.standard_normal((4, cfg.clinical_dim))
        labels = np.array([0, 1, 1, 0])
        mask_seed = int(rng.integers(1 << 31))

        def loss(model=model, vols=vols, feats=feats, labels=labels, mask_seed=mask_seed):
            rng_drop = np.random.default_rng(mask_seed)
            return cross_entropy(model(vols, feats, train=True, rng=rng_drop), labels)

        comps[name] = (loss, model.parameters())
    return comps


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.errors[k] < self.tolerances[k] for k in self.errors)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            tol = self.tolerances[name]
            out.append(f"{name:<20} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if err < tol else 'FAIL'}")
        return out


def run_gradcheck(seed: int = 0, max_coords: int = 8) -> GradcheckReport:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, (f, leaves) in _layer_components(rng).items():
        report.errors[name] = check_closure(f, leaves, rng)
        report.tolerances[name] = LAYER_TOL
    for name, (f, leaves) in _model_components(rng).items():
        report.errors[name] = check_closure(f, leaves, rng, max_coords=max_coords)
        report.tolerances[name] = MODEL_TOL
    report.seconds = time.perf_counter() - start
    return report
