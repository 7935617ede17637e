"""Layers for the volume transformer and the fusion head.

Volumes travel channels-last, ``[B, D, W, H, C]``; token sequences are
``[B, T, K]``. Each layer owns its parameter tensors and is otherwise a pure
function of its input.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, InputTooSmallError
from .tensor import Tensor, layer_norm as _layer_norm, unfold3d

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameter container; sub-modules and tensors are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = INIT_STD):
        self.W = param(trunc_normal(rng, (n_in, n_out), std))
        self.b = param(np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"linear: input {x.shape} does not end in {self.n_in}")
        return x @ self.W + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        if eps <= 0:
            raise ConfigError("layer norm eps must be positive")
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return _layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention, bias-free projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = INIT_STD):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.Wq = param(trunc_normal(rng, (dim, dim), std))
        self.Wk = param(trunc_normal(rng, (dim, dim), std))
        self.Wv = param(trunc_normal(rng, (dim, dim), std))
        self.Wo = param(trunc_normal(rng, (dim, dim), std))

    def _split(self, x: Tensor) -> Tensor:
        b, t, k = x.shape
        return x.reshape(b, t, self.heads, k // self.heads).transpose(0, 2, 1, 3)

    def attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return the projected output and the ``[B, heads, T, T]`` attention."""
        if x.ndim != 3 or x.shape[-1] != self.Wq.shape[0]:
            raise DimensionError(f"mhsa: expected [B, T, {self.Wq.shape[0]}], got {x.shape}")
        b, t, k = x.shape
        q, key, v = (self._split(x @ w) for w in (self.Wq, self.Wk, self.Wv))
        scores = (q @ key.swap_last()) * (1.0 / np.sqrt(k // self.heads))
        attn = scores.softmax(axis=-1)
        heads = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, k)
        return heads @ self.Wo, attn

    def __call__(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


class MLPBlock(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, std: float = INIT_STD):
        if hidden < 1:
            raise ConfigError("mlp hidden size must be at least 1")
        self.fc1 = Linear(dim, hidden, rng, std)
        self.fc2 = Linear(hidden, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


def dropout(x: Tensor, p_drop: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same object) outside training."""
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p_drop}")
    if not train or p_drop == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p_drop
    return x * Tensor(keep / (1.0 - p_drop))


class PatchEmbed(Module):
    """Cut a volume into non-overlapping ``patch**3`` blocks and project each to ``dim``.

    Equivalent to a stride-``patch`` convolution; trailing voxels that do not
    fill a whole block are dropped.
    """

    def __init__(self, patch: int, dim: int, rng: np.random.Generator, channels: int = 1, std: float = INIT_STD):
        if patch < 1:
            raise ConfigError("patch size must be at least 1")
        self.patch = patch
        self.projection = param(trunc_normal(rng, (patch**3 * channels, dim), std))
        self.bias = param(np.zeros(dim))

    def grid(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        if min(spatial) < self.patch:
            raise InputTooSmallError(f"volume {tuple(spatial)} is smaller than patch size {self.patch}")
        return tuple(n // self.patch for n in spatial)

    def num_tokens(self, spatial: tuple[int, int, int]) -> int:
        return int(np.prod(self.grid(spatial)))

    def __call__(self, x: Tensor) -> Tensor:
        b, *spatial, c = x.shape
        n = self.num_tokens(tuple(spatial))
        if self.projection.shape[0] != self.patch**3 * c:
            raise DimensionError(f"patch embed expects {self.projection.shape[0] // self.patch**3} channels, got {c}")
        cols = unfold3d(x, self.patch, self.patch)
        return cols.reshape(b, n, cols.shape[-1]) @ self.projection + self.bias


class ConvStem(Module):
    """Stride-2 3x3x3 convolution blocks, each followed by channel norm and GELU."""

    def __init__(self, channels: list[int], rng: np.random.Generator, in_channels: int = 1, std: float = INIT_STD):
        if not channels:
            raise ConfigError("conv stem needs at least one block")
        self.kernels: list[Linear] = []
        self.norms: list[LayerNorm] = []
        for c_in, c_out in zip([in_channels, *channels[:-1]], channels):
            self.kernels.append(Linear(27 * c_in, c_out, rng, std))
            self.norms.append(LayerNorm(c_out))

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].n_out

    def output_shape(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        need = 2 ** len(self.kernels)
        if min(spatial) < need:
            raise InputTooSmallError(
                f"volume {tuple(spatial)} cannot survive {len(self.kernels)} stride-2 blocks (need >= {need} per axis)"
            )
        out = tuple(spatial)
        for _ in self.kernels:
            out = tuple(-(-n // 2) for n in out)
        return out

    def conv(self, block: int, x: Tensor) -> Tensor:
        """The raw stride-2, padding-1 convolution of one block (before norm and GELU)."""
        return self.kernels[block](unfold3d(x, 3, 2, 1))

    def __call__(self, x: Tensor) -> Tensor:
        self.output_shape(x.shape[1:4])
        for i, norm in enumerate(self.norms):
            x = norm(self.conv(i, x)).gelu()
        return x
