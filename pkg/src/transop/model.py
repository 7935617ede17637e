"""The multimodal outcome classifier: volume encoder, clinical branch, fusion head."""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .nn import (
    ConvStem,
    LayerNorm,
    Linear,
    MLPBlock,
    Module,
    MultiHeadSelfAttention,
    PatchEmbed,
    dropout,
    param,
)
from .tensor import Tensor, concat, no_grad

VARIANTS = ("vit", "convit", "clinic_dnn")
FUSIONS = ("concat", "add")
GOOD, BAD = 0, 1


def dichotomize(mrs) -> np.ndarray:
    """mRS 0-2 is a good outcome (0), 3-6 a bad one (1)."""
    return (np.asarray(mrs) > 2).astype(np.int64)


@dataclass
class TranSOPConfig:
    variant: str = "vit"
    patch: int = 16
    embed_dim: int = 768
    layers: int = 12
    heads: int = 12
    mlp_hidden: int = 3072
    feature_dim: int = 256
    clinical_dim: int = 10
    fusion: str = "concat"
    use_clinical: bool = True
    p_drop: float = 0.1
    num_classes: int = 2
    crop: tuple[int, int, int] = (32, 192, 128)
    stem_channels: tuple[int, ...] = (32, 64, 128)
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.crop = tuple(int(n) for n in self.crop)
        self.stem_channels = tuple(int(n) for n in self.stem_channels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSIONS}")
        if self.num_classes != 2:
            raise ConfigError("only the dichotomised two-class head is supported")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.layers < 1 or self.feature_dim < 1 or self.mlp_hidden < 1 or self.patch < 1:
            raise ConfigError("layers, feature_dim, mlp_hidden and patch must all be >= 1")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ConfigError(f"crop must be three positive dims, got {self.crop}")
        if self.variant == "clinic_dnn" and not self.use_clinical:
            raise ConfigError("clinic_dnn without clinical input has nothing to classify")

    @property
    def uses_image(self) -> bool:
        return self.variant != "clinic_dnn"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["crop"] = list(self.crop)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict, *, strict: bool = True) -> TranSOPConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        if strict:
            for name in sorted(names - set(d)):
                raise ConfigError(f"missing config key: model.{name}")
        return cls(**d)


def preset(name: str, variant: str = "vit", **overrides) -> TranSOPConfig:
    """``full`` is the 12-layer/768-wide encoder; ``tiny`` is the desk-scale one."""
    if name == "full":
        base = dict(patch=2 if variant == "convit" else 16)
    elif name == "tiny":
        base = dict(
            patch=1 if variant == "convit" else 4,
            embed_dim=32,
            layers=2,
            heads=2,
            mlp_hidden=64,
            feature_dim=32,
            crop=(8, 24, 16),
            stem_channels=(8, 16, 32),
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    base.update(variant=variant)
    base.update(overrides)
    return TranSOPConfig(**base)


@dataclass
class Prediction:
    probs: np.ndarray
    label: int = field(init=False)

    def __post_init__(self):
        self.label = int(np.argmax(self.probs))


class FCStack(Module):
    """FC -> GELU -> dropout -> FC."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, std: float):
        self.fc1 = Linear(n_in, hidden, rng, std)
        self.fc2 = Linear(hidden, n_out, rng, std)

    def __call__(self, x: Tensor, p_drop: float, train: bool, rng) -> Tensor:
        return self.fc2(dropout(self.fc1(x).gelu(), p_drop, train, rng))


class EncoderBlock(Module):
    def __init__(self, cfg: TranSOPConfig, rng):
        self.norm1 = LayerNorm(cfg.embed_dim, cfg.ln_eps)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.heads, rng, cfg.init_std)
        self.norm2 = LayerNorm(cfg.embed_dim, cfg.ln_eps)
        self.mlp = MLPBlock(cfg.embed_dim, cfg.mlp_hidden, rng, cfg.init_std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TranSOP(Module):
    """Transformer volume encoder fused with a clinical-feature branch.

    ``variant="clinic_dnn"`` drops the image path entirely and
    ``use_clinical=False`` drops the clinical one; in both cases the single
    remaining branch feeds the post-fusion stack directly.
    """

    def __init__(self, cfg: TranSOPConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        std, K, F = cfg.init_std, cfg.embed_dim, cfg.feature_dim

        if cfg.uses_image:
            spatial = cfg.crop
            channels = 1
            if cfg.variant == "convit":
                self.stem = ConvStem(list(cfg.stem_channels), rng, std=std)
                spatial = self.stem.output_shape(cfg.crop)
                channels = self.stem.out_channels
            self.patch_embed = PatchEmbed(cfg.patch, K, rng, channels=channels, std=std)
            self.num_tokens = self.patch_embed.num_tokens(spatial)
            self.cls = param(np.zeros((1, K)))
            self.pe = param(np.zeros((self.num_tokens + 1, K)))
            self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.layers)]
            self.norm = LayerNorm(K, cfg.ln_eps)
            self.head1 = Linear(K, K, rng, std)
            self.head2 = Linear(K, F, rng, std)
            self.image_branch = FCStack(F, F, F, rng, std)
        if cfg.use_clinical:
            self.clinical_fc = Linear(cfg.clinical_dim, F, rng, std)
            self.clinical_branch = FCStack(F, F, F, rng, std)
        both = cfg.uses_image and cfg.use_clinical
        if both and cfg.fusion == "add":
            self.w_img = param(1.0)
            self.w_clin = param(1.0)
        post_in = 2 * F if both and cfg.fusion == "concat" else F
        self.post = FCStack(post_in, F, F, rng, std)
        self.classifier = Linear(F, cfg.num_classes, rng, std)
        # Per-feature standardisation of clinical inputs, fitted on the training split.
        self.clinical_mean = np.zeros(cfg.clinical_dim)
        self.clinical_std = np.ones(cfg.clinical_dim)

    # -- pieces ---------------------------------------------------------------------

    def _volume_tensor(self, volumes) -> Tensor:
        v = volumes.data if isinstance(volumes, Tensor) else np.asarray(volumes, dtype=np.float64)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4:
            raise DimensionError(f"expected volumes [B, D, W, H], got {v.shape}")
        if tuple(v.shape[1:]) != self.cfg.crop:
            raise ConfigError(f"volume dims {tuple(v.shape[1:])} do not match configured crop {self.cfg.crop}")
        if isinstance(volumes, Tensor) and volumes.requires_grad:
            return volumes.reshape(*v.shape, 1)
        return Tensor(v[..., None])

    def tokens(self, volumes) -> Tensor:
        """Patch tokens with CLS prepended and positional encoding added, ``[B, L+1, K]``."""
        x = self._volume_tensor(volumes)
        if self.cfg.variant == "convit":
            x = self.stem(x)
        t = self.patch_embed(x)
        b, n, k = t.shape
        if n + 1 != self.pe.shape[0]:
            raise ConfigError(f"sequence length {n + 1} does not match positional encoding {self.pe.shape[0]}")
        cls = Tensor(np.zeros((b, 1, k))) + self.cls
        return concat([cls, t], axis=1) + self.pe

    def encode_volume(self, volumes) -> Tensor:
        x = self.tokens(volumes)
        for block in self.blocks:
            x = block(x)
        cls = self.norm(x)[:, 0, :]
        return self.head2(self.head1(cls).gelu())

    def encode_clinical(self, features) -> Tensor:
        f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
        if f.ndim == 1:
            f = f[None]
        if f.shape[-1] != self.cfg.clinical_dim:
            raise DimensionError(f"expected {self.cfg.clinical_dim} clinical features, got {f.shape[-1]}")
        x = Tensor((f - self.clinical_mean) / self.clinical_std)
        return self.clinical_fc(x)

    def fuse(self, z_ncct: Tensor | None, z_clinic: Tensor | None, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        a = self.image_branch(z_ncct, cfg.p_drop, train, rng) if z_ncct is not None else None
        c = self.clinical_branch(z_clinic, cfg.p_drop, train, rng) if z_clinic is not None else None
        if a is None or c is None:
            return a if c is None else c
        if cfg.fusion == "concat":
            return concat([a, c], axis=-1)
        if cfg.fusion == "add":
            return self.w_img * a + self.w_clin * c
        raise ConfigError(f"unknown fusion mode {cfg.fusion!r}")

    def classify(self, fused: Tensor, train: bool = False, rng=None) -> Tensor:
        return self.classifier(self.post(fused, self.cfg.p_drop, train, rng))

    # -- full pass ------------------------------------------------------------------

    def forward(self, volumes, clinical, train: bool = False, rng=None) -> Tensor:
        """Logits ``[B, 2]``. Dropout is live only when ``train`` is true."""
        z_ncct = self.encode_volume(volumes) if self.cfg.uses_image else None
        z_clinic = self.encode_clinical(clinical) if self.cfg.use_clinical else None
        return self.classify(self.fuse(z_ncct, z_clinic, train, rng), train, rng)

    __call__ = forward

    def predict_proba(self, volumes, clinical, batch_size: int = 64) -> np.ndarray:
        n = len(clinical) if clinical is not None else len(volumes)
        out = []
        with no_grad():
            for s in range(0, n, batch_size):
                v = volumes[s : s + batch_size] if self.cfg.uses_image else None
                c = clinical[s : s + batch_size] if clinical is not None else None
                out.append(self.forward(v, c).softmax(axis=-1).data)
        return np.concatenate(out, axis=0)

    def predict(self, volume, features) -> Prediction:
        v = None if volume is None else np.asarray(volume)[None]
        c = None if features is None else np.asarray(features, dtype=np.float64)[None]
        return Prediction(self.predict_proba(v, c)[0])

    # -- persistence ----------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        arrays["buffers.clinical_mean"] = self.clinical_mean
        arrays["buffers.clinical_std"] = self.clinical_std
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {"buffers.clinical_mean", "buffers.clinical_std"}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ConfigError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arrays[name].shape} != model {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
            p.zero_grad()
        self.clinical_mean = np.array(arrays["buffers.clinical_mean"], dtype=np.float64)
        self.clinical_std = np.array(arrays["buffers.clinical_std"], dtype=np.float64)


CHECKPOINT_MANIFEST = "manifest.json"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    # Fixed timestamps keep identical checkpoints byte-identical.
    return zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)


def save_checkpoint(model: TranSOP, path, meta: dict | None = None) -> None:
    """Zip archive: a JSON manifest plus one little-endian float64 ``.npy`` per array."""
    arrays = model.state()
    manifest = {
        "format": "transop-checkpoint/1",
        "config": model.cfg.to_dict(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry(CHECKPOINT_MANIFEST), json.dumps(manifest, indent=2, sort_keys=True))
        for name, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(a, dtype="<f8"), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())


def read_checkpoint(path) -> tuple[TranSOPConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read(CHECKPOINT_MANIFEST))
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint has no {CHECKPOINT_MANIFEST}") from exc
        arrays = {}
        for entry in manifest["arrays"]:
            name = entry["name"]
            a = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(a.shape) != entry["shape"]:
                raise FormatError(f"{path}: array {name} has shape {a.shape}, manifest says {entry['shape']}")
            arrays[name] = a
    return TranSOPConfig.from_dict(manifest["config"]), arrays, manifest.get("meta", {})


def load_checkpoint(path) -> tuple[TranSOP, dict]:
    cfg, arrays, meta = read_checkpoint(path)
    model = TranSOP(cfg)
    model.load_state(arrays)
    return model, meta
