"""Training: cross-entropy, Adam with decoupled weight decay, cosine schedule."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.dataset import Subset
from .data.preprocess import augment
from .errors import ConfigError, TrainingDiverged
from .evaluate import accuracy, auc, f1
from .model import TranSOP, TranSOPConfig, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_HEADER = "epoch,lr,train_loss,val_acc,val_f1,val_auc"


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 24
    seed: int = 0
    lr: float = 3e-4
    min_lr: float = 0.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    p_flip: float = 0.5
    noise_sigma: float = 0.05
    checkpoint_metric: str = "val_auc"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.checkpoint_metric != "val_auc":
            raise ConfigError("only val_auc checkpoint selection is supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, *, strict: bool = True) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        if strict:
            for name in sorted(names - set(d)):
                raise ConfigError(f"missing config key: train.{name}")
        return cls(**d)


@dataclass
class RunConfig:
    model: TranSOPConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict, *, strict: bool = True) -> RunConfig:
        for section in ("model", "train"):
            if section not in d:
                raise ConfigError(f"missing config key: {section}")
        return cls(TranSOPConfig.from_dict(d["model"], strict=strict), TrainConfig.from_dict(d["train"], strict=strict))

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.all(labels == labels.astype(int))):
        raise ValueError(f"labels must be integers in [0, {c}), got {np.unique(labels)}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels.astype(int)] = 1.0
    return -(logits.log_softmax(axis=-1) * Tensor(onehot)).sum() / b


def cosine_lr(t: int, total: int, lr0: float = 3e-4, min_lr: float = 0.0) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"schedule step {t} outside [0, {total}]")
    return min_lr + 0.5 * (lr0 - min_lr) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_params(cls, params: list[Tensor], **hyper) -> OptimState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: OptimState, lr: float) -> None:
    """Bias-corrected Adam update plus decoupled weight decay, in place."""
    if not len(params) == len(grads) == len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - step - lr * state.weight_decay * p.data


def fit_clinical_scaling(model: TranSOP, features: np.ndarray) -> None:
    model.clinical_mean = features.mean(axis=0)
    std = features.std(axis=0)
    model.clinical_std = np.where(std > 1e-8, std, 1.0)


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch, batch))


def val_metrics(model: TranSOP, subset: Subset) -> tuple[float, float, float]:
    probs = model.predict_proba(subset.volumes, subset.features)
    preds = np.argmax(probs, axis=1)
    try:
        val_auc = auc(probs[:, 1], subset.labels)
    except ValueError:
        val_auc = float("nan")
    return accuracy(preds, subset.labels), f1(preds, subset.labels), val_auc


@dataclass
class TrainResult:
    model: TranSOP
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_auc: float
    history: list[tuple] = field(default_factory=list)

    def history_csv(self) -> str:
        return format_history(self.history)


def format_history(history: list[tuple]) -> str:
    lines = [HISTORY_HEADER]
    lines += [f"{e},{lr!r},{loss!r},{a!r},{f!r},{u!r}" for e, lr, loss, a, f, u in history]
    return "\n".join(lines) + "\n"


def train_step(model: TranSOP, volumes, features, labels, state: OptimState, lr: float, rng=None, train: bool = True) -> float:
    params = model.parameters()
    model.zero_grad()
    loss = cross_entropy(model(volumes, features, train=train, rng=rng), labels)
    loss.backward()
    adam_step(params, [p.grad for p in params], state, lr)
    return loss.item()


def train_loop(
    model: TranSOP,
    train_set: Subset,
    val_set: Subset,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs, keeping the parameters with the best validation AUC.

    Shuffling, dropout masks and augmentation all draw from generators keyed
    on ``(seed, epoch, batch)``, so equal seeds reproduce the run exactly.
    """
    if set(train_set.ids) & set(val_set.ids):
        raise ValueError("train and validation subsets overlap")
    if model.cfg.use_clinical:
        fit_clinical_scaling(model, train_set.features)
    params = model.parameters()
    state = OptimState.for_params(
        params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    uses_image = model.cfg.uses_image
    step = 0
    best_auc, best_epoch, best_state = -math.inf, 0, model.state()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        losses = []
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            rng = batch_rng(cfg.seed, epoch, bi)
            vols = None
            if uses_image:
                vols = train_set.volumes[idx]
                if cfg.augment:
                    vols = np.stack([augment(v, rng, cfg.p_flip, cfg.noise_sigma) for v in vols])
            lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)
            loss = train_step(model, vols, train_set.features[idx], train_set.labels[idx], state, lr, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch {bi}, lr {lr:.3g}")
            losses.append(loss * len(idx))
            step += 1
        lr_now = cosine_lr(step, total, cfg.lr, cfg.min_lr)
        acc, f1v, val_auc = val_metrics(model, val_set)
        history.append((epoch, lr_now, float(np.sum(losses) / n), acc, f1v, val_auc))
        if val_auc > best_auc:
            best_auc, best_epoch, best_state = val_auc, epoch, {k: v.copy() for k, v in model.state().items()}
        log.info("epoch %d lr %.3g loss %.4f val acc %.3f f1 %.3f auc %.3f", *history[-1])

    result = TrainResult(model, best_state, best_epoch, best_auc, history)
    if out_dir is not None:
        write_run(result, cfg, out_dir)
    return result


def write_run(result: TrainResult, cfg: TrainConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best = TranSOP(result.model.cfg)
    best.load_state(result.best_state)
    save_checkpoint(best, out_dir / "checkpoint.zip", meta={"epoch": result.best_epoch, "val_auc": result.best_val_auc})
    (out_dir / "history.csv").write_text(result.history_csv())
    RunConfig(result.model.cfg, cfg).save(out_dir / "config.json")
