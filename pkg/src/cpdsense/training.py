"""Two-stage training: presence pretraining, then three-class fine-tuning.

Stage 1 trains encoder + a two-output head on empty-vs-presence labels with
binary cross-entropy (``p(presence) = sigmoid(z1 - z0)``).  Stage 2 keeps the
encoder, attaches a fresh three-class head and trains both with softmax
cross-entropy, optionally on link-permuted and link-mixed copies of the data.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import Label
from .features import AcfSample
from .model import (LossSpec, ModelConfig, bce_loss, cross_entropy_loss, forward, init_params,
                    model_gradients, param_shapes, predict_proba, softmax)
from .seeding import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "AdamState", "adam_init", "adam_step", "bce_loss", "cross_entropy_loss",
    "augment_link_permutation", "augment_link_mix", "permute_links", "augment_epoch",
    "train_stage1", "train_stage2", "TrainResult", "TrainingDiverged", "ClassMismatch",
    "ShapeMismatch", "CheckpointMismatch",
]


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``last_good`` holds the parameters from the last finite epoch."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


class ClassMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 2
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    link_permutation: bool = True
    link_mix: bool = True
    permuted_copies: int = 2
    mixed_copies: int = 1
    freeze_encoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0


def adam_init(params) -> AdamState:
    return AdamState(OrderedDict((k, np.zeros_like(p)) for k, p in params.items()),
                     OrderedDict((k, np.zeros_like(p)) for k, p in params.items()), 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig, names=None):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs.

    ``names`` restricts the update to a subset of parameters (the rest are
    copied through unchanged).
    """
    b1, b2 = config.betas
    t = state.t + 1
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    update = set(params) if names is None else set(names)
    for k, p in params.items():
        if k not in update:
            new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
            continue
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps_adam)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# augmentation


def permute_links(sample: AcfSample, order) -> AcfSample:
    """Rearrange link blocks so that output block ``i`` is input block ``order[i]``."""
    order = [int(o) for o in order]
    if sorted(order) != list(range(sample.num_links)):
        raise ValueError("order must be a permutation of the links")
    s = sample.subcarriers_per_link
    cols = np.concatenate([np.arange(o * s, (o + 1) * s) for o in order])
    return replace(sample, matrix=sample.matrix[:, cols],
                   per_link_motion_stat=sample.per_link_motion_stat[order],
                   dead_subcarriers=(), provenance="permuted", parents=(sample.source,))


def augment_link_permutation(sample: AcfSample, rng: np.random.Generator,
                             return_order: bool = False):
    """Uniformly random reordering of the link blocks (identity for one link)."""
    if sample.num_links < 2:
        out = replace(sample, matrix=sample.matrix.copy())
        order = np.arange(1)
    else:
        order = rng.permutation(sample.num_links)
        out = permute_links(sample, order)
    return (out, order) if return_order else out


def augment_link_mix(a: AcfSample, b: AcfSample, rng: np.random.Generator | None = None) -> AcfSample:
    """Splice a's most sensitive links with b's remaining link positions.

    a's links are ranked by mean motion statistic (ties go to the lower link
    index); the top ``ceil(L / 2)`` keep a's blocks and every other link
    position takes b's block at that position.
    """
    if a.label != b.label:
        raise ClassMismatch(f"cannot mix {a.label.name} with {b.label.name}")
    if a.matrix.shape != b.matrix.shape or a.num_links != b.num_links:
        raise ShapeMismatch("samples differ in shape or link count")
    links = a.num_links
    ranked = np.argsort(-a.per_link_motion_stat, kind="stable")
    from_a = set(int(i) for i in ranked[:math.ceil(links / 2)])
    s = a.subcarriers_per_link
    matrix = b.matrix.copy()
    stats = b.per_link_motion_stat.copy()
    for link in from_a:
        matrix[:, link * s:(link + 1) * s] = a.matrix[:, link * s:(link + 1) * s]
        stats[link] = a.per_link_motion_stat[link]
    return replace(a, matrix=matrix, per_link_motion_stat=stats, dead_subcarriers=(),
                   provenance="mixed", parents=(a.source, b.source))


def augment_epoch(samples: list[AcfSample], rng: np.random.Generator, config: TrainConfig) -> list[AcfSample]:
    """Originals plus freshly drawn permuted and same-class mixed variants."""
    out = list(samples)
    by_class: dict[Label, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    for i, s in enumerate(samples):
        if config.link_permutation:
            for _ in range(config.permuted_copies):
                out.append(augment_link_permutation(s, rng))
        if config.link_mix:
            pool = [j for j in by_class[s.label] if j != i]
            for _ in range(config.mixed_copies if pool else 0):
                partner = samples[pool[int(rng.integers(0, len(pool)))]]
                out.append(augment_link_mix(s, partner, rng))
    return out


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: "OrderedDict[str, np.ndarray]"
    best_params: "OrderedDict[str, np.ndarray]"
    model_config: ModelConfig
    history: list[dict] = field(default_factory=list)
    initial_train_loss: float = float("nan")

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


def _stack(samples: list[AcfSample]) -> np.ndarray:
    return np.stack([s.matrix for s in samples]).astype(float)


def stage_labels(samples: list[AcfSample], stage: int) -> np.ndarray:
    labels = np.array([int(s.label) for s in samples])
    if stage == 1:
        return (labels != int(Label.EMPTY)).astype(int)
    return labels


def evaluate_loss(x: np.ndarray, y: np.ndarray, params, mconfig: ModelConfig, loss: LossSpec,
                  batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over a dataset (stage-aware through ``loss.kind``)."""
    total, correct = 0.0, 0
    for i in range(0, x.shape[0], batch_size):
        logits = forward(x[i:i + batch_size], params, mconfig)[0]
        yb = y[i:i + batch_size]
        if loss.kind == "bce":
            value, _ = bce_loss(logits[:, 1] - logits[:, 0], yb, "sum")
        else:
            value, _ = cross_entropy_loss(logits, yb, "sum")
        total += value
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    n = max(x.shape[0], 1)
    return total / n, correct / n


def _run(train: list[AcfSample], val: list[AcfSample], params, mconfig: ModelConfig,
         tconfig: TrainConfig, loss: LossSpec, run_dir: Path | None, trainable=None) -> TrainResult:
    stage = 1 if loss.kind == "bce" else 2
    x_val = _stack(val) if val else None
    y_val = stage_labels(val, stage) if val else None
    x_train0, y_train0 = _stack(train), stage_labels(train, stage)
    init_loss, _ = evaluate_loss(x_train0, y_train0, params, mconfig, loss)

    state = adam_init(params)
    best = copy.deepcopy(params)
    best_val = math.inf
    stale = 0
    history = []
    metrics_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = run_dir / "metrics.csv"
        with metrics_file.open("w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])

    for epoch in range(tconfig.epochs):
        aug_rng = derive_rng(tconfig.seed, "augment", stage, epoch)
        epoch_samples = augment_epoch(train, aug_rng, tconfig) if stage == 2 else list(train)
        x = _stack(epoch_samples)
        y = stage_labels(epoch_samples, stage)
        order = derive_rng(tconfig.seed, "shuffle", stage, epoch).permutation(len(epoch_samples))
        running, seen = 0.0, 0
        last_good = params
        for i in range(0, len(order), tconfig.batch_size):
            idx = order[i:i + tconfig.batch_size]
            value, grads = model_gradients(x[idx], y[idx], params, mconfig, loss)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            params, state = adam_step(params, grads, state, tconfig, names=trainable)
            running += value * len(idx)
            seen += len(idx)
        train_loss = running / max(seen, 1)
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
        if x_val is not None:
            val_loss, val_acc = evaluate_loss(x_val, y_val, params, mconfig, loss)
        else:
            val_loss, val_acc = train_loss, float("nan")
        history.append(dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_accuracy=val_acc))
        logger.info("stage %d epoch %d: train %.4f val %.4f acc %.3f", stage, epoch, train_loss,
                    val_loss, val_acc)
        if metrics_file is not None:
            with metrics_file.open("a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(train_loss), repr(val_loss), repr(val_acc)])
        if val_loss < best_val:
            best_val, best, stale = val_loss, copy.deepcopy(params), 0
        else:
            stale += 1
            if stale >= tconfig.patience:
                logger.info("early stop at epoch %d", epoch)
                break
    return TrainResult(params=params, best_params=best, model_config=mconfig, history=history,
                       initial_train_loss=init_loss)


def train_stage1(train: list[AcfSample], val: list[AcfSample], mconfig: ModelConfig,
                 tconfig: TrainConfig, run_dir: Path | None = None) -> TrainResult:
    """Presence pretraining: empty (0) vs any occupant (1), BCE on a two-output head."""
    if not train:
        raise ValueError("empty training set")
    mconfig = mconfig.replace(num_classes=2)
    params = init_params(mconfig, derive_rng(tconfig.seed, "init", 1))
    result = _run(train, val, params, mconfig, replace(tconfig, stage=1), LossSpec("bce"), run_dir)
    if not result.final_train_loss < result.initial_train_loss:
        logger.warning("stage-1 training loss did not decrease (%.4f -> %.4f)",
                       result.initial_train_loss, result.final_train_loss)
    return result


def fresh_head(encoder_params, mconfig: ModelConfig, seed: int):
    """Encoder tensors copied from ``encoder_params`` plus a newly initialised head."""
    fresh = init_params(mconfig, derive_rng(seed, "init", 2))
    shapes = param_shapes(mconfig)
    for k in shapes:
        if k.startswith("encoder."):
            if k not in encoder_params:
                raise CheckpointMismatch(f"checkpoint lacks encoder tensor {k}")
            if encoder_params[k].shape != shapes[k]:
                raise CheckpointMismatch(
                    f"encoder tensor {k} has shape {encoder_params[k].shape}, expected {shapes[k]}")
            fresh[k] = np.array(encoder_params[k], dtype=float, copy=True)
    return fresh


def train_stage2(train: list[AcfSample], val: list[AcfSample], stage1_params, mconfig: ModelConfig,
                 tconfig: TrainConfig, run_dir: Path | None = None) -> TrainResult:
    """Three-class fine-tuning from a stage-1 encoder (``None`` starts from random init)."""
    if not train:
        raise ValueError("empty training set")
    mconfig = mconfig.replace(num_classes=3)
    if stage1_params is None:
        params = init_params(mconfig, derive_rng(tconfig.seed, "init", 3))
    else:
        params = fresh_head(stage1_params, mconfig, tconfig.seed)
    trainable = [k for k in params if k.startswith("head.")] if tconfig.freeze_encoder else None
    return _run(train, val, params, mconfig, replace(tconfig, stage=2), LossSpec("ce"), run_dir,
                trainable=trainable)


def predict(samples: list[AcfSample], params, mconfig: ModelConfig) -> np.ndarray:
    return predict_proba(_stack(samples), params, mconfig)
