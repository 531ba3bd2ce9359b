"""Tiny per-pixel classifier: fixed features -> one tanh layer -> one linear head per class."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import RangeImage
from .losses import LogitsMap

CHECKPOINT_FORMAT = "bgfss-checkpoint"
CHECKPOINT_VERSION = 1
FREEZE_MODES = ("none", "backbone", "backbone+base_heads")
BACKBONE = ("W1", "b1")
HEADS = ("W2", "b2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    hidden: int = 16
    neighborhood: bool = True
    # per-channel divisor for (x, y, z, intensity, range)
    input_scale: tuple[float, ...] = (20.0, 20.0, 2.0, 1.0, 20.0)
    init_scale: float = 1.0
    head_init_scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "input_scale", tuple(float(s) for s in self.input_scale))
        if self.hidden < 1:
            raise ModelError("hidden width must be >= 1")
        if len(self.input_scale) != 5 or min(self.input_scale) <= 0:
            raise ModelError("input_scale needs 5 positive entries")

    @property
    def n_features(self) -> int:
        return 10 if self.neighborhood else 5


@dataclass(frozen=True)
class ModelParams:
    W1: np.ndarray  # F x H
    b1: np.ndarray  # H
    W2: np.ndarray  # H x K
    b2: np.ndarray  # K
    class_ids: tuple[int, ...]
    version: str = "base"  # base | extended
    base_heads: int = 0  # heads that existed before extension
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ModelError(f"duplicate class id in heads {self.class_ids}")
        if self.W2.shape[1] != len(self.class_ids) or self.b2.shape != (len(self.class_ids),):
            raise ModelError("head count does not match class ids")
        for name in BACKBONE + HEADS:
            if not np.isfinite(getattr(self, name)).all():
                raise ModelError(f"non-finite parameter {name}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in BACKBONE + HEADS}


def init(seed: int, arch: ArchConfig, class_ids: Sequence[int]) -> ModelParams:
    if len(class_ids) == 0:
        raise ModelError("cannot build a model with no classes")
    rng = np.random.default_rng([int(seed), 0])
    F, H, K = arch.n_features, arch.hidden, len(class_ids)
    W1 = rng.normal(0.0, arch.init_scale / np.sqrt(F), size=(F, H))
    b1 = np.zeros(H)
    W2 = rng.normal(0.0, arch.head_init_scale, size=(H, K))
    b2 = np.zeros(K)
    return ModelParams(W1, b1, W2, b2, tuple(class_ids), "base", len(class_ids), arch)


def extend_heads(base: ModelParams, novel_ids: Sequence[int], seed: int) -> ModelParams:
    if base.version != "base":
        raise ModelError(f"can only extend a base model, got version {base.version!r}")
    novel_ids = tuple(int(c) for c in novel_ids)
    if not novel_ids:
        raise ModelError("extension must add at least one head")
    dup = set(novel_ids) & set(base.class_ids)
    if dup or len(set(novel_ids)) != len(novel_ids):
        raise ModelError(f"duplicate class id(s) {sorted(dup) or list(novel_ids)}")
    rng = np.random.default_rng([int(seed), 1])
    H = base.arch.hidden
    W_new = rng.normal(0.0, base.arch.head_init_scale, size=(H, len(novel_ids)))
    return ModelParams(
        base.W1.copy(), base.b1.copy(),
        np.concatenate([base.W2, W_new], axis=1), np.concatenate([base.b2, np.zeros(len(novel_ids))]),
        base.class_ids + novel_ids, "extended", len(base.class_ids), base.arch,
    )


def features(image: RangeImage, arch: ArchConfig) -> np.ndarray:
    """M x F feature rows for the valid pixels, row-major."""
    ch = np.asarray(image.channels)
    if ch.ndim != 3 or ch.shape[2] != 5:
        raise ModelError(f"expected h x w x 5 channels, got {ch.shape}")
    valid = np.asarray(image.valid)
    x = ch / np.asarray(arch.input_scale)
    if not arch.neighborhood:
        return x[valid]
    h, w = valid.shape
    pad = np.zeros((h + 2, w + 2, 5))
    pad[1:-1, 1:-1] = x * valid[..., None]
    cnt = np.zeros((h + 2, w + 2))
    cnt[1:-1, 1:-1] = valid
    s = np.zeros((h, w, 5))
    c = np.zeros((h, w))
    for dr in range(3):
        for dc in range(3):
            s += pad[dr:dr + h, dc:dc + w]
            c += cnt[dr:dr + h, dc:dc + w]
    mean = s / np.maximum(c, 1.0)[..., None]
    return np.concatenate([x[valid], mean[valid]], axis=1)


def _forward(params: ModelParams, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if feats.shape[1] != params.W1.shape[0]:
        raise ModelError(f"{feats.shape[1]} input features, model expects {params.W1.shape[0]}")
    hidden = np.tanh(feats @ params.W1 + params.b1)
    return hidden, hidden @ params.W2 + params.b2


def forward(params: ModelParams, image: RangeImage) -> LogitsMap:
    _, logits = _forward(params, features(image, params.arch))
    return LogitsMap(logits, params.class_ids)


def gradients(params: ModelParams, image: RangeImage, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate d loss/d logits to every parameter."""
    feats = features(image, params.arch)
    hidden, logits = _forward(params, feats)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != logits.shape:
        raise ModelError(f"loss gradient shape {g.shape} does not match logits {logits.shape}")
    d_pre = (g @ params.W2.T) * (1.0 - hidden * hidden)
    return {
        "W1": feats.T @ d_pre,
        "b1": d_pre.sum(axis=0),
        "W2": hidden.T @ g,
        "b2": g.sum(axis=0),
    }


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.01
    decay_mode: str = "multiplicative"  # multiplicative | additive
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ModelError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ModelError("momentum must lie in [0, 1)")
        if self.decay_mode not in ("multiplicative", "additive"):
            raise ModelError(f"unknown decay mode {self.decay_mode!r}")

    def end_epoch(self) -> None:
        if self.decay_mode == "multiplicative":
            self.lr *= 1.0 - self.decay
        else:
            self.lr = max(self.lr - self.decay, 0.0)


def _frozen_mask(params: ModelParams, name: str, freeze: str) -> np.ndarray | None:
    """None = fully trainable, False-array = fully frozen, else per-column trainable mask."""
    if freeze not in FREEZE_MODES:
        raise ModelError(f"unknown freeze mode {freeze!r}")
    if name in BACKBONE:
        return None if freeze == "none" else np.zeros((), dtype=bool)
    if freeze == "backbone+base_heads":
        return np.arange(len(params.class_ids)) >= params.base_heads
    return None


def step(params: ModelParams, state: OptimizerState, grads: dict[str, np.ndarray], freeze: str = "none") -> ModelParams:
    """Momentum SGD: v <- mu v + g; p <- p - lr v.  Frozen entries are left untouched."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ModelError(f"non-finite gradient for {name}; step aborted")
    new = {}
    for name, p in params.arrays().items():
        mask = _frozen_mask(params, name, freeze)
        if mask is not None and mask.ndim == 0:
            new[name] = p
            continue
        g = grads[name]
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p)
        if mask is None:
            v = state.momentum * v + g
            new[name] = p - state.lr * v
        else:
            v = v.copy()
            v[..., mask] = state.momentum * v[..., mask] + g[..., mask]
            q = p.copy()
            q[..., mask] = p[..., mask] - state.lr * v[..., mask]
            new[name] = q
        state.velocity[name] = v
    return replace(params, **new)


def backward_and_step(
    params: ModelParams, state: OptimizerState, image: RangeImage, grad_logits: np.ndarray, freeze: str = "none"
) -> ModelParams:
    return step(params, state, gradients(params, image, grad_logits), freeze)


def save_checkpoint(path: str | os.PathLike, params: ModelParams, taxonomy_fingerprint: str) -> None:
    """Textual dump; float repr round-trips exactly, so equal params give equal bytes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "taxonomy": taxonomy_fingerprint,
        "version": params.version,
        "base_heads": params.base_heads,
        "class_ids": list(params.class_ids),
        "arch": {
            "hidden": params.arch.hidden,
            "neighborhood": params.arch.neighborhood,
            "input_scale": list(params.arch.input_scale),
            "init_scale": params.arch.init_scale,
            "head_init_scale": params.arch.head_init_scale,
        },
        "params": {n: a.tolist() for n, a in params.arrays().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike, taxonomy_fingerprint: str | None = None) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    if taxonomy_fingerprint is not None and doc["taxonomy"] != taxonomy_fingerprint:
        raise ModelError(
            f"{path}: checkpoint taxonomy {doc['taxonomy']} does not match configured taxonomy {taxonomy_fingerprint}"
        )
    arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["arch"].items()})
    arrays = {n: np.array(v, dtype=np.float64) for n, v in doc["params"].items()}
    arrays["W1"] = arrays["W1"].reshape(arch.n_features, arch.hidden)
    arrays["W2"] = arrays["W2"].reshape(arch.hidden, len(doc["class_ids"]))
    return ModelParams(
        class_ids=tuple(doc["class_ids"]), version=doc["version"], base_heads=doc["base_heads"], arch=arch, **arrays
    )
