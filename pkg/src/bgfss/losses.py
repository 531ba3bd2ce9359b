"""Segmentation losses with analytic gradients w.r.t. pre-softmax logits.

Every loss takes a :class:`ProbMap` (softmax output plus the class id of
each column) and returns a :class:`LossResult` whose ``grad`` is
d(loss)/d(logits), already chained through the softmax Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .taxonomy import IGNORE

LN_CLAMP = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LogitsMap:
    values: np.ndarray  # M x K
    class_order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_order", tuple(int(c) for c in self.class_order))
        if self.values.ndim != 2 or self.values.shape[1] != len(self.class_order):
            raise LossError(f"logits shape {self.values.shape} vs {len(self.class_order)} classes")


@dataclass(frozen=True)
class ProbMap:
    values: np.ndarray  # M x K, rows sum to 1
    class_order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_order", tuple(int(c) for c in self.class_order))
        if self.values.ndim != 2 or self.values.shape[1] != len(self.class_order):
            raise LossError(f"probability shape {self.values.shape} vs {len(self.class_order)} classes")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    def columns(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.column(c) for c in ids], dtype=np.int64)

    def column(self, cls: int) -> int:
        try:
            return self.class_order.index(int(cls))
        except ValueError:
            raise LossError(f"class {cls} has no column in {self.class_order}") from None


@dataclass
class LossResult:
    value: float
    grad: np.ndarray  # M x K, d loss / d logits

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.grad + other.grad)


def softmax(logits: LogitsMap) -> ProbMap:
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    return ProbMap(e / e.sum(axis=1, keepdims=True), logits.class_order)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain d loss/d P through the softmax: P * (g - <P, g>)."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=1, keepdims=True))


def _label_columns(probs: ProbMap, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row mask of non-ignored elements, column of each label; -1 where ignored)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.M,):
        raise LossError(f"{labels.shape[0]} labels for {probs.M} elements")
    keep = labels != IGNORE
    cols = np.full(labels.shape, -1, dtype=np.int64)
    lookup = {c: j for j, c in enumerate(probs.class_order)}
    for cls in np.unique(labels[keep]).tolist():
        if cls not in lookup:
            raise LossError(f"label {cls} has no column in {probs.class_order}")
        cols[labels == cls] = lookup[cls]
    return keep, cols


def _weights_for(alpha: Mapping[int, float], labels: np.ndarray, keep: np.ndarray) -> np.ndarray:
    w = np.zeros(labels.shape, dtype=np.float64)
    for cls in np.unique(labels[keep]).tolist():
        if cls not in alpha:
            raise LossError(f"no class weight for class {cls}")
        w[labels == cls] = alpha[cls]
    return w


def _neg_log_group_mass(p: np.ndarray, group: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row: -ln(sum_{k in group} p_k) and its gradient w.r.t. the logits.

    ``group`` is an M x K boolean mask.  Using the closed form
    p - p * group / S keeps the gradient stable for small masses.
    """
    mass = (p * group).sum(axis=1)
    safe = np.maximum(mass, LN_CLAMP)
    value = -np.log(safe)
    grad = p - p * group / safe[:, None]
    return value, grad


def weighted_ce(probs: ProbMap, labels: np.ndarray, alpha: Mapping[int, float]) -> LossResult:
    keep, cols = _label_columns(probs, labels)
    labels = np.asarray(labels, dtype=np.int64)
    m = int(keep.sum())
    grad = np.zeros_like(probs.values)
    if m == 0:
        return LossResult(0.0, grad)
    w = _weights_for(alpha, labels, keep)
    p = probs.values[keep]
    onehot = np.zeros_like(p)
    onehot[np.arange(m), cols[keep]] = 1.0
    per, g = _neg_log_group_mass(p, onehot.astype(bool))
    grad[keep] = w[keep, None] * g / m
    return LossResult(float((w[keep] * per).sum() / m), grad)


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending error ordering."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_extension(errors: np.ndarray, fg: np.ndarray) -> tuple[float, np.ndarray]:
    """Lovász extension of the Jaccard loss at ``errors``; returns (value, d value / d errors)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return 0.0, np.zeros(0)
    # descending errors, ties by ascending element index
    order = np.argsort(-errors, kind="stable")
    g = lovasz_grad(np.asarray(fg, dtype=np.float64)[order])
    grad = np.empty_like(errors)
    grad[order] = g
    return float(errors[order] @ g), grad


def lovasz_softmax(probs: ProbMap, labels: np.ndarray, class_set: Sequence[int]) -> LossResult:
    class_set = tuple(int(c) for c in class_set)
    if not class_set:
        raise LossError("empty class set for Lovász-Softmax")
    keep, _ = _label_columns(probs, labels)
    labels = np.asarray(labels, dtype=np.int64)[keep]
    p = probs.values[keep]
    grad_p = np.zeros_like(p)
    total = 0.0
    for cls in class_set:
        j = probs.column(cls)
        fg = (labels == cls).astype(np.float64)
        errors = np.abs(fg - p[:, j])
        val, g = lovasz_extension(errors, fg)
        total += val
        # d|fg - p|/dp = -1 on foreground, +1 elsewhere
        grad_p[:, j] += g * (1.0 - 2.0 * fg)
    n = len(class_set)
    grad = np.zeros_like(probs.values)
    grad[keep] = softmax_backward(p, grad_p / n)
    return LossResult(total / n, grad)


def _check_aligned(a: ProbMap, b: ProbMap) -> None:
    if a.M != b.M:
        raise LossError(f"misaligned probability maps: {a.M} vs {b.M} elements")


CE_VARIANTS = ("paper", "current-model")


def unbiased_ce(
    student: ProbMap,
    base: ProbMap,
    labels: np.ndarray,
    alpha: Mapping[int, float],
    background: int,
    base_classes: Sequence[int],
    variant: str = "paper",
) -> LossResult:
    """Cross-entropy whose background probability aggregates the base classes.

    ``paper``: the aggregate comes from the frozen base model, so background
    elements carry no gradient.  ``current-model``: it is the student's own
    background plus base-class mass.
    """
    if variant not in CE_VARIANTS:
        raise LossError(f"unknown unbiased CE variant {variant!r}")
    _check_aligned(student, base)
    keep, cols = _label_columns(student, labels)
    labels = np.asarray(labels, dtype=np.int64)
    m = int(keep.sum())
    grad = np.zeros_like(student.values)
    if m == 0:
        return LossResult(0.0, grad)
    w = _weights_for(alpha, labels, keep)
    per = np.zeros(student.M)
    bg = keep & (labels == background)
    fg = keep & ~bg

    p = student.values
    group = np.zeros(p.shape, dtype=bool)
    group[np.flatnonzero(fg), cols[fg]] = True
    if variant == "current-model":
        group[np.ix_(np.flatnonzero(bg), student.columns((background, *base_classes)))] = True
        rows = keep
    else:
        rows = fg
        if bg.any():
            base_mass = base.values[np.ix_(bg, base.columns(base_classes))].sum(axis=1)
            per[bg] = -np.log(np.maximum(base_mass, LN_CLAMP))
    if rows.any():
        v, g = _neg_log_group_mass(p[rows], group[rows])
        per[rows] = v
        grad[rows] = w[rows, None] * g / m
    return LossResult(float((w[keep] * per[keep]).sum() / m), grad)


def unbiased_kd(
    student: ProbMap,
    teacher: ProbMap,
    background: int,
    novel_classes: Sequence[int],
) -> LossResult:
    """Distillation where the student's background is the summed novel-class mass."""
    _check_aligned(student, teacher)
    groups = []
    for cls in teacher.class_order:
        mask = np.zeros(len(student.class_order), dtype=bool)
        if cls == background:
            mask[student.columns(novel_classes)] = True
        else:
            mask[student.column(cls)] = True
        groups.append(mask)
    return _distill(student, teacher, np.array(groups))


def original_kd(student: ProbMap, teacher: ProbMap) -> LossResult:
    """Distillation against the student's raw columns for the teacher's classes."""
    _check_aligned(student, teacher)
    groups = np.zeros((len(teacher.class_order), len(student.class_order)), dtype=bool)
    for i, cls in enumerate(teacher.class_order):
        groups[i, student.column(cls)] = True
    return _distill(student, teacher, groups)


def _distill(student: ProbMap, teacher: ProbMap, groups: np.ndarray) -> LossResult:
    """-(1/M) sum_i sum_k t_ik ln(sum_{j in group k} p_ij)."""
    m = student.M
    if m == 0:
        return LossResult(0.0, np.zeros_like(student.values))
    p, t = student.values, teacher.values
    mass = np.maximum(p @ groups.T.astype(np.float64), LN_CLAMP)  # M x K_teacher
    value = -(t * np.log(mass)).sum() / m
    # d/dP_j of -sum_k t_k ln(mass_k) = -sum_k t_k [j in k] / mass_k
    grad_p = -(t / mass) @ groups.astype(np.float64)
    return LossResult(float(value), softmax_backward(p, grad_p) / m)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy (nats)."""
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1)


def loss_base(probs: ProbMap, labels: np.ndarray, alpha: Mapping[int, float], class_set: Sequence[int]) -> LossResult:
    """Weighted CE plus Lovász-Softmax over background + base classes."""
    return weighted_ce(probs, labels, alpha) + lovasz_softmax(probs, labels, class_set)


@dataclass(frozen=True)
class AblationFlags:
    ce: str = "unbiased"  # off | original | unbiased
    kd: str = "unbiased"  # off | original | unbiased
    lovasz: bool = True
    ce_variant: str = "paper"  # paper | current-model

    def __post_init__(self):
        if self.ce not in ("off", "original", "unbiased"):
            raise LossError(f"ce flag must be off/original/unbiased, got {self.ce!r}")
        if self.kd not in ("off", "original", "unbiased"):
            raise LossError(f"kd flag must be off/original/unbiased, got {self.kd!r}")
        if self.ce_variant not in CE_VARIANTS:
            raise LossError(f"ce_variant must be one of {CE_VARIANTS}, got {self.ce_variant!r}")

    @property
    def any_enabled(self) -> bool:
        return self.ce != "off" or self.kd != "off" or self.lovasz


def loss_finetune(
    student: ProbMap,
    base: ProbMap,
    labels: np.ndarray,
    alpha: Mapping[int, float],
    background: int,
    base_classes: Sequence[int],
    novel_classes: Sequence[int],
    flags: AblationFlags = AblationFlags(),
) -> LossResult:
    if not flags.any_enabled:
        raise LossError("no fine-tuning loss term enabled")
    total = LossResult(0.0, np.zeros_like(student.values))
    if flags.ce == "unbiased":
        total = total + unbiased_ce(student, base, labels, alpha, background, base_classes, flags.ce_variant)
    elif flags.ce == "original":
        total = total + weighted_ce(student, labels, alpha)
    if flags.lovasz:
        total = total + lovasz_softmax(student, labels, (background, *novel_classes))
    if flags.kd == "unbiased":
        total = total + unbiased_kd(student, base, background, novel_classes)
    elif flags.kd == "original":
        total = total + original_kd(student, base)
    return total
