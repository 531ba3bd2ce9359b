"""Confusion matrices and generalized few-shot mIoU (overall / base / novel)."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .taxonomy import IGNORE, Taxonomy


class EvaluationError(ValueError):
    pass


class ConfusionMatrix:
    """counts[t, p]: number of points of true class t predicted as p."""

    def __init__(self, class_order: Sequence[int]):
        self.class_order = tuple(int(c) for c in class_order)
        self.index = {c: i for i, c in enumerate(self.class_order)}
        self.counts = np.zeros((len(self.class_order),) * 2, dtype=np.int64)

    def _indices(self, ids: np.ndarray, what: str) -> np.ndarray:
        lut_keys = np.array(self.class_order, dtype=np.int64)
        order = np.argsort(lut_keys)
        pos = np.searchsorted(lut_keys[order], ids)
        pos = np.clip(pos, 0, len(lut_keys) - 1)
        found = lut_keys[order][pos] == ids
        if not found.all():
            raise EvaluationError(f"unknown {what} id(s) {np.unique(ids[~found]).tolist()}")
        return order[pos]

    def accumulate(self, predictions: np.ndarray, truths: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(predictions, dtype=np.int64).ravel()
        truth = np.asarray(truths, dtype=np.int64).ravel()
        if pred.shape != truth.shape:
            raise EvaluationError(f"{pred.size} predictions vs {truth.size} truths")
        keep = truth != IGNORE
        pred, truth = pred[keep], truth[keep]
        if pred.size == 0:
            return self
        t = self._indices(truth, "truth")
        p = self._indices(pred, "prediction")
        k = len(self.class_order)
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_order != self.class_order:
            raise EvaluationError("cannot merge confusion matrices over different classes")
        out = ConfusionMatrix(self.class_order)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: ConfusionMatrix, predictions: np.ndarray, truths: np.ndarray) -> ConfusionMatrix:
    return conf.accumulate(predictions, truths)


def iou(conf: ConfusionMatrix, cls: int) -> Optional[float]:
    """IoU in percent, or None when the class is absent from both truth and prediction."""
    i = conf.index[int(cls)]
    tp = conf.counts[i, i]
    fp = conf.counts[:, i].sum() - tp
    fn = conf.counts[i, :].sum() - tp
    denom = tp + fp + fn
    if denom == 0:
        return None
    return 100.0 * float(tp) / float(denom)


def _mean(values: list[Optional[float]], absent: str) -> Optional[float]:
    if absent == "zero":
        vals = [0.0 if v is None else v for v in values]
    else:
        vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    class_order: tuple[int, ...]
    names: dict[int, str]
    per_class: dict[int, Optional[float]]
    miou: Optional[float]
    miou_base: Optional[float]
    miou_novel: Optional[float]
    base: tuple[int, ...]
    novel: tuple[int, ...]
    points: int
    manifest: Optional[str] = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_base": self.miou_base,
            "miou_novel": self.miou_novel,
            "points": self.points,
            "per_class": {self.names.get(c, str(c)): self.per_class[c] for c in self.class_order},
            "base": [self.names.get(c, str(c)) for c in self.base],
            "novel": [self.names.get(c, str(c)) for c in self.novel],
            "manifest": self.manifest,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_summary(self, method: str = "model") -> str:
        """One row per method: mIoU_b, mIoU_n, mIoU."""
        f = _fmt
        lines = [
            f"{'method':<20} {'mIoU_b':>8} {'mIoU_n':>8} {'mIoU':>8}",
            f"{method:<20} {f(self.miou_base):>8} {f(self.miou_novel):>8} {f(self.miou):>8}",
        ]
        return "\n".join(lines) + "\n"

    def table_per_class(self, method: str = "model", sep: str = ",") -> str:
        """Per-class IoU columns (base then novel) followed by the three means."""
        cols = list(self.base) + list(self.novel)
        buf = io.StringIO()
        header = ["method"] + [self.names.get(c, str(c)) for c in cols] + ["mIoU_b", "mIoU_n", "mIoU"]
        row = [method] + [_fmt(self.per_class[c]) for c in cols] + [
            _fmt(self.miou_base), _fmt(self.miou_novel), _fmt(self.miou)
        ]
        buf.write(sep.join(header) + "\n")
        buf.write(sep.join(row) + "\n")
        return buf.getvalue()


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.1f}"


def report(
    conf: ConfusionMatrix,
    tax: Taxonomy,
    include_background: bool = False,
    absent: str = "exclude",
    manifest: Optional[str] = None,
) -> EvalReport:
    if absent not in ("exclude", "zero"):
        raise EvaluationError(f"absent-class policy must be 'exclude' or 'zero', got {absent!r}")
    per_class = {c: iou(conf, c) for c in conf.class_order}
    overall = list(tax.base) + list(tax.novel)
    if include_background:
        overall = [tax.background] + overall
    return EvalReport(
        class_order=conf.class_order,
        names=dict(tax.names),
        per_class=per_class,
        miou=_mean([per_class[c] for c in overall], absent),
        miou_base=_mean([per_class[c] for c in tax.base], absent),
        miou_novel=_mean([per_class[c] for c in tax.novel], absent),
        base=tax.base,
        novel=tax.novel,
        points=conf.total,
        manifest=manifest,
        settings={"include_background": include_background, "absent": absent},
    )
