"""Class universe, per-stage label remapping and inverse-frequency weights."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

IGNORE = -1


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    background: int
    base: tuple[int, ...]
    novel: tuple[int, ...]
    raw_to_class: Mapping[int, int] = field(default_factory=dict)  # raw id -> class id or IGNORE
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(int(c) for c in self.base))
        object.__setattr__(self, "novel", tuple(int(c) for c in self.novel))
        object.__setattr__(self, "raw_to_class", {int(k): int(v) for k, v in self.raw_to_class.items()})
        object.__setattr__(self, "names", {int(k): str(v) for k, v in self.names.items()})
        u, base, novel = self.background, set(self.base), set(self.novel)
        if u < 0:
            raise TaxonomyError(f"background id must be non-negative, got {u}")
        if len(base) != len(self.base) or len(novel) != len(self.novel):
            raise TaxonomyError("duplicate class id in base or novel set")
        if u in base or u in novel:
            raise TaxonomyError(f"background id {u} must not be a base or novel class")
        if base & novel:
            raise TaxonomyError(f"base and novel sets overlap: {sorted(base & novel)}")
        if any(c < 0 for c in base | novel):
            raise TaxonomyError("class ids must be non-negative")
        known = set(self.classes)
        for raw, cls in self.raw_to_class.items():
            if cls != IGNORE and cls not in known:
                raise TaxonomyError(f"raw id {raw} maps to undefined class {cls}")

    @property
    def classes(self) -> tuple[int, ...]:
        """Full class order: background, base classes, novel classes."""
        return (self.background, *self.base, *self.novel)

    @property
    def base_stage(self) -> tuple[int, ...]:
        return (self.background, *self.base)

    @property
    def novel_stage(self) -> tuple[int, ...]:
        return (self.background, *self.novel)

    def name(self, cls: int) -> str:
        return self.names.get(cls, str(cls))

    def map_raw(self, raw: np.ndarray) -> np.ndarray:
        """Dataset semantic ids -> class ids (IGNORE for unlabeled)."""
        raw = np.asarray(raw, dtype=np.int64)
        keys, inv = np.unique(raw, return_inverse=True)
        missing = [int(k) for k in keys if int(k) not in self.raw_to_class]
        if missing:
            raise TaxonomyError(f"unknown raw semantic id(s) {missing}")
        table = np.array([self.raw_to_class[int(k)] for k in keys], dtype=np.int64)
        return table[inv].reshape(raw.shape)

    def class_to_raw(self) -> dict[int, int]:
        """Smallest raw id per class, used when writing predictions."""
        out: dict[int, int] = {}
        for raw in sorted(self.raw_to_class):
            cls = self.raw_to_class[raw]
            if cls != IGNORE and cls not in out:
                out[cls] = raw
        return out

    def to_dict(self) -> dict:
        return {
            "background": self.background,
            "base": list(self.base),
            "novel": list(self.novel),
            "raw_to_class": {str(k): v for k, v in sorted(self.raw_to_class.items())},
            "names": {str(k): v for k, v in sorted(self.names.items())},
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_ids(labels: np.ndarray, tax: Taxonomy) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    allowed = np.array((*tax.classes, IGNORE), dtype=np.int64)
    bad = np.setdiff1d(np.unique(labels), allowed)
    if bad.size:
        raise TaxonomyError(f"label id(s) {bad.tolist()} not in taxonomy")
    return labels


def remap_for_base(labels: np.ndarray, tax: Taxonomy) -> np.ndarray:
    """Novel classes become background."""
    labels = _check_ids(labels, tax)
    return np.where(np.isin(labels, tax.novel), tax.background, labels)


def remap_for_novel(labels: np.ndarray, tax: Taxonomy) -> np.ndarray:
    """Base classes become background."""
    labels = _check_ids(labels, tax)
    return np.where(np.isin(labels, tax.base), tax.background, labels)


class ClassWeights(dict):
    """class id -> alpha_k"""

    def vector(self, class_order: Iterable[int]) -> np.ndarray:
        return np.array([self[c] for c in class_order], dtype=np.float64)


def count_classes(labels: Iterable[np.ndarray], class_ids: Iterable[int]) -> dict[int, int]:
    ids = list(class_ids)
    counts = dict.fromkeys(ids, 0)
    for lab in labels:
        vals, n = np.unique(np.asarray(lab), return_counts=True)
        for v, c in zip(vals.tolist(), n.tolist()):
            if v in counts:
                counts[v] += c
    return counts


def class_weights(counts: Mapping[int, int], floor: float = 1e-4) -> ClassWeights:
    """alpha_k = 1 / max(freq_k, floor)."""
    if floor <= 0:
        raise TaxonomyError("frequency floor must be positive")
    neg = [k for k, c in counts.items() if c < 0]
    if neg:
        raise TaxonomyError(f"negative count for class(es) {neg}")
    total = float(sum(counts.values()))
    if total <= 0:
        raise TaxonomyError("class counts sum to zero")
    return ClassWeights({k: 1.0 / max(c / total, floor) for k, c in counts.items()})


# SemanticKITTI learning map (raw id -> training id), unlabeled/outlier/other -> ignore
_KITTI_RAW = {
    0: IGNORE, 1: IGNORE, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6, 31: 7, 32: 8,
    40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 52: IGNORE, 60: 9, 70: 15, 71: 16, 72: 17,
    80: 18, 81: 19, 99: IGNORE, 252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}
_KITTI_NAMES = {
    0: "background", 1: "car", 2: "bicycle", 3: "motorcycle", 4: "truck", 5: "other-vehicle",
    6: "person", 7: "bicyclist", 8: "motorcyclist", 9: "road", 10: "parking", 11: "sidewalk",
    12: "other-ground", 13: "building", 14: "fence", 15: "vegetation", 16: "trunk", 17: "terrain",
    18: "pole", 19: "traffic-sign",
}
# raw id reserved for predictions of the background head; outside the dataset's id range
BACKGROUND_RAW = 0xFFFF


def semantic_kitti() -> Taxonomy:
    novel = (1, 6, 7, 8)
    base = tuple(c for c in range(1, 20) if c not in novel)
    raw = dict(_KITTI_RAW)
    raw[BACKGROUND_RAW] = 0
    return Taxonomy(background=0, base=base, novel=novel, raw_to_class=raw, names=_KITTI_NAMES)
