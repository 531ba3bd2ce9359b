"""Two-stage transfer learning: base training, shot sampling, fine-tuning, prediction."""

from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import losses as L
from .evaluation import ConfusionMatrix
from .geometry import PointCloud, ProjectionConfig, RangeImage, backproject, project, read_labels, read_scan
from .model import (
    ArchConfig, ModelParams, OptimizerState, extend_heads, forward, gradients, init, step,
)
from .taxonomy import IGNORE, Taxonomy, class_weights, count_classes, remap_for_base, remap_for_novel

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    name: str
    scan: str
    labels: Optional[str] = None


@dataclass
class Dataset:
    frames: list[Frame]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_kitti(cls, root: str, sequences: Sequence[str], split: str = "train") -> "Dataset":
        """Frames under root/sequences/<seq>/velodyne/*.bin with matching labels/*.label."""
        frames = []
        for seq in sequences:
            scans = sorted(glob.glob(os.path.join(root, "sequences", seq, "velodyne", "*.bin")))
            for path in scans:
                stem = os.path.splitext(os.path.basename(path))[0]
                lab = os.path.join(root, "sequences", seq, "labels", stem + ".label")
                frames.append(Frame(f"{seq}/{stem}", path, lab if os.path.isfile(lab) else None))
        return cls(frames, split)


def load_frame(frame: Frame, tax: Taxonomy) -> tuple[PointCloud, Optional[np.ndarray]]:
    cloud = read_scan(frame.scan)
    if frame.labels is None:
        return cloud, None
    raw = read_labels(frame.labels, len(cloud), known_ids=tax.raw_to_class.keys())
    return cloud, tax.map_raw(raw)


@dataclass
class StageConfig:
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.01
    lr_decay_mode: str = "multiplicative"
    batch_size: int = 1
    freeze: str = "none"
    weight_floor: float = 1e-4

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.lr_decay, self.lr_decay_mode)


@dataclass
class RunConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    base: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(freeze="none"))
    flags: L.AblationFlags = field(default_factory=L.AblationFlags)
    seed: int = 0
    shot_seed: int = 0


@dataclass
class ShotSample:
    n: int
    seed: int
    frames: dict[int, list[str]]  # novel class id -> frame names
    shortfall: dict[int, int] = field(default_factory=dict)  # class -> frames missing

    def frame_names(self) -> list[str]:
        """Distinct frames across all classes, sorted."""
        return sorted({f for names in self.frames.values() for f in names})

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "frames": {str(k): v for k, v in sorted(self.frames.items())},
            "shortfall": {str(k): v for k, v in sorted(self.shortfall.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ShotSample":
        return cls(
            int(doc["n"]), int(doc["seed"]),
            {int(k): list(v) for k, v in doc["frames"].items()},
            {int(k): int(v) for k, v in doc.get("shortfall", {}).items()},
        )


def sample_shots(dataset: Dataset, tax: Taxonomy, n: int, seed: int) -> ShotSample:
    """For each novel class draw n frames (without replacement) among those containing it."""
    if n < 0:
        raise ProtocolError("shot count must be non-negative")
    present: dict[int, list[str]] = {c: [] for c in tax.novel}
    if n > 0:
        for frame in dataset.frames:
            _, labels = load_frame(frame, tax)
            if labels is None:
                continue
            has = set(np.unique(labels).tolist())
            for c in tax.novel:
                if c in has:
                    present[c].append(frame.name)
    frames, shortfall = {}, {}
    for c in tax.novel:
        avail = present[c]
        if n == 0:
            frames[c] = []
        elif len(avail) <= n:
            frames[c] = list(avail)
            if len(avail) < n:
                shortfall[c] = n - len(avail)
                log.warning("class %s: only %d frames available for %d shots", tax.name(c), len(avail), n)
        else:
            rng = np.random.default_rng([int(seed), int(c)])
            pick = np.sort(rng.choice(len(avail), size=n, replace=False))
            frames[c] = [avail[i] for i in pick]
    return ShotSample(n, int(seed), frames, shortfall)


@dataclass
class _Prepared:
    image: RangeImage
    labels: np.ndarray  # per valid pixel, class ids


class FrameCache:
    """Projects each frame once and keeps per-pixel class labels."""

    def __init__(self, tax: Taxonomy, cfg: ProjectionConfig):
        self.tax, self.cfg = tax, cfg
        self._cache: dict[str, _Prepared] = {}

    def get(self, frame: Frame) -> _Prepared:
        if frame.name not in self._cache:
            cloud, labels = load_frame(frame, self.tax)
            if labels is None:
                raise ProtocolError(f"frame {frame.name} has no labels")
            image = project(cloud, self.cfg)
            self._cache[frame.name] = _Prepared(image, image.pixel_labels(labels))
        return self._cache[frame.name]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    terms: dict[str, float]
    lr: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "terms": self.terms, "lr": self.lr}


def _run_epochs(
    params: ModelParams,
    frames: list[Frame],
    stage: StageConfig,
    seed: int,
    stage_tag: int,
    frame_loss: Callable[[ModelParams, Frame], tuple[L.LossResult, dict[str, float], RangeImage]],
) -> tuple[ModelParams, list[EpochStats]]:
    state = stage.optimizer()
    rng = np.random.default_rng([int(seed), 2, stage_tag])
    trace = []
    for epoch in range(stage.epochs):
        order = rng.permutation(len(frames))
        total, terms = 0.0, {}
        lr = state.lr
        for start in range(0, len(order), stage.batch_size):
            batch = order[start:start + stage.batch_size]
            acc = None
            for idx in batch:
                res, parts, image = frame_loss(params, frames[idx])
                if not np.isfinite(res.value):
                    raise ProtocolError(f"non-finite loss at epoch {epoch}, frame {frames[idx].name}")
                total += res.value
                for k, v in parts.items():
                    terms[k] = terms.get(k, 0.0) + v
                g = gradients(params, image, res.grad)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
            acc = {k: v / len(batch) for k, v in acc.items()}
            params = step(params, state, acc, stage.freeze)
        n = max(len(frames), 1)
        trace.append(EpochStats(epoch, total / n, {k: v / n for k, v in terms.items()}, lr))
        log.info("epoch %d loss %.4f", epoch, total / n)
        state.end_epoch()
    return params, trace


def _weights(cache: FrameCache, frames: Iterable[Frame], remap, class_ids, floor: float):
    counts = count_classes((remap(cache.get(f).labels) for f in frames), class_ids)
    return class_weights(counts, floor)


def train_base(dataset: Dataset, tax: Taxonomy, config: RunConfig, cache: Optional[FrameCache] = None):
    """Supervised training on base data; novel classes are seen only as background."""
    if len(dataset) == 0:
        raise ProtocolError("empty base dataset")
    cache = cache or FrameCache(tax, config.projection)
    classes = tax.base_stage
    remap = lambda lab: remap_for_base(lab, tax)  # noqa: E731
    alpha = _weights(cache, dataset.frames, remap, classes, config.base.weight_floor)
    params = init(config.seed, config.arch, classes)

    def frame_loss(p, frame):
        prep = cache.get(frame)
        labels = remap(prep.labels)
        probs = L.softmax(forward(p, prep.image))
        ce = L.weighted_ce(probs, labels, alpha)
        ls = L.lovasz_softmax(probs, labels, classes)
        return ce + ls, {"ce": ce.value, "lovasz": ls.value}, prep.image

    params, trace = _run_epochs(params, dataset.frames, config.base, config.seed, 0, frame_loss)
    return params, trace


def finetune(
    base: ModelParams,
    shots: ShotSample,
    dataset: Dataset,
    tax: Taxonomy,
    config: RunConfig,
    cache: Optional[FrameCache] = None,
):
    """Extend the base model with novel heads and adapt it on the shot frames."""
    if base.version != "base":
        raise ProtocolError("fine-tuning needs a base-version model")
    by_name = {f.name: f for f in dataset.frames}
    missing = [n for n in shots.frame_names() if n not in by_name]
    if missing:
        raise ProtocolError(f"shot frames not in dataset: {missing[:5]}")
    frames = [by_name[n] for n in shots.frame_names()]
    if not frames:
        raise ProtocolError("empty shot set")
    cache = cache or FrameCache(tax, config.projection)
    remap = lambda lab: remap_for_novel(lab, tax)  # noqa: E731
    alpha = _weights(cache, frames, remap, tax.novel_stage, config.finetune.weight_floor)
    student = extend_heads(base, tax.novel, config.seed)
    flags = config.flags

    def frame_loss(p, frame):
        prep = cache.get(frame)
        labels = remap(prep.labels)
        probs = L.softmax(forward(p, prep.image))
        teacher = L.softmax(forward(base, prep.image))
        res = L.loss_finetune(probs, teacher, labels, alpha, tax.background, tax.base, tax.novel, flags)
        return res, {"total": res.value}, prep.image

    return _run_epochs(student, frames, config.finetune, config.seed, 1, frame_loss)


def predict_pixels(params: ModelParams, image: RangeImage) -> np.ndarray:
    """h x w grid of class ids (IGNORE on empty pixels); ties go to the earliest head."""
    logits = forward(params, image).values
    cols = np.argmax(logits, axis=1)
    grid = np.full(image.shape, IGNORE, dtype=np.int64)
    grid[image.valid] = np.asarray(params.class_ids, dtype=np.int64)[cols]
    return grid


def predict(params: ModelParams, cloud: PointCloud, cfg: ProjectionConfig) -> np.ndarray:
    image = project(cloud, cfg)
    return backproject(predict_pixels(params, image), image, cloud)


def evaluate(params: ModelParams, dataset: Dataset, tax: Taxonomy, cfg: ProjectionConfig) -> ConfusionMatrix:
    conf = ConfusionMatrix(tax.classes)
    for frame in dataset.frames:
        cloud, labels = load_frame(frame, tax)
        if labels is None:
            raise ProtocolError(f"frame {frame.name} has no labels")
        conf.accumulate(predict(params, cloud, cfg), labels)
    return conf
