"""Multi-seed ablation runs on a labelled corpus (used by scripts/ and the acceptance suite)."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ToolConfig
from .evaluation import EvalReport, report
from .losses import AblationFlags
from .protocol import Dataset, FrameCache, evaluate, finetune, sample_shots, train_base

log = logging.getLogger(__name__)

# Rows of the loss ablation; "naive" is plain cross-entropy fine-tuning.
REGIMES = {
    "full": AblationFlags("unbiased", "unbiased", True),
    "naive": AblationFlags("original", "off", False),
    "ce+lovasz": AblationFlags("original", "off", True),
    "unbiased-ce": AblationFlags("unbiased", "off", True),
    "ce+unbiased-kd": AblationFlags("original", "unbiased", True),
    "unbiased-ce+kd": AblationFlags("unbiased", "original", True),
}


@dataclass
class SeedResult:
    seed: int
    base: EvalReport
    regimes: dict[str, EvalReport] = field(default_factory=dict)

    def base_drop(self, name: str) -> float:
        return self.base.miou_base - self.regimes[name].miou_base


def run_seed(root: str, cfg: ToolConfig, seed: int, regimes: dict[str, AblationFlags]) -> SeedResult:
    """Train a base model, sample shots and fine-tune once per regime, all from ``seed``."""
    cfg = copy.deepcopy(cfg)
    cfg.seeds.seed = cfg.seeds.shot_seed = seed
    tax = cfg.build_taxonomy()
    run = cfg.run_config()
    train = Dataset.from_kitti(root, cfg.data.train, "train")
    pool = Dataset.from_kitti(root, cfg.data.shot_pool, "shot_pool")
    held_out = Dataset.from_kitti(root, cfg.data.eval, "eval")
    cache = FrameCache(tax, run.projection)
    ev = cfg.evaluation

    base, _ = train_base(train, tax, run, cache)
    out = SeedResult(seed, report(evaluate(base, held_out, tax, run.projection), tax, ev.include_background, ev.absent))
    shots = sample_shots(pool, tax, cfg.finetune.shots, seed)
    for name, flags in regimes.items():
        run.flags = flags
        params, _ = finetune(base, shots, pool, tax, run, cache)
        conf = evaluate(params, held_out, tax, run.projection)
        out.regimes[name] = report(conf, tax, ev.include_background, ev.absent)
        log.info("seed %d %s: mIoU %.1f", seed, name, out.regimes[name].miou)
    return out


def summarize(results: list[SeedResult]) -> dict[str, dict[str, float]]:
    """Seed means of mIoU_b, mIoU_n, mIoU and the base-class drop for every regime."""
    table = {"base": {"miou_base": float(np.mean([r.base.miou_base for r in results]))}}
    for name in results[0].regimes:
        reps = [r.regimes[name] for r in results]
        table[name] = {
            "miou_base": float(np.mean([x.miou_base for x in reps])),
            "miou_novel": float(np.mean([x.miou_novel for x in reps])),
            "miou": float(np.mean([x.miou for x in reps])),
            "base_drop": float(np.mean([r.base_drop(name) for r in results])),
        }
    return table
