"""Central finite-difference checks of every analytic gradient."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import losses as L
from .geometry import ProjectionConfig, RangeImage
from .model import ArchConfig, ModelParams, extend_heads, forward, gradients, init
from .taxonomy import IGNORE

STEP = 1e-5
TOLERANCE = 1e-4
GRAD_FLOOR = 1e-6  # denominators below this are treated as this


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


@dataclass
class Instance:
    background: int
    base: tuple[int, ...]
    novel: tuple[int, ...]
    logits: np.ndarray  # M x K over (u, base, novel)
    base_logits: np.ndarray  # M x (1 + |base|)
    labels_base: np.ndarray  # over u + base, with IGNORE
    labels_novel: np.ndarray  # over u + novel, with IGNORE
    alpha: dict[int, float]

    @property
    def classes(self) -> tuple[int, ...]:
        return (self.background, *self.base, *self.novel)

    @property
    def novel_stage(self) -> tuple[int, ...]:
        return (self.background, *self.novel)

    def student(self, z: np.ndarray) -> L.ProbMap:
        return L.softmax(L.LogitsMap(z, self.classes))

    def teacher(self) -> L.ProbMap:
        return L.softmax(L.LogitsMap(self.base_logits, (self.background, *self.base)))


def _min_error_gap(probs: L.ProbMap, labels: np.ndarray, class_set) -> float:
    keep = labels != IGNORE
    gap = np.inf
    for c in class_set:
        fg = (labels[keep] == c).astype(float)
        e = np.sort(np.abs(fg - probs.values[keep, probs.column(c)]))
        if e.size > 1:
            gap = min(gap, np.diff(e).min())
    return gap


def random_instance(rng: np.random.Generator, max_m: int = 16, max_k: int = 6, min_gap: float = 1e-3) -> Instance:
    """Random logits/labels whose Lovász error orderings are tie-free by at least ``min_gap``."""
    while True:
        k = int(rng.integers(3, max_k + 1))
        nb = int(rng.integers(1, k - 1))
        u, base, novel = 0, tuple(range(1, nb + 1)), tuple(range(nb + 1, k))
        m = int(rng.integers(2, max_m + 1))
        z = rng.normal(0.0, 2.0, size=(m, k))
        zb = rng.normal(0.0, 2.0, size=(m, nb + 1))
        pick = lambda ids: np.where(rng.random(m) < 0.1, IGNORE, rng.choice(ids, size=m))  # noqa: E731
        lb = pick(np.array((u, *base)))
        ln = pick(np.array((u, *novel)))
        alpha = {c: float(rng.uniform(0.5, 3.0)) for c in (u, *base, *novel)}
        inst = Instance(u, base, novel, z, zb, lb, ln, alpha)
        s = inst.student(z)
        if (
            _min_error_gap(s, ln, (u, *novel)) >= min_gap
            and _min_error_gap(L.softmax(L.LogitsMap(z[:, : nb + 1], (u, *base))), lb, (u, *base)) >= min_gap
        ):
            return inst


def finetune_flag_grid() -> list[L.AblationFlags]:
    out = []
    for ce, kd, lov in itertools.product(("off", "original", "unbiased"), ("off", "original", "unbiased"), (False, True)):
        variants = L.CE_VARIANTS if ce == "unbiased" else ("paper",)
        for var in variants:
            flags = L.AblationFlags(ce, kd, lov, var)
            if flags.any_enabled:
                out.append(flags)
    return out


def flag_name(f: L.AblationFlags) -> str:
    ce = f"ce={f.ce}" + (f"/{f.ce_variant}" if f.ce == "unbiased" else "")
    return f"loss_finetune[{ce},kd={f.kd},lovasz={'on' if f.lovasz else 'off'}]"


def logit_losses() -> dict[str, Callable[[Instance, np.ndarray], L.LossResult]]:
    """Named loss closures over an instance and student logits."""
    def base_probs(inst, z):
        # base-stage losses see only the u + base columns
        nb = len(inst.base) + 1
        return L.softmax(L.LogitsMap(z[:, :nb], (inst.background, *inst.base)))

    def pad(inst, z, res):
        g = np.zeros_like(z)
        g[:, : res.grad.shape[1]] = res.grad
        return L.LossResult(res.value, g)

    checks = {
        "weighted_ce": lambda i, z: L.weighted_ce(i.student(z), i.labels_novel, i.alpha),
        "lovasz_softmax": lambda i, z: L.lovasz_softmax(i.student(z), i.labels_novel, i.novel_stage),
        "unbiased_ce[paper]": lambda i, z: L.unbiased_ce(
            i.student(z), i.teacher(), i.labels_novel, i.alpha, i.background, i.base, "paper"),
        "unbiased_ce[current-model]": lambda i, z: L.unbiased_ce(
            i.student(z), i.teacher(), i.labels_novel, i.alpha, i.background, i.base, "current-model"),
        "unbiased_kd": lambda i, z: L.unbiased_kd(i.student(z), i.teacher(), i.background, i.novel),
        "original_kd": lambda i, z: L.original_kd(i.student(z), i.teacher()),
        "loss_base": lambda i, z: pad(i, z, L.loss_base(
            base_probs(i, z), i.labels_base, i.alpha, (i.background, *i.base))),
    }
    for flags in finetune_flag_grid():
        checks[flag_name(flags)] = (lambda f: lambda i, z: L.loss_finetune(
            i.student(z), i.teacher(), i.labels_novel, i.alpha, i.background, i.base, i.novel, f))(flags)
    return checks


def check_logit_gradients(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    insts = [random_instance(rng) for _ in range(instances)]
    results = []
    for name, fn in logit_losses().items():
        worst = 0.0
        for inst in insts:
            z = inst.logits.copy()
            analytic = fn(inst, z).grad
            numeric = central_difference(lambda q: fn(inst, q).value, z)
            worst = max(worst, rel_error(analytic, numeric))
        results.append(CheckResult(name, len(insts), worst))
    return results


def tiny_image(rng: np.random.Generator, h: int = 4, w: int = 4) -> RangeImage:
    ch = rng.normal(0.0, 1.0, size=(h, w, 5))
    ch[..., 4] = np.sqrt((ch[..., :3] ** 2).sum(axis=-1))
    valid = np.ones((h, w), dtype=bool)
    valid[0, 0] = False  # one empty pixel exercises the neighbourhood masking
    ch[~valid] = 0.0
    index = np.where(valid, np.arange(h * w).reshape(h, w), -1)
    return RangeImage(ch, valid, index, ProjectionConfig(w, h))


def _perturbed(params: ModelParams, name: str, value: np.ndarray) -> ModelParams:
    return replace(params, **{name: value})


def check_model_gradients(instances: int = 3, seed: int = 1) -> list[CheckResult]:
    """loss(softmax(forward(params))) against finite differences in every parameter."""
    rng = np.random.default_rng(seed)
    arch = ArchConfig(hidden=4, neighborhood=True, input_scale=(1.0,) * 5, head_init_scale=0.5)
    configs: dict[str, L.AblationFlags | None] = {"model+loss_base": None}
    for flags in finetune_flag_grid():
        configs["model+" + flag_name(flags)] = flags
    results = []
    for name, flags in configs.items():
        worst = 0.0
        for _ in range(instances):
            while True:
                image = tiny_image(rng)
                base = init(int(rng.integers(1 << 30)), arch, (0, 1, 2))
                params = base if flags is None else extend_heads(base, (3, 4), int(rng.integers(1 << 30)))
                teacher_model = init(int(rng.integers(1 << 30)), arch, (0, 1, 2))
                m = image.M
                labels = rng.choice((0, 1, 2) if flags is None else (0, 3, 4), size=m)
                alpha = {c: float(rng.uniform(0.5, 2.0)) for c in range(5)}
                teacher = L.softmax(forward(teacher_model, image))

                def loss(p: ModelParams) -> L.LossResult:
                    probs = L.softmax(forward(p, image))
                    if flags is None:
                        return L.loss_base(probs, labels, alpha, (0, 1, 2))
                    return L.loss_finetune(probs, teacher, labels, alpha, 0, (1, 2), (3, 4), flags)

                stage = (0, 1, 2) if flags is None else (0, 3, 4)
                if _min_error_gap(L.softmax(forward(params, image)), labels, stage) >= 1e-3:
                    break
            analytic = gradients(params, image, loss(params).grad)
            for pname, arr in params.arrays().items():
                x = arr.copy()
                numeric = central_difference(lambda q: loss(_perturbed(params, pname, q)).value, x)
                worst = max(worst, rel_error(analytic[pname], numeric))
        results.append(CheckResult(name, instances, worst))
    return results


def run_all(instances: int = 20, model_instances: int = 3, seed: int = 0) -> list[CheckResult]:
    return check_logit_gradients(instances, seed) + check_model_gradients(model_instances, seed + 1)
