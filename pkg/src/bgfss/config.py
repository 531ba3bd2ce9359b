"""Sectioned INI tool configuration with strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .geometry import ProjectionConfig
from .losses import AblationFlags
from .model import ArchConfig
from .protocol import RunConfig, StageConfig
from .synth import CorpusConfig
from .taxonomy import IGNORE, Taxonomy, semantic_kitti


class ConfigError(ValueError):
    pass


@dataclass
class ProjectionSection:
    width: int = 2048
    height: int = 64
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0

    def build(self) -> ProjectionConfig:
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)


@dataclass
class ModelSection:
    hidden: int = 16
    neighborhood: bool = True
    input_scale: tuple = (20.0, 20.0, 2.0, 1.0, 20.0)
    init_scale: float = 1.0
    head_init_scale: float = 0.01

    def build(self) -> ArchConfig:
        return ArchConfig(self.hidden, self.neighborhood, tuple(self.input_scale), self.init_scale, self.head_init_scale)


@dataclass
class BaseSection:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.01
    lr_decay_mode: str = "multiplicative"
    batch_size: int = 1
    weight_floor: float = 1e-4

    def build(self) -> StageConfig:
        return StageConfig(self.epochs, self.lr, self.momentum, self.lr_decay, self.lr_decay_mode,
                           self.batch_size, "none", self.weight_floor)


@dataclass
class FinetuneSection(BaseSection):
    freeze: str = "none"
    shots: int = 10
    shot_grid: tuple = (10, 20, 50, 100)

    def build(self) -> StageConfig:
        return StageConfig(self.epochs, self.lr, self.momentum, self.lr_decay, self.lr_decay_mode,
                           self.batch_size, self.freeze, self.weight_floor)


@dataclass
class AblationSection:
    ce: str = "unbiased"
    kd: str = "unbiased"
    lovasz: bool = True
    ce_variant: str = "paper"

    def build(self) -> AblationFlags:
        return AblationFlags(self.ce, self.kd, self.lovasz, self.ce_variant)


@dataclass
class EvaluationSection:
    include_background: bool = False
    absent: str = "exclude"


@dataclass
class SeedsSection:
    seed: int = 0
    shot_seed: int = 0


@dataclass
class DataSection:
    root: str = ""
    train: tuple = ("00", "01", "02", "03", "04", "05", "06", "07", "09", "10")
    shot_pool: tuple = ("00", "01", "02", "03", "04", "05", "06", "07", "09", "10")
    eval: tuple = ("08",)


@dataclass
class TaxonomySection:
    preset: str = "semantic-kitti"  # semantic-kitti | custom
    background: int = 0
    base: tuple = ()
    novel: tuple = ()


SynthSection = CorpusConfig

SECTIONS = {
    "projection": ProjectionSection,
    "model": ModelSection,
    "base": BaseSection,
    "finetune": FinetuneSection,
    "ablation": AblationSection,
    "evaluation": EvaluationSection,
    "seeds": SeedsSection,
    "data": DataSection,
    "taxonomy": TaxonomySection,
    "synth": SynthSection,
}
FREEFORM = ("taxonomy.raw", "taxonomy.names")


@dataclass
class ToolConfig:
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    model: ModelSection = field(default_factory=ModelSection)
    base: BaseSection = field(default_factory=BaseSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    data: DataSection = field(default_factory=DataSection)
    taxonomy: TaxonomySection = field(default_factory=TaxonomySection)
    synth: CorpusConfig = field(default_factory=CorpusConfig)
    raw_ids: dict = field(default_factory=dict)  # [taxonomy.raw]: raw id -> class id or IGNORE
    names: dict = field(default_factory=dict)  # [taxonomy.names]

    def run_config(self) -> RunConfig:
        return RunConfig(
            projection=self.projection.build(),
            arch=self.model.build(),
            base=self.base.build(),
            finetune=self.finetune.build(),
            flags=self.ablation.build(),
            seed=self.seeds.seed,
            shot_seed=self.seeds.shot_seed,
        )

    def build_taxonomy(self) -> Taxonomy:
        t = self.taxonomy
        if t.preset == "semantic-kitti":
            tax = semantic_kitti()
            raw = dict(tax.raw_to_class)
            raw.update(self.raw_ids)
            names = dict(tax.names)
            names.update(self.names)
            base = tuple(t.base) or tax.base
            novel = tuple(t.novel) or tax.novel
            return Taxonomy(t.background, base, novel, raw, names)
        if t.preset != "custom":
            raise ConfigError(f"taxonomy.preset: unknown preset {t.preset!r}")
        if not t.base or not t.novel or not self.raw_ids:
            raise ConfigError("taxonomy: custom preset needs base, novel and a [taxonomy.raw] section")
        return Taxonomy(t.background, tuple(t.base), tuple(t.novel), dict(self.raw_ids), dict(self.names))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        cp["taxonomy.raw"] = {str(k): ("ignore" if v == IGNORE else str(v)) for k, v in sorted(self.raw_ids.items())}
        cp["taxonomy.names"] = {str(k): v for k, v in sorted(self.names.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(text: str, default: Any, where: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _set(cfg: ToolConfig, section: str, key: str, value: str) -> None:
    where = f"{section}.{key}"
    if section == "taxonomy.raw":
        try:
            cfg.raw_ids[int(key)] = IGNORE if value.strip().lower() == "ignore" else int(value)
        except ValueError:
            raise ConfigError(f"{where}: expected integer raw id -> class id or 'ignore'") from None
        return
    if section == "taxonomy.names":
        try:
            cfg.names[int(key)] = value.strip()
        except ValueError:
            raise ConfigError(f"{where}: class id must be an integer") from None
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    sec = getattr(cfg, section)
    known = {f.name: f for f in fields(sec)}
    if key not in known:
        raise ConfigError(f"unknown key {where}")
    new = _parse(value, getattr(type(sec)(), key), where)
    if type(sec).__dataclass_params__.frozen:
        setattr(cfg, section, dataclasses.replace(sec, **{key: new}))
    else:
        setattr(sec, key, new)


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None) -> ToolConfig:
    cfg = ToolConfig()
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keep key case
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, value in cp.items(section, raw=True):
                _set(cfg, section, key, value)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.rsplit(".", 1)
        _set(cfg, section.strip(), key.strip(), value)
    validate(cfg)
    return cfg


def validate(cfg: ToolConfig) -> None:
    """Build every derived object once so bad values surface with their section name."""
    for name, build in (
        ("projection", cfg.projection.build),
        ("model", cfg.model.build),
        ("base", lambda: cfg.base.build().optimizer()),
        ("finetune", lambda: cfg.finetune.build().optimizer()),
        ("ablation", cfg.ablation.build),
        ("taxonomy", cfg.build_taxonomy),
    ):
        try:
            build()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    if cfg.finetune.freeze not in ("none", "backbone", "backbone+base_heads"):
        raise ConfigError(f"finetune.freeze: unknown mode {cfg.finetune.freeze!r}")
    for name in ("base", "finetune"):
        sec = getattr(cfg, name)
        if sec.epochs < 0 or sec.batch_size < 1:
            raise ConfigError(f"[{name}] epochs must be >= 0 and batch_size >= 1")
    if cfg.evaluation.absent not in ("exclude", "zero"):
        raise ConfigError(f"evaluation.absent: expected exclude or zero, got {cfg.evaluation.absent!r}")
    if cfg.finetune.shots < 0:
        raise ConfigError("finetune.shots must be >= 0")
