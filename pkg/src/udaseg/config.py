"""Pipeline configuration: one YAML tree with a section per stage.

Unknown keys anywhere raise :class:`ConfigError`.  ``preset: paper`` swaps in
the full-scale values (512x512 slices, 128x128x128 codes, the Table-2
segmentation protocol); the desk preset is the default.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .phantom import AugmentConfig, PhantomSpec
from .segmentation import SegConfig
from .segmentation.model import PAPER_PRESET
from .self_training import STConfig
from .storage import hash_obj
from .translation import TranslationConfig

ARMS = ("no_uda", "drl", "drl_st")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    grid_shape: tuple = (8, 64, 64)
    num_classes: int = 5
    organ_scale: tuple = (1.0, 0.85, 0.75, 0.65)
    spacing: tuple = (4.0, 1.5, 1.5)
    n_source: int = 20
    n_target: int = 20
    n_oracle: int = 6
    slice_size: tuple = (64, 64)
    zscore_scope: str = "volume"
    class_names: dict = field(default_factory=lambda: {1: "Liver", 2: "Spleen", 3: "Kidney", 4: "Pancreas"})

    def phantom_spec(self, seed):
        return PhantomSpec(self.grid_shape, self.num_classes, self.organ_scale, self.spacing, seed)


@dataclass
class MetricsConfig:
    tolerance_mm: float | None = None
    profile_interval_s: float = 0.1


@dataclass
class AblationSpec:
    """Arms to run; every arm shares the data splits and segmentation config.

    ``overrides`` maps an arm to per-section replacements.  Only the
    ``self_training`` section may be overridden, and only for ``drl_st``.
    """

    arms: tuple = ARMS
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arms = tuple(self.arms)
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValueError(f"unknown arms {bad}; choose from {ARMS}")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("arms must not repeat")
        for arm, over in self.overrides.items():
            if arm not in ARMS:
                raise ValueError(f"override for unknown arm {arm!r}")
            if arm != "drl_st" or set(over) - {"self_training"}:
                raise ValueError("only drl_st may override, and only its self_training section; "
                                 "data and segmentation config are shared by all arms")
            STConfig(**over.get("self_training", {}))


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/reference"
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    self_training: STConfig = field(default_factory=STConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def to_dict(self):
        return asdict(self)

    def digest(self, section=None):
        """Content hash of the settings; the output location does not change results and is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        return hash_obj(d if section is None else d[section])

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


DESK_TRANSLATION = dict(enc_dim=8, disc_dim=8, n_res=1, batch_size=4, iterations=1500, lr=1e-3)
DESK_SEGMENTATION = dict(epochs=10)
DESK_SELF_TRAINING = dict(finetune_epochs=5)
PAPER_TRANSLATION = dict(slice_size=(512, 512), content_shape=(128, 128, 128), style_shape=(128, 128, 128),
                         enc_dim=64, disc_dim=64, n_res=4, batch_size=1, disc_layers=3)
PRESETS = {
    "desk": {"translation": DESK_TRANSLATION, "segmentation": DESK_SEGMENTATION, "data": {},
             "self_training": DESK_SELF_TRAINING},
    "paper": {"translation": PAPER_TRANSLATION, "segmentation": dict(PAPER_PRESET),
              "data": {"slice_size": (512, 512)}, "self_training": {}},
}


def _build(cls, values, where):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(d: dict | None, seed_override=None) -> PipelineConfig:
    d = dict(d or {})
    top = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; allowed: {sorted(top)}")
    preset = d.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    seed = int(d.get("seed", 0) if seed_override is None else seed_override)
    p = PRESETS[preset]
    data = _build(DataConfig, {**p["data"], **(d.get("data") or {})}, "data")
    if data.class_names:
        data.class_names = {int(k): v for k, v in data.class_names.items()}
    tr = {**p["translation"], **(d.get("translation") or {})}
    tr.setdefault("slice_size", data.slice_size)
    for sec in (tr, d.get("segmentation") or {}):
        # a saved config repeats the resolved seed; anything else is a conflicting override
        if "seed" in sec and int(sec["seed"]) != int(d.get("seed", 0)):
            raise ConfigError("per-section seeds are derived from the global 'seed'")
    translation = _build(TranslationConfig, {**tr, "seed": seed}, "translation")
    sg = {**p["segmentation"], **(d.get("segmentation") or {})}
    if isinstance(sg.get("augment"), dict):
        sg["augment"] = _build(AugmentConfig, {k: tuple(v) if isinstance(v, list) else v
                                               for k, v in sg["augment"].items()}, "segmentation.augment")
    if "num_classes" in sg and sg["num_classes"] != data.num_classes:
        raise ConfigError("segmentation.num_classes must equal data.num_classes")
    sg["num_classes"] = data.num_classes
    segmentation = _build(SegConfig, {**sg, "seed": seed}, "segmentation")
    st = _build(STConfig, {**p["self_training"], **(d.get("self_training") or {})}, "self_training")
    metrics = _build(MetricsConfig, d.get("metrics"), "metrics")
    ablation = _build(AblationSpec, d.get("ablation"), "ablation")
    if tuple(translation.slice_size) != tuple(data.slice_size):
        raise ConfigError("translation.slice_size must equal data.slice_size")
    return PipelineConfig(seed, str(d.get("output_dir", "runs/reference")), preset, data, translation,
                          segmentation, st, metrics, ablation)


def load_config(path=None, seed_override=None, output_override=None) -> PipelineConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    cfg = from_dict(raw, seed_override)
    if output_override is not None:
        cfg.output_dir = str(output_override)
    return cfg
