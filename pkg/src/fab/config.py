"""INI run configuration: training hyperparameters, model widths, flow parameters and paths.

Every command writes the fully resolved configuration next to its outputs,
so a run can be repeated from that snapshot alone.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .flow import FlowParams
from .geometry import AugmentRanges
from .nets import DeblurConfig, DetectorConfig, PredictorConfig
from .pipeline import BOUNDARY_SIGMA, TrainConfig

SNAPSHOT_NAME = "resolved_config.ini"
WEIGHT_KEYS = ("structure_weight", "reconstruction_weight", "alignment_weight")


@dataclass
class ModelWidths:
    predictor: int = 8
    deblur: int = 8
    detector: int = 8
    resolution: int = 32
    use_structure: bool = True

    def predictor_config(self, seed: int) -> PredictorConfig:
        return PredictorConfig(width=self.predictor, seed=seed)

    def deblur_config(self, seed: int, use_structure: bool | None = None) -> DeblurConfig:
        flag = self.use_structure if use_structure is None else use_structure
        return DeblurConfig(width=self.deblur, use_structure=flag, seed=seed)

    def detector_config(self, seed: int) -> DetectorConfig:
        return DetectorConfig(width=self.detector, resolution=(self.resolution, self.resolution), seed=seed)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    models: ModelWidths = field(default_factory=ModelWidths)
    flow: FlowParams = field(default_factory=FlowParams)
    subframes: int = 20
    boundary_sigma: float = BOUNDARY_SIGMA
    paths: dict[str, str] = field(default_factory=dict)


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw.strip()


def _fill(obj, section: configparser.SectionProxy, skip=()) -> None:
    known = {f.name for f in fields(obj)} - set(skip)
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section.name}]")
        current = getattr(obj, key)
        if current is None:
            setattr(obj, key, raw.strip() or None)
        else:
            setattr(obj, key, _coerce(raw, current))


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``{section: {key: value}}`` overrides on top."""
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    for section, values in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in values.items():
            if v is not None:
                parser.set(section, k, str(v))
    cfg = RunConfig()
    known = {"train", "augment", "models", "flow", "synthesis", "paths"}
    for name in parser.sections():
        if name not in known:
            raise ValueError(f"unknown config section [{name}]")
    if parser.has_section("train"):
        sec = parser["train"]
        weights = list(cfg.train.loss_weights)
        for i, key in enumerate(WEIGHT_KEYS):
            if key in sec:
                weights[i] = float(sec[key])
                parser.remove_option("train", key)
        cfg.train.loss_weights = tuple(weights)
        _fill(cfg.train, parser["train"], skip=("augment", "loss_weights"))
    if parser.has_section("augment"):
        sec = parser["augment"]
        zoom = (float(sec.get("zoom_min", 0.9)), float(sec.get("zoom_max", 1.1)))
        extra = set(sec.keys()) - {"translation", "rotation", "flip_prob", "zoom_min", "zoom_max", "enabled"}
        if extra:
            raise ValueError(f"unknown key(s) {sorted(extra)} in section [augment]")
        if sec.getboolean("enabled", True):
            cfg.train.augment = AugmentRanges(float(sec.get("translation", 2.0)), float(sec.get("rotation", 10.0)),
                                              float(sec.get("flip_prob", 0.5)), zoom)
    if parser.has_section("models"):
        _fill(cfg.models, parser["models"])
    if parser.has_section("flow"):
        _fill(cfg.flow, parser["flow"])
    if parser.has_section("synthesis"):
        sec = parser["synthesis"]
        extra = set(sec.keys()) - {"subframes", "boundary_sigma"}
        if extra:
            raise ValueError(f"unknown key(s) {sorted(extra)} in section [synthesis]")
        cfg.subframes = int(sec.get("subframes", cfg.subframes))
        cfg.boundary_sigma = float(sec.get("boundary_sigma", cfg.boundary_sigma))
    if parser.has_section("paths"):
        cfg.paths = dict(parser["paths"])
    TrainConfig(**cfg.train.__dict__)  # re-run validation on the merged values
    return cfg


def to_parser(cfg: RunConfig) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    train = {f.name: getattr(cfg.train, f.name) for f in fields(cfg.train) if f.name not in ("augment", "loss_weights")}
    train.update(zip(WEIGHT_KEYS, cfg.train.loss_weights))
    parser["train"] = {k: "" if v is None else str(v) for k, v in train.items()}
    aug = cfg.train.augment
    if aug is None:
        parser["augment"] = {"enabled": "false"}
    else:
        parser["augment"] = {"enabled": "true", "translation": repr(aug.translation), "rotation": repr(aug.rotation),
                             "flip_prob": repr(aug.flip_prob), "zoom_min": repr(aug.zoom[0]),
                             "zoom_max": repr(aug.zoom[1])}
    parser["models"] = {f.name: str(getattr(cfg.models, f.name)) for f in fields(cfg.models)}
    parser["flow"] = {f.name: repr(getattr(cfg.flow, f.name)) for f in fields(cfg.flow)}
    parser["synthesis"] = {"subframes": str(cfg.subframes), "boundary_sigma": repr(cfg.boundary_sigma)}
    parser["paths"] = dict(cfg.paths)
    return parser


def write_snapshot(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        to_parser(cfg).write(fh)
    return path
