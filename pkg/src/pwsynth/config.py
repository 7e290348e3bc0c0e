"""Run configuration: one JSON document with a fixed, documented schema.

Sections and keys (all optional, defaults in brackets):

    seed                        global seed [0]
    atlas.path                  atlas file; null builds the fixture atlas [null]
    data.manifest               pair manifest (tab-separated) [null]
    coordnet.*                  CoordNetConfig fields except uv_resolution,
                                plus steps [500], batch_size [1], use_symmetry [true]
    generator.*                 GeneratorConfig fields; modulation_mode and
                                appearance_source select the ablation variant
    losses.perceptual_backend   random64 | external:<path> [random64]
    losses.layer_ids / layer_weights
    losses.face_enabled [true], losses.face_epsilon [1e-8]
    trainer.*                   TrainConfig fields
"""
import dataclasses
import json
from dataclasses import dataclass, field

from .coordnet import CoordNetConfig
from .errors import ConfigError
from .losses import FACE_EPS, VGG_LAYERS, VGG_WEIGHTS
from .posegen import GeneratorConfig
from .trainer import TrainConfig


@dataclass
class CoordTrainSection:
    steps: int = 500
    batch_size: int = 1
    use_symmetry: bool = True


@dataclass
class LossSection:
    perceptual_backend: str = "random64"
    layer_ids: list = field(default_factory=lambda: list(VGG_LAYERS))
    layer_weights: list = field(default_factory=lambda: list(VGG_WEIGHTS))
    face_enabled: bool = True
    face_epsilon: float = FACE_EPS


_COORDNET_KEYS = {f.name for f in dataclasses.fields(CoordNetConfig)} - {"uv_resolution"}
_SECTIONS = {
    "atlas": {"path"},
    "data": {"manifest"},
    "coordnet": _COORDNET_KEYS | {f.name for f in dataclasses.fields(CoordTrainSection)},
    "generator": {f.name for f in dataclasses.fields(GeneratorConfig)},
    "losses": {f.name for f in dataclasses.fields(LossSection)},
    "trainer": {f.name for f in dataclasses.fields(TrainConfig)},
}


@dataclass
class RunConfig:
    seed: int = 0
    atlas: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    coordnet: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, allowed in _SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            unknown = set(section) - allowed
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        # build once so bad values surface at load time
        self.generator_config()
        self.train_config()
        self.loss_section()
        self.coord_train_section()

    def coordnet_config(self, uv_resolution):
        kw = {k: v for k, v in self.coordnet.items() if k in _COORDNET_KEYS}
        return _build(CoordNetConfig, "coordnet", uv_resolution=uv_resolution, **kw)

    def coord_train_section(self):
        kw = {k: v for k, v in self.coordnet.items() if k not in _COORDNET_KEYS}
        return _build(CoordTrainSection, "coordnet", **kw)

    def generator_config(self):
        return _build(GeneratorConfig, "generator", **self.generator)

    def train_config(self):
        kw = dict(self.trainer)
        kw.setdefault("seed", self.seed)
        return _build(TrainConfig, "trainer", **kw)

    def loss_section(self):
        return _build(LossSection, "losses", **self.losses)

    def set(self, dotted, value):
        """Flag override, e.g. ``set("generator.modulation_mode", "nonspatial")``."""
        if dotted == "seed":
            self.seed = int(value)
            return
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        getattr(self, section)[key] = value
        self.__post_init__()


def _build(cls, section, **kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - {"seed"} - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(sorted(unknown))}")
    return RunConfig(**raw)


def schema():
    """Every accepted dotted key, for help text and docs."""
    return ["seed"] + [f"{s}.{k}" for s, keys in _SECTIONS.items() for k in sorted(keys)]
