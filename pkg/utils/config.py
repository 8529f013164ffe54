"""
Run configuration - flat key=value files with section prefixes, typed and validated
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, get_type_hints

from dotenv import dotenv_values

from utils.errors import ConfigError
from utils.logger import setup_logger

logger = setup_logger(__name__)

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class BodyConfig:
    dim: int = 2
    bone_count: int = 5
    segment_length: float = 0.5
    radius: float = 0.12
    bulge: float = 0.3

    def validate(self) -> None:
        _check(self.dim in (2, 3), "body.dim must be 2 or 3")
        _check(self.bone_count >= 1, "body.bone_count must be at least 1")
        _check(self.segment_length > 0, "body.segment_length must be positive")
        _check(self.radius > 0, "body.radius must be positive")
        _check(self.bulge >= 0, "body.bulge must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    sequences: int = 10
    test_sequences: int = 2
    frames_per_sequence: int = 50
    uniform_points: int = 2000
    surface_points: int = 2000
    vertices: int = 512
    sigma_frac: float = 0.03
    max_velocity: float = 0.1
    max_amplitude: float = 1.0
    components: int = 2
    root_motion: bool = False
    seed: int = 0

    def validate(self) -> None:
        _check(0 < self.test_sequences < self.sequences, "need 0 < data.test_sequences < data.sequences")
        _check(self.frames_per_sequence >= 1, "data.frames_per_sequence must be at least 1")
        _check(min(self.uniform_points, self.surface_points, self.vertices) >= 0, "data point counts must be >= 0")
        _check(self.uniform_points + self.surface_points >= 1, "data needs at least one labeled point per frame")
        _check(self.sigma_frac > 0, "data.sigma_frac must be positive")
        _check(self.max_velocity > 0, "data.max_velocity must be positive")
        _check(0 < self.max_amplitude < 3.14159, "data.max_amplitude must lie in (0, pi)")
        _check(self.components >= 1, "data.components must be at least 1")


@dataclass(frozen=True)
class ModelSection:
    width_u: int = 64
    width_s: int = 24
    code_dim: int = 4
    temperature: float = 1.0
    pose_features: str = "root_origin"
    unstructured_input: str = "global"
    use_projection: bool = True

    def validate(self) -> None:
        _check(self.width_u >= 1 and self.width_s >= 1, "model widths must be positive")
        _check(self.code_dim >= 1, "model.code_dim must be positive")
        _check(self.temperature > 0, "model.temperature must be positive")
        _check(self.pose_features in ("root_origin", "frames"), "model.pose_features must be root_origin|frames")
        _check(self.unstructured_input in ("global", "local"), "model.unstructured_input must be global|local")


@dataclass(frozen=True)
class TrainConfig:
    lambda_weights: float = 0.5
    batch_frames: int = 12
    points_uniform: int = 1024
    points_surface: int = 1024
    vertices: int = 2048
    learning_rate: float = 1e-4
    iterations: int = 5000
    occupancy_loss: str = "l2"
    blend: str = "soft"
    sigma_frac: float = 0.03
    history_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        _check(self.lambda_weights >= 0, "train.lambda_weights must be >= 0")
        _check(
            min(self.batch_frames, self.points_uniform, self.points_surface, self.vertices, self.iterations) >= 1,
            "train counts must be at least 1",
        )
        _check(self.learning_rate > 0, "train.learning_rate must be positive")
        _check(self.occupancy_loss in ("l2", "bce"), "train.occupancy_loss must be l2|bce")
        _check(self.blend in ("soft", "hard"), "train.blend must be soft|hard")
        _check(self.sigma_frac > 0, "train.sigma_frac must be positive")
        _check(self.history_every >= 1, "train.history_every must be at least 1")
        _check(self.checkpoint_every >= 0, "train.checkpoint_every must be >= 0")


@dataclass(frozen=True)
class TrackConfig:
    sigma_frac: float = 0.05
    samples: int = 8
    steps_per_frame: int = 50
    learning_rate: float = 1e-2
    w_prior: float = 1.0
    antithetic: bool = True
    smoothing: bool = True
    cloud_points: int = 500
    sequence: int = -1
    frames: int = 0
    keyframe_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        _check(self.sigma_frac > 0, "track.sigma_frac must be positive")
        _check(self.samples >= 1, "track.samples must be at least 1")
        _check(self.steps_per_frame >= 1, "track.steps_per_frame must be at least 1")
        _check(self.learning_rate > 0, "track.learning_rate must be positive")
        _check(self.w_prior >= 0, "track.w_prior must be >= 0")
        _check(self.cloud_points >= 1, "track.cloud_points must be at least 1")
        _check(self.frames >= 0, "track.frames must be >= 0 (0 = whole sequence)")
        _check(self.keyframe_every >= 0, "track.keyframe_every must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    grid_res: int = 64
    reference_points: int = 2000
    fscore_fraction: float = 0.01
    plots: bool = True
    throughput_queries: int = 0
    seed: int = 0

    def validate(self) -> None:
        _check(self.grid_res >= 8, "eval.grid_res must be at least 8")
        _check(self.reference_points >= 1, "eval.reference_points must be at least 1")
        _check(self.fscore_fraction > 0, "eval.fscore_fraction must be positive")
        _check(self.throughput_queries >= 0, "eval.throughput_queries must be >= 0")


SECTIONS = {
    "body": BodyConfig,
    "data": DataConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "track": TrackConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    body: BodyConfig = field(default_factory=BodyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    provided: frozenset = frozenset()

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def require(self, keys: Iterable[str]) -> None:
        missing = [k for k in keys if k not in self.provided]
        if missing:
            raise ConfigError(f"Missing required config keys: {', '.join(missing)}")

    def as_dict(self) -> Dict[str, Any]:
        return {
            f"{name}.{f.name}": getattr(getattr(self, name), f.name)
            for name, section in SECTIONS.items()
            for f in fields(section)
        }


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _coerce(key: str, raw: Any, kind) -> Any:
    if not isinstance(raw, str):
        raw_text = str(raw)
    else:
        raw_text = raw.strip()
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            word = raw_text.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw_text!r}")
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw}")
            return int(raw) if isinstance(raw, (int, float)) else int(raw_text)
        if kind is float:
            return float(raw)
        return raw_text
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key}: {str(e)}") from e


def apply_values(config: RunConfig, values: Mapping[str, Any]) -> RunConfig:
    """Overlay section.key values onto config; unknown keys are rejected"""
    updates: Dict[str, Dict[str, Any]] = {}
    for key, raw in values.items():
        if raw is None:
            raise ConfigError(f"Config key {key} has no value")
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"Unknown config key {key!r}")
        hints = get_type_hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"Unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _coerce(key, raw, hints[name])

    sections = {name: replace(getattr(config, name), **updates.get(name, {})) for name in SECTIONS}
    return RunConfig(**sections, provided=config.provided | frozenset(values.keys()))


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """File values (if any), then command-line overrides, then validation"""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} does not exist")
        config = apply_values(config, dotenv_values(path))
        logger.info(f"Loaded run configuration from {path}")
    if overrides:
        config = apply_values(config, {k: v for k, v in overrides.items() if v is not None})
    return config.validate()


def default_threads() -> int:
    raw = os.getenv("NASAOCC_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"NASAOCC_THREADS must be an integer, got {raw!r}") from e
        if value < 1:
            raise ConfigError("NASAOCC_THREADS must be at least 1")
        return value
    return os.cpu_count() or 1
