"""Plain-text ``key = value`` run configuration.

Keys are grouped by prefix: ``model.*`` (ModelConfig), ``train.*`` (TrainConfig),
``track.*`` (AssociationConfig), ``scene.*`` (SyntheticScene). Top-level keys are
``seed``, ``history``, ``normalize``, ``image_width`` and ``image_height``.
Blank lines and ``#`` comments are ignored; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data_io import SyntheticScene
from .errors import ConfigError
from .model import ModelConfig
from .tracker import AssociationConfig
from .training import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "track": AssociationConfig,
    "scene": SyntheticScene,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: AssociationConfig = field(default_factory=AssociationConfig)
    scene: SyntheticScene = field(default_factory=SyntheticScene)
    seed: int = 0
    history: int = 5
    normalize: bool = True
    image_width: float = 1280.0
    image_height: float = 720.0

    def __post_init__(self):
        if self.history < 1:
            raise ConfigError("history must be >= 1")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("image size must be positive")

    @property
    def image_size(self) -> tuple[float, float] | None:
        return (self.image_width, self.image_height) if self.normalize else None

    def association(self) -> AssociationConfig:
        return replace(self.track, history_len=self.history)

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        layers: int | None = None,
        history: int | None = None,
        s2l: bool | None = None,
        normalize: bool | None = None,
        end_to_end_grad: bool | None = None,
    ) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                seed=seed,
                model=replace(cfg.model, seed=seed),
                train=replace(cfg.train, seed=seed),
                scene=replace(cfg.scene, seed=seed),
            )
        if layers is not None:
            cfg = replace(cfg, model=replace(cfg.model, n_layers=layers))
        if history is not None:
            cfg = replace(cfg, history=history)
        if s2l is not None:
            cfg = replace(cfg, train=replace(cfg.train, s2l=s2l))
        if normalize is not None:
            cfg = replace(cfg, normalize=normalize)
        if end_to_end_grad is not None:
            cfg = replace(cfg, model=replace(cfg.model, end_to_end_grad=end_to_end_grad))
        return cfg


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config_text(text: str) -> RunConfig:
    groups: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    top_defaults = {f.name: f.default for f in fields(RunConfig) if f.name not in _SECTIONS}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        if "." in key:
            section, name = key.split(".", 1)
            cls = _SECTIONS.get(section)
            if cls is None:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
            if name not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            groups[section][name] = _convert(raw, defaults[name], key)
        else:
            if key not in top_defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _convert(raw, top_defaults[key], key)
    try:
        built = {name: cls(**groups[name]) for name, cls in _SECTIONS.items()}
    except TypeError as e:  # pragma: no cover - guarded by the key checks above
        raise ConfigError(str(e)) from None
    cfg = RunConfig(**built, **top)
    if "seed" in top:
        # a top-level seed seeds every component that did not set its own
        cfg = replace(
            cfg,
            model=cfg.model if "seed" in groups["model"] else replace(cfg.model, seed=cfg.seed),
            train=cfg.train if "seed" in groups["train"] else replace(cfg.train, seed=cfg.seed),
            scene=cfg.scene if "seed" in groups["scene"] else replace(cfg.scene, seed=cfg.seed),
        )
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {_fmt(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
