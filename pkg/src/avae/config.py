"""Plain-text experiment configuration (``key = value`` lines, ``#`` comments)."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
from dataclasses import dataclass, fields
from pathlib import Path

from .models import DATASET_IMAGES

DATASETS = tuple(DATASET_IMAGES)


class ConfigError(ValueError):
    """An unknown key or a value outside the allowed levels."""


MODELS = ("vae", "cvae", "draw")
PROFILES = ("full", "fast")
LAYERS = ("latent", "output")
LATENT_LEVELS = {"mnist": (32, 128), "svhn": (32, 128), "celeba": (256, 2048)}
TIMESTEP_LEVELS = (1, 16)

# training and attack settings implied by a profile
PROFILE_DEFAULTS = {
    "full": dict(epochs=500, c_sweep=51, batch=128, pairs=20, max_iter=15000),
    "fast": dict(epochs=30, c_sweep=11, batch=16, pairs=5, max_iter=1000),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    dataset_path: str = ""              # empty selects the bundled MNIST subset
    model: str = "vae"
    latent_size: int = 32
    timesteps: int = 1
    attention: bool = False
    lstm: int = 0                       # 0 keeps the preset width
    profile: str = "fast"
    layers: tuple[str, ...] = ("latent",)
    epochs: int = 0                     # 0 keeps the profile value
    lr: float = 1e-4
    train_batch: int = 128
    c_sweep: int = 0
    batch: int = 0
    pairs: int = 0
    max_iter: int = 0
    seed_split: int = 0
    seed_pairs: int = 0
    seed_noise: int = 0
    seed_train: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        defaults = PROFILE_DEFAULTS.get(self.profile)
        if defaults is None:
            raise ConfigError(f"profile={self.profile!r}: expected one of {', '.join(PROFILES)}")
        for key, value in defaults.items():
            if getattr(self, key) == 0:
                object.__setattr__(self, key, value)
        self.validate()

    def validate(self) -> None:
        def bad(key, levels):
            return ConfigError(f"{key}={getattr(self, key)!r}: valid levels are {levels}")

        if self.dataset not in DATASETS:
            raise bad("dataset", ", ".join(DATASETS))
        if self.model not in MODELS:
            raise bad("model", ", ".join(MODELS))
        if not self.layers or any(layer not in LAYERS for layer in self.layers):
            raise bad("layers", ", ".join(LAYERS))
        if self.model != "draw" and (self.timesteps != 1 or self.attention):
            raise ConfigError(f"model={self.model}: timesteps must be 1 and attention off "
                              f"(only draw is recurrent)")
        if self.profile == "full":
            if self.latent_size not in LATENT_LEVELS[self.dataset]:
                raise bad("latent_size", LATENT_LEVELS[self.dataset])
            if self.timesteps not in TIMESTEP_LEVELS:
                raise bad("timesteps", TIMESTEP_LEVELS)
        for key in ("latent_size", "timesteps", "epochs", "train_batch", "c_sweep", "batch", "pairs",
                    "max_iter"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}={getattr(self, key)!r}: must be a positive integer")
        if self.c_sweep < 2:
            raise ConfigError("c_sweep must be at least 2 (zero plus one power of two)")
        if self.lstm < 0 or not self.lr > 0:
            raise ConfigError("lstm must be >= 0 and lr > 0")

    @property
    def model_name(self) -> str:
        return "draw-attention" if self.attention else self.model

    def treatment(self) -> dict:
        return {"dataset": self.dataset, "model": self.model_name,
                "latent_size": self.latent_size, "timesteps": self.timesteps}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """SHA-256 of the canonical text, excluding the output directory."""
        body = "".join(line + "\n" for line in self.to_text().splitlines() if not line.startswith("out "))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind is bool or kind == "bool":
            if text.lower() in ("on", "true", "yes", "1"):
                return True
            if text.lower() in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if "tuple" in str(kind):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {kind}") from None


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_lines(text: str) -> tuple[dict[str, str], dict[str, list[str]]]:
    """Split config text into plain settings and ``grid.<key>`` value lists."""
    plain, grid = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("grid."):
            name = key[5:]
            if name not in FIELD_TYPES:
                raise ConfigError(f"line {lineno}: unknown grid key {name!r}")
            grid[name] = [v.strip() for v in value.split("|" if name == "layers" else ",") if v.strip()]
        elif key in FIELD_TYPES:
            plain[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; valid keys: {', '.join(FIELD_TYPES)}")
    return plain, grid


def build(settings: dict[str, str], **overrides) -> ExperimentConfig:
    values = {k: _coerce(k, FIELD_TYPES[k], v) for k, v in settings.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    plain, grid = parse_lines(Path(path).read_text(encoding="utf-8"))
    if grid:
        raise ConfigError(f"{path}: grid keys only apply to the sweep command")
    return build(plain, **overrides)


FULL_DESIGN = {
    "dataset": ["mnist", "svhn", "celeba"],
    "model": ["vae", "cvae", "draw"],
    "attention": ["off", "on"],
    "latent_size": ["small", "large"],
    "timesteps": ["1", "16"],
}


def expand_grid(settings: dict[str, str], grid: dict[str, list[str]]) -> list[ExperimentConfig]:
    """Cartesian product of the grid, skipping combinations outside the design.

    ``latent_size`` accepts ``small``/``large`` for the per-dataset levels.
    Combinations that only differ in fields a model ignores (timesteps and
    attention for non-recurrent models) are emitted once.
    """
    names = list(grid)
    seen, out = set(), []
    for combo in itertools.product(*(grid[n] for n in names)):
        values = dict(settings)
        values.update(zip(names, combo))
        if values.get("model", "vae") != "draw":
            values["timesteps"], values["attention"] = "1", "off"
        if values.get("latent_size") in ("small", "large"):
            levels = LATENT_LEVELS[values.get("dataset", "mnist")]
            values["latent_size"] = str(levels[values["latent_size"] == "large"])
        key = tuple(sorted(values.items()))
        if key in seen:
            continue
        seen.add(key)
        out.append(build(values))
    return out
