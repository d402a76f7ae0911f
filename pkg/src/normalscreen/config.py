"""Run configuration: a flat ``key = value`` text file plus profile defaults.

Precedence, lowest first: profile defaults, config file, command-line
overrides. Lines starting with ``#`` are comments. Keys are documented in
``KEYS`` and in the README.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .direct import DirectConfig
from .model import ModelConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "NORMALSCREEN_OUTPUT_ROOT"

DESK = "desk"
FULL = "full"

PROFILES: dict[str, dict[str, object]] = {
    DESK: {"input_size": 64, "batch_size": 32, "epochs": 10, "stem_out_channels": 64,
           "stem_channels": (16, 32)},
    FULL: {"input_size": 128, "batch_size": 400, "epochs": 50, "stem_out_channels": 320,
            "stem_channels": (64, 128)},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str = DESK
    seed: int = 0
    manifest: str = ""
    out_dir: str = "runs/xval"
    # dataset
    k: int = 5
    stratify: bool = False
    # imaging
    input_size: int = 64
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    augment: bool = True
    # model
    stem: str = "random-stem"
    stem_out_channels: int = 64
    stem_channels: tuple[int, int] = (16, 32)
    num_blocks: int = 4
    spatial_dropout_rate: float = 0.2
    head_dropout_rate: float = 0.5
    noise_sigma: float = 1.0
    post_add_activation: bool = True
    # training
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    freeze_stem: bool = False
    # thresholding
    threshold_method: str = "sweep"
    threshold_on: str = "test"
    validation_frac: float = 0.2
    max_evals: int = 0  # 0 picks a budget from the number of distinct scores
    eps_balance: float = 1e-4
    size_tol: float = 1e-6
    locally_biased: bool = True
    # execution
    parallel_folds: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=(self.input_size, self.input_size), stem=self.stem,
            stem_out_channels=self.stem_out_channels, num_blocks=self.num_blocks,
            spatial_dropout_rate=self.spatial_dropout_rate,
            head_dropout_rate=self.head_dropout_rate, noise_sigma=self.noise_sigma,
            post_add_activation=self.post_add_activation, stem_channels=self.stem_channels,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps,
                           epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed if seed is None else seed,
                           freeze_stem=self.freeze_stem)

    def direct_config(self, default_evals: int = 200) -> DirectConfig:
        return DirectConfig(max_evals=self.max_evals or default_evals,
                            eps_balance=self.eps_balance, size_tol=self.size_tol,
                            locally_biased=self.locally_biased)

    def output_dir(self) -> Path:
        out = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def validate(self, need_manifest: bool = True) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if need_manifest:
            if not self.manifest:
                raise ConfigError("manifest is required")
            if not Path(self.manifest).is_file():
                raise ConfigError(f"manifest {self.manifest!r} does not exist")
        if self.threshold_method not in ("sweep", "direct"):
            raise ConfigError(f"threshold_method must be sweep or direct, got {self.threshold_method!r}")
        if self.threshold_on not in ("test", "validation"):
            raise ConfigError(f"threshold_on must be test or validation, got {self.threshold_on!r}")
        if not 0 < self.validation_frac < 1:
            raise ConfigError("validation_frac must be in (0, 1)")
        if self.max_evals < 0:
            raise ConfigError("max_evals must be >= 0")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        try:
            self.model_config()
            self.train_config()
            self.direct_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


KEYS = {f.name for f in fields(RunConfig)}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    kind = _TYPES[key]
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build(file_values: Mapping[str, object] | None = None,
          overrides: Mapping[str, object] | None = None, base_dir: Path | None = None) -> RunConfig:
    merged: dict[str, object] = dict(file_values or {})
    manifest = merged.get("manifest")
    if manifest and base_dir is not None and not Path(str(manifest)).is_absolute():
        merged["manifest"] = str(base_dir / str(manifest))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    profile = str(merged.get("profile", DESK))
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    values = dict(PROFILES[profile])
    values.update({k: _coerce(k, v) for k, v in merged.items()})
    return replace(RunConfig(), **values)


def load(path=None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Read a config file (optional) and apply ``overrides``; paths in the
    file are relative to the file's directory."""
    file_values: dict[str, str] = {}
    base = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        file_values = parse_text(path.read_text(), str(path))
        base = path.parent
    return build(file_values, overrides, base)


def parse_assignments(items) -> dict[str, str]:
    """``["key=value", ...]`` from ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out
