"""Config dataclasses, strict YAML loading, and resolved-config output.

Every pipeline command takes one YAML file mirroring the RunConfig
sections below.  Loading is strict: unknown keys and ill-typed values are
errors, every field is range-checked, and the fully resolved config
(defaults filled in) is written beside each command's outputs together
with a short hash that stamps downstream artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cellsim import CellParams
from .errors import ConfigError

_LAMBDA_GRID_DEFAULT = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class SimulatorConfig:
    """Fleet generation: population, protocols, and integration."""

    seed: int = 1234
    nominal_eps_n: float = 0.60
    nominal_eps_p: float = 0.55
    # Relative sigma of the sampled volume fractions: the standard
    # deviation spans 5% of the mean, so the fleet's +/-3 sigma band is
    # roughly +/-15% and per-cell fade rates vary visibly.
    rel_sigma: float = 0.05
    # The target fleet's nominal fractions are shifted by this relative
    # amount and its sigma widened by target_sigma_scale.
    target_shift: float = -0.05
    target_sigma_scale: float = 1.5
    source_cells_per_batch: int = 50
    target_cells: int = 10
    total_throughput_kah: float = 100.0
    record_kah: float = 1.0
    segment_kah: float = 1.0
    steps_per_half_cycle: int = 100
    soh_floor: float = 0.35
    cutoff_kah: float = 20.0
    cell: CellParams = field(default_factory=CellParams)

    def validate(self) -> None:
        if self.source_cells_per_batch < 2 or self.target_cells < 1:
            raise ConfigError(
                "population sizes must be at least 2 source cells per batch "
                f"and 1 target cell; got {self.source_cells_per_batch}, "
                f"{self.target_cells}"
            )
        for name in ("total_throughput_kah", "record_kah", "segment_kah"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"simulator.{name} must be positive")
        if self.steps_per_half_cycle < 1:
            raise ConfigError("simulator.steps_per_half_cycle must be >= 1")
        if not 0.0 <= self.soh_floor < 1.0:
            raise ConfigError("simulator.soh_floor must lie in [0, 1)")
        if self.cutoff_kah < 0.0:
            raise ConfigError("simulator.cutoff_kah must be non-negative")
        if not (0.0 < self.nominal_eps_n < 1.0 and 0.0 < self.nominal_eps_p < 1.0):
            raise ConfigError("nominal volume fractions must lie in (0, 1)")
        if self.rel_sigma < 0.0 or self.target_sigma_scale < 0.0:
            raise ConfigError("spread parameters must be non-negative")
        shifted = self.nominal_eps_n * (1.0 + self.target_shift)
        if not 0.0 < shifted < 1.0:
            raise ConfigError(
                f"target_shift {self.target_shift} pushes nominal fractions "
                "out of (0, 1)"
            )
        try:
            self.cell.validated()
        except Exception as exc:
            raise ConfigError(f"simulator.cell: {exc}") from exc


@dataclass
class ModelConfig:
    """Network architecture and optimization."""

    window: int = 10
    hidden: int = 32
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    seed: int = 7
    clip_norm: float = 5.0
    finetune_epochs: int = 200

    def validate(self) -> None:
        if self.window < 1 or self.hidden < 1:
            raise ConfigError("model.window and model.hidden must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError(
                "model.batch_size, model.epochs, and model.finetune_epochs "
                "must be >= 1"
            )
        if not self.lr > 0.0 or not self.clip_norm > 0.0:
            raise ConfigError("model.lr and model.clip_norm must be positive")


@dataclass
class AdaptConfig:
    """MMD penalty weight and LOBO tuning."""

    lam: float | str = 0.2  # a number, or "lobo" to use the tuned value
    lambda_grid: tuple[float, ...] = _LAMBDA_GRID_DEFAULT
    kernel_sigma: float = 1.0
    kernel_selection: str = "median"  # "median" or "fixed"
    lobo_epochs: int = 20

    def validate(self) -> None:
        if isinstance(self.lam, str):
            if self.lam != "lobo":
                raise ConfigError(
                    f"adapt.lam must be a number or 'lobo'; got {self.lam!r}"
                )
        elif self.lam < 0.0:
            raise ConfigError(f"adapt.lam must be non-negative; got {self.lam}")
        if not self.lambda_grid:
            raise ConfigError("adapt.lambda_grid must be non-empty")
        grid = list(self.lambda_grid)
        if any(v < 0.0 for v in grid) or sorted(grid) != grid:
            raise ConfigError(
                f"adapt.lambda_grid must be ascending and non-negative; got {grid}"
            )
        if self.kernel_selection not in ("median", "fixed"):
            raise ConfigError(
                "adapt.kernel_selection must be 'median' or 'fixed'; got "
                f"{self.kernel_selection!r}"
            )
        if not self.kernel_sigma > 0.0:
            raise ConfigError("adapt.kernel_sigma must be positive")
        if self.lobo_epochs < 1:
            raise ConfigError("adapt.lobo_epochs must be >= 1")


@dataclass
class ConformalConfig:
    """Split conformal calibration."""

    alpha: float = 0.1
    calib_per_batch: int = 10
    mode: str = "rollout"  # "rollout" or "teacher_forced"

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"conformal.alpha must lie in (0, 1); got {self.alpha}")
        if self.calib_per_batch < 1:
            raise ConfigError("conformal.calib_per_batch must be >= 1")
        if self.mode not in ("rollout", "teacher_forced"):
            raise ConfigError(
                "conformal.mode must be 'rollout' or 'teacher_forced'; got "
                f"{self.mode!r}"
            )


@dataclass
class PathsConfig:
    bundle_dir: str = "bundle"
    out_dir: str = "out"

    def validate(self) -> None:
        if not self.bundle_dir or not self.out_dir:
            raise ConfigError("paths.bundle_dir and paths.out_dir must be set")


@dataclass
class RunConfig:
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.simulator.validate()
        self.model.validate()
        self.adapt.validate()
        self.conformal.validate()
        self.paths.validate()
        return self


# --------------------------------------------------------------------------
# Strict construction from plain data
# --------------------------------------------------------------------------


def _coerce(name: str, value: Any, target: Any) -> Any:
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number; got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer; got {value!r}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string; got {value!r}")
        return value
    return value


def _build_dataclass(cls: type, data: Mapping, where: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be a mapping; got {type(data).__name__}")
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(spec))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        path = f"{where}.{key}"
        if key == "cell":
            kwargs[key] = _build_dataclass(CellParams, value, path)
        elif key == "lam":
            if isinstance(value, str) or (
                not isinstance(value, bool) and isinstance(value, (int, float))
            ):
                kwargs[key] = value if isinstance(value, str) else float(value)
            else:
                raise ConfigError(f"{path} must be a number or 'lobo'")
        elif key == "lambda_grid":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path} must be a list of numbers")
            kwargs[key] = tuple(
                _coerce(f"{path}[{i}]", v, float) for i, v in enumerate(value)
            )
        else:
            kwargs[key] = _coerce(path, value, _field_type(cls, key))
    return cls(**kwargs)


def _field_type(cls: type, name: str) -> Any:
    # Dataclass field types arrive as strings under `from __future__
    # import annotations`; map the ones we use to real types.
    raw = {f.name: f.type for f in fields(cls)}[name]
    return {"int": int, "float": float, "str": str}.get(str(raw), object)


_SECTIONS = {
    "simulator": SimulatorConfig,
    "model": ModelConfig,
    "adapt": AdaptConfig,
    "conformal": ConformalConfig,
    "paths": PathsConfig,
}


def config_from_dict(data: Mapping | None) -> RunConfig:
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"config root must be a mapping; got {type(data).__name__}")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {
        name: _build_dataclass(cls, data[name], name)
        for name, cls in _SECTIONS.items()
        if name in data
    }
    return RunConfig(**kwargs).validate()


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open() as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return config_from_dict(data)


def resolved_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    out["adapt"]["lambda_grid"] = [float(v) for v in cfg.adapt.lambda_grid]
    return out


def save_resolved(cfg: RunConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        yaml.safe_dump(resolved_dict(cfg), fh, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """Short stable digest of the resolved config."""
    canon = json.dumps(resolved_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
