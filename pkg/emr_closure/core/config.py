"""
EMR Closure - Configuration
Package defaults (defaults.yaml) <- ./emr_closure.yaml <- environment (.env) <- key=value overrides
"""
import copy
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent.parent
DEFAULTS_PATH = PACKAGE_DIR / "defaults.yaml"
LOCAL_CONFIG = "emr_closure.yaml"


@dataclass(frozen=True)
class StoppingConfig:
    """Thresholds of the multilevel stopping test"""

    r2_target: float = 0.5
    r2_tolerance: float = 0.05
    lag1_tolerance: float = 0.05
    covariance_tolerance: float = 0.05
    max_levels: int = 20

    def __post_init__(self):
        for name in ("r2_tolerance", "lag1_tolerance", "covariance_tolerance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"stopping.{name} must be > 0")
        if self.max_levels < 1:
            raise ConfigError("stopping.max_levels must be >= 1")


@dataclass(frozen=True)
class FitConfig:
    ridge: Union[str, float] = "auto"
    constraints: str = "none"
    quadratic: bool = True
    n_levels: Optional[int] = None
    stopping: StoppingConfig = field(default_factory=StoppingConfig)

    def __post_init__(self):
        if self.constraints not in ("none", "energy"):
            raise ConfigError(f"fit.constraints must be 'none' or 'energy', got {self.constraints!r}")
        if isinstance(self.ridge, str):
            if self.ridge != "auto":
                raise ConfigError(f"fit.ridge must be 'auto' or a number, got {self.ridge!r}")
        elif self.ridge < 0:
            raise ConfigError("fit.ridge must be >= 0")


@dataclass(frozen=True)
class SimDefaults:
    seed: int = 0
    sample_stride: int = 1
    burn_in: int = 0
    reflect: Optional[float] = None


@dataclass(frozen=True)
class DiagnosticsConfig:
    acf_max_lag: int = 200
    pdf_bins: int = 50
    pdf2d_bins: int = 50
    range_padding: float = 0.01
    transient_fraction: float = 0.1


@dataclass(frozen=True)
class EtaConfig:
    n_seeds: int = 10
    mode: str = "reconstructed"
    spin_up: int = 2000

    def __post_init__(self):
        if self.mode not in ("reconstructed", "simulated"):
            raise ConfigError(f"eta.mode must be 'reconstructed' or 'simulated', got {self.mode!r}")
        if self.n_seeds < 1:
            raise ConfigError("eta.n_seeds must be >= 1")


@dataclass(frozen=True)
class AppConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    simulate: SimDefaults = field(default_factory=SimDefaults)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    eta: EtaConfig = field(default_factory=EtaConfig)
    log_level: str = "INFO"

    def snapshot(self) -> Dict[str, Any]:
        """Plain-dict copy for manifests"""
        return asdict(self)


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """Turn ['fit.ridge=0', 'eta.n_seeds=20'] into a nested dict (values parsed as YAML scalars)"""
    nested: Dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"Override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"Override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value of {key!r}: {e}") from e
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override {key!r} conflicts with a scalar setting")
        node[parts[-1]] = value
    return nested


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


def _environment_layer() -> Dict[str, Any]:
    load_dotenv()
    layer: Dict[str, Any] = {}
    level = os.getenv("EMR_CLOSURE_LOG_LEVEL")
    if level:
        layer["log_level"] = level.upper()
    return layer


def build_config(raw: Dict[str, Any]) -> AppConfig:
    """Validate a merged dict into an AppConfig"""
    try:
        fit_raw = dict(raw.get("fit", {}))
        stopping = StoppingConfig(**fit_raw.pop("stopping", {}))
        return AppConfig(
            fit=FitConfig(stopping=stopping, **fit_raw),
            simulate=SimDefaults(**raw.get("simulate", {})),
            diagnostics=DiagnosticsConfig(**raw.get("diagnostics", {})),
            eta=EtaConfig(**raw.get("eta", {})),
            log_level=str(raw.get("log_level", "INFO")).upper(),
        )
    except TypeError as e:
        raise ConfigError(f"Unknown configuration key: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Iterable[str] = ()) -> AppConfig:
    """Load the layered configuration"""
    raw = read_yaml(DEFAULTS_PATH)

    env_path = os.getenv("EMR_CLOSURE_CONFIG")
    local = Path(path) if path else Path(env_path) if env_path else Path(LOCAL_CONFIG)
    if local.exists():
        logger.debug(f"Loading configuration from {local}")
        raw = deep_merge(raw, read_yaml(local))
    elif path:
        raise ConfigError(f"Configuration file not found: {local}")

    raw = deep_merge(raw, _environment_layer())
    raw = deep_merge(raw, parse_overrides(overrides))
    return build_config(raw)
