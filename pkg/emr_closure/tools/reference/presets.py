"""
EMR Closure - Reference model presets
Versioned YAML parameter sets (model params plus run settings) and the runner that
turns one into trajectory files.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from ...core.config import deep_merge
from ...core.errors import ConfigError
from ...core.timeseries import save_csv
from .climate import ClimateParams, climate_energy_check, simulate_climate
from .gamma_chain import GammaChainSpec, verify_gamma_chain
from .linear_toy import LinearToyParams, simulate_linear_toy
from .lotka_volterra import CHAOTIC_N0, LVParams, lv_observed, simulate_lv

logger = logging.getLogger(__name__)

PRESETS_DIR = Path(__file__).resolve().parent.parent.parent / "presets"
MODELS = ("climate", "lotka-volterra", "linear-toy", "gamma-chain")
PRESET_VERSION = 1


@dataclass
class Preset:
    name: str
    model: str
    version: int = PRESET_VERSION
    params: Dict[str, Any] = field(default_factory=dict)
    run: Dict[str, Any] = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"Preset {self.name!r}: model must be one of {MODELS}, got {self.model!r}")
        if int(self.version) > PRESET_VERSION:
            raise ConfigError(f"Preset {self.name!r} has version {self.version}, newest supported is "
                              f"{PRESET_VERSION}")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], name: str = "") -> "Preset":
        if not isinstance(raw, dict) or "model" not in raw:
            raise ConfigError(f"Preset {name!r} must be a mapping with a 'model' key")
        unknown = set(raw) - {"name", "model", "version", "params", "run", "description"}
        if unknown:
            raise ConfigError(f"Preset {name!r} has unknown keys {sorted(unknown)}")
        return cls(
            name=raw.get("name", name),
            model=raw["model"],
            version=int(raw.get("version", PRESET_VERSION)),
            params=dict(raw.get("params") or {}),
            run=dict(raw.get("run") or {}),
            description=raw.get("description", ""),
        )

    def with_overrides(self, overrides: Dict[str, Any]) -> "Preset":
        """Overrides use the preset layout: {'params': {...}, 'run': {...}}"""
        unknown = set(overrides) - {"params", "run"}
        if unknown:
            raise ConfigError(f"Preset overrides must start with 'params.' or 'run.', got {sorted(unknown)}")
        return Preset(self.name, self.model, self.version,
                      deep_merge(self.params, overrides.get("params", {})),
                      deep_merge(self.run, overrides.get("run", {})),
                      self.description)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "model": self.model, "version": self.version,
                "params": self.params, "run": self.run, "description": self.description}


def available_presets(presets_dir: Path = PRESETS_DIR) -> List[str]:
    return sorted(p.stem for p in presets_dir.glob("*.yaml"))


def _read(path: Path) -> Dict[str, Any]:
    try:
        with open(path) as f:
            return yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed preset file {path}: {e}") from e


def load_preset(name: str, presets_dir: Path = PRESETS_DIR) -> Preset:
    path = presets_dir / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"Unknown preset {name!r}; available: {available_presets(presets_dir)}")
    return Preset.from_dict(_read(path), name)


def load_param_file(path: Union[str, Path]) -> Preset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Parameter file not found: {path}")
    return Preset.from_dict(_read(path), path.stem)


def run_preset(preset: Preset, out_dir: Union[str, Path], seed: Optional[int] = None) -> Dict[str, Any]:
    """Generate the preset's trajectories into out_dir; returns written paths and a summary"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = dict(preset.run)
    if seed is not None:
        run["seed"] = seed
    try:
        if preset.model == "climate":
            return _run_climate(preset, run, out_dir)
        if preset.model == "lotka-volterra":
            return _run_lv(preset, run, out_dir)
        if preset.model == "linear-toy":
            return _run_linear_toy(preset, run, out_dir)
        return _run_gamma_chain(preset, run, out_dir)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"Preset {preset.name!r} has invalid settings: {e}") from e


def _run_climate(preset: Preset, run: Dict[str, Any], out_dir: Path) -> Dict[str, Any]:
    params = ClimateParams.from_mapping(preset.params)
    full, observed = simulate_climate(
        params,
        duration=float(run.get("duration", 1e4)),
        dt=float(run.get("dt", 1e-3)),
        sample_dt=float(run.get("sample_dt", 0.05)),
        seed=int(run.get("seed", 0)),
        scheme=run.get("scheme", "rk4-em"),
    )
    ok, residuals = climate_energy_check(params)
    if not ok:
        logger.warning(f"Climate parameters break the energy identities: {residuals}")
    return {
        "outputs": [save_csv(full, out_dir / "full.csv"), save_csv(observed, out_dir / "observed.csv")],
        "seeds": [int(run.get("seed", 0))],
        "summary": {"rows": full.n, "eps": params.eps, "energy_identities": ok},
    }


def _run_lv(preset: Preset, run: Dict[str, Any], out_dir: Path) -> Dict[str, Any]:
    params = LVParams.from_mapping(preset.params)
    ts = simulate_lv(params, run.get("N0", CHAOTIC_N0), float(run.get("dt", 0.035)),
                     int(run.get("steps", 150_000)))
    outputs = [save_csv(ts, out_dir / "full.csv")]
    transient = int(run.get("transient", 10_000))
    if transient <= ts.n - 2:
        observed = lv_observed(ts, transient, run.get("channels", (0, 1, 2)))
        outputs.append(save_csv(observed, out_dir / "observed.csv"))
    return {"outputs": outputs, "seeds": [], "summary": {"rows": ts.n, "transient": transient}}


def _run_linear_toy(preset: Preset, run: Dict[str, Any], out_dir: Path) -> Dict[str, Any]:
    params = LinearToyParams.from_mapping(preset.params)
    seed = int(run.get("seed", 0))
    ts = simulate_linear_toy(params, float(run.get("dt", 1e-3)), int(run.get("steps", 1_000_000)), seed,
                             run.get("x0", (0.0, 0.0)))
    return {"outputs": [save_csv(ts, out_dir / "trajectory.csv")], "seeds": [seed], "summary": {"rows": ts.n}}


def _run_gamma_chain(preset: Preset, run: Dict[str, Any], out_dir: Path) -> Dict[str, Any]:
    spec = GammaChainSpec.from_mapping(preset.params)
    report = verify_gamma_chain(spec, run.get("x0", [1.0] * spec.n), float(run.get("duration", 10.0)),
                                float(run.get("dt", 1e-3)))
    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    outputs = [save_csv(report.chain, out_dir / "chain.csv"), save_csv(report.direct, out_dir / "direct.csv"),
               report_path]
    return {"outputs": outputs, "seeds": [], "summary": report.to_dict()}
