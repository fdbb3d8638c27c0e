"""
EMR Closure - Multilevel stochastic closures for partially observed dynamics
"""

__version__ = "1.0.0"
__author__ = "EMR Closure Team"

# Export main components for easy importing
from .core.config import AppConfig, load_config
from .core.emr import (EMRModel, FitReport, QuadraticMainLevel, energy_audit, fit_emr,
                       grand_linear_operator, load_model, save_model)
from .core.errors import EmrError
from .core.events import EventType, emit_event, event_bus
from .core.simulate import (ReflectionSpec, SimConfig, eta_test, forecast, init_hidden_backward,
                            simulate_emr)
from .core.timeseries import TimeSeries, acf, load_csv, pdf1d, save_csv

__all__ = [
    "AppConfig",
    "load_config",
    "EMRModel",
    "FitReport",
    "QuadraticMainLevel",
    "fit_emr",
    "energy_audit",
    "grand_linear_operator",
    "load_model",
    "save_model",
    "EmrError",
    "EventType",
    "emit_event",
    "event_bus",
    "ReflectionSpec",
    "SimConfig",
    "simulate_emr",
    "init_hidden_backward",
    "forecast",
    "eta_test",
    "TimeSeries",
    "acf",
    "pdf1d",
    "load_csv",
    "save_csv",
]
