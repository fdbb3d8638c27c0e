#!/usr/bin/env python3
"""
EMR Closure - Example Usage
Demonstrates how to use the framework programmatically
"""
import tempfile
from pathlib import Path

from emr_closure import (
    energy_audit,
    eta_test,
    event_bus,
    fit_emr,
    forecast,
    grand_linear_operator,
    save_model,
    simulate_emr,
)
from emr_closure.core.simulate import SimConfig
from emr_closure.core.timeseries import acf
from emr_closure.tools.reference.climate import ClimateParams, simulate_climate


def main():
    print("🚀 EMR Closure - Example closure for the reduced climate model")
    print("=" * 50)

    # Set up event logging
    def log_event(event):
        print(f"📌 {event.type.value}: {event.data}")

    event_bus.subscribe_all(log_event)

    print("\n🌍 Generating reference data...")
    _, observed = simulate_climate(ClimateParams(), duration=500.0, dt=1e-3, sample_dt=0.05, seed=1)
    observed = observed.slice(200)
    print(f"✅ {observed.n} samples of {', '.join(observed.names)}")

    print("\n🔧 Fitting the multilevel closure...")
    model = fit_emr(observed, constraints="energy")
    print(f"✅ {model.p} hidden level(s), stop: {model.report.stop_reason}")
    audit = energy_audit(model.main)
    print(f"✅ Cubic form max |.|: {audit.cubic_form_max:.2e}")
    print(f"✅ Unstable grand modes: {grand_linear_operator(model).n_unstable}")

    print("\n🎲 Simulating the closure...")
    simulated = simulate_emr(model, observed.data[-1], config=SimConfig(steps=5_000, seed=2))
    ref_acf, sim_acf = acf(observed, 40), acf(simulated, 40)
    worst = abs(ref_acf.values - sim_acf.values).max()
    print(f"✅ Max ACF deviation over 40 lags: {worst:.3f}")

    print("\n📈 Forecasting...")
    ensemble = forecast(model, observed.slice(observed.n - 200), horizon=40, n_ensemble=8, seed=3)
    print(f"✅ {ensemble.n_members} members, final spread {ensemble.std()[-1].round(3).tolist()}")

    print("\n🧪 Running the eta-test...")
    report = eta_test(model, observed, n_seeds=4, spin_up=500)
    print(f"✅ rho = {[round(r, 3) for r in report.rho]} (max |rho| {report.max_abs:.3f})")

    with tempfile.TemporaryDirectory() as tmp:
        path = save_model(model, Path(tmp) / "model.yaml")
        print(f"\n💾 Model written to {path.name}")

    print("\n📊 Event Metrics:")
    for key, value in event_bus.export_metrics().items():
        print(f"   {key}: {value}")

    print("\n✨ Example complete!")


if __name__ == "__main__":
    main()
