"""
EMR Closure - Plot and statistics emitters
Statistic CSVs plus gnuplot scripts that render them offline; no images are produced here.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ...core.errors import DataError
from ...core.timeseries import AcfCurve, Histogram1D, Histogram2D, TimeSeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class PlotKind(Enum):
    ACF = "acf"                # lag time vs autocorrelation, one line per series
    PDF1D = "pdf1d"            # bin center vs density
    PDF2D = "pdf2d"            # heat map over two channels
    ATTRACTOR = "attractor"    # phase-plane projection of a trajectory


@dataclass
class PlotSpec:
    id: str
    kind: PlotKind
    title: str
    data_files: List[str]
    labels: List[str] = field(default_factory=list)
    xlabel: str = ""
    ylabel: str = ""
    columns: Sequence[int] = (1, 2)

    def to_gnuplot(self) -> str:
        """Render a standalone gnuplot script writing <id>.png"""
        lines = [
            "set terminal pngcairo size 900,600",
            f"set output '{self.id}.png'",
            f"set title '{self.title}'",
            "set datafile separator ','",
            "set key top right",
        ]
        if self.xlabel:
            lines.append(f"set xlabel '{self.xlabel}'")
        if self.ylabel:
            lines.append(f"set ylabel '{self.ylabel}'")

        x_col, y_col = self.columns[0], self.columns[1]
        if self.kind == PlotKind.PDF2D:
            lines += [
                "set view map",
                "set pm3d map",
                f"splot '{self.data_files[0]}' using 1:2:3 skip 1 with pm3d notitle",
            ]
        else:
            style = "dots" if self.kind == PlotKind.ATTRACTOR else "lines lw 2"
            labels = self.labels or [Path(f).stem for f in self.data_files]
            parts = [f"'{path}' using {x_col}:{y_col} skip 1 with {style} title '{label}'"
                     for path, label in zip(self.data_files, labels)]
            lines.append("plot " + ", \\\n     ".join(parts))
        return "\n".join(lines) + "\n"


def acf_frame(curve: AcfCurve) -> pd.DataFrame:
    frame = pd.DataFrame(curve.values, columns=list(curve.names) or None)
    frame.insert(0, "lag_time", curve.lag_times)
    return frame


def write_acf(curve: AcfCurve, path: Union[str, Path]) -> Path:
    path = Path(path)
    acf_frame(curve).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_pdf1d(hist: Histogram1D, path: Union[str, Path]) -> Path:
    path = Path(path)
    pd.DataFrame({"center": hist.centers, "density": hist.density}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_pdf2d(hist: Histogram2D, path: Union[str, Path]) -> Path:
    """Long format (x_center, y_center, density) with blank-free rows for splot"""
    path = Path(path)
    xc = 0.5 * (hist.x_edges[1:] + hist.x_edges[:-1])
    yc = 0.5 * (hist.y_edges[1:] + hist.y_edges[:-1])
    gx, gy = np.meshgrid(xc, yc, indexing="ij")
    names = [n or f"axis{i}" for i, n in enumerate(hist.names)]
    pd.DataFrame({names[0]: gx.ravel(), names[1]: gy.ravel(), "density": hist.density.ravel()}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT)
    return path


class PlotGenerator:
    """Collects statistic files for one run directory and emits matching plot scripts"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.plots: List[PlotSpec] = []
        self.files: List[Path] = []

    def _add(self, spec: PlotSpec) -> PlotSpec:
        self.plots.append(spec)
        return spec

    def acf_overlay(self, plot_id: str, curves: Dict[str, AcfCurve], channel: int = 0) -> PlotSpec:
        """One ACF file per labelled curve, all drawn for the chosen channel"""
        if not curves:
            raise DataError("acf_overlay needs at least one curve")
        files = []
        for label, curve in curves.items():
            self.files.append(write_acf(curve, self.out_dir / f"{plot_id}_{label}.csv"))
            files.append(self.files[-1].name)
        first = next(iter(curves.values()))
        name = first.names[channel] if first.names else str(channel)
        return self._add(PlotSpec(plot_id, PlotKind.ACF, f"ACF of {name}", files, list(curves),
                                  "lag time", "autocorrelation", (1, channel + 2)))

    def pdf_overlay(self, plot_id: str, hists: Dict[str, Histogram1D]) -> PlotSpec:
        files = []
        for label, hist in hists.items():
            self.files.append(write_pdf1d(hist, self.out_dir / f"{plot_id}_{label}.csv"))
            files.append(self.files[-1].name)
        title = next(iter(hists.values())).name or plot_id
        return self._add(PlotSpec(plot_id, PlotKind.PDF1D, f"PDF of {title}", files, list(hists),
                                  title, "density"))

    def pdf2d(self, plot_id: str, hist: Histogram2D) -> PlotSpec:
        self.files.append(write_pdf2d(hist, self.out_dir / f"{plot_id}.csv"))
        return self._add(PlotSpec(plot_id, PlotKind.PDF2D, f"Joint PDF of {hist.names[0]} and {hist.names[1]}",
                                  [self.files[-1].name], xlabel=hist.names[0], ylabel=hist.names[1]))

    def attractor(self, plot_id: str, series: Dict[str, TimeSeries], i: int = 0, j: int = 1,
                  max_points: int = 50_000) -> PlotSpec:
        files = []
        for label, ts in series.items():
            stride = max(1, ts.n // max_points)
            path = self.out_dir / f"{plot_id}_{label}.csv"
            pd.DataFrame(ts.data[::stride][:, [i, j]], columns=[ts.names[i], ts.names[j]]).to_csv(
                path, index=False, float_format=FLOAT_FORMAT)
            self.files.append(path)
            files.append(path.name)
        first = next(iter(series.values()))
        return self._add(PlotSpec(plot_id, PlotKind.ATTRACTOR, f"{first.names[i]} vs {first.names[j]}", files,
                                  list(series), first.names[i], first.names[j]))

    def export_scripts(self) -> List[Path]:
        """Write one <id>.gp per plot next to its data"""
        paths = []
        for spec in self.plots:
            path = self.out_dir / f"{spec.id}.gp"
            path.write_text(spec.to_gnuplot())
            paths.append(path)
        logger.debug(f"Wrote {len(paths)} plot scripts to {self.out_dir}")
        return paths


def gate_report_markdown(report: Dict[str, Any], title: Optional[str] = None) -> str:
    """Human-readable companion to report.json"""
    lines = [f"# {title or report.get('study', 'Study')} ({report.get('scale', '')} scale)", ""]
    lines.append(f"**Result:** {'PASS' if report.get('passed') else 'FAIL'}")
    lines.append("")
    lines.append("| Gate | Comparison | Threshold | Value | Status |")
    lines.append("|------|------------|-----------|-------|--------|")
    for gate in report.get("gates", []):
        status = "pass" if gate["passed"] else f"FAIL ({gate['reason']})"
        lines.append(f"| {gate['name']} | {gate['comparison']} | {gate['threshold']} | {gate['value']} | {status} |")
    lines.append("")
    return "\n".join(lines)
