"""Calibration metrics: empirical coverage, PP-plot artifacts and MAE."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .distributions import EPS_XI
from .evt import DetectorState, Kind, dspot_step, spot_step


def tail_grid(n: int = 100) -> np.ndarray:
    """``n`` equally spaced levels on [0.90, 0.999]."""
    return np.linspace(0.90, 0.999, n)


def full_grid() -> np.ndarray:
    """Levels 0.01, 0.02, ..., 0.99."""
    return np.arange(1, 100) / 100.0


GRIDS = {"tail": tail_grid, "full": full_grid}


@dataclass
class CalibrationReport:
    levels: np.ndarray
    coverages: np.ndarray
    mae: float
    model_name: str
    n_points: int

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.coverages = np.asarray(self.coverages, dtype=np.float64)
        if self.levels.shape != self.coverages.shape or self.levels.ndim != 1:
            raise ValueError("levels and coverages must be 1-D and of equal length")
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if np.any((self.coverages < 0) | (self.coverages > 1)):
            raise ValueError("coverages must lie in [0, 1]")

    def to_json(self) -> str:
        doc = {
            "model": self.model_name,
            "levels": [float(v) for v in self.levels],
            "coverages": [float(v) for v in self.coverages],
            "mae": float(self.mae),
            "n_points": int(self.n_points),
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        doc = json.loads(text)
        return cls(doc["levels"], doc["coverages"], doc["mae"], doc["model"], doc.get("n_points", 0))


def empirical_coverage(quantile_fn, targets: Sequence[float], levels) -> np.ndarray:
    """Fraction of targets strictly below their predictive quantile, per level.

    ``quantile_fn`` is either an array of shape ``(len(targets), len(levels))``
    or a callable ``quantile_fn(t, levels) -> array`` giving step ``t``'s
    predictive quantiles.  The sum is divided by the number of targets.
    """
    x = np.asarray(targets, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if x.size < 1:
        raise ValueError("need at least one target")
    if callable(quantile_fn):
        quantiles = np.array([np.asarray(quantile_fn(t, levels), dtype=np.float64) for t in range(x.size)])
    else:
        quantiles = np.asarray(quantile_fn, dtype=np.float64)
    quantiles = quantiles.reshape(x.size, levels.size)
    return np.mean(x[:, None] < quantiles, axis=0)


def calibration_mae(levels, coverages) -> float:
    levels = np.asarray(levels, dtype=np.float64)
    coverages = np.asarray(coverages, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("empty grid")
    if levels.shape != coverages.shape:
        raise ValueError("levels and coverages differ in length")
    return float(np.mean(np.abs(coverages - levels)))


def calibration_report(model_name: str, quantiles, targets, levels) -> CalibrationReport:
    cov = empirical_coverage(quantiles, targets, levels)
    return CalibrationReport(levels, cov, calibration_mae(levels, cov), model_name, len(targets))


# ---------------------------------------------------------------------------
# PP-plot artifacts
# ---------------------------------------------------------------------------

_SVG_SIZE = 400
_SVG_PAD = 40


def _svg_xy(level: float, coverage: float, lo: float, hi: float) -> tuple[float, float]:
    span = _SVG_SIZE - 2 * _SVG_PAD
    x = _SVG_PAD + (level - lo) / (hi - lo) * span
    y = _SVG_SIZE - _SVG_PAD - (coverage - lo) / (hi - lo) * span
    return round(x, 4), round(y, 4)


def pp_axis_range(levels: np.ndarray) -> tuple[float, float]:
    """Shared axis range for both PP-plot axes, snapped to 0.05."""
    lo = np.floor(levels.min() * 20.0) / 20.0
    hi = np.ceil(levels.max() * 20.0) / 20.0
    if hi <= lo:
        hi = lo + 0.05
    return float(lo), float(hi)


def render_svg(reports: Sequence[CalibrationReport]) -> str:
    levels = reports[0].levels
    lo, hi = pp_axis_range(levels)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    a, b = _svg_xy(lo, lo, lo, hi), _svg_xy(hi, hi, lo, hi)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" height="{_SVG_SIZE}" '
        f'viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        f'<rect x="{_SVG_PAD}" y="{_SVG_PAD}" width="{_SVG_SIZE - 2 * _SVG_PAD}" '
        f'height="{_SVG_SIZE - 2 * _SVG_PAD}" fill="none" stroke="#999"/>',
        f'<line class="diagonal" x1="{a[0]}" y1="{a[1]}" x2="{b[0]}" y2="{b[1]}" stroke="#000" stroke-dasharray="4 3"/>',
        f'<text x="{_SVG_PAD}" y="{_SVG_SIZE - 10}" font-size="11">{lo:g}</text>',
        f'<text x="{_SVG_SIZE - _SVG_PAD - 20}" y="{_SVG_SIZE - 10}" font-size="11">{hi:g}</text>',
        f'<text x="{_SVG_SIZE / 2 - 30}" y="{_SVG_SIZE - 10}" font-size="11">level q</text>',
        f'<text x="4" y="{_SVG_SIZE / 2}" font-size="11">coverage</text>',
    ]
    for i, rep in enumerate(reports):
        pts = " ".join(f"{x},{y}" for x, y in (_svg_xy(l, c, lo, hi) for l, c in zip(rep.levels, rep.coverages)))
        colour = palette[i % len(palette)]
        lines.append(
            f'<polyline class="pp" data-model="{rep.model_name}" points="{pts}" fill="none" stroke="{colour}"/>'
        )
        lines.append(
            f'<text x="{_SVG_PAD + 6}" y="{_SVG_PAD + 14 + 14 * i}" font-size="11" fill="{colour}">'
            f"{rep.model_name} MAE={rep.mae:.3e}</text>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_pp_csv(report: CalibrationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "coverage"])
        for l, c in zip(report.levels, report.coverages):
            w.writerow([repr(float(l)), repr(float(c))])


def read_pp_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["level", "coverage"]:
        raise ValueError("not a PP-plot CSV")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]


def emit_pp_plot(report: CalibrationReport | Sequence[CalibrationReport], path) -> tuple[str, str]:
    """Write ``path`` (level,coverage CSV) and a sibling ``.svg`` chart.

    Several reports may be passed to overlay them in the chart; the CSV then
    holds the first one.
    """
    reports = [report] if isinstance(report, CalibrationReport) else list(report)
    path = str(path)
    svg_path = (path[:-4] if path.endswith(".csv") else path) + ".svg"
    write_pp_csv(reports[0], path)
    with open(svg_path, "w") as fh:
        fh.write(render_svg(reports))
    return path, svg_path


# ---------------------------------------------------------------------------
# Detectors as quantile functions
# ---------------------------------------------------------------------------


def pot_quantiles(state: DetectorState, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper-side POT quantiles at every level, plus a mask of levels that fell
    inside the observed peaks (and were therefore returned as ``tau``)."""
    q = 1.0 - np.asarray(levels, dtype=np.float64)
    r = q * state.n_total / state.n_peaks
    clamped = r >= 1.0
    g = state.gpd
    safe = np.where(clamped, 1.0, r)
    if abs(g.xi) < EPS_XI:
        inc = -g.beta * np.log(safe)
    else:
        inc = g.beta / g.xi * np.expm1(-g.xi * np.log(safe))
    z = state.sign * state.tau + np.where(clamped, 0.0, inc)
    return state.sign * z, clamped


@dataclass
class DetectorQuantiles:
    quantiles: np.ndarray
    clamped: np.ndarray
    kinds: list[Kind]


def adapt_detector_to_quantiles(
    state: DetectorState,
    stream: Sequence[float],
    levels,
    family: str = "spot",
    offsets: Sequence[float] | None = None,
    update: bool = True,
) -> DetectorQuantiles:
    """Run a detector over ``stream`` and record its per-step quantiles.

    Before each observation the state's POT quantile at exceedance ``1 -
    level`` is taken for every level; then the observation is fed to the
    detector.  ``family`` is ``"spot"`` or ``"dspot"`` (adds the drift
    window mean).  ``offsets`` are added to both the stream values the
    detector sees (subtracted) and the quantiles (added), which is how
    residual detectors are wrapped around point forecasts.  With
    ``update=False`` the state is frozen: observations are not fed to the
    detector, giving a static POT baseline, and ``kinds`` stays empty.
    """
    levels = np.asarray(levels, dtype=np.float64)
    x = np.asarray(stream, dtype=np.float64)
    off = np.zeros_like(x) if offsets is None else np.asarray(offsets, dtype=np.float64)
    if family == "spot":
        step: Callable = spot_step
    elif family == "dspot":
        step = dspot_step
    else:
        raise ValueError(f"unknown detector family {family!r}")
    quantiles = np.empty((x.size, levels.size))
    clamped = np.empty((x.size, levels.size), dtype=bool)
    kinds = []
    for t in range(x.size):
        z, c = pot_quantiles(state, levels)
        drift = state.drift if family == "dspot" else 0.0
        quantiles[t] = z + drift + off[t]
        clamped[t] = c
        if update:
            kinds.append(step(state, x[t] - off[t]).kind)
    return DetectorQuantiles(quantiles, clamped, kinds)
