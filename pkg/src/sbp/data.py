"""Series containers, synthetic generators, CSV ingestion and windowing."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any

import numpy as np
from scipy.special import gammaincinv

from .rng import CounterRNG


class DataError(ValueError):
    """Base class for input data problems."""


class MalformedHeaderError(DataError):
    pass


class NonMonotoneTimestampsError(DataError):
    pass


class BadValueError(DataError):
    def __init__(self, rows: list[int]):
        self.rows = rows
        shown = ", ".join(str(r) for r in rows[:10])
        more = "" if len(rows) <= 10 else f" (+{len(rows) - 10} more)"
        super().__init__(f"unparseable values on rows {shown}{more}")


@dataclass
class SeriesFrame:
    values: np.ndarray
    name: str = "series"
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DataError("values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values must be finite")
        if self.timestamps is not None:
            if len(self.timestamps) != self.values.size:
                raise DataError("timestamps and values differ in length")
            parsed = [_parse_time(t) for t in self.timestamps]
            if any(b <= a for a, b in zip(parsed, parsed[1:])):
                raise NonMonotoneTimestampsError("non-monotone timestamps")

    def __len__(self) -> int:
        return self.values.size


def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.strip().replace("Z", "+00:00"))


# ---------------------------------------------------------------------------
# Synthetic series
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    """Noise law for synthetic series.

    ``kind`` is one of ``student_t`` (uses ``nu``, ``scale``), ``gaussian``
    (``sigma``) or ``pareto_mix``.  ``pareto_mix`` is a stand-in heavy-tailed
    law: Gaussian noise with standard deviation ``beta``, where a fraction
    ``contamination`` of the draws is replaced by a GPD(``xi``, ``beta``)
    excess with a random sign.
    """

    kind: str = "student_t"
    nu: float = 3.0
    scale: float = 0.3
    sigma: float = 1.0
    xi: float = 0.3
    beta: float = 1.0
    contamination: float = 0.05

    def validate(self):
        if self.kind == "student_t":
            if not self.nu > 0:
                raise ValueError(f"student_t needs nu > 0, got {self.nu}")
            if not self.scale > 0:
                raise ValueError(f"student_t needs scale > 0, got {self.scale}")
        elif self.kind == "gaussian":
            if not self.sigma >= 0:
                raise ValueError(f"gaussian needs sigma >= 0, got {self.sigma}")
        elif self.kind == "pareto_mix":
            if not self.beta > 0:
                raise ValueError(f"pareto_mix needs beta > 0, got {self.beta}")
            if not 0 <= self.contamination <= 1:
                raise ValueError("pareto_mix contamination must lie in [0, 1]")
            if self.xi >= 1:
                raise ValueError("pareto_mix needs xi < 1")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")


@dataclass
class SynthConfig:
    length: int = 20000
    amplitude: float = 1.0
    period: float = 96
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 7

    def validate(self):
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.period < 2:
            raise ValueError("period must be at least 2")
        self.noise.validate()

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SynthConfig":
        doc = dict(doc)
        noise = doc.pop("noise", {}) or {}
        unknown = set(doc) - {"length", "amplitude", "period", "seed"}
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        cfg = cls(noise=NoiseSpec(**noise), **doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def student_t(rng: CounterRNG, nu: float, size: int) -> np.ndarray:
    """``Z / sqrt(G / nu)``; ``G`` is a sum of ``nu`` squared normals when
    ``nu`` is an integer and an inverse-CDF chi-square draw otherwise.
    Draw order: ``size`` normals for ``Z``, then the chi-square draws."""
    z = rng.normal(size)
    if float(nu).is_integer():
        k = int(nu)
        g = np.sum(rng.normal(size * k).reshape(size, k) ** 2, axis=1)
    else:
        g = 2.0 * gammaincinv(0.5 * nu, rng.random(size))
    return z / np.sqrt(g / nu)


def sample_noise(spec: NoiseSpec, rng: CounterRNG, size: int) -> np.ndarray:
    if spec.kind == "student_t":
        return spec.scale * student_t(rng, spec.nu, size)
    if spec.kind == "gaussian":
        return spec.sigma * rng.normal(size)
    base = spec.beta * rng.normal(size)
    hit = rng.random(size) < spec.contamination
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    u = rng.random(size)
    if abs(spec.xi) < 1e-12:
        excess = -spec.beta * np.log(u)
    else:
        excess = spec.beta / spec.xi * np.expm1(-spec.xi * np.log(u))
    return np.where(hit, sign * excess, base)


def gen_synthetic(cfg: SynthConfig) -> SeriesFrame:
    """Sine wave plus iid noise, ``x_t = A sin(2 pi t / P) + eps_t``."""
    cfg.validate()
    t = np.arange(cfg.length)
    signal = cfg.amplitude * np.sin(2.0 * math.pi * t / cfg.period)
    noise = sample_noise(cfg.noise, CounterRNG(cfg.seed), cfg.length)
    return SeriesFrame(signal + noise, name=f"synthetic-{cfg.noise.kind}-seed{cfg.seed}")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, timestamp_column: str = "timestamp", value_column: str = "value") -> SeriesFrame:
    """Read a Numenta-style ``timestamp,value`` CSV.

    ``timestamp_column`` may be ``None`` for value-only files.  Rows are
    numbered from 1 for the header, so the first data row is row 2.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise MalformedHeaderError("malformed header")
        header = [h.strip() for h in header]
        if value_column not in header or (timestamp_column and timestamp_column not in header):
            raise MalformedHeaderError(f"malformed header: {header}")
        vi = header.index(value_column)
        ti = header.index(timestamp_column) if timestamp_column else None
        values, stamps, bad = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                v = float(row[vi])
                if not math.isfinite(v):
                    raise ValueError
            except (ValueError, IndexError):
                bad.append(rowno)
                continue
            values.append(v)
            if ti is not None:
                stamps.append(row[ti].strip())
    if bad:
        raise BadValueError(bad)
    name = os.path.splitext(os.path.basename(path))[0]
    return SeriesFrame(np.array(values), name=name, timestamps=stamps if ti is not None else None)


def write_csv(frame: SeriesFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if frame.timestamps is not None:
            w.writerow(["timestamp", "value"])
            for t, v in zip(frame.timestamps, frame.values):
                w.writerow([t, repr(float(v))])
        else:
            w.writerow(["index", "value"])
            for i, v in enumerate(frame.values):
                w.writerow([i, repr(float(v))])


def load_series(path) -> SeriesFrame:
    """Load either a ``timestamp,value`` or an ``index,value`` CSV."""
    with open(path, newline="") as fh:
        first = fh.readline()
    if first.strip().split(",")[0].strip() == "index":
        return load_csv(path, timestamp_column=None)
    return load_csv(path)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Context windows ``contexts[i]`` predicting ``targets[i] = x[target_index[i]]``."""

    contexts: np.ndarray
    targets: np.ndarray
    target_index: np.ndarray

    def __len__(self) -> int:
        return self.targets.size


@dataclass
class Split:
    train: WindowSet
    test: WindowSet
    n_train: int


def make_windows(values: np.ndarray, context_length: int, start: int, stop: int) -> WindowSet:
    """Windows for every target index in ``[max(start, context_length), stop)``."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.arange(max(start, context_length), stop)
    if idx.size == 0:
        return WindowSet(np.empty((0, context_length)), np.empty(0), idx)
    view = np.lib.stride_tricks.sliding_window_view(values, context_length)
    return WindowSet(view[idx - context_length].copy(), values[idx].copy(), idx)


def split_and_window(frame: SeriesFrame | np.ndarray, train_fraction: float, context_length: int) -> Split:
    """Chronological split; test contexts may reach back into the training part."""
    values = frame.values if isinstance(frame, SeriesFrame) else np.asarray(frame, dtype=np.float64)
    n = values.size
    if n <= context_length + 10:
        raise DataError(f"series of length {n} is too short for context {context_length}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(n * train_fraction))
    if n_train <= context_length:
        raise DataError("training split is shorter than the context window")
    return Split(
        train=make_windows(values, context_length, 0, n_train),
        test=make_windows(values, context_length, n_train, n),
        n_train=n_train,
    )
