"""Peaks-over-threshold machinery and the SPOT / DSPOT streaming detectors."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .distributions import EPS_XI, GeneralizedPareto

SNAPSHOT_VERSION = 1

GRID_POINTS = 1000
GRID_DELTA = 1e-8
BISECT_TOL = 1e-12
_CHUNK_ELEMENTS = 1 << 15

DEFAULT_Q = 1e-3
DEFAULT_TAU_LEVEL = 0.95
DEFAULT_DEPTH = 20
MIN_CALIBRATION = 100
MIN_PEAKS = 10


# ---------------------------------------------------------------------------
# GPD fitting
# ---------------------------------------------------------------------------


def _score(theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Grimshaw's reduced score ``u(theta) * v(theta) - 1`` for each theta."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    n = y.size
    # cache-sized blocks with reused buffers; fresh large temporaries are page-fault bound
    rows = min(theta.size, max(1, _CHUNK_ELEMENTS // max(n, 1)))
    a_buf = np.empty((rows, n))
    r_buf = np.empty((rows, n))
    out = np.empty(theta.shape)
    for start in range(0, theta.size, rows):
        th = theta[start : start + rows]
        a, r = a_buf[: th.size], r_buf[: th.size]
        np.multiply(th[:, None], y[None, :], out=a)
        a += 1.0
        np.divide(1.0, a, out=r)
        u = r.sum(axis=1) / n
        np.log(a, out=a)
        v = 1.0 + a.sum(axis=1) / n
        out[start : start + rows] = u * v - 1.0
    return out


def _gpd_from_theta(theta: float, y: np.ndarray) -> GeneralizedPareto | None:
    xi = float(np.mean(np.log1p(theta * y)))
    beta = xi / theta
    if not (beta > 0 and np.isfinite(beta)):
        return None
    return GeneralizedPareto(xi, beta)


def _bisect_roots(lo: np.ndarray, hi: np.ndarray, y: np.ndarray) -> np.ndarray:
    f_lo = _score(lo, y)
    while True:
        width = hi - lo
        if np.all(width <= BISECT_TOL * np.maximum(1.0, np.abs(lo))):
            break
        mid = 0.5 * (lo + hi)
        f_mid = _score(mid, y)
        left = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(left, mid, lo)
        f_lo = np.where(left, f_mid, f_lo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def method_of_moments(excesses) -> GeneralizedPareto:
    y = np.asarray(excesses, dtype=np.float64)
    mean, var = y.mean(), y.var()
    ratio = mean * mean / var
    return GeneralizedPareto(0.5 * (1.0 - ratio), 0.5 * mean * (ratio + 1.0))


def _brackets(grid: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sign = np.sign(_score(grid, y))
    change = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    # theta = 0 always solves the equation; brackets straddling it are the trivial root
    change = change[~((grid[change] < 0) & (grid[change + 1] > 0))]
    return grid[change], grid[change + 1]


def grimshaw_candidates(y: np.ndarray, grid_points: int = GRID_POINTS) -> list[GeneralizedPareto]:
    """Fits at every non-trivial root of the reduced score, plus the exponential limit.

    Roots are sought on a linear grid over ``(-1/max(y) + 1e-8, 2/mean(y))``.
    That range holds the root only while xi < 2/3, so when it yields no
    positive root a geometric grid continues up to Grimshaw's bound
    ``2 (mean - min) / min**2``.
    """
    lo = -1.0 / y.max() + GRID_DELTA
    hi = 2.0 / y.mean()
    b_lo, b_hi = _brackets(np.linspace(lo, hi, grid_points), y)
    if not np.any(b_lo > 0):
        y_min = y[y > 0].min()
        far = 2.0 * (y.mean() - y_min) / (y_min * y_min)
        if far > hi:
            e_lo, e_hi = _brackets(np.geomspace(hi, far, grid_points), y)
            b_lo, b_hi = np.concatenate([b_lo, e_lo]), np.concatenate([b_hi, e_hi])
    candidates = [GeneralizedPareto(0.0, float(y.mean()))]
    if b_lo.size:
        for theta in _bisect_roots(b_lo, b_hi, y):
            if abs(theta) * y.max() < 1e-9:
                continue
            g = _gpd_from_theta(float(theta), y)
            if g is not None:
                candidates.append(g)
    return candidates


def fit_gpd_mle(excesses: Iterable[float], grid_points: int = GRID_POINTS) -> GeneralizedPareto:
    """Maximum-likelihood GPD fit via Grimshaw's one-dimensional reduction.

    The reduced score is scanned on a ``grid_points`` grid over
    ``(-1/max(y) + 1e-8, 2/mean(y))`` (extended for very heavy tails, see
    :func:`grimshaw_candidates`), sign changes are bisected to 1e-12, and the
    candidate with the highest log-likelihood wins.  The exponential
    limit and the method-of-moments estimate are always among the candidates,
    so the result is never worse than either.

    Raises
    ------
    ValueError
        ``"degenerate excesses"`` when fewer than two distinct values are given.
    """
    y = np.asarray(list(excesses) if not isinstance(excesses, np.ndarray) else excesses, dtype=np.float64)
    if y.ndim != 1 or np.unique(y).size < 2:
        raise ValueError("degenerate excesses")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("excesses must be finite and non-negative")
    candidates = grimshaw_candidates(y, grid_points)
    try:
        candidates.append(method_of_moments(y))
    except ValueError:
        pass
    scores = [g.log_likelihood(y) for g in candidates]
    return candidates[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# POT quantile
# ---------------------------------------------------------------------------


def pot_ratio(q: float, n_total: int, n_peaks: int) -> float:
    return q * n_total / n_peaks


def pot_quantile(g: GeneralizedPareto, tau: float, q: float, n_total: int, n_peaks: int) -> float:
    """Level exceeded with probability ``q``: ``tau + beta/xi * ((qT/N)^-xi - 1)``.

    When ``qT/N >= 1`` the level sits inside the observed peaks and ``tau`` is
    returned; :func:`pot_ratio` tells callers when that happened.
    """
    if n_peaks < 1:
        raise ValueError("need at least one peak")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    r = pot_ratio(q, n_total, n_peaks)
    if r >= 1.0:
        return float(tau)
    if abs(g.xi) < EPS_XI:
        return float(tau - g.beta * math.log(r))
    return float(tau + g.beta / g.xi * math.expm1(-g.xi * math.log(r)))


# ---------------------------------------------------------------------------
# Streaming detectors
# ---------------------------------------------------------------------------


class Kind(str, Enum):
    NORMAL = "normal"
    PEAK = "peak"
    ANOMALY = "anomaly"


class StepOutcome(NamedTuple):
    kind: Kind
    z_q_after: float


@dataclass
class DetectorState:
    """Mutable SPOT/DSPOT state for one series and one side.

    ``tau`` and ``z_q`` are in data units (drift-removed units for DSPOT);
    for ``side="lower"`` the detector works on the negated stream, so there
    ``z_q <= tau``.  ``excesses`` are always positive distances from ``tau``.
    """

    tau: float
    z_q: float
    excesses: list[float]
    n_total: int
    q_level: float
    side: str = "upper"
    gpd: GeneralizedPareto | None = None
    drift_window: deque | None = None
    depth: int = 0
    refit_every: int = 1
    pending_peaks: int = 0
    ratio_clamped: bool = False

    def __post_init__(self):
        if self.side not in ("upper", "lower"):
            raise ValueError(f"side must be 'upper' or 'lower', got {self.side!r}")

    @property
    def n_peaks(self) -> int:
        return len(self.excesses)

    @property
    def sign(self) -> float:
        return 1.0 if self.side == "upper" else -1.0

    @property
    def drift(self) -> float:
        if not self.drift_window:
            return 0.0
        return float(np.mean(self.drift_window))

    def quantile(self, q: float) -> float:
        """Current POT quantile at exceedance level ``q`` (drift-removed units)."""
        work_tau = self.sign * self.tau
        return self.sign * pot_quantile(self.gpd, work_tau, q, self.n_total, self.n_peaks)

    def threshold(self) -> float:
        """Decision threshold for the next observation in data units."""
        return self.z_q + self.drift

    # -- snapshots ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "tau": self.tau,
            "z_q": self.z_q,
            "excesses": list(self.excesses),
            "n_total": self.n_total,
            "n_peaks": self.n_peaks,
            "q_level": self.q_level,
            "drift_window": None if self.drift_window is None else list(self.drift_window),
            "side": self.side,
            "depth": self.depth,
            "refit_every": self.refit_every,
            "pending_peaks": self.pending_peaks,
            "gpd": self.gpd.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorState":
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
        window = doc["drift_window"]
        depth = doc["depth"]
        state = cls(
            tau=doc["tau"],
            z_q=doc["z_q"],
            excesses=list(doc["excesses"]),
            n_total=doc["n_total"],
            q_level=doc["q_level"],
            side=doc["side"],
            gpd=GeneralizedPareto(**doc["gpd"]),
            drift_window=None if window is None else deque(window, maxlen=depth),
            depth=depth,
            refit_every=doc["refit_every"],
            pending_peaks=doc["pending_peaks"],
        )
        if state.n_peaks != doc["n_peaks"]:
            raise ValueError("snapshot n_peaks does not match its excesses")
        return state

    @classmethod
    def from_json(cls, text: str) -> "DetectorState":
        return cls.from_dict(json.loads(text))


def _init_from_working(work: np.ndarray, q_level: float, tau_level: float, side: str, n_total: int) -> DetectorState:
    sign = 1.0 if side == "upper" else -1.0
    tau_work = float(np.quantile(work, tau_level))
    peaks = work[work > tau_work] - tau_work
    if peaks.size < MIN_PEAKS:
        raise ValueError("insufficient peaks")
    try:
        gpd = fit_gpd_mle(peaks)
    except ValueError as exc:
        raise ValueError("insufficient peaks") from exc
    z_work = pot_quantile(gpd, tau_work, q_level, n_total, peaks.size)
    return DetectorState(
        tau=sign * tau_work,
        z_q=sign * z_work,
        excesses=[float(v) for v in peaks],
        n_total=n_total,
        q_level=q_level,
        side=side,
        gpd=gpd,
        ratio_clamped=pot_ratio(q_level, n_total, peaks.size) >= 1.0,
    )


def _check_common(calibration, q_level: float, side: str) -> np.ndarray:
    data = np.asarray(calibration, dtype=np.float64)
    if data.ndim != 1 or data.size < MIN_CALIBRATION:
        raise ValueError("insufficient data")
    if not 0.0 < q_level < 1.0:
        raise ValueError("q_level must lie in (0, 1)")
    if side not in ("upper", "lower"):
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")
    return data


def spot_init(
    calibration: Sequence[float],
    q_level: float = DEFAULT_Q,
    tau_level: float = DEFAULT_TAU_LEVEL,
    side: str = "upper",
    refit_every: int = 1,
) -> DetectorState:
    """Calibrate a SPOT detector with POT on an initial batch.

    ``tau_level`` is the fraction of calibration mass below the threshold on
    the monitored side, so 0.95 puts the lower-side threshold at the 5%
    empirical quantile.
    """
    data = _check_common(calibration, q_level, side)
    sign = 1.0 if side == "upper" else -1.0
    state = _init_from_working(sign * data, q_level, tau_level, side, data.size)
    state.refit_every = int(refit_every)
    return state


def _spot_core(state: DetectorState, x: float) -> StepOutcome:
    s = state.sign
    y = s * x
    state.n_total += 1
    if y < s * state.tau:
        return StepOutcome(Kind.NORMAL, state.z_q)
    if y > s * state.z_q:
        return StepOutcome(Kind.ANOMALY, state.z_q)
    state.excesses.append(y - s * state.tau)
    state.pending_peaks += 1
    if state.pending_peaks >= state.refit_every:
        state.gpd = fit_gpd_mle(np.asarray(state.excesses))
        state.pending_peaks = 0
    state.ratio_clamped = pot_ratio(state.q_level, state.n_total, state.n_peaks) >= 1.0
    state.z_q = state.quantile(state.q_level)
    return StepOutcome(Kind.PEAK, state.z_q)


def spot_step(state: DetectorState, x: float) -> StepOutcome:
    """Classify ``x`` and update the state; only peaks change the fit."""
    return _spot_core(state, float(x))


def dspot_init(
    calibration: Sequence[float],
    q_level: float = DEFAULT_Q,
    tau_level: float = DEFAULT_TAU_LEVEL,
    depth: int = DEFAULT_DEPTH,
    side: str = "upper",
    refit_every: int = 1,
) -> DetectorState:
    """Calibrate DSPOT: the first ``depth`` points seed the drift window and
    the remaining ones, centred on the mean of their preceding ``depth``
    values, feed the POT initialisation."""
    data = _check_common(calibration, q_level, side)
    if depth < 1:
        raise ValueError("depth must be positive")
    if data.size - depth < MIN_CALIBRATION:
        raise ValueError("insufficient data")
    kernel = np.ones(depth) / depth
    means = np.convolve(data, kernel, mode="valid")[:-1]
    centred = data[depth:] - means
    sign = 1.0 if side == "upper" else -1.0
    state = _init_from_working(sign * centred, q_level, tau_level, side, centred.size)
    state.drift_window = deque(data[-depth:].tolist(), maxlen=depth)
    state.depth = depth
    state.refit_every = int(refit_every)
    return state


def dspot_step(state: DetectorState, x: float) -> StepOutcome:
    """SPOT step on ``x - mean(window)``; non-anomalous raw values enter the window."""
    if state.drift_window is None:
        raise ValueError("state has no drift window; use spot_step")
    x = float(x)
    outcome = _spot_core(state, x - state.drift)
    if outcome.kind is not Kind.ANOMALY:
        state.drift_window.append(x)
    return outcome


# ---------------------------------------------------------------------------
# Residual detector
# ---------------------------------------------------------------------------


@dataclass
class ResidualDetection:
    """Per-step outcomes of the two mirrored residual detectors."""

    forecasts: np.ndarray
    upper: DetectorState
    lower: DetectorState
    outcomes: list[StepOutcome] = field(default_factory=list)
    lower_outcomes: list[StepOutcome] = field(default_factory=list)
    upper_outcomes: list[StepOutcome] = field(default_factory=list)


_SEVERITY = {Kind.NORMAL: 0, Kind.PEAK: 1, Kind.ANOMALY: 2}


def tcn_spot_detect(
    model,
    series: Sequence[float],
    q_level: float = DEFAULT_Q,
    n_init: int | None = None,
    tau_level: float = DEFAULT_TAU_LEVEL,
) -> ResidualDetection:
    """SPOT on one-step forecast residuals, both tails.

    ``model`` is any object with ``predict(series) -> forecasts`` where
    ``forecasts[t]`` predicts ``series[t]`` from earlier values and is NaN
    where no forecast exists.  The first ``n_init`` residuals calibrate the
    detectors; outcomes are returned for the remaining ones.  The combined
    outcome reports the more severe kind and the upper-side threshold.
    """
    x = np.asarray(series, dtype=np.float64)
    forecasts = np.asarray(model.predict(x), dtype=np.float64)
    valid = np.nonzero(np.isfinite(forecasts))[0]
    residuals = x[valid] - forecasts[valid]
    if n_init is None:
        n_init = residuals.size // 2
    calib, rest = residuals[:n_init], residuals[n_init:]
    upper = spot_init(calib, q_level, tau_level, side="upper")
    lower = spot_init(calib, q_level, tau_level, side="lower")
    result = ResidualDetection(forecasts=forecasts, upper=upper, lower=lower)
    for r in rest:
        up = spot_step(upper, r)
        lo = spot_step(lower, r)
        kind = up.kind if _SEVERITY[up.kind] >= _SEVERITY[lo.kind] else lo.kind
        result.upper_outcomes.append(up)
        result.lower_outcomes.append(lo)
        result.outcomes.append(StepOutcome(kind, up.z_q_after))
    return result
