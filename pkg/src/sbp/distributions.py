"""Binned, Generalised Pareto and spliced Binned-Pareto distributions.

All three types are immutable.  Methods accept scalars or array-likes and
return a float for scalar input, an ndarray otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

EPS_BIN = 1e-10
EPS_XI = 1e-6
FORMAT_VERSION = 1


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _out(values: np.ndarray, scalar: bool):
    return float(values) if scalar else values


# ---------------------------------------------------------------------------
# Binned base distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BinnedDistribution:
    """Piecewise-constant density over ``n`` contiguous bins.

    Parameters
    ----------
    edges : array_like, shape (n + 1,)
        Strictly increasing bin boundaries.
    log_probs : array_like, shape (n,)
        Log of the probability mass in each bin.
    """

    edges: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self):
        edges = _frozen(self.edges)
        log_probs = _frozen(self.log_probs)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "log_probs", log_probs)
        if edges.ndim != 1 or log_probs.ndim != 1 or edges.size != log_probs.size + 1:
            raise ValueError("edges must have exactly one more entry than log_probs")
        if log_probs.size < 2:
            raise ValueError("need at least 2 bins")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("edges must be strictly increasing")
        if not np.all(np.isfinite(log_probs)):
            raise ValueError("log_probs must be finite")
        total = np.exp(log_probs).sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"bin masses sum to {total!r}, expected 1")
        probs = np.exp(log_probs)
        cum = np.concatenate([[0.0], np.cumsum(probs)])
        cum[-1] = 1.0
        object.__setattr__(self, "_probs", _frozen(probs))
        object.__setattr__(self, "_cum", _frozen(cum))
        object.__setattr__(self, "_widths", _frozen(np.diff(edges)))

    @classmethod
    def from_probs(cls, edges, probs, floor: float = EPS_BIN) -> "BinnedDistribution":
        """Build from unnormalised masses, adding ``floor`` to every bin first."""
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("bin masses must be finite and non-negative")
        p = p + floor
        p = p / p.sum()
        return cls(edges, np.log(p))

    @classmethod
    def from_logits(cls, edges, logits, floor: float = EPS_BIN) -> "BinnedDistribution":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max()
        return cls.from_probs(edges, np.exp(z) / np.exp(z).sum(), floor)

    @property
    def n_bins(self) -> int:
        return self.log_probs.size

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def widths(self) -> np.ndarray:
        return self._widths

    def bin_index(self, x) -> np.ndarray:
        """Index of the bin containing ``x``; values off the grid clamp to the edge bins."""
        idx = np.searchsorted(self.edges, x, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def log_prob(self, x):
        scalar = np.ndim(x) == 0
        i = self.bin_index(np.asarray(x, dtype=np.float64))
        return _out(self.log_probs[i] - np.log(self._widths[i]), scalar)

    def cdf(self, x):
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=np.float64)
        i = self.bin_index(x)
        frac = np.clip((x - self.edges[i]) / self._widths[i], 0.0, 1.0)
        out = self._cum[i] + self._probs[i] * frac
        out = np.where(x >= self.edges[-1], 1.0, np.where(x <= self.edges[0], 0.0, out))
        return _out(out, scalar)

    def icdf(self, level):
        """Inverse of :meth:`cdf`; at a bin boundary the leftmost preimage is returned."""
        scalar = np.ndim(level) == 0
        u = np.asarray(level, dtype=np.float64)
        if np.any(np.isnan(u)):
            raise ValueError("level is NaN")
        if np.any((u < 0) | (u > 1)):
            raise ValueError("level must lie in [0, 1]")
        # bin i satisfies cum[i] < u <= cum[i + 1]
        i = np.clip(np.searchsorted(self._cum, u, side="left") - 1, 0, self.n_bins - 1)
        frac = (u - self._cum[i]) / self._probs[i]
        out = self.edges[i] + np.clip(frac, 0.0, 1.0) * self._widths[i]
        return _out(out, scalar)

    def mean(self) -> float:
        centres = 0.5 * (self.edges[1:] + self.edges[:-1])
        return float(np.dot(self._probs, centres))


# ---------------------------------------------------------------------------
# Generalised Pareto tail
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneralizedPareto:
    """GPD on excesses ``x >= 0`` with shape ``xi`` and scale ``beta``."""

    xi: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "beta", float(self.beta))
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if not np.isfinite(self.xi):
            raise ValueError("xi must be finite")

    @property
    def is_exponential(self) -> bool:
        return abs(self.xi) < EPS_XI

    @property
    def upper_bound(self) -> float:
        return -self.beta / self.xi if self.xi < 0 and not self.is_exponential else np.inf

    def _log_sf(self, x: np.ndarray) -> np.ndarray:
        if self.is_exponential:
            return -x / self.beta
        with np.errstate(divide="ignore", invalid="ignore"):
            arg = np.log1p(self.xi * x / self.beta)
            out = -arg / self.xi
        return np.where(x >= self.upper_bound, -np.inf, out)

    def sf(self, x):
        """Survival function ``1 - cdf(x)``."""
        scalar = np.ndim(x) == 0
        x = self._check_excess(x)
        return _out(np.exp(self._log_sf(x)), scalar)

    def cdf(self, x):
        scalar = np.ndim(x) == 0
        x = self._check_excess(x)
        return _out(-np.expm1(self._log_sf(x)), scalar)

    def log_pdf(self, x):
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.is_exponential:
                out = -np.log(self.beta) - x / self.beta
            else:
                out = -np.log(self.beta) - (1.0 + 1.0 / self.xi) * np.log1p(self.xi * x / self.beta)
        out = np.where((x < 0) | (x >= self.upper_bound), -np.inf, out)
        return _out(out, scalar)

    def isf(self, survival):
        """Excess whose survival probability equals ``survival`` in (0, 1]."""
        scalar = np.ndim(survival) == 0
        s = np.asarray(survival, dtype=np.float64)
        if np.any(np.isnan(s)) or np.any((s < 0) | (s > 1)):
            raise ValueError("survival probability must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            log_s = np.log(s)
        if self.is_exponential:
            out = -self.beta * log_s
        else:
            out = self.beta / self.xi * np.expm1(-self.xi * log_s)
        if np.any((s == 0) & np.isinf(out)) and self.upper_bound == np.inf:
            raise ValueError("level 1 maps to +inf for an unbounded tail")
        return _out(out, scalar)

    def icdf(self, level):
        scalar = np.ndim(level) == 0
        u = np.asarray(level, dtype=np.float64)
        if np.any(np.isnan(u)) or np.any((u < 0) | (u > 1)):
            raise ValueError("level must lie in [0, 1)")
        if np.any(u == 1) and self.upper_bound == np.inf:
            raise ValueError("level 1 maps to +inf for an unbounded tail")
        with np.errstate(divide="ignore"):
            log_s = np.log1p(-u)
        if self.is_exponential:
            out = -self.beta * log_s
        else:
            out = self.beta / self.xi * np.expm1(-self.xi * log_s)
        return _out(out, scalar)

    def sample(self, rng, count: int) -> np.ndarray:
        return self.isf(rng.random(count))

    def log_likelihood(self, excesses) -> float:
        return float(np.sum(self.log_pdf(np.asarray(excesses, dtype=np.float64))))

    @staticmethod
    def _check_excess(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0) or np.any(np.isnan(x)):
            raise ValueError("GPD excess must be non-negative")
        return x

    def to_dict(self) -> dict:
        return {"xi": self.xi, "beta": self.beta}


# ---------------------------------------------------------------------------
# Splice
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplicedBinnedPareto:
    """Binned centre carrying mass ``1 - 2q`` with GPD tails of mass ``q`` each.

    Build instances with :func:`splice`, which derives the thresholds from
    the base distribution.
    """

    base: BinnedDistribution
    lower: GeneralizedPareto
    upper: GeneralizedPareto
    tail_mass: float
    tau_lower: float
    tau_upper: float

    def __post_init__(self):
        q = float(self.tail_mass)
        object.__setattr__(self, "tail_mass", q)
        if not 0.0 < q < 0.5:
            raise ValueError("tail mass q must lie in (0, 0.5)")
        if not self.tau_lower < self.tau_upper:
            raise ValueError("degenerate base: tau_lower >= tau_upper")
        b_lo = self.base.cdf(self.tau_lower)
        b_hi = self.base.cdf(self.tau_upper)
        object.__setattr__(self, "_b_lo", b_lo)
        object.__setattr__(self, "_b_span", b_hi - b_lo)

    @property
    def q(self) -> float:
        return self.tail_mass

    def log_prob(self, x):
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=np.float64)
        q = self.tail_mass
        centre = self.base.log_prob(x) + np.log((1.0 - 2.0 * q) / self._b_span)
        up = np.log(q) + self.upper.log_pdf(np.maximum(x - self.tau_upper, 0.0))
        lo = np.log(q) + self.lower.log_pdf(np.maximum(self.tau_lower - x, 0.0))
        out = np.where(x >= self.tau_upper, up, np.where(x <= self.tau_lower, lo, centre))
        return _out(out, scalar)

    def cdf(self, x):
        scalar = np.ndim(x) == 0
        x = np.asarray(x, dtype=np.float64)
        q = self.tail_mass
        with np.errstate(over="ignore", invalid="ignore"):
            lo = q * np.exp(self.lower._log_sf(np.maximum(self.tau_lower - x, 0.0)))
            up = 1.0 - q * np.exp(self.upper._log_sf(np.maximum(x - self.tau_upper, 0.0)))
        centre = q + (1.0 - 2.0 * q) * (self.base.cdf(x) - self._b_lo) / self._b_span
        out = np.where(x >= self.tau_upper, up, np.where(x <= self.tau_lower, lo, centre))
        return _out(out, scalar)

    def icdf(self, level):
        scalar = np.ndim(level) == 0
        u = np.asarray(level, dtype=np.float64)
        if np.any(np.isnan(u)) or np.any((u <= 0) | (u >= 1)):
            raise ValueError("level must lie in the open interval (0, 1)")
        q = self.tail_mass
        lo_mask = u < q
        up_mask = u > 1.0 - q
        out = np.empty_like(u)
        if np.any(lo_mask):
            out[lo_mask] = self.tau_lower - self.lower.isf(u[lo_mask] / q)
        if np.any(up_mask):
            out[up_mask] = self.tau_upper + self.upper.isf((1.0 - u[up_mask]) / q)
        mid = ~(lo_mask | up_mask)
        if np.any(mid):
            b = self._b_lo + (u[mid] - q) / (1.0 - 2.0 * q) * self._b_span
            out[mid] = np.clip(self.base.icdf(np.clip(b, 0.0, 1.0)), self.tau_lower, self.tau_upper)
        return _out(out, scalar)

    def sample(self, rng, count: int) -> np.ndarray:
        """Inverse-transform samples; ``rng`` needs a ``random(size)`` method."""
        return self.icdf(np.asarray(rng.random(count), dtype=np.float64))

    # -- serialisation ------------------------------------------------------

    def to_json(self) -> str:
        def num(v: float) -> str:
            return format(float(v), ".16e")

        def arr(vs) -> str:
            return "[" + ", ".join(num(v) for v in vs) + "]"

        def tail(g: GeneralizedPareto) -> str:
            return '{"xi": %s, "beta": %s}' % (num(g.xi), num(g.beta))

        return (
            '{"version": %d, "edges": %s, "log_probs": %s, "lower": %s, "upper": %s, "q": %s}'
            % (
                FORMAT_VERSION,
                arr(self.base.edges),
                arr(self.base.log_probs),
                tail(self.lower),
                tail(self.upper),
                num(self.tail_mass),
            )
        )

    @classmethod
    def from_json(cls, text: str) -> "SplicedBinnedPareto":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported distribution document version {doc.get('version')!r}")
        base = BinnedDistribution(doc["edges"], doc["log_probs"])
        return splice(
            base,
            GeneralizedPareto(**doc["lower"]),
            GeneralizedPareto(**doc["upper"]),
            doc["q"],
        )


def splice(
    base: BinnedDistribution,
    lower: GeneralizedPareto,
    upper: GeneralizedPareto,
    q: float,
) -> SplicedBinnedPareto:
    """Replace the base's outer ``q`` masses with the two GPD tails."""
    if not 0.0 < q < 0.5:
        raise ValueError("tail mass q must lie in (0, 0.5)")
    tau_lower = base.icdf(q)
    tau_upper = base.icdf(1.0 - q)
    if not tau_lower < tau_upper:
        raise ValueError("degenerate base: tau_lower == tau_upper")
    return SplicedBinnedPareto(base, lower, upper, float(q), float(tau_lower), float(tau_upper))
