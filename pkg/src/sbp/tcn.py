"""Temporal convolutional parameterizer for the spliced Binned-Pareto model.

The network reads a context window of standardised values and emits
``n_bins + 4`` raw numbers: bin logits followed by the pre-activation
(xi, beta) of the lower tail and of the upper tail.  A second variant with a
single output is trained with squared error for residual-based detection.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autograd as ag
from .data import make_windows
from .distributions import EPS_BIN, BinnedDistribution, GeneralizedPareto, SplicedBinnedPareto, splice
from .rng import CounterRNG

logger = logging.getLogger(__name__)

POSITIVE_FLOOR = 1e-6
MAGIC = b"SBPM"
CONTAINER_VERSION = 1
BIN_SPAN_SIGMAS = 5.0


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TcnConfig:
    context_length: int = 64
    channels: int = 16
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    n_bins: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.kernel_size < 1 or self.channels < 1 or self.n_bins < 2 or not self.dilations:
            raise ValueError("invalid TCN configuration")
        if self.receptive_field > self.context_length:
            raise ValueError(
                f"receptive field {self.receptive_field} exceeds context length {self.context_length}"
            )

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilations)

    def blocks(self) -> list[tuple[int, ...]]:
        """Dilations grouped two per residual block."""
        return [self.dilations[i : i + 2] for i in range(0, len(self.dilations), 2)]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    gradient_clip: float = 10.0
    tail_mass: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tail_mass < 0.5:
            raise ValueError("tail_mass must lie in (0, 0.5)")
        if self.learning_rate <= 0 or self.gradient_clip <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid training configuration")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(cfg: TcnConfig, n_out: int) -> "OrderedDict[str, np.ndarray]":
    """Glorot-uniform weights and zero biases, drawn from ``cfg.seed``."""
    rng = CounterRNG(cfg.seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()

    def uniform(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return (2.0 * rng.random(int(np.prod(shape))) - 1.0).reshape(shape) * limit

    c_in = 1
    k, c = cfg.kernel_size, cfg.channels
    for b, block in enumerate(cfg.blocks()):
        block_in = c_in
        for j, _ in enumerate(block):
            params[f"block{b}.conv{j}.weight"] = uniform((c, c_in, k), c_in * k, c * k)
            params[f"block{b}.conv{j}.bias"] = np.zeros(c)
            c_in = c
        if block_in != c:
            params[f"block{b}.skip.weight"] = uniform((c, block_in, 1), block_in, c)
    params["head.weight"] = uniform((n_out, c), c, n_out)
    params["head.bias"] = np.zeros(n_out)
    return params


def _as_tensors(params, requires_grad: bool) -> "OrderedDict[str, ag.Tensor]":
    return OrderedDict((name, ag.Tensor(v, requires_grad=requires_grad)) for name, v in params.items())


def _network(t: "OrderedDict[str, ag.Tensor]", windows: np.ndarray, cfg: TcnConfig) -> ag.Tensor:
    # only the last receptive_field positions can reach the final output
    x = ag.Tensor(windows[:, None, -cfg.receptive_field :])
    zero_bias = None
    for b, block in enumerate(cfg.blocks()):
        h = x
        for j, dilation in enumerate(block):
            h = ag.relu(ag.causal_conv1d(h, t[f"block{b}.conv{j}.weight"], t[f"block{b}.conv{j}.bias"], dilation))
        skip_name = f"block{b}.skip.weight"
        if skip_name in t:
            if zero_bias is None:
                zero_bias = ag.Tensor(np.zeros(cfg.channels))
            skip = ag.causal_conv1d(x, t[skip_name], zero_bias, 1)
        else:
            skip = x
        x = ag.relu(h + skip)
    return _head(x[:, :, -1], t)


def _head(last: ag.Tensor, t) -> ag.Tensor:
    w = t["head.weight"]
    wt = ag.Tensor(w.data.T, parents=(w,), backward=lambda g: (g.T,))
    return last @ wt + t["head.bias"]


def forward(params, window, cfg: TcnConfig) -> np.ndarray:
    """Raw head outputs for one window (shape ``(n_out,)``) or a batch ``(B, n_out)``."""
    w = np.asarray(window, dtype=np.float64)
    single = w.ndim == 1
    w2 = w[None, :] if single else w
    if w2.ndim != 2 or w2.shape[1] != cfg.context_length:
        raise ValueError(f"window length must be {cfg.context_length}, got shape {w.shape}")
    out = _network(_as_tensors(params, False), w2, cfg).data
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Heads and likelihood
# ---------------------------------------------------------------------------


def positive(x):
    """Smooth positive map ``log(1 + exp(x)) + 1e-6``."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) + POSITIVE_FLOOR


def heads_to_distribution(raw, edges, q: float) -> SplicedBinnedPareto:
    raw = np.asarray(raw, dtype=np.float64)
    n = len(edges) - 1
    if raw.shape != (n + 4,):
        raise ValueError(f"expected {n + 4} raw outputs, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw outputs must be finite")
    base = BinnedDistribution.from_logits(edges, raw[:n])
    xi_lo, beta_lo, xi_up, beta_up = positive(raw[n:])
    return splice(base, GeneralizedPareto(xi_lo, beta_lo), GeneralizedPareto(xi_up, beta_up), q)


def loss(d: SplicedBinnedPareto, x: float) -> float:
    """Training loss of one observation: negative clamped-bin log density plus
    the GPD log density of the excess when ``x`` is at or beyond a threshold."""
    tail = 0.0
    if x >= d.tau_upper:
        tail = d.upper.log_pdf(x - d.tau_upper)
    elif x <= d.tau_lower:
        tail = d.lower.log_pdf(d.tau_lower - x)
    return -(d.base.log_prob(x) + tail)


def batch_thresholds(probs: np.ndarray, edges: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise binned inverse CDF at levels ``q`` and ``1 - q``."""
    cum = np.concatenate([np.zeros((probs.shape[0], 1)), np.cumsum(probs, axis=1)], axis=1)
    cum[:, -1] = 1.0
    widths = np.diff(edges)
    rows = np.arange(probs.shape[0])
    out = []
    for level in (q, 1.0 - q):
        i = np.clip((cum < level).sum(axis=1) - 1, 0, probs.shape[1] - 1)
        frac = np.clip((level - cum[rows, i]) / probs[rows, i], 0.0, 1.0)
        out.append(edges[i] + frac * widths[i])
    return out[0], out[1]


def _gpd_log_pdf(xi: ag.Tensor, beta: ag.Tensor, excess: np.ndarray) -> ag.Tensor:
    # xi >= 1e-6 on this path, so the power form is always used
    z = ag.log1p(ag.Tensor(excess) * xi / beta)
    return -(ag.log(beta) + (1.0 + 1.0 / xi) * z)


def sbp_nll(raw: ag.Tensor, targets: np.ndarray, edges: np.ndarray, q: float, thresholds=None) -> ag.Tensor:
    """Mean training loss of a batch.

    Thresholds are constants under differentiation.  Passing ``thresholds``
    as a ``(tau_lower, tau_upper)`` pair of arrays pins them instead of
    deriving them from the current bin probabilities.
    """
    n = edges.size - 1
    logits = raw[:, :n]
    log_p = ag.log_softmax(logits)
    floored = ag.log(ag.exp(log_p) + EPS_BIN) - math.log1p(n * EPS_BIN)
    idx = np.clip(np.searchsorted(edges, targets, side="right") - 1, 0, n - 1)
    widths = np.diff(edges)
    binned = ag.take_along_last(floored, idx) - np.log(widths[idx])

    if thresholds is None:
        probs = np.exp(floored.data)
        thresholds = batch_thresholds(probs / probs.sum(axis=1, keepdims=True), edges, q)
    tau_lo, tau_up = thresholds
    up_mask = targets >= tau_up
    lo_mask = (targets <= tau_lo) & ~up_mask

    tails = ag.softplus(raw[:, n:]) + POSITIVE_FLOOR
    xi_lo, beta_lo, xi_up, beta_up = (tails[:, j] for j in range(4))
    up_term = _gpd_log_pdf(xi_up, beta_up, np.where(up_mask, targets - tau_up, 0.0))
    lo_term = _gpd_log_pdf(xi_lo, beta_lo, np.where(lo_mask, tau_lo - targets, 0.0))
    total = binned + ag.where(up_mask, up_term, 0.0) + ag.where(lo_mask, lo_term, 0.0)
    return -ag.mean(total)


def mse(raw: ag.Tensor, targets: np.ndarray) -> ag.Tensor:
    err = raw[:, 0] - targets
    return ag.mean(err * err)


def loss_and_grad(params, windows, targets, cfg: TcnConfig, objective) -> tuple[float, "OrderedDict[str, np.ndarray]"]:
    t = _as_tensors(params, True)
    out = objective(_network(t, np.asarray(windows, dtype=np.float64), cfg), np.asarray(targets, dtype=np.float64))
    out.backward()
    grads = OrderedDict((name, v.grad if v.grad is not None else np.zeros_like(v.data)) for name, v in t.items())
    return float(out.data), grads


def backward(params, windows, targets, cfg: TcnConfig, edges, q: float, thresholds=None):
    """Mean batch training loss and its exact gradient with respect to ``params``."""
    edges = np.asarray(edges, dtype=np.float64)
    return loss_and_grad(params, windows, targets, cfg, lambda raw, y: sbp_nll(raw, y, edges, q, thresholds))


def thresholds_at(params, windows, cfg: TcnConfig, edges, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-window ``(tau_lower, tau_upper)`` implied by the current bin heads."""
    raw = forward(params, np.atleast_2d(windows), cfg)[:, : cfg.n_bins]
    z = np.exp(raw - raw.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True) + EPS_BIN
    return batch_thresholds(probs / probs.sum(axis=1, keepdims=True), np.asarray(edges, dtype=np.float64), q)


# ---------------------------------------------------------------------------
# Standardisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """``z = (x - centre) / scale`` with median centre and IQR/1.349 scale."""

    centre: float
    scale: float

    @classmethod
    def fit(cls, values) -> "Standardizer":
        v = np.asarray(values, dtype=np.float64)
        q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
        scale = (q75 - q25) / 1.349
        if not scale > 0:
            scale = float(np.std(v))
        if not scale > 0:
            scale = 1.0
        return cls(float(med), float(scale))

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.centre) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.centre


def make_edges(z_train: np.ndarray, n_bins: int, span: float = BIN_SPAN_SIGMAS) -> np.ndarray:
    mu, sigma = float(np.mean(z_train)), float(np.std(z_train))
    if not sigma > 0:
        sigma = 1.0
    return np.linspace(mu - span * sigma, mu + span * sigma, n_bins + 1)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class SbpModel:
    """Trained parameterizer plus everything needed to build predictive distributions."""

    params: "OrderedDict[str, np.ndarray]"
    cfg: TcnConfig
    edges: np.ndarray
    q: float
    standardizer: Standardizer

    kind = "sbp"

    def raw(self, windows: np.ndarray) -> np.ndarray:
        z = self.standardizer.transform(windows)
        return _batched_forward(self.params, z, self.cfg)

    def distributions(self, windows: np.ndarray) -> list[SplicedBinnedPareto]:
        """Predictive distributions in standardised units, one per window."""
        return [heads_to_distribution(r, self.edges, self.q) for r in self.raw(np.atleast_2d(windows))]

    def quantiles(self, windows: np.ndarray, levels) -> np.ndarray:
        """Predictive quantiles in data units, shape ``(len(windows), len(levels))``."""
        levels = np.asarray(levels, dtype=np.float64)
        z = np.array([d.icdf(levels) for d in self.distributions(windows)])
        return self.standardizer.inverse(z)

    def nll(self, windows: np.ndarray, targets: np.ndarray) -> float:
        z_t = self.standardizer.transform(targets)
        return _eval_loss(self.params, self.standardizer.transform(windows), z_t, self.cfg, self._objective())

    def _objective(self):
        return lambda raw, y: sbp_nll(raw, y, self.edges, self.q)


@dataclass
class PointModel:
    """One-step point forecaster trained with squared error."""

    params: "OrderedDict[str, np.ndarray]"
    cfg: TcnConfig
    standardizer: Standardizer

    kind = "point"

    def forecast(self, windows: np.ndarray) -> np.ndarray:
        z = self.standardizer.transform(np.atleast_2d(windows))
        return self.standardizer.inverse(_batched_forward(self.params, z, self.cfg)[:, 0])

    def predict(self, series) -> np.ndarray:
        """Forecast ``series[t]`` from the preceding window; NaN for the first ``context_length`` steps."""
        x = np.asarray(series, dtype=np.float64)
        ws = make_windows(x, self.cfg.context_length, 0, x.size)
        out = np.full(x.size, np.nan)
        if len(ws):
            out[ws.target_index] = self.forecast(ws.contexts)
        return out

    def _objective(self):
        return mse


def _batched_forward(params, z_windows: np.ndarray, cfg: TcnConfig, chunk: int = 1024) -> np.ndarray:
    parts = [forward(params, z_windows[i : i + chunk], cfg) for i in range(0, z_windows.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def _eval_loss(params, z_windows, z_targets, cfg, objective, chunk: int = 1024) -> float:
    total = 0.0
    t = _as_tensors(params, False)
    for i in range(0, z_windows.shape[0], chunk):
        w, y = z_windows[i : i + chunk], z_targets[i : i + chunk]
        total += float(objective(_network(t, w, cfg), y).data) * y.size
    return total / z_windows.shape[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    epochs: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        lines = ["epoch,train_nll,val_nll"]
        for e, tr, va in zip(self.epochs, self.train_nll, self.val_nll):
            lines.append(f"{e},{tr!r},{va!r}")
        return "\n".join(lines) + "\n"


def _global_clip(grads, limit: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def _batches(n: int, batch_size: int, rng: CounterRNG) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _fit(params, z_ctx, z_tgt, cfg: TcnConfig, tc: TrainConfig, objective) -> tuple["OrderedDict[str, np.ndarray]", TrainingLog]:
    n = z_tgt.size
    n_val = max(1, int(round(n * tc.val_fraction)))
    if n - n_val < 1:
        raise ValueError("not enough windows to hold out a validation set")
    tr_x, tr_y = z_ctx[: n - n_val], z_tgt[: n - n_val]
    va_x, va_y = z_ctx[n - n_val :], z_tgt[n - n_val :]

    m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    v2 = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    step = 0
    shuffle_rng = CounterRNG(cfg.seed).spawn(1)
    log = TrainingLog()
    best = (math.inf, params)
    for epoch in range(tc.epochs):
        batch_losses, sizes = [], []
        for b, idx in enumerate(_batches(tr_y.size, tc.batch_size, shuffle_rng)):
            value, grads = loss_and_grad(params, tr_x[idx], tr_y[idx], cfg, objective)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(epoch, b, value)
            _global_clip(grads, tc.gradient_clip)
            step += 1
            c1 = 1.0 - tc.beta1**step
            c2 = 1.0 - tc.beta2**step
            new = OrderedDict()
            for k, p in params.items():
                g = grads[k]
                m[k] = tc.beta1 * m[k] + (1.0 - tc.beta1) * g
                v2[k] = tc.beta2 * v2[k] + (1.0 - tc.beta2) * g * g
                new[k] = p - tc.learning_rate * (m[k] / c1) / (np.sqrt(v2[k] / c2) + tc.adam_eps)
            params = new
            batch_losses.append(value)
            sizes.append(idx.size)
        train_nll = float(np.dot(batch_losses, sizes) / np.sum(sizes))
        val_nll = _eval_loss(params, va_x, va_y, cfg, objective)
        if not math.isfinite(val_nll):
            raise TrainingError(epoch, -1, val_nll)
        log.epochs.append(epoch)
        log.train_nll.append(train_nll)
        log.val_nll.append(val_nll)
        logger.info("epoch %d train %.5f val %.5f", epoch, train_nll, val_nll)
        if val_nll < best[0]:
            best = (val_nll, params)
            log.best_epoch = epoch
    return best[1], log


def _training_windows(series, context_length: int):
    x = np.asarray(series, dtype=np.float64)
    if x.size <= context_length + 1:
        raise ValueError(f"series of length {x.size} is too short for context {context_length}")
    return x, make_windows(x, context_length, 0, x.size)


def train(series, tcn: TcnConfig, tc: TrainConfig) -> tuple[SbpModel, TrainingLog]:
    """Fit the SBP parameterizer by maximum likelihood on one training split.

    The final ``val_fraction`` of the windows is held out and the parameters
    with the best validation loss are returned.
    """
    x, ws = _training_windows(series, tcn.context_length)
    std = Standardizer.fit(x)
    z = std.transform(x)
    edges = make_edges(z, tcn.n_bins)
    model = SbpModel(init_params(tcn, tcn.n_bins + 4), tcn, edges, tc.tail_mass, std)
    params, log = _fit(model.params, std.transform(ws.contexts), std.transform(ws.targets), tcn, tc, model._objective())
    model.params = params
    return model, log


def point_forecast_train(series, tcn: TcnConfig, tc: TrainConfig) -> tuple[PointModel, TrainingLog]:
    """Same loop with a one-output head and squared-error loss."""
    x, ws = _training_windows(series, tcn.context_length)
    std = Standardizer.fit(x)
    model = PointModel(init_params(tcn, 1), tcn, std)
    params, log = _fit(model.params, std.transform(ws.contexts), std.transform(ws.targets), tcn, tc, mse)
    model.params = params
    return model, log


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def write_tensors(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    """``SBPM`` magic, u32 version, then (u32 name length, name, u32 rank,
    u64 dims, little-endian float64 data) per tensor."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CONTAINER_VERSION))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


def read_tensors(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise ValueError("not an SBPM container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out


def save_model(model: SbpModel | PointModel) -> bytes:
    cfg = model.cfg
    meta = OrderedDict()
    meta["meta.kind"] = np.array([0.0 if model.kind == "sbp" else 1.0])
    # seed split into 32-bit halves so every u64 survives the float64 encoding
    seed = cfg.seed & ((1 << 64) - 1)
    meta["meta.tcn"] = np.array(
        [cfg.context_length, cfg.channels, cfg.kernel_size, cfg.n_bins, seed >> 32, seed & 0xFFFFFFFF], dtype=float
    )
    meta["meta.dilations"] = np.array(cfg.dilations, dtype=float)
    meta["meta.standardizer"] = np.array([model.standardizer.centre, model.standardizer.scale])
    if model.kind == "sbp":
        meta["meta.edges"] = model.edges
        meta["meta.q"] = np.array([model.q])
    meta.update(model.params)
    return write_tensors(meta)


def load_model(blob: bytes) -> SbpModel | PointModel:
    tensors = read_tensors(blob)
    ctx, ch, k, nb, seed_hi, seed_lo = (int(v) for v in tensors.pop("meta.tcn"))
    seed = (seed_hi << 32) | seed_lo
    cfg = TcnConfig(ctx, ch, k, tuple(int(d) for d in tensors.pop("meta.dilations")), nb, seed)
    centre, scale = tensors.pop("meta.standardizer")
    std = Standardizer(float(centre), float(scale))
    kind = tensors.pop("meta.kind")[0]
    if kind == 0.0:
        edges = tensors.pop("meta.edges")
        q = float(tensors.pop("meta.q")[0])
        return SbpModel(tensors, cfg, edges, q, std)
    return PointModel(tensors, cfg, std)


def with_seed(cfg: TcnConfig, seed: int) -> TcnConfig:
    return replace(cfg, seed=seed)
