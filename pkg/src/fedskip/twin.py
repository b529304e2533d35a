"""Server-side per-client twins: a single-cell LSTM over a client's recent
update norms, with Monte-Carlo dropout for an uncertainty estimate.

Twins are treated as values. ``predict`` never mutates its argument and
``observe_and_retrain`` returns a new twin.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

NORM_SCALE_FLOOR = 1e-12
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TwinConfig:
    hidden_size: int = 16
    window: int = 8
    mc_passes: int = 20
    dropout_rate: float = 0.2
    retrain_epochs: int = 5
    twin_lr: float = 0.01
    min_history: int = 2

    def __post_init__(self):
        if self.hidden_size < 1 or self.window < 2 or self.mc_passes < 1:
            raise ValueError("hidden_size >= 1, window >= 2 and mc_passes >= 1 required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.retrain_epochs < 0 or not self.twin_lr >= 0:
            raise ValueError("retrain_epochs and twin_lr must be non-negative")
        if not 1 <= self.min_history <= self.window:
            raise ValueError("min_history must lie in [1, window]")


@dataclass(frozen=True)
class TwinForecast:
    """Predicted next update norm and its MC-dropout spread, in raw norm units.

    A cold-start forecast carries ``cold_start=True`` and an infinite
    uncertainty so that any threshold rule forces communication.
    """

    predicted_magnitude: float
    uncertainty: float
    cold_start: bool = False

    @classmethod
    def cold(cls):
        return cls(0.0, math.inf, True)


@dataclass
class TwinModel:
    hidden_size: int
    window: int
    dropout_rate: float
    rng_seed: int
    w_x: np.ndarray          # (4H,) input weights, gate order i, f, g, o
    w_h: np.ndarray          # (4H, H) recurrent weights
    b: np.ndarray            # (4H,)
    head_w: np.ndarray       # (H,)
    head_b: float = 0.0
    min_history: int = 2
    history: list[float] = field(default_factory=list)
    norm_scale: float = NORM_SCALE_FLOOR
    n_observed: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0

    def copy(self) -> "TwinModel":
        return copy.deepcopy(self)

    # flat parameter view, used by the optimizer
    def get_theta(self) -> np.ndarray:
        return np.concatenate([self.w_x, self.w_h.ravel(), self.b, self.head_w, [self.head_b]])

    def set_theta(self, theta) -> None:
        h = self.hidden_size
        g = 4 * h
        pos = 0
        self.w_x = theta[pos:pos + g].copy(); pos += g
        self.w_h = theta[pos:pos + g * h].reshape(g, h).copy(); pos += g * h
        self.b = theta[pos:pos + g].copy(); pos += g
        self.head_w = theta[pos:pos + h].copy(); pos += h
        self.head_b = float(theta[pos])

    def normalized_history(self) -> np.ndarray:
        return np.asarray(self.history, dtype=np.float64) / self.norm_scale

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "window": self.window,
            "dropout_rate": self.dropout_rate,
            "rng_seed": self.rng_seed,
            "min_history": self.min_history,
            "w_x": self.w_x.tolist(),
            "w_h": self.w_h.tolist(),
            "b": self.b.tolist(),
            "head_w": self.head_w.tolist(),
            "head_b": self.head_b,
            "history": list(self.history),
            "norm_scale": self.norm_scale,
            "n_observed": self.n_observed,
            "adam_t": self.adam_t,
            "adam_m": None if self.adam_m is None else self.adam_m.tolist(),
            "adam_v": None if self.adam_v is None else self.adam_v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwinModel":
        arr = lambda key: None if d.get(key) is None else np.asarray(d[key], dtype=np.float64)
        return cls(
            hidden_size=d["hidden_size"], window=d["window"], dropout_rate=d["dropout_rate"],
            rng_seed=d["rng_seed"], w_x=arr("w_x"), w_h=arr("w_h"), b=arr("b"),
            head_w=arr("head_w"), head_b=d["head_b"], min_history=d["min_history"],
            history=list(d["history"]), norm_scale=d["norm_scale"], n_observed=d["n_observed"],
            adam_m=arr("adam_m"), adam_v=arr("adam_v"), adam_t=d["adam_t"],
        )


def make_twin(config: TwinConfig = TwinConfig(), rng_seed: int = 0) -> TwinModel:
    h = config.hidden_size
    rng = np.random.default_rng(rng_seed)
    limit = math.sqrt(6.0 / ((1 + h) + 4 * h))
    w = rng.uniform(-limit, limit, size=(4 * h, 1 + h))
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0  # forget-gate bias
    head_limit = math.sqrt(6.0 / (h + 1))
    return TwinModel(
        hidden_size=h, window=config.window, dropout_rate=config.dropout_rate,
        rng_seed=rng_seed, w_x=w[:, 0].copy(), w_h=w[:, 1:].copy(), b=b,
        head_w=rng.uniform(-head_limit, head_limit, size=h), head_b=0.0,
        min_history=config.min_history,
    )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _run_cell(twin, sequence):
    h_size = twin.hidden_size
    h = np.zeros(h_size)
    c = np.zeros(h_size)
    steps = []
    for x in sequence:
        z = twin.w_x * x + twin.w_h @ h + twin.b
        i = _sigmoid(z[:h_size])
        f = _sigmoid(z[h_size:2 * h_size])
        g = np.tanh(z[2 * h_size:3 * h_size])
        o = _sigmoid(z[3 * h_size:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        steps.append((x, h_prev, c_prev, i, f, g, o, tc))
    return h, steps


def lstm_forward(twin: TwinModel, sequence, dropout_mask=None) -> float:
    """Run the LSTM over ``sequence`` (already normalized) and read out one
    scalar. ``dropout_mask`` multiplies the final hidden state."""
    sequence = np.asarray(sequence, dtype=np.float64).reshape(-1)
    if sequence.size == 0:
        raise ValueError("sequence must be non-empty")
    h, _ = _run_cell(twin, sequence)
    if dropout_mask is not None:
        h = h * dropout_mask
    return float(twin.head_w @ h + twin.head_b)


def _dropout_masks(rng, count, hidden, rate):
    if rate == 0.0:
        return np.ones((count, hidden))
    keep = rng.random((count, hidden)) >= rate
    return keep / (1.0 - rate)


def predict(twin: TwinModel, mc_passes: int = 20, round_index: int = 0) -> TwinForecast:
    """Forecast the next raw update norm from the twin's history.

    ``round_index`` only keys the dropout masks; the twin is not modified.
    """
    if mc_passes < 1:
        raise ValueError("mc_passes must be >= 1")
    if len(twin.history) < twin.min_history:
        return TwinForecast.cold()
    seq = twin.normalized_history()
    if twin.dropout_rate == 0.0:
        y = lstm_forward(twin, seq)
        return TwinForecast(max(y * twin.norm_scale, 0.0), 0.0)
    h_last, _ = _run_cell(twin, seq)
    rng = np.random.default_rng([twin.rng_seed, twin.n_observed, round_index, 0x9D1C])
    masks = _dropout_masks(rng, mc_passes, twin.hidden_size, twin.dropout_rate)
    outs = (masks * h_last) @ twin.head_w + twin.head_b
    mean = float(outs.mean())
    spread = float(outs.std())
    return TwinForecast(max(mean * twin.norm_scale, 0.0), spread * twin.norm_scale)


def training_pairs(twin: TwinModel):
    """(input prefix, next value) pairs over the normalized history."""
    seq = twin.normalized_history()
    return [(seq[:j], seq[j]) for j in range(1, seq.size)]


def sequence_loss_and_grad(twin: TwinModel, pairs, masks=None):
    """Mean squared error over ``pairs`` and its gradient in ``get_theta`` order.

    ``masks`` (one row per pair) applies dropout to the pre-head hidden
    state; ``None`` evaluates deterministically.
    """
    h_size = twin.hidden_size
    g_size = 4 * h_size
    d_wx = np.zeros(g_size)
    d_wh = np.zeros((g_size, h_size))
    d_b = np.zeros(g_size)
    d_head_w = np.zeros(h_size)
    d_head_b = 0.0
    loss = 0.0
    n = len(pairs)
    for k, (seq, target) in enumerate(pairs):
        h, steps = _run_cell(twin, seq)
        mask = np.ones(h_size) if masks is None else masks[k]
        hd = h * mask
        y = float(twin.head_w @ hd + twin.head_b)
        err = y - target
        loss += err * err / n
        dy = 2.0 * err / n
        d_head_w += dy * hd
        d_head_b += dy
        dh = dy * twin.head_w * mask
        dc = np.zeros(h_size)
        for x, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ])
            d_wx += dz * x
            d_wh += np.outer(dz, h_prev)
            d_b += dz
            dh = twin.w_h.T @ dz
            dc = dc * f
    grad = np.concatenate([d_wx, d_wh.ravel(), d_b, d_head_w, [d_head_b]])
    return loss, grad


def training_loss(twin: TwinModel) -> float:
    """Deterministic (dropout-free) MSE over the current history pairs."""
    pairs = training_pairs(twin)
    if not pairs:
        return 0.0
    return sequence_loss_and_grad(twin, pairs)[0]


def observe_and_retrain(twin: TwinModel, observed_norm: float, epochs: int = 5,
                        lr: float = 0.01) -> TwinModel:
    """Record a newly observed norm and take ``epochs`` Adam steps on the
    next-step MSE over every history prefix, dropout active."""
    observed_norm = float(observed_norm)
    if not observed_norm >= 0 or not math.isfinite(observed_norm):
        raise ValueError(f"observed norm must be finite and >= 0, got {observed_norm}")
    out = twin.copy()
    out.history.append(observed_norm)
    if len(out.history) > out.window:
        del out.history[:len(out.history) - out.window]
    out.norm_scale = max(out.norm_scale, observed_norm, NORM_SCALE_FLOOR)
    out.n_observed += 1
    pairs = training_pairs(out)
    if epochs <= 0 or not pairs:
        return out

    rng = np.random.default_rng([out.rng_seed, out.n_observed, 0x7121])
    theta = out.get_theta()
    if out.adam_m is None:
        out.adam_m = np.zeros_like(theta)
        out.adam_v = np.zeros_like(theta)
    for _ in range(epochs):
        masks = _dropout_masks(rng, len(pairs), out.hidden_size, out.dropout_rate)
        _, grad = sequence_loss_and_grad(out, pairs, masks)
        out.adam_t += 1
        out.adam_m = _ADAM_BETA1 * out.adam_m + (1 - _ADAM_BETA1) * grad
        out.adam_v = _ADAM_BETA2 * out.adam_v + (1 - _ADAM_BETA2) * grad * grad
        m_hat = out.adam_m / (1 - _ADAM_BETA1 ** out.adam_t)
        v_hat = out.adam_v / (1 - _ADAM_BETA2 ** out.adam_t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        out.set_theta(theta)
    return out
