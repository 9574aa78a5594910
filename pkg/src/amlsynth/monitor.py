"""Reference detection monitor: edge features, a logistic scorer and its metrics.

The monitor only has to provide a fast, deterministic adversarial signal, so it
is a logistic model over windowed neighbourhood statistics of each edge.  Any
object with ``score(features)`` and a ``threshold`` can stand in for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import PAYMENT_FORMATS, SECONDS_PER_DAY, SECONDS_PER_HOUR, TransactionLog

FEATURE_NAMES = (
    "log_amount", "hour_sin", "hour_cos",
    *(f"format_{f}" for f in PAYMENT_FORMATS),
    "sender_in_degree", "sender_out_degree", "receiver_in_degree", "receiver_out_degree",
    "sender_mean_log_amount", "receiver_mean_log_amount",
    "repeated_pair", "burst", "round_amount",
)
N_FEATURES = len(FEATURE_NAMES)
DEFAULT_WINDOW = 7 * SECONDS_PER_DAY
BURST_HALF_WIDTH = SECONDS_PER_HOUR


class MetricsError(ValueError):
    """Labels are degenerate (one class only) or inputs are malformed."""


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------------
# features


def _static_columns(amount: np.ndarray, ts: np.ndarray, fmt: np.ndarray) -> np.ndarray:
    n = len(amount)
    out = np.zeros((n, 8))
    out[:, 0] = np.log1p(amount)
    hour = (ts % SECONDS_PER_DAY) / SECONDS_PER_HOUR
    out[:, 1] = np.sin(2 * math.pi * hour / 24)
    out[:, 2] = np.cos(2 * math.pi * hour / 24)
    out[np.arange(n), 3 + fmt.astype(np.int64)] = 1.0
    return out


def _is_round(amount: np.ndarray) -> np.ndarray:
    cents = np.round(amount * 100).astype(np.int64)
    return ((cents % 10000) == 0).astype(float)


class _Stream:
    """Events of one kind grouped by key, ordered by row within a key.

    Because the log is time-sorted, times are non-decreasing inside a key too,
    so both (key, row) and (key, time) orderings agree and can be searched.
    """

    def __init__(self, keys: np.ndarray, rows: np.ndarray, ts: np.ndarray, values: np.ndarray | None = None):
        order = np.lexsort((rows, keys))
        self.keys = keys[order].astype(np.int64)
        self.rows = rows[order].astype(np.int64)
        self.ts = ts[order].astype(np.int64)
        self.row_key = self.keys * (1 << 32) + self.rows
        self.t0 = int(ts.min()) if len(ts) else 0
        self.time_key = self.keys * (1 << 40) + (self.ts - self.t0)
        if values is not None:
            self.csum = np.concatenate([[0.0], np.cumsum(values[order])])

    def _tkey(self, keys, t):
        return keys.astype(np.int64) * (1 << 40) + np.maximum(np.asarray(t, dtype=np.int64) - self.t0, -1)

    def prior(self, keys, rows, t, window):
        """Slice bounds of events with the same key, earlier row and time >= t - window."""
        hi = np.searchsorted(self.row_key, keys.astype(np.int64) * (1 << 32) + rows, side="left")
        lo = np.searchsorted(self.time_key, self._tkey(keys, t - window), side="left")
        return lo, np.maximum(hi, lo)

    def around(self, keys, t, half):
        lo = np.searchsorted(self.time_key, self._tkey(keys, t - half), side="left")
        hi = np.searchsorted(self.time_key, self._tkey(keys, t + half), side="right")
        return lo, hi


def feature_matrix(log: TransactionLog, window: int = DEFAULT_WINDOW, rows=None) -> np.ndarray:
    """Feature rows for every transaction of ``log`` (or only ``rows``).

    Windowed statistics look at transactions that precede the row in log order
    and fall no earlier than ``t - window``.  The burst count is the number of
    other transactions touching the sender within one hour either side.
    """
    n = len(log)
    idx = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    ts, src, dst, amount = log.timestamp, log.src, log.dst, log.amount_paid
    out = np.zeros((len(idx), N_FEATURES))
    if len(idx) == 0:
        return out
    out[:, :8] = _static_columns(amount[idx], ts[idx], log.payment_format[idx])
    all_rows = np.arange(n)
    logs = np.log1p(amount)
    outgoing = _Stream(src, all_rows, ts)
    incoming = _Stream(dst, all_rows, ts)
    touching = _Stream(np.concatenate([src, dst]), np.concatenate([all_rows, all_rows]),
                       np.concatenate([ts, ts]), np.concatenate([logs, logs]))
    t, s, d = ts[idx], src[idx], dst[idx]
    col = 8
    for stream, who in ((incoming, s), (outgoing, s), (incoming, d), (outgoing, d)):
        lo, hi = stream.prior(who, idx, t, window)
        out[:, col] = hi - lo
        col += 1
    for who in (s, d):
        lo, hi = touching.prior(who, idx, t, window)
        cnt = hi - lo
        total = touching.csum[hi] - touching.csum[lo]
        out[:, col] = np.where(cnt > 0, total / np.maximum(cnt, 1), 0.0)
        col += 1
    _, pair_id = np.unique(src.astype(np.int64) * len(log.accounts) + dst, return_inverse=True)
    pairs = _Stream(pair_id, all_rows, ts)
    lo, hi = pairs.prior(pair_id[idx], idx, t, window)
    out[:, col] = hi - lo
    lo, hi = touching.around(s, t, BURST_HALF_WIDTH)
    out[:, col + 1] = hi - lo - 1
    out[:, col + 2] = _is_round(amount[idx])
    return out


def extract_edge_features(log: TransactionLog, index: int, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Feature vector of a single transaction, computed by a direct scan."""
    if not 0 <= index < len(log):
        raise IndexError(f"transaction index {index} out of range")
    ts, src, dst = log.timestamp, log.src, log.dst
    t, s, d = int(ts[index]), int(src[index]), int(dst[index])
    out = np.zeros(N_FEATURES)
    out[:8] = _static_columns(log.amount_paid[index:index + 1], ts[index:index + 1],
                              log.payment_format[index:index + 1])[0]
    prev = slice(int(np.searchsorted(ts, t - window, side="left")), index)
    ps, pd, pa = src[prev], dst[prev], log.amount_paid[prev]
    out[8] = np.count_nonzero(pd == s)
    out[9] = np.count_nonzero(ps == s)
    out[10] = np.count_nonzero(pd == d)
    out[11] = np.count_nonzero(ps == d)
    for col, who in ((12, s), (13, d)):
        vals = np.concatenate([np.log1p(pa[ps == who]), np.log1p(pa[pd == who])])
        out[col] = vals.mean() if len(vals) else 0.0
    out[14] = np.count_nonzero((ps == s) & (pd == d))
    near = slice(int(np.searchsorted(ts, t - BURST_HALF_WIDTH, side="left")),
                 int(np.searchsorted(ts, t + BURST_HALF_WIDTH, side="right")))
    out[15] = np.count_nonzero((src[near] == s) | (dst[near] == s)) - 1
    out[16] = _is_round(log.amount_paid[index:index + 1])[0]
    return out


# ---------------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    auc: float
    ap: float
    S: float
    threshold: float
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)

    def as_row(self) -> dict:
        return {"f1": self.f1, "auc": self.auc, "ap": self.ap, "S": self.S, "threshold": self.threshold}


def _check_weights(weights) -> tuple:
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise ValueError("composite weights must be three non-negative numbers summing to 1")
    return w


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricsError("scores and labels must be 1-d and the same length")
    if not np.isfinite(s).all():
        raise MetricsError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise MetricsError("need at least one positive and one negative label")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s, y = _binary_inputs(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve.

    Tied scores form one threshold, so they enter together.
    """
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall_step = np.diff(np.r_[0, tp]) / tp[-1]
    return float(np.sum(recall_step * precision))


def f1_at(scores, labels, threshold: float) -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pred = s >= threshold
    tp = int(np.count_nonzero(pred & y))
    denom = int(np.count_nonzero(pred)) + int(np.count_nonzero(y))
    return 2 * tp / denom if denom else 0.0


def best_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising F1, placed midway between neighbouring distinct scores."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    f1 = 2 * tp / ((last + 1) + y.sum())
    k = int(np.argmax(f1))
    cut = last[k]
    below = s[cut + 1] if cut + 1 < len(s) else s[cut] - 1.0
    return float(0.5 * (s[cut] + below)), float(f1[k])


def compute_metrics(scores, labels, threshold: float, weights=(1 / 3, 1 / 3, 1 / 3)) -> MetricsReport:
    w = _check_weights(weights)
    auc = roc_auc(scores, labels)
    ap = average_precision(scores, labels)
    f1 = f1_at(scores, labels, threshold)
    S = w[0] * f1 + w[1] * auc + w[2] * ap
    return MetricsReport(f1, auc, ap, S, float(threshold), w)


# ---------------------------------------------------------------------------------
# model


class Scorer(Protocol):
    threshold: float

    def score(self, features: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class MonitorHyper:
    iterations: int = 400
    learning_rate: float = 0.5
    l2: float = 1e-3
    val_fraction: float = 0.25
    balanced: bool = True
    seed: int = 0


@dataclass(frozen=True)
class MonitorModel:
    weights: np.ndarray
    bias: float
    threshold: float
    mean: np.ndarray
    std: np.ndarray
    metrics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.mean) == len(self.std)):
            raise ValueError("weights and normalization disagree in dimension")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def dim(self) -> int:
        return len(self.weights)

    def logits(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {X.shape[1]}")
        return ((X - self.mean) / self.std) @ self.weights + self.bias

    def score(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(features))

    def save(self, path) -> None:
        Path(path).write_text(dumps_model(self))

    @classmethod
    def load(cls, path) -> "MonitorModel":
        return loads_model(Path(path).read_text())


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _stratified_split(y: np.ndarray, fraction: float, rng: np.random.Generator):
    val = np.zeros(len(y), dtype=bool)
    for cls in (False, True):
        members = np.flatnonzero(y == cls)
        k = int(math.floor(fraction * len(members)))
        if k:
            val[rng.permutation(members)[:k]] = True
    return ~val, val


def train_monitor(X, y, hyper: MonitorHyper | None = None) -> MonitorModel:
    """Full-batch gradient descent on an L2-regularised (optionally class-balanced) log loss.

    The decision threshold maximises F1 on a stratified validation slice, or on
    the training data when the slice would miss a class.
    """
    hyper = hyper or MonitorHyper()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=bool)
    if X.ndim != 2 or len(X) != len(y):
        raise TrainingError("feature matrix and labels disagree")
    if y.all() or not y.any():
        raise TrainingError("training data must contain both classes")
    rng = np.random.default_rng(hyper.seed)
    fit, val = _stratified_split(y, hyper.val_fraction, rng)
    if y[fit].all() or not y[fit].any():
        fit = np.ones(len(y), dtype=bool)
    if not (y[val].any() and not y[val].all()):
        val = fit
    Xf, yf = X[fit], y[fit].astype(float)
    mean = Xf.mean(axis=0)
    std = Xf.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (Xf - mean) / std
    if hyper.balanced:
        pos = yf.mean()
        sw = np.where(yf > 0, 0.5 / pos, 0.5 / (1 - pos))
    else:
        sw = np.ones(len(yf))
    sw = sw / sw.sum()
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(hyper.iterations):
        p = _sigmoid(Z @ w + b)
        r = sw * (p - yf)
        w -= hyper.learning_rate * (Z.T @ r + hyper.l2 * w)
        b -= hyper.learning_rate * r.sum()
    if not (np.isfinite(w).all() and math.isfinite(b)):
        raise TrainingError("gradient descent diverged")
    val_scores = _sigmoid(((X[val] - mean) / std) @ w + b)
    threshold, best = best_f1_threshold(val_scores, y[val])
    threshold = min(max(threshold, 1e-12), 1 - 1e-12)
    metrics = {"val_f1": best}
    if y[val].any() and not y[val].all():
        metrics["val_auc"] = roc_auc(val_scores, y[val])
    return MonitorModel(w, float(b), threshold, mean, std, metrics)


def score_graph(model: Scorer, log: TransactionLog, edge_subset=None, window: int = DEFAULT_WINDOW,
                weights=(1 / 3, 1 / 3, 1 / 3)) -> MetricsReport:
    """Score a subset of ``log``'s edges against their labels; the model is not touched."""
    rows = np.arange(len(log)) if edge_subset is None else np.asarray(edge_subset, dtype=np.int64)
    if len(rows) == 0:
        raise MetricsError("edge subset is empty")
    scores = model.score(feature_matrix(log, window, rows))
    return compute_metrics(scores, log.is_laundering[rows], model.threshold, weights)


# ---------------------------------------------------------------------------------
# flat text format
#
#   amlsynth-monitor 1
#   dim <d>
#   mean <d floats>
#   std <d floats>
#   weights <d floats>
#   bias <float>
#   threshold <float>


def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_model(model: MonitorModel) -> str:
    lines = [
        "amlsynth-monitor 1",
        f"dim {model.dim}",
        f"mean {_floats(model.mean)}",
        f"std {_floats(model.std)}",
        f"weights {_floats(model.weights)}",
        f"bias {model.bias!r}",
        f"threshold {model.threshold!r}",
    ]
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> MonitorModel:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != ["amlsynth-monitor", "1"]:
        raise ValueError("not a monitor file")
    fields = {ln[0]: ln[1:] for ln in lines[1:]}
    try:
        dim = int(fields["dim"][0])
        vec = {k: np.array([float(x) for x in fields[k]]) for k in ("mean", "std", "weights")}
        bias = float(fields["bias"][0])
        threshold = float(fields["threshold"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"malformed monitor file: {exc}") from exc
    if any(len(v) != dim for v in vec.values()):
        raise ValueError("vector lengths do not match dim")
    return MonitorModel(vec["weights"], bias, threshold, vec["mean"], vec["std"])


def labeled_features(logs: Sequence[TransactionLog], window: int = DEFAULT_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature matrices and labels from several logs."""
    X = [feature_matrix(lg, window) for lg in logs]
    y = [lg.is_laundering for lg in logs]
    return np.vstack(X), np.concatenate(y)
