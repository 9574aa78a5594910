"""Graph invariants of daily projections and heavy-tail diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import erfc, log_ndtr

from .model import TransactionLog

TAIL_VARIABLES = ("degree_unique", "degree_tx_count", "strength", "amount")
XMIN_MODES = ("fixed_90", "fixed_95", "auto")
ALPHA_RANGE = (1.0, 3.0)


class FitError(ValueError):
    pass


class DiagnosticError(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------------
# daily projections


@dataclass
class UndirectedGraph:
    """Simple undirected graph: ``nodes`` are account indices, ``edges`` local pairs u < v."""

    nodes: np.ndarray
    edges: np.ndarray

    @classmethod
    def from_edges(cls, pairs, nodes=None) -> "UndirectedGraph":
        """Projection of arbitrary (possibly repeated, directed) pairs; self-loops dropped."""
        pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if nodes is None:
            nodes = np.unique(pairs) if len(pairs) else np.zeros(0, dtype=np.int64)
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.searchsorted(nodes, pairs)
        lo, hi = np.minimum(local[:, 0], local[:, 1]), np.maximum(local[:, 0], local[:, 1])
        keep = lo != hi
        if keep.any():
            edges = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
        else:
            edges = np.zeros((0, 2), dtype=np.int64)
        return cls(nodes=nodes, edges=edges)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def adjacency(self) -> sparse.csr_matrix:
        n = self.n_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(u))
        return sparse.csr_matrix((data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))


def daily_projection(log: TransactionLog, day: int) -> UndirectedGraph:
    """Undirected simple graph of one calendar day (relative to the log origin)."""
    lo = log.origin + day * 86400
    a, b = np.searchsorted(log.timestamp, [lo, lo + 86400], side="left")
    if not log.is_time_sorted():
        mask = (log.timestamp >= lo) & (log.timestamp < lo + 86400)
        src, dst = log.src[mask], log.dst[mask]
    else:
        src, dst = log.src[a:b], log.dst[a:b]
    return UndirectedGraph.from_edges(np.stack([src, dst], axis=1))


def project_pairs(pairs) -> UndirectedGraph:
    return UndirectedGraph.from_edges(pairs)


# ---------------------------------------------------------------------------------
# invariants


@dataclass
class DailyInvariants:
    day: int
    n_nodes: int
    n_edges: int
    gcc_ratio: float
    n_components: int
    max_kcore: int
    max_core_fraction: float
    assortativity: float | None
    transitivity: float

    @property
    def assortativity_defined(self) -> bool:
        return self.assortativity is not None


def core_numbers(graph: UndirectedGraph) -> np.ndarray:
    """Core number of every node by iterative peeling."""
    n = graph.n_nodes
    core = np.zeros(n, dtype=np.int64)
    if graph.n_edges == 0:
        return core
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    deg = graph.degrees().astype(np.int64)
    alive = np.ones(n, dtype=bool)
    edge_alive = np.ones(len(u), dtype=bool)
    k = 0
    while alive.any():
        k += 1
        while True:
            peel = alive & (deg < k)
            if not peel.any():
                break
            core[peel] = k - 1
            alive[peel] = False
            dead_edges = edge_alive & (peel[u] | peel[v])
            edge_alive &= ~dead_edges
            du, dv = u[dead_edges], v[dead_edges]
            np.subtract.at(deg, du, 1)
            np.subtract.at(deg, dv, 1)
    return core


def degree_assortativity(graph: UndirectedGraph) -> float | None:
    """Pearson correlation of endpoint degrees over edges; ``None`` when undefined."""
    if graph.n_edges == 0:
        return None
    deg = graph.degrees().astype(float)
    du, dv = deg[graph.edges[:, 0]], deg[graph.edges[:, 1]]
    x = np.concatenate([du, dv])
    y = np.concatenate([dv, du])
    xc = x - x.mean()
    var = float(np.dot(xc, xc))
    if var <= 1e-12 * max(1.0, float(np.dot(x, x))):
        return None
    return float(np.dot(xc, y - y.mean()) / var)


def triangle_count(graph: UndirectedGraph) -> int:
    if graph.n_edges < 3:
        return 0
    adj = graph.adjacency()
    paths2 = adj @ adj
    return int(round(paths2.multiply(adj).sum() / 6.0))


def transitivity(graph: UndirectedGraph) -> float:
    deg = graph.degrees().astype(np.int64)
    triples = int((deg * (deg - 1) // 2).sum())
    if triples == 0:
        return 0.0
    return 3.0 * triangle_count(graph) / triples


def graph_invariants(graph: UndirectedGraph, day: int = 0) -> DailyInvariants:
    n = graph.n_nodes
    if n == 0:
        return DailyInvariants(day, 0, 0, 0.0, 0, 0, 0.0, None, 0.0)
    n_comp, labels = connected_components(graph.adjacency(), directed=False)
    largest = int(np.bincount(labels).max())
    core = core_numbers(graph)
    kmax = int(core.max())
    return DailyInvariants(
        day=day,
        n_nodes=n,
        n_edges=graph.n_edges,
        gcc_ratio=largest / n,
        n_components=int(n_comp),
        max_kcore=kmax,
        max_core_fraction=float((core == kmax).sum()) / n,
        assortativity=degree_assortativity(graph),
        transitivity=transitivity(graph),
    )


# ---------------------------------------------------------------------------------
# tail variables


@dataclass
class TailSamples:
    variable: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size and not np.all(self.values > 0):
            raise ValueError("tail samples must be positive")


def compute_tail_variables(log: TransactionLog) -> dict[str, TailSamples]:
    """Per-account aggregates over the whole log plus per-transaction amounts."""
    if len(log) == 0:
        raise ValueError("log is empty")
    n = len(log.accounts)
    src, dst = log.src.astype(np.int64), log.dst.astype(np.int64)
    amount = log.amount_paid
    tx_count = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
    strength = np.bincount(src, weights=amount, minlength=n) + np.bincount(dst, weights=amount, minlength=n)
    # distinct counterparties, ignoring direction
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    pairs = np.unique(lo * n + hi)
    a, b = pairs // n, pairs % n
    unique_deg = np.bincount(a, minlength=n) + np.bincount(b, minlength=n)
    active = tx_count > 0
    out = {
        "degree_unique": unique_deg[active].astype(float),
        "degree_tx_count": tx_count[active].astype(float),
        "strength": strength[active],
        "amount": amount.astype(float),
    }
    return {k: TailSamples(k, v[v > 0]) for k, v in out.items()}


# ---------------------------------------------------------------------------------
# power-law fitting


@dataclass
class TailFitReport:
    variable: str
    xmin_mode: str
    tail_pct: float | None
    x_min: float
    n: int
    n_tail: int
    alpha: float
    alpha_mle: float
    ks_D: float
    R: float | None
    p: float | None
    boundary_flag: bool

    @property
    def fitted(self) -> bool:
        return not math.isnan(self.alpha)

    def as_row(self, dataset: str = "generated") -> dict:
        return {
            "dataset": dataset, "distribution": self.variable,
            "xmin_mode": "auto" if self.xmin_mode == "auto" else "fixed_percentile",
            "tail_pct": "" if self.tail_pct is None else f"{self.tail_pct:g}",
            "x_min": _fmt(self.x_min, ".2f"), "n": self.n, "n_tail": self.n_tail,
            "alpha": _fmt(self.alpha, ".4f"), "alpha_mle": _fmt(self.alpha_mle, ".4f"),
            "boundary": int(self.boundary_flag), "D": _fmt(self.ks_D, ".6f"),
            "R": "" if self.R is None else f"{self.R:.3e}",
            "p": "" if self.p is None else f"{self.p:.3e}",
        }


def _fmt(x: float, spec: str) -> str:
    return "" if math.isnan(x) else format(x, spec)


TAIL_COLUMNS = ("dataset", "distribution", "xmin_mode", "tail_pct", "x_min", "n", "n_tail",
                "alpha", "alpha_mle", "boundary", "D", "R", "p")


def alpha_mle(tail: np.ndarray, x_min: float) -> float:
    """Continuous power-law MLE ``1 + n / sum(ln(x / x_min))``."""
    s = float(np.sum(np.log(tail / x_min)))
    if s <= 0:
        raise FitError("tail has no spread above x_min")
    return 1.0 + len(tail) / s


def _clamp_alpha(alpha: float) -> tuple[float, bool]:
    lo, hi = ALPHA_RANGE
    if alpha < lo:
        return lo, True
    if alpha > hi:
        return hi, True
    return alpha, False


def _ks_sorted(tail_sorted: np.ndarray, alpha: float, x_min: float, log_tail=None) -> float:
    n = len(tail_sorted)
    if log_tail is None:
        log_tail = np.log(tail_sorted)
    cdf = 1.0 - np.exp((1.0 - alpha) * (log_tail - math.log(x_min)))
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - cdf), np.max(cdf - lower)))


def ks_distance(samples, alpha: float, x_min: float) -> float:
    """Sup-distance between the tail's empirical CDF and the power-law CDF."""
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    values = samples.values if isinstance(samples, TailSamples) else np.asarray(samples, dtype=float)
    tail = np.sort(values[values >= x_min])
    if len(tail) == 0:
        raise ValueError("no samples at or above x_min")
    return _ks_sorted(tail, alpha, x_min)


def _scan(xs: np.ndarray, logs: np.ndarray, cand_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """KS distance and clamped alpha for each candidate start index of the sorted sample."""
    n = len(xs)
    suffix = np.concatenate([np.cumsum(logs[::-1])[::-1], [0.0]])
    ranks = np.arange(1, n + 1, dtype=float)
    buf = np.empty(n)
    D = np.empty(len(cand_idx))
    A = np.empty(len(cand_idx))
    for k, j in enumerate(cand_idx):
        n_tail = n - j
        s = suffix[j] - n_tail * logs[j]
        if s <= 0:
            D[k], A[k] = np.inf, np.nan
            continue
        a, _ = _clamp_alpha(1.0 + n_tail / s)
        A[k] = a
        # gap = cdf - i/n_tail; D = max(max(-gap), max(gap) + 1/n_tail)
        gap = buf[:n_tail]
        np.subtract(logs[j:], logs[j], out=gap)
        gap *= 1.0 - a
        np.exp(gap, out=gap)
        np.subtract(1.0, gap, out=gap)
        gap -= ranks[:n_tail] / n_tail
        D[k] = max(-gap.min(), gap.max() + 1.0 / n_tail)
    return D, A


def select_xmin(values: np.ndarray, min_tail: int = 10, max_candidates: int = 500) -> float:
    """Candidate x_min minimising the KS distance.

    Candidates are the distinct sample values leaving at least ``min_tail``
    points in the tail.  Above ``max_candidates`` distinct values the scan is
    coarse-to-fine: quantile-spaced candidates first, then the distinct
    values between the neighbours of the coarse winner.
    """
    xs = np.sort(np.asarray(values, dtype=float))
    n = len(xs)
    if n < min_tail:
        raise FitError(f"need at least {min_tail} samples, have {n}")
    logs = np.log(xs)
    # first index of every distinct value
    starts = np.flatnonzero(np.concatenate([[True], xs[1:] != xs[:-1]]))
    starts = starts[n - starts >= min_tail]
    if len(starts) == 0:
        raise FitError("no x_min candidate leaves enough tail samples")
    lo, hi = 0, len(starts)
    while True:
        span = hi - lo
        if span <= max_candidates:
            pos = np.arange(lo, hi)
        else:
            pos = np.unique(np.linspace(lo, hi - 1, max_candidates).round().astype(np.int64))
        D, _ = _scan(xs, logs, starts[pos])
        best = int(np.argmin(D))
        if span <= max_candidates:
            return float(xs[starts[pos[best]]])
        new_lo = pos[best - 1] + 1 if best > 0 else lo
        new_hi = pos[best + 1] if best + 1 < len(pos) else hi
        if new_hi - new_lo >= span:
            return float(xs[starts[pos[best]]])
        # keep the coarse winner in the refined range
        lo, hi = min(new_lo, pos[best]), max(new_hi, pos[best] + 1)


def _parse_mode(mode) -> tuple[str, float | None]:
    if mode == "auto":
        return "auto", None
    if isinstance(mode, (int, float)):
        return f"fixed_{mode:g}", float(mode)
    if isinstance(mode, str) and mode.startswith("fixed_"):
        return mode, float(mode.split("_", 1)[1])
    raise ValueError(f"unknown x_min mode {mode!r}")


def fit_power_law(samples, mode="auto", min_tail: int = 10, max_candidates: int = 500,
                  compare: bool = True) -> TailFitReport:
    """Power-law tail fit with the x_min chosen by ``mode``.

    ``mode`` is ``"auto"`` (KS-minimising x_min), ``"fixed_90"``/``"fixed_95"``
    or a percentile number.  The reported alpha is clamped to [1, 3] with
    ``boundary_flag`` set when clamping bites; ``alpha_mle`` keeps the raw value.
    """
    if isinstance(samples, TailSamples):
        variable, values = samples.variable, samples.values
    else:
        variable, values = "values", np.asarray(samples, dtype=float)
    values = values[values > 0]
    name, pct = _parse_mode(mode)
    if pct is None:
        x_min = select_xmin(values, min_tail=min_tail, max_candidates=max_candidates)
    else:
        if len(values) == 0:
            raise FitError("no samples")
        x_min = float(np.percentile(values, pct))
    tail = np.sort(values[values >= x_min])
    if len(tail) < min_tail:
        raise FitError(f"only {len(tail)} samples at or above x_min={x_min}")
    raw = alpha_mle(tail, x_min)
    alpha, clamped = _clamp_alpha(raw)
    D = _ks_sorted(tail, alpha, x_min) if alpha > 1 else 1.0
    R = p = None
    if compare and len(tail) >= 30 and alpha > 1:
        try:
            R, p = compare_lognormal(tail, x_min, alpha=alpha)
        except DiagnosticError:
            R = p = None
    return TailFitReport(variable=variable, xmin_mode=name, tail_pct=pct, x_min=x_min,
                         n=len(values), n_tail=len(tail), alpha=alpha, alpha_mle=raw,
                         ks_D=D, R=R, p=p, boundary_flag=clamped)


# ---------------------------------------------------------------------------------
# power law vs lognormal


def _powerlaw_loglik(tail: np.ndarray, x_min: float, alpha: float) -> np.ndarray:
    return math.log((alpha - 1.0) / x_min) - alpha * np.log(tail / x_min)


def _lognormal_loglik(log_tail: np.ndarray, log_xmin: float, mu: float, sigma: float) -> np.ndarray:
    z = (log_tail - mu) / sigma
    return (-log_tail - math.log(sigma) - 0.5 * math.log(2 * math.pi) - 0.5 * z * z
            - log_ndtr(-(log_xmin - mu) / sigma))


def fit_truncated_lognormal(tail: np.ndarray, x_min: float) -> tuple[float, float]:
    """MLE (mu, sigma) of a lognormal truncated to ``x >= x_min``."""
    log_tail = np.log(tail)
    log_xmin = math.log(x_min)
    m0, s0 = float(log_tail.mean()), max(float(log_tail.std()), 1e-2)

    def nll(theta):
        mu, log_s = theta
        return -float(np.sum(_lognormal_loglik(log_tail, log_xmin, mu, math.exp(log_s))))

    bounds = [(m0 - 60.0 * s0 - 20.0, float(log_tail.max()) + 10.0), (math.log(1e-3), math.log(50.0))]
    best = None
    for start in ((m0, math.log(s0)), (log_xmin, math.log(2 * s0)), (m0 - 5 * s0, math.log(3 * s0))):
        res = optimize.minimize(nll, np.array(start), method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise DiagnosticError("lognormal fit did not converge")
    return float(best.x[0]), float(math.exp(best.x[1]))


def compare_lognormal(samples, x_min: float, alpha: float | None = None) -> tuple[float, float]:
    """Log-likelihood ratio R (power law minus lognormal) and its Vuong p-value.

    R < 0 favours the lognormal.
    """
    values = samples.values if isinstance(samples, TailSamples) else np.asarray(samples, dtype=float)
    tail = values[values >= x_min]
    n = len(tail)
    if n < 30:
        raise FitError(f"need at least 30 tail samples, have {n}")
    if alpha is None:
        alpha = alpha_mle(tail, x_min)
    try:
        mu, sigma = fit_truncated_lognormal(tail, x_min)
    except DiagnosticError as exc:
        exc.partial = {"alpha": alpha, "n_tail": n}
        raise
    diff = _powerlaw_loglik(tail, x_min, alpha) - _lognormal_loglik(np.log(tail), math.log(x_min), mu, sigma)
    if not np.all(np.isfinite(diff)):
        raise DiagnosticError("non-finite log-likelihood", partial={"alpha": alpha, "mu": mu, "sigma": sigma})
    R = float(diff.sum())
    sd = float(diff.std())
    if sd == 0:
        return R, 1.0
    p = float(erfc(abs(R) / (math.sqrt(2.0 * n) * sd)))
    return R, p


# ---------------------------------------------------------------------------------
# report


_DAILY_FIELDS = ("gcc_ratio", "n_components", "max_kcore", "max_core_fraction", "assortativity", "transitivity")


@dataclass
class FidelityReport:
    daily: list
    summary: dict
    tails: list = field(default_factory=list)

    def write_csv(self, daily_path, tails_path, dataset: str = "generated") -> None:
        with open(daily_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "n_nodes", "n_edges", *_DAILY_FIELDS])
            for d in self.daily:
                w.writerow([d.day, d.n_nodes, d.n_edges, f"{d.gcc_ratio:.6f}", d.n_components, d.max_kcore,
                            f"{d.max_core_fraction:.6f}",
                            "" if d.assortativity is None else f"{d.assortativity:.6f}",
                            f"{d.transitivity:.6f}"])
            for stat in ("mean", "std"):
                w.writerow([stat, "", "", *[("" if self.summary[k][stat] is None else f"{self.summary[k][stat]:.6f}")
                                            for k in _DAILY_FIELDS]])
        with open(tails_path, "w", newline="") as fh:
            rows = [t.as_row(dataset) for t in self.tails]
            fields = list(TAIL_COLUMNS)
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def n_rows(self) -> int:
        return len(self.daily) + len(self.tails)


def summarize_invariants(daily: list) -> dict:
    """Mean and population std of each invariant over days with activity."""
    out = {}
    active = [d for d in daily if d.n_nodes > 0]
    for name in _DAILY_FIELDS:
        vals = [getattr(d, name) for d in active]
        vals = [v for v in vals if v is not None]
        if vals:
            arr = np.asarray(vals, dtype=float)
            out[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
        else:
            out[name] = {"mean": None, "std": None}
    return out


def daily_invariants(log: TransactionLog) -> list[DailyInvariants]:
    return [graph_invariants(daily_projection(log, d), day=d) for d in range(log.n_days)]


def unfitted_report(samples: TailSamples, mode) -> TailFitReport:
    """Placeholder row for a (variable, mode) pair whose tail is too thin to fit."""
    name, pct = _parse_mode(mode)
    values = samples.values
    x_min = float(np.percentile(values, pct)) if pct is not None and len(values) else math.nan
    n_tail = int(np.count_nonzero(values >= x_min)) if not math.isnan(x_min) else 0
    return TailFitReport(variable=samples.variable, xmin_mode=name, tail_pct=pct, x_min=x_min,
                         n=len(values), n_tail=n_tail, alpha=math.nan, alpha_mle=math.nan,
                         ks_D=math.nan, R=None, p=None, boundary_flag=False)


def tail_reports(log: TransactionLog, modes=XMIN_MODES, max_candidates: int = 500) -> list[TailFitReport]:
    """One fit per (variable, mode); pairs that cannot be fitted get an unfitted row."""
    samples = compute_tail_variables(log)
    out = []
    for var in TAIL_VARIABLES:
        for mode in modes:
            try:
                out.append(fit_power_law(samples[var], mode, max_candidates=max_candidates))
            except FitError:
                out.append(unfitted_report(samples[var], mode))
    return out


def fidelity_report(log: TransactionLog, modes=XMIN_MODES) -> FidelityReport:
    if log.n_days < 1:
        raise ValueError("horizon must cover at least one day")
    daily = daily_invariants(log)
    return FidelityReport(daily=daily, summary=summarize_invariants(daily), tails=tail_reports(log, modes))
