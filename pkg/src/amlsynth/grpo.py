"""Group-relative policy optimisation over cluster edits.

A softmax-linear policy maps a small cluster descriptor to logits over a fixed
grid of edit slots.  Slots are resolved against the current cluster (largest
edges, heaviest senders, most similar role pairs), so one grid serves clusters
of any shape.  Returns are standardised within each group of K trajectories
drawn from the same seed; there is no critic.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anomaly import (
    AccountMerging, AccountSplitting, EditAction, EditBudget, EditConfig, IllicitCluster,
    IntermediaryInjection, TransactionAdjustment, apply_action, similar_pairs,
)
from .model import AccountRef, SECONDS_PER_HOUR, PAYMENT_FORMATS, TransactionLog
from .monitor import DEFAULT_WINDOW, MetricsReport, Scorer, compute_metrics, feature_matrix
from .rng import Streams


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    K: int = 8
    T_max: int = 12
    lambda_mon: float = 1.0
    eps: float = 1e-8
    learning_rate: float = 0.1
    iterations: int = 50
    invalid_penalty: float = -1.0
    invalid_termination_count: int = 3
    temperature: float = 1.0
    budget: EditBudget = field(default_factory=EditBudget)
    edit: EditConfig = field(default_factory=EditConfig)
    keep_variants: int = 32

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("group size K must be >= 2")
        if self.T_max < 0 or self.iterations < 0:
            raise ValueError("T_max and iterations must be >= 0")
        if self.lambda_mon < 0 or self.eps <= 0 or self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("lambda_mon >= 0, eps > 0, learning_rate > 0, temperature > 0 required")
        if self.invalid_termination_count < 1:
            raise ValueError("invalid_termination_count must be >= 1")


# ---------------------------------------------------------------------------------
# action grid


@dataclass(frozen=True)
class ActionSlot:
    kind: str       # inject | split | amount | time | merge
    slot: int
    param: float = 0.0


def _build_grid() -> tuple[ActionSlot, ...]:
    grid = []
    for hops in (1, 2, 3):
        grid += [ActionSlot("inject", s, hops) for s in range(3)]
    for k in (2, 3, 4):
        grid += [ActionSlot("split", s, k) for s in range(3)]
    for frac in (-0.20, -0.05, -0.01, 0.01, 0.05, 0.20):
        grid += [ActionSlot("amount", s, frac) for s in range(3)]
    for hours in (-24, -6, -1, 1, 6, 24):
        grid += [ActionSlot("time", s, hours * SECONDS_PER_HOUR) for s in range(3)]
    grid += [ActionSlot("merge", s) for s in range(3)]
    return tuple(grid)


ACTION_GRID = _build_grid()
N_ACTIONS = len(ACTION_GRID)


def edge_slots(cluster: IllicitCluster, top: int = 3) -> list[int]:
    """Indices of the largest edges, ties broken by position."""
    order = sorted(range(cluster.n_edges), key=lambda k: (-cluster.edges[k].cents, k))
    return order[:top]


def sender_slots(cluster: IllicitCluster, top: int = 3) -> list[str]:
    out_cents: dict[str, int] = {}
    for e in cluster.edges:
        out_cents[e.src] = out_cents.get(e.src, 0) + e.cents
    pos = {r: k for k, r in enumerate(cluster.role_ids)}
    return sorted(out_cents, key=lambda r: (-out_cents[r], pos[r]))[:top]


def resolve_action(index: int, cluster: IllicitCluster) -> EditAction | None:
    """Concrete edit for grid entry ``index``, or None when the slot is empty."""
    a = ACTION_GRID[index]
    if a.kind == "merge":
        pairs = similar_pairs(cluster)
        return AccountMerging(*pairs[a.slot]) if a.slot < len(pairs) else None
    if a.kind == "split":
        roles = sender_slots(cluster)
        return AccountSplitting(roles[a.slot], int(a.param)) if a.slot < len(roles) else None
    edges = edge_slots(cluster)
    if a.slot >= len(edges):
        return None
    k = edges[a.slot]
    if a.kind == "inject":
        return IntermediaryInjection(k, int(a.param))
    if a.kind == "amount":
        return TransactionAdjustment(k, a.param * cluster.edges[k].amount, 0)
    return TransactionAdjustment(k, 0.0, int(a.param))


# ---------------------------------------------------------------------------------
# state descriptor


FEATURE_NAMES = ("bias", "nodes", "edges", "log_total", "depth", "max_fan_in", "max_fan_out", "budget_left")
N_STATE = len(FEATURE_NAMES)


def _depth(cluster: IllicitCluster) -> int:
    """Longest shortest-path distance from any source role (or the first role when there is none)."""
    succ: dict[str, list[str]] = {r: [] for r in cluster.role_ids}
    has_in = set()
    for e in cluster.edges:
        succ[e.src].append(e.dst)
        has_in.add(e.dst)
    starts = [r for r in cluster.role_ids if r not in has_in] or cluster.role_ids[:1]
    best = 0
    for s in starts:
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in succ[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        best = max(best, max(dist.values()))
    return best


def cluster_features(cluster: IllicitCluster, budget: EditBudget) -> np.ndarray:
    fan_in: dict[str, int] = {}
    fan_out: dict[str, int] = {}
    for e in cluster.edges:
        fan_out[e.src] = fan_out.get(e.src, 0) + 1
        fan_in[e.dst] = fan_in.get(e.dst, 0) + 1
    left = budget.remaining(cluster) / budget.max_edits if budget.max_edits else 0.0
    return np.array([
        1.0,
        cluster.n_nodes / 10.0,
        cluster.n_edges / 10.0,
        math.log1p(cluster.total_cents() / 100.0) / 10.0,
        _depth(cluster) / 10.0,
        max(fan_in.values(), default=0) / 10.0,
        max(fan_out.values(), default=0) / 10.0,
        left,
    ])


# ---------------------------------------------------------------------------------
# evaluation context


class EvaluationContext:
    """A fixed benign slice plus one cluster overlaid on fresh accounts.

    Cluster roles become accounts of a bank that never occurs in the context, so
    the context's features (and scores) stay fixed and the composite S moves
    only with the cluster's own edges.
    """

    def __init__(self, monitor: Scorer, context: TransactionLog, anchor: int | None = None,
                 window: int = DEFAULT_WINDOW, weights=(1 / 3, 1 / 3, 1 / 3), bank: str = "overlay"):
        if len(context) == 0:
            raise ValueError("evaluation context is empty")
        self.monitor = monitor
        self.window = window
        self.weights = weights
        self.bank = bank
        self.context_scores = np.asarray(monitor.score(feature_matrix(context, window)), dtype=float)
        self.context_labels = context.is_laundering.copy()
        if anchor is None:
            anchor = int(context.timestamp[len(context) // 2])
        self.anchor = int(anchor)
        self._cache: dict[tuple, MetricsReport] = {}

    def cluster_log(self, cluster: IllicitCluster, anchor: int | None = None) -> TransactionLog:
        anchor = self.anchor if anchor is None else anchor
        roles = cluster.role_ids
        pos = {r: k for k, r in enumerate(roles)}
        order = sorted(range(cluster.n_edges), key=lambda k: (cluster.edges[k].rel_time, k))
        es = [cluster.edges[k] for k in order]
        return TransactionLog(
            [AccountRef(self.bank, r) for r in roles],
            timestamp=[anchor + e.rel_time for e in es],
            src=[pos[e.src] for e in es], dst=[pos[e.dst] for e in es],
            amount_paid=[e.amount for e in es],
            payment_format=[PAYMENT_FORMATS.index("transfer")] * len(es),
            is_laundering=[True] * len(es),
        )

    def cluster_features(self, cluster: IllicitCluster, anchor: int | None = None) -> np.ndarray:
        return feature_matrix(self.cluster_log(cluster, anchor), self.window)

    def evaluate(self, cluster: IllicitCluster) -> MetricsReport:
        key = tuple((e.src, e.dst, e.cents, e.rel_time) for e in cluster.edges)
        hit = self._cache.get(key)
        if hit is None:
            cs = np.asarray(self.monitor.score(self.cluster_features(cluster)), dtype=float)
            scores = np.concatenate([self.context_scores, cs])
            labels = np.concatenate([self.context_labels, np.ones(len(cs), dtype=bool)])
            hit = compute_metrics(scores, labels, self.monitor.threshold, self.weights)
            if len(self._cache) > 200_000:
                self._cache.clear()
            self._cache[key] = hit
        return hit


# ---------------------------------------------------------------------------------
# policy


@dataclass
class Policy:
    theta: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a matrix")
        if not np.isfinite(self.theta).all():
            raise ValueError("theta must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def zeros(cls, n_actions: int = N_ACTIONS, n_features: int = N_STATE, temperature: float = 1.0) -> "Policy":
        return cls(np.zeros((n_actions, n_features)), temperature)

    def copy(self) -> "Policy":
        return Policy(self.theta.copy(), self.temperature)

    def logits(self, phi: np.ndarray) -> np.ndarray:
        return self.theta @ phi / self.temperature

    def probs(self, phi: np.ndarray) -> np.ndarray:
        z = self.logits(phi)
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def log_prob(self, phi: np.ndarray, action: int) -> float:
        z = self.logits(phi)
        m = z.max()
        return float(z[action] - m - math.log(np.exp(z - m).sum()))

    def sample(self, phi: np.ndarray, rng: np.random.Generator) -> int:
        cdf = np.cumsum(self.probs(phi))
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))

    def save(self, path) -> None:
        Path(path).write_text(dumps_policy(self))

    @classmethod
    def load(cls, path) -> "Policy":
        return loads_policy(Path(path).read_text())


def dumps_policy(policy: Policy) -> str:
    a, f = policy.theta.shape
    lines = ["amlsynth-policy 1", f"shape {a} {f}", f"temperature {policy.temperature!r}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in policy.theta]
    return "\n".join(lines) + "\n"


def loads_policy(text: str) -> Policy:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split() != ["amlsynth-policy", "1"]:
        raise ValueError("not a policy file")
    try:
        _, a, f = lines[1].split()
        temperature = float(lines[2].split()[1])
        theta = np.array([[float(x) for x in ln.split()] for ln in lines[3:]])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed policy file: {exc}") from exc
    if theta.shape != (int(a), int(f)):
        raise ValueError("policy matrix does not match declared shape")
    return Policy(theta, temperature)


# ---------------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Step:
    state_digest: str
    features: np.ndarray
    action_index: int
    action: EditAction | None
    reward: float
    applied: bool
    S: float


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    final: IllicitCluster | None = None
    final_S: float = float("nan")
    visited: list = field(default_factory=list, repr=False)   # (S, cluster) after each applied edit

    @property
    def G(self) -> float:
        return sum(s.reward for s in self.steps)

    def __len__(self):
        return len(self.steps)


def step_reward(S_pre: float, S_post: float, valid: bool, cfg: GrpoConfig) -> float:
    if not valid:
        return cfg.invalid_penalty
    return 0.0 + cfg.lambda_mon * (S_pre - S_post)


def _edit_rng(cluster: IllicitCluster, action_index: int) -> np.random.Generator:
    # edits depend only on (state, action) so identical choices give identical clusters
    h = int(hashlib.sha256(f"{cluster.digest()}|{action_index}".encode()).hexdigest()[:16], 16)
    return np.random.default_rng(h)


def sample_trajectories(policy: Policy, cluster: IllicitCluster, evaluator: EvaluationContext,
                        cfg: GrpoConfig, rng: np.random.Generator) -> list[Trajectory]:
    S0 = evaluator.evaluate(cluster).S
    out = []
    for _ in range(cfg.K):
        traj = Trajectory(final=cluster, final_S=S0)
        current, S_pre, misses = cluster, S0, 0
        for _t in range(cfg.T_max):
            if cfg.budget.remaining(current) == 0:
                break
            phi = cluster_features(current, cfg.budget)
            a = policy.sample(phi, rng)
            action = resolve_action(a, current)
            applied = False
            if action is not None:
                nxt, applied = apply_action(current, action, cfg.budget, _edit_rng(current, a), cfg.edit)
            if applied:
                S_post = evaluator.evaluate(nxt).S
                r = step_reward(S_pre, S_post, True, cfg)
                traj.steps.append(Step(current.digest()[:16], phi, a, action, r, True, S_post))
                traj.visited.append((S_post, nxt))
                current, S_pre, misses = nxt, S_post, 0
            else:
                traj.steps.append(Step(current.digest()[:16], phi, a, action, step_reward(S_pre, S_pre, False, cfg),
                                       False, S_pre))
                misses += 1
                if misses >= cfg.invalid_termination_count:
                    break
        traj.final, traj.final_S = current, S_pre
        out.append(traj)
    return out


def group_advantages(returns: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    G = np.asarray(returns, dtype=float)
    if len(G) < 2:
        raise ValueError("a group needs at least two returns")
    if G.min() == G.max():
        # the float mean of equal values can miss them by an ulp, which eps would magnify
        return np.zeros_like(G)
    mu = G.mean()
    sigma = G.std()
    return (G - mu) / (sigma + eps)


def grpo_loss(policy: Policy, trajectories: Sequence[Trajectory], advantages, K: int | None = None) -> float:
    K = K or len(trajectories)
    total = 0.0
    for traj, A in zip(trajectories, advantages):
        total += A * sum(policy.log_prob(s.features, s.action_index) for s in traj.steps)
    return -total / K


def loss_gradient(policy: Policy, trajectories: Sequence[Trajectory], advantages, K: int | None = None) -> np.ndarray:
    """Analytic gradient of ``grpo_loss`` with respect to theta."""
    K = K or len(trajectories)
    grad = np.zeros_like(policy.theta)
    for traj, A in zip(trajectories, advantages):
        if A == 0:
            continue
        for s in traj.steps:
            g = -policy.probs(s.features)
            g[s.action_index] += 1.0
            grad += A * np.outer(g, s.features)
    return -grad / (K * policy.temperature)


def policy_update(policy: Policy, trajectories: Sequence[Trajectory], advantages, cfg: GrpoConfig) -> Policy:
    if len(trajectories) != len(advantages):
        raise ValueError("one advantage per trajectory is required")
    grad = loss_gradient(policy, trajectories, advantages, cfg.K)
    if not np.isfinite(grad).all():
        raise OptimizationError("non-finite policy gradient")
    return Policy(policy.theta - cfg.learning_rate * grad, policy.temperature)


# ---------------------------------------------------------------------------------
# training loop


@dataclass
class GrpoResult:
    policy: Policy
    hardened: list
    initial_S: list
    hardened_S: list
    variants: list          # per cluster: [(S, cluster)] sorted by S, all <= the seed's S
    log: list               # rows of (iteration, mean_G, mean_S)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_G", "mean_S"])
            for row in self.log:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def run_grpo(clusters: Sequence[IllicitCluster], evaluator: EvaluationContext, cfg: GrpoConfig,
             seed: int, policy: Policy | None = None) -> GrpoResult:
    if not clusters:
        raise ValueError("run_grpo needs at least one seed cluster")
    streams = Streams(seed)
    policy = policy.copy() if policy is not None else Policy.zeros(temperature=cfg.temperature)
    initial = [evaluator.evaluate(c).S for c in clusters]
    best = [(s, c) for s, c in zip(initial, clusters)]
    pools: list[dict] = [{} for _ in clusters]
    log_rows = []
    for it in range(cfg.iterations):
        all_traj, all_adv = [], []
        for ci, cluster in enumerate(clusters):
            group = sample_trajectories(policy, cluster, evaluator, cfg, streams.get("grpo", it, ci))
            all_traj.extend(group)
            all_adv.extend(group_advantages([t.G for t in group], cfg.eps))
            for t in group:
                for S, variant in t.visited:
                    if S < best[ci][0]:
                        best[ci] = (S, variant)
                    if S <= initial[ci]:
                        pools[ci].setdefault(variant.digest(), (S, variant))
        policy = policy_update(policy, all_traj, np.asarray(all_adv), cfg)
        log_rows.append((it, float(np.mean([t.G for t in all_traj])),
                         float(np.mean([t.final_S for t in all_traj]))))
    variants = []
    for pool in pools:
        ranked = sorted(pool.values(), key=lambda sc: (sc[0], sc[1].digest()))
        variants.append(ranked[: cfg.keep_variants])
    return GrpoResult(policy, [c for _, c in best], initial, [s for s, _ in best], variants, log_rows)
