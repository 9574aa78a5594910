"""Placing illicit clusters into a backbone log as intact, labelled subgraphs.

A cluster is accepted only as a whole.  Its roles map one-to-one onto existing
accounts whose recent behaviour fits the role's ranges, and its relative times
are shifted (never rescaled) into the horizon so that no host ends up far
busier in any clock hour than it has ever been.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .anomaly import IllicitCluster, RoleNode
from .model import PAYMENT_FORMATS, SECONDS_PER_DAY, SECONDS_PER_HOUR, TransactionLog
from .rng import Streams

ACTIVITY_WINDOW_DAYS = 30
BURST_FACTOR = 3.0
REASONS = ("structure", "profile", "temporal", "none")


@dataclass(frozen=True)
class RoleAssignment:
    mapping: tuple            # ((role_id, AccountRef), ...) in cluster role order
    time_anchor: int | None = None

    def __post_init__(self):
        refs = [ref for _, ref in self.mapping]
        if len(set(refs)) != len(refs):
            raise ValueError("role assignment must be injective")

    def as_dict(self) -> dict:
        return dict(self.mapping)

    def with_anchor(self, anchor: int) -> "RoleAssignment":
        return RoleAssignment(self.mapping, int(anchor))


@dataclass(frozen=True)
class EmbeddingReport:
    cluster_id: str
    accepted: bool
    rejection_reason: str
    edges_added: int

    def as_row(self) -> dict:
        return {"cluster_id": self.cluster_id, "accepted": int(self.accepted),
                "rejection_reason": self.rejection_reason, "edges_added": self.edges_added}


def write_reports(reports: Sequence[EmbeddingReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cluster_id", "accepted", "rejection_reason", "edges_added"],
                           lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.as_row())


# ---------------------------------------------------------------------------------
# host statistics


class HostStats:
    """Per-account activity measured on a log.

    ``rate`` is incident transactions per day over the trailing window that
    ends at the horizon, ``scale`` the median amount of those transactions and
    ``hourly_max`` the busiest clock hour the account ever had.  Hourly counts
    are kept per (account, hour) so a proposed insertion can be checked.
    """

    def __init__(self, log: TransactionLog, window_days: int = ACTIVITY_WINDOW_DAYS):
        n_acc = len(log.accounts)
        self.log_accounts = log.accounts
        self.origin = log.origin
        self.horizon_end = log.horizon_end
        days = min(window_days, log.n_days)
        self.window_start = log.horizon_end - days * SECONDS_PER_DAY
        self.window_days = days
        acc = np.concatenate([log.src, log.dst]).astype(np.int64)
        ts = np.concatenate([log.timestamp, log.timestamp])
        amt = np.concatenate([log.amount_paid, log.amount_paid])
        recent = ts >= self.window_start
        self.count = np.bincount(acc[recent], minlength=n_acc).astype(float)
        self.rate = self.count / days
        self.scale = np.zeros(n_acc)
        if recent.any():
            a, v = acc[recent], amt[recent]
            order = np.lexsort((v, a))
            a, v = a[order], v[order]
            starts = np.searchsorted(a, np.arange(n_acc), side="left")
            ends = np.searchsorted(a, np.arange(n_acc), side="right")
            has = ends > starts
            lo = starts + (ends - starts - 1) // 2
            hi = starts + (ends - starts) // 2
            self.scale[has] = 0.5 * (v[lo[has]] + v[hi[has]])
        hour = (ts - log.origin) // SECONDS_PER_HOUR
        keys, counts = np.unique(acc * (1 << 24) + hour, return_counts=True) if len(acc) else (np.zeros(0, np.int64), np.zeros(0, np.int64))
        self.hour_counts = {int(k): int(c) for k, c in zip(keys, counts)}
        self.hourly_max = np.zeros(n_acc, dtype=np.int64)
        if len(keys):
            np.maximum.at(self.hourly_max, keys >> 24, counts)

    def profile_mask(self, profiles: Mapping) -> np.ndarray:
        if getattr(self, "_mask_for", None) is not profiles:
            self._mask = np.array([ref in profiles for ref in self.log_accounts], dtype=bool)
            self._mask_for = profiles
        return self._mask

    def hour_count(self, account: int, hour: int) -> int:
        return self.hour_counts.get(account * (1 << 24) + hour, 0)

    def burst_cap(self, account: int, factor: float = BURST_FACTOR) -> float:
        return factor * max(int(self.hourly_max[account]), 1)

    def fits(self, role: RoleNode, account: int) -> bool:
        return (role.activity_range[0] <= self.rate[account] <= role.activity_range[1]
                and role.amount_range[0] <= self.scale[account] <= role.amount_range[1])

    def candidates(self, role: RoleNode) -> np.ndarray:
        lo_a, hi_a = role.activity_range
        lo_m, hi_m = role.amount_range
        ok = (self.rate >= lo_a) & (self.rate <= hi_a) & (self.scale >= lo_m) & (self.scale <= hi_m)
        return np.flatnonzero(ok)

    def record(self, account: int, ts: int) -> None:
        """Account for one inserted transaction touching ``account`` at time ``ts``."""
        key = account * (1 << 24) + (ts - self.origin) // SECONDS_PER_HOUR
        c = self.hour_counts.get(key, 0) + 1
        self.hour_counts[key] = c
        if c > self.hourly_max[account]:
            self.hourly_max[account] = c
        if ts >= self.window_start:
            self.count[account] += 1
            self.rate[account] = self.count[account] / self.window_days


# ---------------------------------------------------------------------------------
# operations


def find_role_hosts(cluster: IllicitCluster, log: TransactionLog, profiles: Mapping | None = None,
                    max_assignments: int = 8, rng: np.random.Generator | None = None,
                    stats: HostStats | None = None) -> list[RoleAssignment]:
    """Up to ``max_assignments`` distinct injective role-to-account maps.

    Roles with the fewest admissible accounts are placed first; each is given
    a random still-free candidate.  When ``profiles`` is given, only accounts
    that have a profile are considered.
    """
    if len(log) == 0:
        raise ValueError("cannot host roles in an empty log")
    stats = stats or HostStats(log)
    rng = rng if rng is not None else np.random.default_rng(0)
    pools = {}
    mask = None
    if profiles is not None:
        mask = stats.profile_mask(profiles)
    for role in cluster.nodes:
        cand = stats.candidates(role)
        if mask is not None:
            cand = cand[mask[cand]]
        pools[role.role_id] = cand
    order = sorted(range(cluster.n_nodes), key=lambda k: (len(pools[cluster.nodes[k].role_id]), k))
    if any(len(pools[cluster.nodes[k].role_id]) == 0 for k in order):
        return []
    found, seen = [], set()
    for _ in range(max_assignments * 4):
        if len(found) >= max_assignments:
            break
        used: set[int] = set()
        chosen: dict[str, int] = {}
        for k in order:
            rid = cluster.nodes[k].role_id
            pool = pools[rid]
            pick = None
            for j in rng.integers(0, len(pool), size=min(len(pool), 64)):
                if int(pool[j]) not in used:
                    pick = int(pool[j])
                    break
            if pick is None:
                free = [int(a) for a in pool if int(a) not in used]
                if not free:
                    break
                pick = free[int(rng.integers(len(free)))]
            used.add(pick)
            chosen[rid] = pick
        if len(chosen) < cluster.n_nodes:
            continue
        key = tuple(chosen[r] for r in cluster.role_ids)
        if key in seen:
            continue
        seen.add(key)
        found.append(RoleAssignment(tuple((r, log.accounts[chosen[r]]) for r in cluster.role_ids)))
    return found


def _touches(cluster: IllicitCluster, mapping: dict, log: TransactionLog, anchor: int) -> list[tuple[int, int]]:
    out = []
    for e in cluster.edges:
        t = anchor + e.rel_time
        out.append((log.account_index[mapping[e.src]], t))
        out.append((log.account_index[mapping[e.dst]], t))
    return out


def _temporal_ok(cluster: IllicitCluster, mapping: dict, log: TransactionLog, anchor: int,
                 stats: HostStats, factor: float) -> bool:
    if not cluster.edges:
        return True
    rel = [e.rel_time for e in cluster.edges]
    if anchor + min(rel) < log.origin or anchor + max(rel) >= log.horizon_end:
        return False
    extra: dict[tuple[int, int], int] = {}
    for acc, t in _touches(cluster, mapping, log, anchor):
        key = (acc, (t - log.origin) // SECONDS_PER_HOUR)
        extra[key] = extra.get(key, 0) + 1
    for (acc, hour), n in extra.items():
        if stats.hour_count(acc, hour) + n > stats.burst_cap(acc, factor):
            return False
    return True


def find_time_window(cluster: IllicitCluster, assignment: RoleAssignment, log: TransactionLog,
                     rng: np.random.Generator | None = None, burst_factor: float = BURST_FACTOR,
                     max_tries: int = 64, stats: HostStats | None = None) -> int | None:
    """An anchor placing every edge inside the horizon without breaking host burst caps.

    Anchors are tried on an hourly grid: in order from the earliest feasible
    one when ``rng`` is None, otherwise in random order.
    """
    if not cluster.edges:
        return log.origin
    rel = [e.rel_time for e in cluster.edges]
    first = log.origin - min(rel)
    last = log.horizon_end - 1 - max(rel)
    if last < first:
        return None
    stats = stats or HostStats(log)
    mapping = assignment.as_dict()
    if any(ref not in log.account_index for ref in mapping.values()):
        return None
    n_slots = (last - first) // SECONDS_PER_HOUR + 1
    if rng is None:
        slots = np.arange(min(n_slots, max_tries))
    else:
        slots = rng.choice(n_slots, size=min(n_slots, max_tries), replace=False) if n_slots <= 1 << 20 \
            else rng.integers(0, n_slots, size=max_tries)
    for s in slots:
        anchor = int(first + int(s) * SECONDS_PER_HOUR)
        if _temporal_ok(cluster, mapping, log, anchor, stats, burst_factor):
            return anchor
    return None


def _check(cluster: IllicitCluster, assignment: RoleAssignment, anchor: int | None, log: TransactionLog,
           stats: HostStats, burst_factor: float) -> str:
    mapping = assignment.as_dict()
    if set(mapping) != set(cluster.role_ids) or len(set(mapping.values())) != len(mapping):
        return "structure"
    if any(ref not in log.account_index for ref in mapping.values()):
        return "structure"
    for role in cluster.nodes:
        if not stats.fits(role, log.account_index[mapping[role.role_id]]):
            return "profile"
    if anchor is None or not _temporal_ok(cluster, mapping, log, anchor, stats, burst_factor):
        return "temporal"
    return "none"


def _rows(cluster: IllicitCluster, assignment: RoleAssignment, anchor: int, log: TransactionLog) -> dict:
    mapping = assignment.as_dict()
    idx = log.account_index
    return {
        "timestamp": [anchor + e.rel_time for e in cluster.edges],
        "src": [idx[mapping[e.src]] for e in cluster.edges],
        "dst": [idx[mapping[e.dst]] for e in cluster.edges],
        "amount_paid": [e.amount for e in cluster.edges],
        "payment_format": [PAYMENT_FORMATS.index("transfer")] * cluster.n_edges,
        "is_laundering": [True] * cluster.n_edges,
    }


def embed_cluster(cluster: IllicitCluster, assignment: RoleAssignment, anchor: int | None,
                  log: TransactionLog, burst_factor: float = BURST_FACTOR,
                  stats: HostStats | None = None) -> tuple[TransactionLog, EmbeddingReport]:
    """Append the cluster's edges as laundering transactions, or reject and return ``log`` itself."""
    stats = stats or HostStats(log)
    anchor = assignment.time_anchor if anchor is None else anchor
    reason = _check(cluster, assignment, anchor, log, stats, burst_factor)
    if reason != "none":
        return log, EmbeddingReport(cluster.cluster_id, False, reason, 0)
    out = log.append_rows(**_rows(cluster, assignment, anchor, log))
    return out, EmbeddingReport(cluster.cluster_id, True, "none", cluster.n_edges)


def embed_all(clusters: Sequence[IllicitCluster], log: TransactionLog, profiles: Mapping | None,
              target_prevalence: float, seed: int, burst_factor: float = BURST_FACTOR,
              max_assignments: int = 8, tolerance: float = 0.1) -> tuple[TransactionLog, list[EmbeddingReport]]:
    """Embed clusters in order until the laundering share reaches the target.

    A cluster that would overshoot the target by more than ``tolerance``
    (relative) is passed over, without a report, in favour of later, smaller
    ones.  Accepted rows are
    appended in one pass at the end, which gives the same log as appending
    them one cluster at a time.
    """
    if not 0 < target_prevalence <= 0.05:
        raise ValueError("target prevalence must lie in (0, 0.05]")
    if not clusters or len(log) == 0:
        return log, []
    streams = Streams(seed)
    stats = HostStats(log)
    n_rows = len(log)
    n_laundering = int(log.is_laundering.sum())
    pending = {name: [] for name in ("timestamp", "src", "dst", "amount_paid", "payment_format", "is_laundering")}
    reports = []
    for ci, cluster in enumerate(clusters):
        if n_laundering >= target_prevalence * n_rows:
            break
        e = cluster.n_edges
        if n_laundering + e > target_prevalence * (n_rows + e) * (1 + tolerance):
            continue
        rng = streams.get("embed", ci)
        hosts = find_role_hosts(cluster, log, profiles, max_assignments, rng, stats)
        if not hosts:
            reports.append(EmbeddingReport(cluster.cluster_id, False, "profile", 0))
            continue
        accepted = False
        for assignment in hosts:
            anchor = find_time_window(cluster, assignment, log, rng, burst_factor, stats=stats)
            if anchor is None:
                continue
            if _check(cluster, assignment, anchor, log, stats, burst_factor) != "none":
                continue
            rows = _rows(cluster, assignment, anchor, log)
            for k, v in rows.items():
                pending[k].extend(v)
            for a, t in zip(rows["src"] + rows["dst"], rows["timestamp"] * 2):
                stats.record(a, t)
            n_rows += e
            n_laundering += e
            reports.append(EmbeddingReport(cluster.cluster_id, True, "none", e))
            accepted = True
            break
        if not accepted:
            reports.append(EmbeddingReport(cluster.cluster_id, False, "temporal", 0))
    if pending["timestamp"]:
        log = log.append_rows(**pending)
    return log, reports
