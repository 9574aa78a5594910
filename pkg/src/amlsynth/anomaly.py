"""Illicit clusters and the four edit families that diversify them.

A cluster is a small role graph: roles stand in for accounts and edges carry
an amount (stored in integer cents so flow conservation is exact) and a time
offset in seconds.  Every edit either returns a new, sane cluster or raises
``EditRejected``; ``apply_action`` turns rejections into ``(original, False)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .model import Violation

INF = math.inf
HOUR = 3600
DAY = 86400


class EditRejected(ValueError):
    """An edit was infeasible; the cluster it was applied to is unchanged."""


class SeedFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class RoleNode:
    role_id: str
    activity_range: tuple[float, float] = (0.0, INF)
    amount_range: tuple[float, float] = (0.0, INF)

    def __post_init__(self):
        if not self.role_id or any(c.isspace() for c in self.role_id):
            raise ValueError(f"invalid role id {self.role_id!r}")
        for lo, hi in (self.activity_range, self.amount_range):
            if not (0 <= lo <= hi):
                raise ValueError(f"invalid range ({lo}, {hi}) for role {self.role_id}")

    def hull(self, other: "RoleNode", role_id: str | None = None) -> "RoleNode":
        return RoleNode(
            role_id or self.role_id,
            (min(self.activity_range[0], other.activity_range[0]), max(self.activity_range[1], other.activity_range[1])),
            (min(self.amount_range[0], other.amount_range[0]), max(self.amount_range[1], other.amount_range[1])),
        )


@dataclass(frozen=True)
class ClusterEdge:
    src: str
    dst: str
    cents: int
    rel_time: int

    @property
    def amount(self) -> float:
        return self.cents / 100.0


def edge(src: str, dst: str, amount: float, rel_time: int) -> ClusterEdge:
    """Edge from a currency amount, rounded to cents."""
    return ClusterEdge(src, dst, int(round(amount * 100)), int(rel_time))


@dataclass(frozen=True)
class IllicitCluster:
    nodes: tuple
    edges: tuple
    budget_used: int = 0
    nodes_added: int = 0
    cluster_id: str = "cluster"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def role_ids(self) -> list[str]:
        return [n.role_id for n in self.nodes]

    def role(self, role_id: str) -> RoleNode:
        for n in self.nodes:
            if n.role_id == role_id:
                return n
        raise KeyError(role_id)

    def has_role(self, role_id: str) -> bool:
        return any(n.role_id == role_id for n in self.nodes)

    def out_edges(self, role_id: str) -> list[int]:
        return [k for k, e in enumerate(self.edges) if e.src == role_id]

    def in_edges(self, role_id: str) -> list[int]:
        return [k for k, e in enumerate(self.edges) if e.dst == role_id]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def total_cents(self) -> int:
        return sum(e.cents for e in self.edges)

    def span(self) -> int:
        if not self.edges:
            return 0
        times = [e.rel_time for e in self.edges]
        return max(times) - min(times)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.cluster_id, self.budget_used, self.nodes_added)).encode())
        for n in self.nodes:
            h.update(repr((n.role_id, n.activity_range, n.amount_range)).encode())
        for e in self.edges:
            h.update(repr((e.src, e.dst, e.cents, e.rel_time)).encode())
        return h.hexdigest()

    def fresh_id(self, prefix: str = "m") -> str:
        used = set(self.role_ids)
        k = len(self.nodes)
        while f"{prefix}{k}" in used:
            k += 1
        return f"{prefix}{k}"


@dataclass(frozen=True)
class IntermediaryInjection:
    edge: int
    hops: int


@dataclass(frozen=True)
class AccountMerging:
    role_a: str
    role_b: str


@dataclass(frozen=True)
class AccountSplitting:
    role: str
    k: int


@dataclass(frozen=True)
class TransactionAdjustment:
    edge: int
    d_amount: float
    d_time: int


EditAction = Union[IntermediaryInjection, AccountMerging, AccountSplitting, TransactionAdjustment]


@dataclass(frozen=True)
class EditBudget:
    max_edits: int = 8
    max_new_nodes: int = 12

    def __post_init__(self):
        if self.max_edits < 0 or self.max_new_nodes < 0:
            raise ValueError("budget limits must be non-negative")

    def remaining(self, cluster: IllicitCluster) -> int:
        return max(0, self.max_edits - cluster.budget_used)


@dataclass(frozen=True)
class EditConfig:
    fee: float = 0.0
    max_delay: int = DAY
    split_mode: str = "forward"

    def __post_init__(self):
        if not 0 <= self.fee < 1:
            raise ValueError("fee must lie in [0, 1)")
        if self.max_delay < 1:
            raise ValueError("max_delay must be positive")
        if self.split_mode not in ("forward", "replicate"):
            raise ValueError("split_mode must be 'forward' or 'replicate'")


# ---------------------------------------------------------------------------------
# sanity


def check_sanity(cluster: IllicitCluster) -> list[Violation]:
    """Dangling endpoints, negative amounts, time order, plus structural checks.

    A role with incoming edges may not send before its earliest inflow.
    """
    out: list[Violation] = []
    ids = cluster.role_ids
    known = set(ids)
    if len(known) != len(ids):
        out.append(Violation("DuplicateRole", "role ids are not unique"))
    if not cluster.edges:
        out.append(Violation("EmptyCluster", "cluster has no edges"))
    for k, e in enumerate(cluster.edges):
        for end in (e.src, e.dst):
            if end not in known:
                out.append(Violation("DanglingEndpoint", f"edge {k} references {end}"))
        if e.src == e.dst:
            out.append(Violation("SelfLoop", f"edge {k} on {e.src}"))
        if e.cents < 0:
            out.append(Violation("NegativeAmount", f"edge {k} amount {e.amount}"))
    first_in: dict[str, int] = {}
    for e in cluster.edges:
        if e.dst not in first_in or e.rel_time < first_in[e.dst]:
            first_in[e.dst] = e.rel_time
    flagged = set()
    for e in cluster.edges:
        t0 = first_in.get(e.src)
        if t0 is not None and e.rel_time < t0 and e.src not in flagged:
            flagged.add(e.src)
            out.append(Violation("TimeOrderViolation", e.src))
    if cluster.edges and not _weakly_connected(cluster):
        out.append(Violation("Disconnected", "cluster is not weakly connected"))
    return out


def _weakly_connected(cluster: IllicitCluster) -> bool:
    ids = cluster.role_ids
    if not ids:
        return True
    adj = {r: set() for r in ids}
    for e in cluster.edges:
        if e.src in adj and e.dst in adj:
            adj[e.src].add(e.dst)
            adj[e.dst].add(e.src)
    seen, stack = {ids[0]}, [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


def is_sane(cluster: IllicitCluster) -> bool:
    return not check_sanity(cluster)


# ---------------------------------------------------------------------------------
# edit families


def _charge(cluster: IllicitCluster, budget: EditBudget | None, new_nodes: int) -> tuple[int, int]:
    used, added = cluster.budget_used + 1, cluster.nodes_added + new_nodes
    if budget is not None:
        if used > budget.max_edits:
            raise EditRejected("edit budget exhausted")
        if added > budget.max_new_nodes:
            raise EditRejected("node budget exhausted")
    return used, added


def _arrival_limit(cluster: IllicitCluster, target: str, replaced: set[int]) -> float:
    """Latest time a new inflow may reach ``target`` without breaking its time order."""
    outs = [cluster.edges[k].rel_time for k in cluster.out_edges(target)]
    if not outs:
        return INF
    other_in = [cluster.edges[k].rel_time for k in cluster.in_edges(target) if k not in replaced]
    earliest_out = min(outs)
    if other_in and min(other_in) <= earliest_out:
        return INF
    return earliest_out


def _increasing_times(rng: np.random.Generator, start: int, upper: int, count: int) -> list[int]:
    """``count`` strictly increasing integers in ``(start, upper]``."""
    slack = upper - start - count
    if slack < 0:
        raise EditRejected("no room for strictly increasing times")
    u = np.sort(rng.random(count))
    return [start + i + 1 + int(math.floor(x * (slack + 1))) if slack > 0 else start + i + 1
            for i, x in enumerate(u)]


def _finish(cluster: IllicitCluster, **changes) -> IllicitCluster:
    out = replace(cluster, **changes)
    problems = check_sanity(out)
    if problems:
        raise EditRejected(f"edit breaks sanity: {problems[0].code} {problems[0].detail}")
    return out


def apply_intermediary_injection(cluster: IllicitCluster, edge_index: int, hops: int,
                                 rng: np.random.Generator, budget: EditBudget | None = None,
                                 config: EditConfig | None = None) -> IllicitCluster:
    """Replace ``u -> v`` by a chain through ``hops`` fresh intermediaries."""
    cfg = config or EditConfig()
    if hops < 1:
        raise EditRejected("hops must be at least 1")
    if not 0 <= edge_index < cluster.n_edges:
        raise EditRejected(f"no edge {edge_index}")
    used, added = _charge(cluster, budget, hops)
    e = cluster.edges[edge_index]
    limit = min(e.rel_time + cfg.max_delay, _arrival_limit(cluster, e.dst, {edge_index}))
    # new times lie strictly inside (t, limit)
    times = _increasing_times(rng, e.rel_time, int(limit) - 1, hops + 1)
    u_node, v_node = cluster.role(e.src), cluster.role(e.dst)
    mids, nodes = [], list(cluster.nodes)
    probe = cluster
    for _ in range(hops):
        rid = probe.fresh_id("m")
        nodes.append(u_node.hull(v_node, rid))
        mids.append(rid)
        probe = replace(probe, nodes=tuple(nodes))
    path = [e.src, *mids, e.dst]
    new_edges = []
    for i in range(hops + 1):
        cents = e.cents if cfg.fee == 0 else int(round(e.cents * (1.0 - cfg.fee) ** i))
        new_edges.append(ClusterEdge(path[i], path[i + 1], cents, times[i]))
    edges = list(cluster.edges[:edge_index]) + new_edges + list(cluster.edges[edge_index + 1:])
    return _finish(cluster, nodes=tuple(nodes), edges=tuple(edges), budget_used=used, nodes_added=added)


def apply_account_merging(cluster: IllicitCluster, role_a: str, role_b: str,
                          budget: EditBudget | None = None) -> IllicitCluster:
    """Fold ``role_b`` into ``role_a``; edges between the two are dropped."""
    if role_a == role_b:
        raise EditRejected("cannot merge a role with itself")
    if not (cluster.has_role(role_a) and cluster.has_role(role_b)):
        raise EditRejected("unknown role")
    used, added = _charge(cluster, budget, 0)
    merged = cluster.role(role_a).hull(cluster.role(role_b))
    nodes = tuple(merged if n.role_id == role_a else n for n in cluster.nodes if n.role_id != role_b)
    edges = []
    for e in cluster.edges:
        if {e.src, e.dst} == {role_a, role_b}:
            continue
        src = role_a if e.src == role_b else e.src
        dst = role_a if e.dst == role_b else e.dst
        edges.append(ClusterEdge(src, dst, e.cents, e.rel_time))
    return _finish(cluster, nodes=nodes, edges=tuple(edges), budget_used=used, nodes_added=added)


def _split_cents(rng: np.random.Generator, cents: int, k: int) -> list[int]:
    """``k`` positive integers summing to ``cents`` (a random simplex point)."""
    if cents < k:
        raise EditRejected("amount too small to split")
    w = rng.dirichlet(np.ones(k))
    parts = [1 + int(math.floor(x * (cents - k))) for x in w]
    rest = cents - sum(parts)
    order = np.argsort(-w, kind="stable")
    for j in range(rest):
        parts[int(order[j % k])] += 1
    return parts


def apply_account_splitting(cluster: IllicitCluster, role: str, k: int, rng: np.random.Generator,
                            budget: EditBudget | None = None, config: EditConfig | None = None) -> IllicitCluster:
    """Disperse every out-flow of ``role`` over ``k`` fresh recipients.

    In ``forward`` mode each split recipient passes its share on to the
    original destination, so every replaced flow keeps its total and the
    destination still receives the full amount.  ``replicate`` mode drops
    the forwarding leg: the recipients become sinks.
    """
    cfg = config or EditConfig()
    if k < 2:
        raise EditRejected("k must be at least 2")
    if not cluster.has_role(role):
        raise EditRejected(f"unknown role {role}")
    outs = cluster.out_edges(role)
    if not outs:
        raise EditRejected(f"role {role} has no outgoing edge")
    used, added = _charge(cluster, budget, k)
    base = cluster.role(role)
    nodes, splits = list(cluster.nodes), []
    probe = cluster
    for _ in range(k):
        rid = probe.fresh_id("s")
        nodes.append(replace(base, role_id=rid))
        splits.append(rid)
        probe = replace(probe, nodes=tuple(nodes))
    out_set = set(outs)
    edges = [e for j, e in enumerate(cluster.edges) if j not in out_set]
    for j in outs:
        e = cluster.edges[j]
        parts = _split_cents(rng, e.cents, k)
        for rid, c in zip(splits, parts):
            edges.append(ClusterEdge(role, rid, c, e.rel_time))
        if cfg.split_mode == "forward":
            limit = min(e.rel_time + cfg.max_delay, _arrival_limit(cluster, e.dst, out_set))
            span = int(limit) - e.rel_time
            for rid, c in zip(splits, parts):
                delay = int(rng.integers(0, span + 1)) if span > 0 else 0
                edges.append(ClusterEdge(rid, e.dst, c, e.rel_time + delay))
    return _finish(cluster, nodes=tuple(nodes), edges=tuple(edges), budget_used=used, nodes_added=added)


def apply_transaction_adjustment(cluster: IllicitCluster, edge_index: int, d_amount: float, d_time: int,
                                 budget: EditBudget | None = None) -> IllicitCluster:
    """Shift one edge's amount and time; infeasible shifts are rejected."""
    if not 0 <= edge_index < cluster.n_edges:
        raise EditRejected(f"no edge {edge_index}")
    d_cents = int(round(d_amount * 100))
    if d_cents == 0 and d_time == 0:
        return cluster
    e = cluster.edges[edge_index]
    if e.cents + d_cents < 0:
        raise EditRejected("adjusted amount would be negative")
    used, added = _charge(cluster, budget, 0)
    edges = list(cluster.edges)
    edges[edge_index] = ClusterEdge(e.src, e.dst, e.cents + d_cents, e.rel_time + int(d_time))
    return _finish(cluster, edges=tuple(edges), budget_used=used, nodes_added=added)


def apply_action(cluster: IllicitCluster, action: EditAction, budget: EditBudget | None,
                 rng: np.random.Generator, config: EditConfig | None = None) -> tuple[IllicitCluster, bool]:
    """Dispatch an edit; any rejection yields ``(cluster, False)``."""
    try:
        if isinstance(action, IntermediaryInjection):
            out = apply_intermediary_injection(cluster, action.edge, action.hops, rng, budget, config)
        elif isinstance(action, AccountMerging):
            out = apply_account_merging(cluster, action.role_a, action.role_b, budget)
        elif isinstance(action, AccountSplitting):
            out = apply_account_splitting(cluster, action.role, action.k, rng, budget, config)
        elif isinstance(action, TransactionAdjustment):
            out = apply_transaction_adjustment(cluster, action.edge, action.d_amount, action.d_time, budget)
        else:
            raise TypeError(f"unknown action {action!r}")
    except EditRejected:
        return cluster, False
    return out, True


# ---------------------------------------------------------------------------------
# similarity for merging


def interval_overlap(a: tuple[float, float], b: tuple[float, float], ceiling: float = 1e12) -> float:
    """Jaccard overlap of two closed intervals; open upper ends are clipped at ``ceiling``."""
    a0, a1 = a[0], min(a[1], ceiling)
    b0, b1 = b[0], min(b[1], ceiling)
    lo, hi = max(a0, b0), min(a1, b1)
    if hi < lo:
        return 0.0
    span = max(a1, b1) - min(a0, b0)
    return 1.0 if span == 0 else (hi - lo) / span


def role_similarity(a: RoleNode, b: RoleNode) -> float:
    return 0.5 * (interval_overlap(a.activity_range, b.activity_range)
                  + interval_overlap(a.amount_range, b.amount_range))


def similar_pairs(cluster: IllicitCluster, top: int = 3) -> list[tuple[str, str]]:
    """The ``top`` most similar role pairs, ties broken by role order."""
    nodes = cluster.nodes
    scored = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            scored.append((-role_similarity(nodes[i], nodes[j]), i, j))
    scored.sort()
    return [(nodes[i].role_id, nodes[j].role_id) for _, i, j in scored[:top]]


# ---------------------------------------------------------------------------------
# seed library


_DEFAULT_ACTIVITY = (0.02, 50.0)
_DEFAULT_AMOUNT = (1.0, 1e6)


def _roles(ids: Iterable[str], activity=_DEFAULT_ACTIVITY, amount=_DEFAULT_AMOUNT) -> tuple:
    return tuple(RoleNode(r, activity, amount) for r in ids)


def chain_seed(length: int = 3, amount: float = 9500.0, gap: int = 6 * HOUR, cluster_id: str = "chain") -> IllicitCluster:
    ids = [f"r{i}" for i in range(length + 1)]
    edges = tuple(edge(ids[i], ids[i + 1], amount, i * gap) for i in range(length))
    return IllicitCluster(_roles(ids), edges, cluster_id=cluster_id)


def fan_out_seed(width: int = 4, amount: float = 4000.0, gap: int = 2 * HOUR, cluster_id: str = "fan_out") -> IllicitCluster:
    ids = ["src", "hub"] + [f"d{i}" for i in range(width)]
    edges = [edge("src", "hub", amount * width, 0)]
    edges += [edge("hub", f"d{i}", amount, (i + 1) * gap) for i in range(width)]
    return IllicitCluster(_roles(ids), tuple(edges), cluster_id=cluster_id)


def fan_in_seed(width: int = 4, amount: float = 4000.0, gap: int = 2 * HOUR, cluster_id: str = "fan_in") -> IllicitCluster:
    ids = [f"p{i}" for i in range(width)] + ["hub", "dst"]
    edges = [edge(f"p{i}", "hub", amount, i * gap) for i in range(width)]
    edges.append(edge("hub", "dst", amount * width, width * gap))
    return IllicitCluster(_roles(ids), tuple(edges), cluster_id=cluster_id)


def cycle_seed(length: int = 3, amount: float = 7000.0, gap: int = 8 * HOUR, cluster_id: str = "cycle") -> IllicitCluster:
    ids = ["src"] + [f"c{i}" for i in range(length)]
    edges = [edge("src", "c0", amount, 0)]
    for i in range(length):
        edges.append(edge(f"c{i}", f"c{(i + 1) % length}", amount, (i + 1) * gap))
    return IllicitCluster(_roles(ids), tuple(edges), cluster_id=cluster_id)


def scatter_gather_seed(width: int = 3, amount: float = 3000.0, gap: int = 4 * HOUR,
                        cluster_id: str = "scatter_gather") -> IllicitCluster:
    mids = [f"m{i}" for i in range(width)]
    ids = ["src", *mids, "dst"]
    edges = [edge("src", m, amount, i * gap) for i, m in enumerate(mids)]
    edges += [edge(m, "dst", amount, (width + i) * gap) for i, m in enumerate(mids)]
    return IllicitCluster(_roles(ids), tuple(edges), cluster_id=cluster_id)


SEED_FAMILIES = {
    "chain": chain_seed,
    "fan_out": fan_out_seed,
    "fan_in": fan_in_seed,
    "cycle": cycle_seed,
    "scatter_gather": scatter_gather_seed,
}


def seed_library(n: int, rng: np.random.Generator) -> list[IllicitCluster]:
    """``n`` seed clusters cycling through the families with jittered sizes and amounts."""
    names = list(SEED_FAMILIES)
    out = []
    for i in range(n):
        name = names[i % len(names)]
        size = int(rng.integers(2, 5))
        amount = float(np.round(rng.uniform(2000, 12000), 2))
        gap = int(rng.integers(1, 13)) * HOUR
        kwargs = {"cluster_id": f"{name}_{i}", "amount": amount, "gap": gap}
        if name in ("chain", "cycle"):
            kwargs["length"] = size
        else:
            kwargs["width"] = size
        out.append(SEED_FAMILIES[name](**kwargs))
    return out


# ---------------------------------------------------------------------------------
# seed file format
#
#   # comment
#   cluster <id>
#   role <role_id> <activity_min> <activity_max> <amount_min> <amount_max>
#   edge <from> <to> <amount> <rel_time_seconds>
#   end
#
# "inf" is accepted for an open upper bound.


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def dump_seeds(clusters: Iterable[IllicitCluster]) -> str:
    lines = []
    for c in clusters:
        lines.append(f"cluster {c.cluster_id}")
        for n in c.nodes:
            lines.append(f"role {n.role_id} {_fmt(n.activity_range[0])} {_fmt(n.activity_range[1])} "
                         f"{_fmt(n.amount_range[0])} {_fmt(n.amount_range[1])}")
        for e in c.edges:
            lines.append(f"edge {e.src} {e.dst} {e.cents // 100}.{e.cents % 100:02d} {e.rel_time}"
                         if e.cents >= 0 else f"edge {e.src} {e.dst} {e.amount!r} {e.rel_time}")
        lines.append("end")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_seeds(text: str) -> list[IllicitCluster]:
    clusters, current = [], None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "cluster":
                if current is not None:
                    raise SeedFormatError("cluster opened before previous 'end'", lineno)
                if len(parts) != 2:
                    raise SeedFormatError("expected 'cluster <id>'", lineno)
                current = {"id": parts[1], "roles": [], "edges": []}
            elif kind == "role":
                if current is None or len(parts) != 6:
                    raise SeedFormatError("expected 'role <id> <amin> <amax> <mmin> <mmax>' inside a cluster", lineno)
                lo_a, hi_a, lo_m, hi_m = (float(x) for x in parts[2:])
                current["roles"].append(RoleNode(parts[1], (lo_a, hi_a), (lo_m, hi_m)))
            elif kind == "edge":
                if current is None or len(parts) != 5:
                    raise SeedFormatError("expected 'edge <from> <to> <amount> <rel_time>' inside a cluster", lineno)
                current["edges"].append(edge(parts[1], parts[2], float(parts[3]), int(parts[4])))
            elif kind == "end":
                if current is None:
                    raise SeedFormatError("'end' without 'cluster'", lineno)
                clusters.append(IllicitCluster(tuple(current["roles"]), tuple(current["edges"]),
                                               cluster_id=current["id"]))
                current = None
            else:
                raise SeedFormatError(f"unknown record {kind!r}", lineno)
        except SeedFormatError:
            raise
        except ValueError as exc:
            raise SeedFormatError(str(exc), lineno) from exc
    if current is not None:
        raise SeedFormatError("missing 'end'", len(text.splitlines()))
    return clusters


def load_seeds(path) -> list[IllicitCluster]:
    return parse_seeds(Path(path).read_text())


def save_seeds(clusters: Iterable[IllicitCluster], path) -> None:
    Path(path).write_text(dump_seeds(clusters))
