"""Acceptance criteria 1-10, each reported as one PASS/FAIL line after the run.

Criterion 4 (full scale, roughly an hour of compute) runs only with AMLSYNTH_FULL=1.
"""

import json
import os
import subprocess
import sys
import time
from collections import Counter, defaultdict

import numpy as np
import pytest

from amlsynth.anomaly import (
    AccountMerging, AccountSplitting, EditBudget, IntermediaryInjection, TransactionAdjustment, apply_action,
    check_sanity, seed_library,
)
from amlsynth.backbone import BackboneConfig
from amlsynth.config import AnomalySettings, MonitorSettings, PipelineConfig, full_config
from amlsynth.embedder import RoleAssignment, embed_cluster, find_role_hosts, find_time_window
from amlsynth.fidelity import fit_power_law, graph_invariants, project_pairs
from amlsynth.grpo import GrpoConfig, Policy, Step, Trajectory, group_advantages, grpo_loss, loss_gradient, step_reward
from amlsynth.io import export_csv, file_digest, import_csv
from amlsynth.monitor import average_precision, f1_at, roc_auc
from amlsynth.pipeline import make_splits, run_pipeline, split_sizes, stage_generate, stage_harden
from amlsynth.population import PopulationConfig

from conftest import ACCEPTANCE_LINES, random_log
from test_fidelity import naive_reference
from test_monitor import brute_ap, brute_auc

TITLES = {
    1: "tail-fitter calibration",
    2: "graph invariant oracle",
    3: "desk-scale stylized facts",
    4: "full-scale regression",
    5: "GRPO math",
    6: "hardening direction",
    7: "embedding invariants",
    8: "metrics oracle",
    9: "determinism and I/O",
    10: "edit-engine closure",
}


def record(n: int, checks: dict) -> None:
    """Store the criterion's line, then fail on the first unmet check."""
    ok = all(v for v, _ in checks.values())
    detail = "; ".join(f"{k} {txt}{'' if v else ' (miss)'}" for k, (v, txt) in checks.items())
    ACCEPTANCE_LINES[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}"
    assert ok, ACCEPTANCE_LINES[n]


# ---------------------------------------------------------------------------------


def test_criterion_01_tail_fitter():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2025)
    r5 = fit_power_law((1 - rng.random(100_000)) ** (-1 / 1.5), "auto", compare=False)
    r6 = fit_power_law((1 - rng.random(1_000_000)) ** (-1 / 1.5), "auto", compare=False)
    dt = time.perf_counter() - t0
    record(1, {
        "1e5 error": (abs(r5.alpha - 2.5) < 0.05, f"{abs(r5.alpha - 2.5):.4f}"),
        "1e5 D": (r5.ks_D < 0.01, f"{r5.ks_D:.4f}"),
        "1e6 error": (abs(r6.alpha - 2.5) < 0.02, f"{abs(r6.alpha - 2.5):.4f}"),
        "time": (dt < 10, f"{dt:.1f}s"),
    })


def test_criterion_02_invariant_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(2, 31))
        p = float(rng.uniform(0.03, 0.7))
        pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p] or [(0, 1)]
        inv, ref = graph_invariants(project_pairs(pairs)), naive_reference(pairs)
        exact = all(getattr(inv, k) == ref[k] for k in ("n_components", "max_kcore", "n_nodes", "n_edges"))
        close = all(abs(getattr(inv, k) - ref[k]) <= 1e-9 for k in ("gcc_ratio", "transitivity"))
        a, b = inv.assortativity, ref["assortativity"]
        close &= (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= 1e-9)
        mismatches += not (exact and close)
    dt = time.perf_counter() - t0
    record(2, {"mismatches": (mismatches == 0, f"{mismatches}/50"), "time": (dt < 5, f"{dt:.2f}s")})


DESK_SCRIPT = """
import json, resource, sys, time
from amlsynth.backbone import BackboneConfig, generate_backbone
from amlsynth.population import PopulationConfig
from amlsynth.fidelity import compute_tail_variables, daily_invariants, fit_power_law, summarize_invariants
t = time.perf_counter()
log = generate_backbone(BackboneConfig(n_days=30), PopulationConfig(n_persons=4800, n_merchants=200), 2024)
s = summarize_invariants(daily_invariants(log))
a = fit_power_law(compute_tail_variables(log)["amount"], "auto").alpha
dt = time.perf_counter() - t
print(json.dumps({"n": len(log), "gcc": s["gcc_ratio"]["mean"], "assort": s["assortativity"]["mean"],
                  "trans": s["transitivity"]["mean"], "alpha": a, "time": dt,
                  "rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024}))
"""


def test_criterion_03_desk_scale():
    proc = subprocess.run([sys.executable, "-c", DESK_SCRIPT], capture_output=True, text=True, check=True)
    m = json.loads(proc.stdout.strip().splitlines()[-1])
    record(3, {
        "GCC": (m["gcc"] >= 0.75, f"{m['gcc']:.3f}"),
        "assortativity": (m["assort"] <= -0.2, f"{m['assort']:.3f}"),
        "transitivity": (0.0005 <= m["trans"] <= 0.01, f"{m['trans']:.4f}"),
        "amount alpha": (2.3 <= m["alpha"] <= 3.3, f"{m['alpha']:.3f}"),
        "time": (m["time"] < 60, f"{m['time']:.1f}s"),
        "peak RSS": (m["rss_mb"] < 2048, f"{m['rss_mb']:.0f}MB"),
        "rows": (True, str(m["n"])),
    })


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("AMLSYNTH_FULL") != "1", reason="full scale runs only with AMLSYNTH_FULL=1")
def test_criterion_04_full_scale(tmp_path):
    res = run_pipeline(full_config(), tmp_path)
    s = res.summary
    fs = res.fidelity.summary
    amount = next(t for t in res.fidelity.tails if t.variable == "amount" and t.xmin_mode == "auto")
    prev = s.laundering / s.transactions
    record(4, {
        "transactions": (abs(s.transactions / 3_029_170 - 1) <= 0.15, f"{s.transactions}"),
        "accounts": (abs(s.accounts / 47_526 - 1) <= 0.15, f"{s.accounts}"),
        "prevalence": (abs(prev / 0.00153 - 1) <= 0.10, f"{prev:.5f}"),
        "GCC": (abs(fs["gcc_ratio"]["mean"] - 0.8924) <= 0.05, f"{fs['gcc_ratio']['mean']:.4f}"),
        "assortativity": (abs(fs["assortativity"]["mean"] + 0.4943) <= 0.10, f"{fs['assortativity']['mean']:.4f}"),
        "transitivity": (abs(fs["transitivity"]["mean"] - 0.0021) <= 0.002, f"{fs['transitivity']['mean']:.4f}"),
        "amount alpha": (abs(amount.alpha - 2.9255) <= 0.3, f"{amount.alpha:.3f}"),
    })


def test_criterion_05_grpo_math():
    rng = np.random.default_rng(5)
    adv_ok = True
    for _ in range(200):
        A = group_advantages(rng.normal(size=int(rng.integers(2, 33))) * 10 ** rng.uniform(-2, 3))
        adv_ok &= abs(A.mean()) < 1e-12 and 0.999 <= A.std() <= 1.0
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(2, 6))
        policy = Policy(rng.normal(scale=0.5, size=(6, 4)), float(rng.uniform(0.5, 2)))
        trajs = [Trajectory([Step("x", rng.normal(size=4), int(rng.integers(6)), None, 0.0, True, 0.0)
                             for _ in range(int(rng.integers(1, 6)))]) for _ in range(K)]
        adv = rng.normal(size=K)
        g = loss_gradient(policy, trajs, adv)
        num = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            up, dn = policy.copy(), policy.copy()
            up.theta[idx] += 1e-6
            dn.theta[idx] -= 1e-6
            num[idx] = (grpo_loss(up, trajs, adv) - grpo_loss(dn, trajs, adv)) / 2e-6
        worst = max(worst, float(np.abs(g - num).max() / np.abs(g).max()))
    cfg = GrpoConfig(lambda_mon=0.7, invalid_penalty=-1.0)
    reward_ok = (step_reward(0.8, 0.6, True, GrpoConfig()) == 0.8 - 0.6
                 and step_reward(0.8, 0.6, True, cfg) == 0.0 + 0.7 * (0.8 - 0.6)
                 and step_reward(0.3, 0.1, False, cfg) == -1.0)
    record(5, {
        "advantages": (adv_ok, "mean 0, std in [0.999, 1]"),
        "gradient": (worst <= 1e-5, f"max rel err {worst:.1e}"),
        "step reward": (reward_ok, "exact"),
    })


def test_criterion_06_hardening_direction():
    wins, deltas = 0, []
    for rep in range(10):
        cfg = PipelineConfig(
            seed=100 + rep,
            population=PopulationConfig(n_persons=190, n_merchants=10),
            backbone=BackboneConfig(n_days=14),
            monitor=MonitorSettings(context_rows=1000),
            anomaly=AnomalySettings(n_seeds=3, grpo=GrpoConfig(iterations=50)),
        )
        hard = stage_harden(cfg, stage_generate(cfg))
        s0, s1 = np.mean(hard.grpo.initial_S), np.mean(hard.grpo.hardened_S)
        deltas.append(s1 - s0)
        wins += s1 < s0
    record(6, {"replicates lowered": (wins >= 8, f"{wins}/10"),
               "mean change in S": (True, f"{np.mean(deltas):+.3f}")})


def test_criterion_07_embedding_invariants():
    rng = np.random.default_rng(7)
    log = random_log(rng, 3000, n_accounts=120, n_days=30)
    accepted = rejected = broken = 0
    while accepted < 100:
        c = seed_library(8, rng)[int(rng.integers(8))]
        if rng.random() < 0.5:
            # an arbitrary proposal: random accounts and anchor, usually infeasible
            picks = rng.choice(len(log.accounts), c.n_nodes, replace=False)
            asg = RoleAssignment(tuple((r, log.accounts[int(k)]) for r, k in zip(c.role_ids, picks)))
            anchor = int(log.origin + rng.integers(-5, 35) * 86400)
        else:
            hosts = find_role_hosts(c, log, rng=rng)
            if not hosts:
                continue
            asg = hosts[0]
            anchor = find_time_window(c, asg, log, rng)
        before = log.digest()
        out, rep = embed_cluster(c, asg, anchor, log)
        if not rep.accepted:
            rejected += 1
            broken += not (out is log and out.digest() == before)
            continue
        accepted += 1
        inverse = {ref: role for role, ref in asg.mapping}
        added = np.flatnonzero(out.is_laundering)
        got = Counter((inverse[out.accounts[out.src[i]]], inverse[out.accounts[out.dst[i]]],
                       int(round(out.amount_paid[i] * 100)), int(out.timestamp[i]) - anchor) for i in added)
        want = Counter((e.src, e.dst, e.cents, e.rel_time) for e in c.edges)
        rel = np.array([e.rel_time for e in c.edges])
        order_ok = np.array_equal(np.argsort(rel, kind="stable"), np.argsort(rel + anchor, kind="stable"))
        organic = out.take(np.flatnonzero(~out.is_laundering)).same_transactions(log)
        broken += not (got == want and order_ok and organic and len(added) == c.n_edges)
    record(7, {"accepted": (True, str(accepted)), "rejected": (rejected > 0, str(rejected)),
               "violations": (broken == 0, str(broken))})


def test_criterion_08_metrics_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(2, 201))
        s = rng.integers(0, 8, size=n) / 7
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        if y.all() or not y.any():
            continue
        worst = max(worst, abs(roc_auc(s, y) - brute_auc(s, y)), abs(average_precision(s, y) - brute_ap(s, y)))
    s, y = [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]
    auc, ap = roc_auc(s, y), average_precision(s, y)
    f1_half, f1_top = f1_at(s, y, 0.5), f1_at(s, y, 0.85)
    record(8, {
        "brute force": (worst <= 1e-12, f"max diff {worst:.1e}"),
        "AUC": (abs(auc - 0.75) < 1e-12, f"{auc:.4f}"),
        "AP": (abs(ap - 5 / 6) < 1e-12, f"{ap:.4f}"),
        # at threshold 0.5 the flagged set is {0.9, 0.8}: P = R = 1/2, so F1 = 1/2
        "F1@0.5": (abs(f1_half - 0.5) < 1e-12, f"{f1_half:.4f}"),
        "F1@0.85": (abs(f1_top - 2 / 3) < 1e-12, f"{f1_top:.4f}"),
    })


def test_criterion_09_determinism_and_io(tmp_path):
    cfg = PipelineConfig(
        seed=9,
        population=PopulationConfig(n_persons=600, n_merchants=30),
        backbone=BackboneConfig(n_days=5),
        monitor=MonitorSettings(context_rows=400),
        anomaly=AnomalySettings(n_seeds=2, grpo=GrpoConfig(K=4, T_max=4, iterations=3)),
    )
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = names == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        file_digest(tmp_path / "a" / n) == file_digest(tmp_path / "b" / n) for n in names)

    log = random_log(np.random.default_rng(9), 10_000, n_accounts=800, n_days=30, p_laundering=0.01)
    export_csv(log, tmp_path / "rt.csv")
    back = import_csv(tmp_path / "rt.csv", accounts=log.accounts, origin=log.origin, n_days=log.n_days)
    exact = all(back[i] == log[i] for i in range(len(log)))

    splits_ok = all(make_splits(n).sizes == split_sizes(n) and split_sizes(n)[1] == (2 * n) // 10
                    for n in range(10, 500))
    splits_ok &= make_splits(10).sizes == (6, 2, 2) and make_splits(11).sizes == (7, 2, 2)
    record(9, {"output hashes": (same, f"{len(names)} files identical"),
               "CSV round trip": (exact, "10000 rows field-exact"),
               "splits": (splits_ok, "6:2:2, floor, remainder to train")})


def _random_action(c, rng):
    kind = int(rng.integers(4))
    if kind == 0:
        return kind, IntermediaryInjection(int(rng.integers(c.n_edges)), int(rng.integers(1, 4)))
    if kind == 1:
        i, j = rng.choice(c.n_nodes, 2, replace=False)
        return kind, AccountMerging(c.role_ids[i], c.role_ids[j])
    if kind == 2:
        return kind, AccountSplitting(c.role_ids[int(rng.integers(c.n_nodes))], int(rng.integers(2, 5)))
    k = int(rng.integers(c.n_edges))
    return kind, TransactionAdjustment(k, float(rng.choice([-0.2, 0.05, 0.01])) * c.edges[k].amount,
                                       int(rng.choice([-3600, 3600, 86400])))


def _net(c):
    flow = defaultdict(int)
    for e in c.edges:
        flow[e.src] -= e.cents
        flow[e.dst] += e.cents
    return flow


def test_criterion_10_edit_engine_closure():
    rng = np.random.default_rng(10)
    seeds = seed_library(20, rng)
    budget = EditBudget(8, 12)
    insane = over = leaks = applied = 0
    for t in range(10_000):
        c = seeds[t % 20]
        for _ in range(10):
            kind, action = _random_action(c, rng)
            out, ok = apply_action(c, action, budget, rng)
            if not ok:
                continue
            applied += 1
            insane += bool(check_sanity(out))
            over += out.budget_used > budget.max_edits or out.nodes_added > budget.max_new_nodes
            if kind in (0, 2):
                before, after = _net(c), _net(out)
                leaks += any(after[r] != before[r] for r in c.role_ids) or \
                    any(after[r] != 0 for r in set(out.role_ids) - set(c.role_ids))
            c = out
    record(10, {"applied edits": (True, str(applied)), "sanity violations": (insane == 0, str(insane)),
                "budget overruns": (over == 0, str(over)), "flow leaks": (leaks == 0, str(leaks))})
