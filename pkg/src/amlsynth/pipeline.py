"""End-to-end orchestration: backbone, monitor, hardening, embedding, reports.

Each stage is a plain function so the command line can run them one at a
time from files; ``run_pipeline`` chains them and writes every output into a
scratch directory that is moved into place only when all stages succeed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .anomaly import IllicitCluster, load_seeds, save_seeds, seed_library
from .backbone import generate_backbone
from .config import PipelineConfig
from .embedder import EmbeddingReport, embed_all, write_reports
from .fidelity import FidelityReport, fidelity_report
from .grpo import EvaluationContext, GrpoResult, run_grpo
from .io import export_csv, write_profiles
from .model import SECONDS_PER_DAY, TransactionLog
from .monitor import FEATURE_NAMES, MonitorModel, feature_matrix, train_monitor
from .rng import Streams

STAGES = ("config", "generate", "harden", "embed", "analyze", "split", "summarize", "export")
EXIT_CODES = {"config": 2, "generate": 3, "harden": 4, "embed": 5, "analyze": 6,
              "split": 7, "summarize": 8, "export": 9}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage, 1)


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------------------------
# splits and summary


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mode: str = "temporal"

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_sizes(n: int) -> tuple[int, int, int]:
    """6:2:2 with floor rounding for the 20% parts and the remainder to train."""
    val = test = (n * 2) // 10
    return n - val - test, val, test


def make_splits(log: TransactionLog | int, mode: str = "temporal", seed: int = 0) -> DatasetSplit:
    n = log if isinstance(log, int) else len(log)
    if n < 10:
        raise SplitError(f"need at least 10 rows to split, got {n}")
    n_train, n_val, _ = split_sizes(n)
    if mode == "temporal":
        order = np.arange(n)
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise SplitError(f"unknown split mode {mode!r}")
    train = np.sort(order[:n_train])
    val = np.sort(order[n_train:n_train + n_val])
    test = np.sort(order[n_train + n_val:])
    return DatasetSplit(train, val, test, mode)


def write_splits(log: TransactionLog, split: DatasetSplit, out_dir) -> dict:
    out_dir = Path(out_dir)
    paths = {}
    for name in ("train", "val", "test"):
        paths[name] = out_dir / f"{name}.csv"
        export_csv(log.take(getattr(split, name)), paths[name])
    return paths


@dataclass(frozen=True)
class Summary:
    days: int
    accounts: int
    transactions: int
    laundering: int
    one_per_n: float | None       # None when there is no laundering row

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["one_per_n"] = None if self.one_per_n is None else round(self.one_per_n, 2)
        d["prevalence"] = self.laundering / self.transactions if self.transactions else 0.0
        return d

    def line(self) -> str:
        n = "undefined" if self.one_per_n is None else f"{self.one_per_n:.2f}"
        return (f"days={self.days} accounts={self.accounts} transactions={self.transactions} "
                f"laundering={self.laundering} one_per_n={n}")


def summarize(log: TransactionLog) -> Summary:
    if len(log) == 0:
        return Summary(0, 0, 0, 0, None)
    keys = {log.accounts[i].key for i in log.active_accounts().tolist()}
    laundering = int(log.is_laundering.sum())
    return Summary(int(log.n_days), len(keys), len(log), laundering,
                   len(log) / laundering if laundering else None)


# ---------------------------------------------------------------------------------
# feature export

PROFILE_ATTRIBUTES = (
    "region", "age_band", "occupation", "income_tier", "business_type",
    "base_daily_intensity", "amount_scale", "amount_dispersion", "exploration_rate", "operating_scale",
)


def profile_columns(fraction: float, attributes: Sequence[str] = PROFILE_ATTRIBUTES) -> list[str]:
    """The first ceil(fraction * A) attributes in canonical order."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("profile fraction must lie in [0, 1]")
    return list(attributes[: math.ceil(fraction * len(attributes) - 1e-12)])


def _attr(profile, name: str) -> str:
    if profile is None or not hasattr(profile, name):
        return ""
    v = getattr(profile, name)
    return repr(float(v)) if isinstance(v, (int, float)) else str(v)


def feature_table(log: TransactionLog, profiles: Mapping | None = None, with_profiles: bool = False,
                  profile_fraction: float = 1.0) -> tuple[list[str], list[list]]:
    X = feature_matrix(log)
    header = ["row", *FEATURE_NAMES, "is_laundering"]
    attrs = profile_columns(profile_fraction) if with_profiles else []
    header += [f"sender_{a}" for a in attrs] + [f"receiver_{a}" for a in attrs]
    profiles = profiles if profiles is not None else log.profiles
    rows = []
    for i in range(len(log)):
        row = [i, *(repr(float(v)) for v in X[i]), int(log.is_laundering[i])]
        if attrs:
            ps = profiles.get(log.accounts[log.src[i]])
            pr = profiles.get(log.accounts[log.dst[i]])
            row += [_attr(ps, a) for a in attrs] + [_attr(pr, a) for a in attrs]
        rows.append(row)
    return header, rows


def export_features(log: TransactionLog, profiles: Mapping | None, with_profiles: bool,
                    profile_fraction: float, path) -> list[str]:
    header, rows = feature_table(log, profiles, with_profiles, profile_fraction)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return header


# ---------------------------------------------------------------------------------
# stages


def stage_generate(config: PipelineConfig) -> TransactionLog:
    seed = Streams(config.seed).child_seed("backbone")
    return generate_backbone(config.backbone, config.population, seed)


def seed_clusters(config: PipelineConfig) -> list[IllicitCluster]:
    if config.anomaly.seed_file:
        return load_seeds(config.anomaly.seed_file)
    return seed_library(config.anomaly.n_seeds, Streams(config.seed).get("seeds"))


def context_slices(log: TransactionLog, rows: int) -> tuple[TransactionLog, TransactionLog]:
    """Disjoint benign slices: the tail of the first half (training) and the tail of the log (evaluation)."""
    n = len(log)
    if n < 4:
        raise ValueError(f"backbone too small for monitor context ({n} rows)")
    half = n // 2
    benign = ~log.is_laundering
    train = np.arange(max(0, half - rows), half)
    evaluate = np.arange(max(half, n - rows), n)
    return log.take(train[benign[train]]), log.take(evaluate[benign[evaluate]])


@dataclass
class HardenResult:
    monitor: MonitorModel
    grpo: GrpoResult
    seeds: list
    pool: list          # hardened clusters and low-S variants available for embedding


def train_reference_monitor(config: PipelineConfig, train_ctx: TransactionLog,
                            seeds: Sequence[IllicitCluster]) -> MonitorModel:
    """Logistic monitor on a benign slice plus seed clusters overlaid at random anchors."""
    window = config.monitor.window_days * SECONDS_PER_DAY
    rng = Streams(config.seed).get("monitor-overlay")
    overlay = EvaluationContext(_NullScorer(), train_ctx, window=window)
    lo, hi = int(train_ctx.timestamp[0]), int(train_ctx.timestamp[-1])
    pos = []
    for c in seeds:
        for _ in range(config.monitor.overlays_per_seed):
            pos.append(overlay.cluster_features(c, int(rng.integers(lo, hi + 1))))
    Xn = feature_matrix(train_ctx, window)
    Xp = np.vstack(pos)
    X = np.vstack([Xn, Xp])
    y = np.r_[np.zeros(len(Xn), dtype=bool), np.ones(len(Xp), dtype=bool)]
    hyper = dataclasses.replace(config.monitor.hyper, seed=Streams(config.seed).child_seed("monitor") % (2 ** 32))
    return train_monitor(X, y, hyper)


class _NullScorer:
    threshold = 0.5

    def score(self, features):
        return np.zeros(len(features))


def stage_harden(config: PipelineConfig, log: TransactionLog,
                 seeds: Sequence[IllicitCluster] | None = None) -> HardenResult:
    seeds = list(seeds) if seeds is not None else seed_clusters(config)
    train_ctx, eval_ctx = context_slices(log, config.monitor.context_rows)
    monitor = train_reference_monitor(config, train_ctx, seeds)
    evaluator = EvaluationContext(monitor, eval_ctx, window=config.monitor.window_days * SECONDS_PER_DAY)
    result = run_grpo(seeds, evaluator, config.anomaly.grpo, Streams(config.seed).child_seed("grpo"))
    pool = []
    for ci, hardened in enumerate(result.hardened):
        pool.append(hardened)
        for _, variant in result.variants[ci]:
            if variant.digest() != hardened.digest():
                pool.append(variant)
    return HardenResult(monitor, result, seeds, pool)


def embedding_queue(pool: Sequence[IllicitCluster], n_rows: int, config: PipelineConfig) -> list[IllicitCluster]:
    """Clusters drawn (with replacement) from the pool, each under a unique id."""
    if not pool:
        return []
    need = config.embedding.target_prevalence * n_rows * config.embedding.oversupply
    mean_edges = float(np.mean([c.n_edges for c in pool]))
    count = max(len(pool), int(math.ceil(need / max(mean_edges, 1.0))) + 1)
    rng = Streams(config.seed).get("embed-queue")
    picks = rng.integers(0, len(pool), size=count)
    return [dataclasses.replace(pool[k], cluster_id=f"{pool[k].cluster_id}-{j}") for j, k in enumerate(picks)]


def stage_embed(config: PipelineConfig, log: TransactionLog,
                pool: Sequence[IllicitCluster]) -> tuple[TransactionLog, list[EmbeddingReport]]:
    queue = embedding_queue(pool, len(log), config)
    return embed_all(queue, log, log.profiles or None, config.embedding.target_prevalence,
                     Streams(config.seed).child_seed("embed"), config.embedding.burst_factor,
                     config.embedding.max_assignments)


def stage_analyze(log: TransactionLog) -> FidelityReport:
    return fidelity_report(log)


# ---------------------------------------------------------------------------------
# full run


@dataclass
class PipelineResult:
    log: TransactionLog
    backbone: TransactionLog
    harden: HardenResult
    reports: list
    fidelity: FidelityReport
    split: DatasetSplit
    summary: Summary
    files: dict
    timings: dict


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # every failure is reported with the stage that raised it
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(config: PipelineConfig, out_dir=None) -> PipelineResult:
    out = Path(out_dir if out_dir is not None else config.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    timings = {}
    try:
        t = time.perf_counter()
        backbone = _stage("generate", stage_generate, config)
        timings["generate"] = time.perf_counter() - t

        t = time.perf_counter()
        hard = _stage("harden", stage_harden, config, backbone)
        timings["harden"] = time.perf_counter() - t

        t = time.perf_counter()
        log, reports = _stage("embed", stage_embed, config, backbone, hard.pool)
        timings["embed"] = time.perf_counter() - t

        t = time.perf_counter()
        fid = _stage("analyze", stage_analyze, log)
        timings["analyze"] = time.perf_counter() - t

        split = _stage("split", make_splits, log)
        summary = _stage("summarize", summarize, log)

        def write_all():
            export_csv(backbone, scratch / "backbone.csv")
            export_csv(log, scratch / "transactions.csv")
            write_profiles(log.profiles, scratch / "profiles.csv")
            hard.monitor.save(scratch / "monitor.txt")
            hard.grpo.policy.save(scratch / "policy.txt")
            hard.grpo.write_log(scratch / "grpo_log.csv")
            save_seeds(hard.pool, scratch / "hardened.txt")
            write_reports(reports, scratch / "embedding_report.csv")
            fid.write_csv(scratch / "fidelity_daily.csv", scratch / "fidelity_tails.csv")
            write_splits(log, split, scratch)
            (scratch / "summary.json").write_text(json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n")
            if config.output.write_features:
                export_features(log, log.profiles, True, 1.0, scratch / "features.csv")

        _stage("export", write_all)
        files = {}
        for p in sorted(scratch.iterdir()):
            target = out / p.name
            os.replace(p, target)
            files[p.name] = target
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return PipelineResult(log, backbone, hard, reports, fid, split, summary, files, timings)

