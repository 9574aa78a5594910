"""Command line entry point.

Stages read and write files in ``--out`` so they can be run one by one:

    amlsynth generate        --out run/     backbone.csv, profiles.csv
    amlsynth harden          --out run/     monitor.txt, policy.txt, grpo_log.csv, hardened.txt
    amlsynth embed           --out run/     transactions.csv, embedding_report.csv
    amlsynth analyze         --out run/     fidelity_daily.csv, fidelity_tails.csv
    amlsynth split           --out run/     train.csv, val.csv, test.csv
    amlsynth summarize       --out run/     summary.json
    amlsynth export-features --out run/     features.csv
    amlsynth run             --out run/     everything above in one go
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .anomaly import load_seeds, save_seeds
from .config import PipelineConfig, load_config, with_overrides
from .embedder import write_reports
from .io import export_csv, import_csv, read_profiles, write_profiles
from .model import ConfigError
from .pipeline import (
    EXIT_CODES, PipelineError, export_features, make_splits, run_pipeline, stage_analyze, stage_embed,
    stage_generate, stage_harden, summarize, write_splits,
)

log = logging.getLogger("amlsynth")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return with_overrides(cfg, seed=args.seed, out_dir=args.out)


def _backbone(cfg: PipelineConfig, out: Path):
    profiles = read_profiles(out / "profiles.csv")
    return import_csv(out / "backbone.csv", profiles=profiles, origin=cfg.backbone.origin,
                      n_days=cfg.backbone.n_days)


def _dataset(cfg: PipelineConfig, out: Path, name: str = "transactions.csv"):
    profiles_path = out / "profiles.csv"
    profiles = read_profiles(profiles_path) if profiles_path.exists() else None
    return import_csv(out / name, profiles=profiles, origin=cfg.backbone.origin, n_days=cfg.backbone.n_days)


def cmd_generate(cfg, out: Path, args) -> None:
    backbone = stage_generate(cfg)
    export_csv(backbone, out / "backbone.csv")
    write_profiles(backbone.profiles, out / "profiles.csv")
    print(f"backbone: {len(backbone)} transactions -> {out / 'backbone.csv'}")


def cmd_harden(cfg, out: Path, args) -> None:
    backbone = _backbone(cfg, out)
    result = stage_harden(cfg, backbone)
    result.monitor.save(out / "monitor.txt")
    result.grpo.policy.save(out / "policy.txt")
    result.grpo.write_log(out / "grpo_log.csv")
    save_seeds(result.pool, out / "hardened.txt")
    for c, s0, s1 in zip(result.seeds, result.grpo.initial_S, result.grpo.hardened_S):
        print(f"{c.cluster_id}: S {s0:.4f} -> {s1:.4f}")


def cmd_embed(cfg, out: Path, args) -> None:
    backbone = _backbone(cfg, out)
    pool = load_seeds(out / "hardened.txt")
    merged, reports = stage_embed(cfg, backbone, pool)
    export_csv(merged, out / "transactions.csv")
    write_reports(reports, out / "embedding_report.csv")
    print(f"embedded {sum(r.accepted for r in reports)} clusters, "
          f"{int(merged.is_laundering.sum())} laundering rows")


def cmd_analyze(cfg, out: Path, args) -> None:
    report = stage_analyze(_dataset(cfg, out, args.input))
    report.write_csv(out / "fidelity_daily.csv", out / "fidelity_tails.csv")
    for name, stat in report.summary.items():
        if stat["mean"] is not None:
            print(f"{name}: {stat['mean']:.4f} +/- {stat['std']:.4f}")


def cmd_split(cfg, out: Path, args) -> None:
    data = _dataset(cfg, out, args.input)
    split = make_splits(data, args.mode, cfg.seed)
    write_splits(data, split, out)
    print("train/val/test = {}/{}/{}".format(*split.sizes))


def cmd_summarize(cfg, out: Path, args) -> None:
    summary = summarize(_dataset(cfg, out, args.input))
    (out / "summary.json").write_text(json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n")
    print(summary.line())


def cmd_export_features(cfg, out: Path, args) -> None:
    data = _dataset(cfg, out, args.input)
    header = export_features(data, data.profiles, args.with_profiles, args.profile_fraction, out / "features.csv")
    print(f"{len(data)} rows x {len(header)} columns -> {out / 'features.csv'}")


def cmd_run(cfg, out: Path, args) -> None:
    result = run_pipeline(cfg, out)
    print(result.summary.line())


COMMANDS = {
    "generate": (cmd_generate, "generate"),
    "harden": (cmd_harden, "harden"),
    "embed": (cmd_embed, "embed"),
    "analyze": (cmd_analyze, "analyze"),
    "split": (cmd_split, "split"),
    "summarize": (cmd_summarize, "summarize"),
    "export-features": (cmd_export_features, "export"),
    "run": (cmd_run, "export"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amlsynth", description="Synthetic AML transaction-graph generator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="64-bit seed overriding the config")
        sp.add_argument("--out", default=None, help="output directory (default from config)")
        if name in ("analyze", "split", "summarize", "export-features"):
            sp.add_argument("--input", default="transactions.csv", help="dataset file inside --out")
        if name == "split":
            sp.add_argument("--mode", choices=("temporal", "random"), default="temporal")
        if name == "export-features":
            sp.add_argument("--with-profiles", action="store_true")
            sp.add_argument("--profile-fraction", type=float, default=1.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    fn, stage = COMMANDS[args.command]
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fn(cfg, out, args)
    except PipelineError as exc:
        print(f"error {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error [{stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES[stage]
    return 0


if __name__ == "__main__":
    sys.exit(main())
