"""Experiment driver: ``fedseq {synth,ingest,static,dynamic,privacy}``.

Every run writes per-seed artifact directories plus a manifest that echoes the
resolved configuration, the seeds, and a content hash of the inputs, so any
result can be reproduced from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, ValidationError, load_config
from .evaluation import (
    DynamicConfig,
    DynamicResult,
    StaticConfig,
    compare_privacy,
    run_dynamic,
    run_static,
)
from .federation import ROUND_LOG_COLUMNS
from .ingest import (
    EventLog,
    deduplicate,
    generate_synthetic,
    mean_sessions_per_user,
    parse_events,
    rebalance_cycles,
    sessionize,
    write_events,
)
from .privacy import make_mechanism
from .seqmf import save_embeddings


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"[{phase}] {cause}")
        self.phase = phase
        self.cause = cause


@contextmanager
def _phase(name: str):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc


def _input_fingerprint(cfg: ExperimentConfig) -> str:
    if cfg.dataset is not None:
        return hashlib.sha256(Path(cfg.dataset).read_bytes()).hexdigest()
    blob = json.dumps(cfg.echo()["synthetic"], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, command: str,
                    artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.echo(),
        "input_sha256": _input_fingerprint(cfg),
        "seeds": list(cfg.seeds),
        "artifacts": sorted(artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _metric_rows(records):
    return [
        [r.environment, r.cycle, r.model, r.metric, r.n, repr(r.value)]
        for r in records
    ]


def _plot_rows(rows):
    return [
        [r.cycle, r.model, r.regime, repr(r.hr5),
         "NA" if r.delta_hr5_cum is None else repr(r.delta_hr5_cum)]
        for r in rows
    ]


def _load_log(cfg: ExperimentConfig, seed: int) -> EventLog:
    if cfg.dataset is not None:
        log = parse_events(cfg.dataset)
    else:
        spec = cfg.synthetic
        log = generate_synthetic(
            spec.users, spec.apps, spec.latent_dim, spec.steps_per_user, seed=seed
        )
    return deduplicate(log, window=cfg.dedup_window)


def _write_dynamic_artifacts(seed_dir: Path, result: DynamicResult, artifacts: list[str]):
    _write_csv(seed_dir / "metrics.csv",
               ("environment", "cycle", "model", "metric", "n", "value"),
               _metric_rows(result.records))
    artifacts.append(str(seed_dir / "metrics.csv"))
    _write_csv(seed_dir / "plot_data.csv",
               ("cycle", "model", "regime", "hr5", "delta_hr5_cum"),
               _plot_rows(result.plot_rows))
    artifacts.append(str(seed_dir / "plot_data.csv"))
    for label, rows in sorted(result.round_logs.items()):
        path = seed_dir / f"round_log_{label}.csv"
        _write_csv(path, ROUND_LOG_COLUMNS, [r.as_csv_row() for r in rows])
        artifacts.append(str(path))
    for label, Q in sorted(result.pretrained.items()):
        path = seed_dir / f"q_pretrained_{label}.txt"
        save_embeddings(path, Q)
        artifacts.append(str(path))


def cmd_synth(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.synthetic is None:
        raise ValidationError("synthetic: block required for the synth command")
    artifacts = []
    with _phase("synth"):
        for seed in cfg.seeds:
            seed_dir = out_dir / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            spec = cfg.synthetic
            log = generate_synthetic(
                spec.users, spec.apps, spec.latent_dim, spec.steps_per_user, seed=seed
            )
            path = seed_dir / "events.csv"
            write_events(log, path)
            artifacts.append(str(path))
    _write_manifest(out_dir, cfg, "synth", artifacts)
    return 0


def cmd_ingest(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.dataset is None:
        raise ValidationError("dataset: path required for the ingest command")
    artifacts = []
    with _phase("ingest"):
        raw = parse_events(cfg.dataset)
        clean = deduplicate(raw, window=cfg.dedup_window)
        sessions = sessionize(clean, threshold=cfg.session_gap)
        out_dir.mkdir(parents=True, exist_ok=True)
        cleaned = out_dir / "cleaned.csv"
        write_events(clean, cleaned)
        stats = {
            "users": clean.n_users,
            "apps": clean.n_apps,
            "events_raw": len(raw),
            "events_clean": len(clean),
            "sessions": len(sessions),
            "mean_sessions_per_user": mean_sessions_per_user(sessions),
        }
        stats_path = out_dir / "stats.json"
        stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        artifacts += [str(cleaned), str(stats_path)]
    _write_manifest(out_dir, cfg, "ingest", artifacts)
    return 0


def cmd_static(cfg: ExperimentConfig, out_dir: Path) -> int:
    artifacts = []
    static_cfg = StaticConfig(
        split_days=(cfg.train_days, cfg.val_days, cfg.test_days),
        train_rounds=cfg.train_rounds,
        optimizer=cfg.optimizer,
        grid=cfg.grid,
    )
    for seed in cfg.seeds:
        with _phase(f"static:seed{seed}"):
            log = _load_log(cfg, seed)
            round_log = []
            records = run_static(log, cfg.models, cfg.hyperparams, static_cfg,
                                 seed=seed, round_log=round_log)
            seed_dir = out_dir / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            _write_csv(seed_dir / "metrics.csv",
                       ("environment", "cycle", "model", "metric", "n", "value"),
                       _metric_rows(records))
            artifacts.append(str(seed_dir / "metrics.csv"))
            _write_csv(seed_dir / "round_log_train.csv", ROUND_LOG_COLUMNS,
                       [r.as_csv_row() for r in round_log])
            artifacts.append(str(seed_dir / "round_log_train.csv"))
    _write_manifest(out_dir, cfg, "static", artifacts)
    return 0


def _dynamic_pieces(cfg: ExperimentConfig, seed: int):
    log = _load_log(cfg, seed)
    cycles = rebalance_cycles(log, cfg.target_active_users)
    dyn_cfg = DynamicConfig(
        q_update_period=cfg.q_update_period,
        pretrain_rounds=cfg.pretrain_rounds,
        steps_per_update=cfg.steps_per_update,
        optimizer=cfg.optimizer,
        participation=cfg.participation,
        mechanism=make_mechanism(cfg.mechanism, cfg.epsilon, cfg.k),
    )
    return log, cycles, dyn_cfg


def cmd_dynamic(cfg: ExperimentConfig, out_dir: Path) -> int:
    artifacts = []
    for seed in cfg.seeds:
        with _phase(f"dynamic:seed{seed}"):
            log, cycles, dyn_cfg = _dynamic_pieces(cfg, seed)
            result = run_dynamic(cycles, cfg.models, cfg.regimes, log.n_apps,
                                 cfg.hyperparams, dyn_cfg, seed=seed)
            seed_dir = out_dir / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            _write_dynamic_artifacts(seed_dir, result, artifacts)
    _write_manifest(out_dir, cfg, "dynamic", artifacts)
    return 0


def cmd_privacy(cfg: ExperimentConfig, out_dir: Path) -> int:
    artifacts = []
    mechanisms = [make_mechanism(name, cfg.epsilon, cfg.k) for name in cfg.mechanisms]
    for seed in cfg.seeds:
        with _phase(f"privacy:seed{seed}"):
            log, cycles, dyn_cfg = _dynamic_pieces(cfg, seed)
            result = compare_privacy(cycles, mechanisms, log.n_apps,
                                     cfg.hyperparams, dyn_cfg, seed=seed)
            seed_dir = out_dir / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            _write_dynamic_artifacts(seed_dir, result, artifacts)
    _write_manifest(out_dir, cfg, "privacy", artifacts)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "static": cmd_static,
    "dynamic": cmd_dynamic,
    "privacy": cmd_privacy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseq",
        description="Federated sequence-aware next-app prediction experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic event log"),
        ("ingest", "parse, deduplicate, and sessionize an event file"),
        ("static", "train/validation/test evaluation"),
        ("dynamic", "cycle-stream evaluation under training regimes"),
        ("privacy", "privacy-mechanism comparison in the dynamic environment"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the YAML config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="run a single seed instead of the configured list")
        cmd.add_argument("--out", default=None, help="output directory override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seeds = (args.seed,)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.command in ("static", "dynamic", "privacy"):
            cfg.environment = "dynamic" if args.command in ("dynamic", "privacy") else "static"
    except ValidationError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out_dir)
    except ValidationError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    except PhaseError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
