"""Command-line entry point: ``replaytriplet <subcommand> [--config PATH] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..buffer import ReplayBuffer
from ..latentmodel.training import build_model, load_checkpoint, save_checkpoint, train
from ..metrics import as_representation, distance_rank_correlation, mig
from . import runner
from .config import ExperimentConfig, apply_overrides, packaged_config

log = logging.getLogger("replaytriplet")


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        cfg = ExperimentConfig()
    elif Path(args.config).exists():
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = packaged_config(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.output:
        overrides.append(f"output_dir={args.output}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.output_dir) / "config.yaml")
    return cfg


def cmd_generate_data(cfg: ExperimentConfig, args) -> int:
    seed = cfg.seeds[0]
    buf = runner.build_buffer(cfg, runner.cell_seeds(seed)[0])
    path = Path(args.buffer or Path(cfg.output_dir) / f"buffer-seed{seed}.bin")
    buf.save(path)
    print(f"wrote {len(buf)} transitions to {path}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    seed = cfg.seeds[0]
    data_seed, init_seed, train_seed = runner.cell_seeds(seed)
    buf = ReplayBuffer.load(args.buffer) if args.buffer else runner.build_buffer(cfg, data_seed)
    if buf.spec != cfg.grid:
        raise ValueError(f"buffer grid {buf.spec} does not match config grid {cfg.grid}")
    model = build_model(cfg.grid, cfg.loss.latent_dim, cfg.model, init_seed)
    ckpt_dir = Path(cfg.output_dir) / "checkpoints"
    name = f"train-{cfg.loss.model_kind.value}-seed{seed}"
    res = train(model, buf, cfg.loss, cfg.train, cfg.sampler, train_seed,
                checkpoint_dir=ckpt_dir / name, run_config=cfg.to_dict())
    path = save_checkpoint(ckpt_dir / f"{name}.ckpt", model, cfg.train.steps, cfg.to_dict(), res.loss_curve)
    print(f"wrote {path}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise ValueError("evaluate needs --checkpoint PATH")
    model, blob = load_checkpoint(args.checkpoint)
    rep = as_representation(model)
    seed = cfg.seeds[0]
    rows = []
    m = mig(rep, cfg.grid, cfg.eval.mig_bins, cfg.eval.mig_samples, seed)
    rows.append(("mig", m.mig_score))
    rc = distance_rank_correlation(rep, cfg.grid, num_pairs=cfg.eval.rank_pairs, seed=seed)
    rows.append(("rank_correlation", rc.value))
    kind = blob.get("config", {}).get("loss", {}).get("model_kind", "unknown")
    out = Path(cfg.output_dir) / "evaluation.csv"
    with out.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(runner.RESULT_COLUMNS)
        for name, value in rows:
            w.writerow([Path(args.checkpoint).stem, kind, cfg.grid.step_px, seed, name,
                        "nan" if value is None else repr(float(value))])
    for name, value in rows:
        print(f"{name}: {value}" + ("" if value is not None else f" ({rc.diagnostic})"))
    return 0


def _failed(result: dict) -> int:
    bad = [r.run_id for r in result["records"] if r.status != "ok"]
    for run_id in bad:
        print(f"error: run {run_id} failed", file=sys.stderr)
    return 2 if bad else 0


def cmd_sweep_overlap(cfg, args) -> int:
    res = runner.run_overlap_sweep(cfg, plot=not args.no_plots)
    for kind, slope in res["slopes"].items():
        print(f"{kind}: MIG slope vs step_px = {slope}")
    return _failed(res)


def cmd_compare_models(cfg, args) -> int:
    res = runner.run_model_comparison(cfg, plot=not args.no_plots)
    for label, _, _, metric, mean, std, sem, n in res["summary"]:
        print(f"{label:24s} {metric:18s} mean={mean} sem={sem} n={n}")
    return _failed(res)


def cmd_rl_eval(cfg, args) -> int:
    res = runner.run_rl_evaluation(cfg, plot=not args.no_plots)
    for name, metric, mean, std, sem, n in res["summary"]:
        print(f"{name:24s} {metric:20s} mean={mean} std={std} n={n}")
    return _failed(res)


def cmd_report(cfg, args) -> int:
    store = runner.RunStore(cfg.output_dir)
    path = runner.write_results_csv(store)
    groups = defaultdict(list)
    for rec in store.records():
        for name, value in rec.metrics.items():
            if isinstance(value, (int, float)):
                groups[(rec.experiment, rec.label, rec.step_px, name)].append(value)
    for key in sorted(groups):
        v = np.asarray(groups[key], dtype=np.float64)
        print("{:8s} {:24s} step={:<2d} {:22s} mean={:.4f} n={}".format(*key, v.mean(), v.size))
    if not args.no_plots:
        from .plotting import plot_distance_matrices

        plot_distance_matrices(cfg.grid, cfg.sweep.step_px, Path(cfg.output_dir) / "figures" / "distance_matrices.png")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-overlap": cmd_sweep_overlap,
    "compare-models": cmd_compare_models,
    "rl-eval": cmd_rl_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replaytriplet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config, or the name of a packaged one (desk, publication)")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.steps=100")
        sp.add_argument("--no-plots", action="store_true", help="skip figure rendering")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("generate-data", "train"):
            sp.add_argument("--buffer", help="replay buffer file to write (generate-data) or read (train)")
        if name == "evaluate":
            sp.add_argument("--checkpoint", help="checkpoint to evaluate")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
