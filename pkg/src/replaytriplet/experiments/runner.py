"""Experiment orchestration: each sweep cell is trained once and cached by content hash.

Results are kept in ``<output_dir>/runs/<run_id>.json``; rerunning an
experiment reuses every cell whose config hash matches and only computes
missing ones. ``results.csv`` is regenerated from the store in sorted order
so repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agent import corner_task, dqn_train, evaluate_policy
from ..buffer import ReplayBuffer, collect_random_walk
from ..gridworld import FactorState, GridSpec
from ..latentmodel.losses import ModelKind
from ..latentmodel.training import build_model, load_checkpoint, save_checkpoint, train
from ..metrics import as_representation, distance_rank_correlation, mig, oracle_representation
from .config import ExperimentConfig, config_hash

log = logging.getLogger(__name__)

__all__ = [
    "RunRecord",
    "RunStore",
    "HashCollisionError",
    "MissingCheckpointError",
    "cell_seeds",
    "build_buffer",
    "train_cell",
    "run_overlap_sweep",
    "run_model_comparison",
    "run_rl_evaluation",
    "write_results_csv",
    "applicable_supervision",
    "encoder_label",
]

RESULT_COLUMNS = ["run_id", "model_kind", "step_px", "seed", "metric_name", "value"]
TRIPLET_KINDS = (ModelKind.BETA_TVAE, ModelKind.ADA_TVAE)


class HashCollisionError(RuntimeError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class RunRecord:
    run_id: str
    experiment: str
    label: str
    model_kind: str
    step_px: int
    seed: int
    config_hash: str
    config: dict
    metrics: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


class RunStore:
    """Append-only record store; refuses to overwrite a record with different content."""

    def __init__(self, root):
        self.root = Path(root)
        self.runs = self.root / "runs"
        self.runs.mkdir(parents=True, exist_ok=True)

    def path(self, run_id: str) -> Path:
        return self.runs / f"{run_id}.json"

    def get(self, run_id: str, cell: dict) -> RunRecord | None:
        p = self.path(run_id)
        if not p.exists():
            return None
        rec = RunRecord.from_json(p.read_text())
        if rec.config != cell:
            raise HashCollisionError(f"{p} holds a different config; refusing to overwrite")
        return rec

    def put(self, rec: RunRecord) -> None:
        p = self.path(rec.run_id)
        if p.exists():
            old = RunRecord.from_json(p.read_text())
            if old.config != rec.config:
                raise HashCollisionError(f"{p} holds a different config; refusing to overwrite")
            if old.status == "ok":
                return
        tmp = p.with_suffix(".tmp")
        tmp.write_text(rec.to_json())
        tmp.replace(p)

    def records(self, experiment: str | None = None) -> list[RunRecord]:
        out = [RunRecord.from_json(p.read_text()) for p in sorted(self.runs.glob("*.json"))]
        return [r for r in out if experiment is None or r.experiment == experiment]


def cell_seeds(seed: int) -> tuple[int, int, int]:
    """Independent (data, init, training) seeds derived from one run seed."""
    ss = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(s.generate_state(1)[0]) for s in ss)


def applicable_supervision(kind: ModelKind, modes: list[str]) -> list[str]:
    """Supervision modes that change training for ``kind``.

    Plain VAEs ignore the sampler and Ada-GVAE pairs are always temporal.
    """
    if kind in TRIPLET_KINDS:
        return list(modes)
    if kind is ModelKind.ADA_GVAE:
        return ["temporal"]
    return ["none"]


def encoder_label(kind: str, supervision: str) -> str:
    """Baselines are labelled by kind alone, triplet models also by supervision."""
    return f"{kind}/{supervision}" if ModelKind(kind) in TRIPLET_KINDS else kind


def build_buffer(cfg: ExperimentConfig, seed: int) -> ReplayBuffer:
    start = cfg.data.start
    if start != "uniform":
        start = FactorState.from_array(json.loads(start))
    return collect_random_walk(cfg.grid, cfg.data.episodes, cfg.data.steps_per_episode, seed, start=start)


def _cell_config(cfg: ExperimentConfig, seed: int) -> dict:
    d = cfg.to_dict()
    d.pop("output_dir")
    d["seeds"] = [seed]
    return d


def _run_id(experiment: str, label: str, step_px: int, seed: int, h: str) -> str:
    return f"{experiment}-{label.replace('/', '-')}-s{step_px}-seed{seed}-{h[:10]}"


def _clean(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return float(v)


def train_cell(cfg: ExperimentConfig, seed: int, experiment: str, label: str, store: RunStore,
               metrics: list[str] | None = None) -> RunRecord:
    """Train one model and evaluate it, or return the cached record."""
    cell = _cell_config(cfg, seed)
    h = config_hash(cell)
    run_id = _run_id(experiment, label, cfg.grid.step_px, seed, h)
    cached = store.get(run_id, cell)
    if cached is not None and cached.status == "ok":
        return cached
    rec = RunRecord(run_id, experiment, label, cfg.loss.model_kind.value, cfg.grid.step_px, seed, h, cell)
    t0 = time.perf_counter()
    try:
        data_seed, init_seed, train_seed = cell_seeds(seed)
        buf = build_buffer(cfg, data_seed)
        model = build_model(cfg.grid, cfg.loss.latent_dim, cfg.model, init_seed)
        res = train(model, buf, cfg.loss, cfg.train, cfg.sampler, train_seed)
        ckpt = store.root / "checkpoints" / f"{run_id}.ckpt"
        save_checkpoint(ckpt, model, step=cfg.train.steps, config=cell, loss_curve=res.loss_curve)
        rec.artifacts["checkpoint"] = str(ckpt.relative_to(store.root))
        last = res.loss_curve[-1] if res.loss_curve else {}
        rec.metrics.update({f"final_{k}": _clean(v) for k, v in last.items() if k != "step"})
        rep = as_representation(model)
        for name in metrics or cfg.eval.metrics:
            if name == "mig":
                rec.metrics["mig"] = _clean(
                    mig(rep, cfg.grid, cfg.eval.mig_bins, cfg.eval.mig_samples, seed).mig_score
                )
            elif name == "rank_correlation":
                rc = distance_rank_correlation(rep, cfg.grid, num_pairs=cfg.eval.rank_pairs, seed=seed)
                rec.metrics["rank_correlation"] = rc.value
                if not rc.defined:
                    rec.diagnostics["rank_correlation"] = rc.diagnostic
            else:
                raise ValueError(f"unknown metric {name!r}")
    except Exception as exc:  # a failed cell is recorded and the sweep continues
        log.error("cell %s failed: %s", run_id, exc)
        rec.status, rec.error = "failed", "".join(traceback.format_exception_only(type(exc), exc)).strip()
    rec.wall_clock = time.perf_counter() - t0
    store.put(rec)
    return rec


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def write_results_csv(store: RunStore, path=None) -> Path:
    path = Path(path or store.root / "results.csv")
    rows = []
    for rec in store.records():
        if rec.status != "ok":
            rows.append([rec.run_id, rec.model_kind, rec.step_px, rec.seed, "error", "nan"])
            continue
        for name in sorted(rec.metrics):
            value = rec.metrics[name]
            if isinstance(value, list):
                continue
            rows.append([rec.run_id, rec.model_kind, rec.step_px, rec.seed, name, _fmt(value)])
    rows.sort(key=lambda r: (r[0], r[4]))
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        w.writerows(rows)
    return path


def _write_table(path: Path, header: list[str], rows: list[list]) -> Path:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) or v is None else v for v in r])
    return path


def _stats(values: list[float | None]) -> tuple[float | None, float | None, float | None, int]:
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None, None, 0
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std, std / math.sqrt(v.size), int(v.size)


# -- experiments --------------------------------------------------------------


def run_overlap_sweep(cfg: ExperimentConfig, plot: bool = True) -> dict:
    """Train the sweep models at every step size and seed and record MIG.

    The image side is fixed at the largest step's requirement so the state
    count and image shape stay constant across the sweep.
    """
    store = RunStore(cfg.output_dir)
    k, size = cfg.grid.grid_cells_per_axis, cfg.grid.square_size_px
    side = max(cfg.grid.image_side_px, (k - 1) * max(cfg.sweep.step_px) + size)
    records = []
    for step_px in cfg.sweep.step_px:
        grid = GridSpec(cfg.sweep.num_squares, size, step_px, k, side)
        for kind in cfg.sweep.models:
            train_cfg = cfg.train.to_dict()
            if cfg.sweep.train_steps is not None:
                train_cfg["steps"] = cfg.sweep.train_steps
            cell_cfg = cfg.replace(grid=grid, loss={**cfg.loss.to_dict(), "model_kind": kind},
                                   sampler={**cfg.sampler.to_dict(), "mode": "temporal"}, train=train_cfg)
            for seed in cfg.seeds:
                records.append(train_cell(cell_cfg, seed, "overlap", kind, store, metrics=["mig"]))
    rows, summary, slopes = [], [], {}
    for rec in records:
        rows.append([rec.run_id, rec.model_kind, rec.step_px, rec.seed, rec.metrics.get("mig"), rec.status])
    for kind in cfg.sweep.models:
        xs, ys = [], []
        for step_px in cfg.sweep.step_px:
            vals = [r.metrics.get("mig") for r in records if r.model_kind == kind and r.step_px == step_px]
            mean, std, sem, n = _stats(vals)
            summary.append([kind, step_px, mean, std, sem, n])
            if mean is not None:
                xs.append(step_px)
                ys.append(mean)
        slopes[kind] = float(np.polyfit(xs, ys, 1)[0]) if len(xs) >= 2 else None
    root = Path(cfg.output_dir)
    _write_table(root / "overlap_cells.csv", ["run_id", "model_kind", "step_px", "seed", "mig", "status"], rows)
    _write_table(root / "overlap_summary.csv", ["model_kind", "step_px", "mean_mig", "std", "sem", "n"], summary)
    _write_table(root / "overlap_slopes.csv", ["model_kind", "slope"], [[k, v] for k, v in slopes.items()])
    write_results_csv(store)
    if plot:
        from .plotting import plot_distance_matrices, plot_overlap_sweep

        plot_overlap_sweep(records, cfg.sweep.models, slopes, root / "figures" / "overlap_mig.png")
        plot_distance_matrices(cfg.grid, cfg.sweep.step_px, root / "figures" / "distance_matrices.png")
    return {"records": records, "summary": summary, "slopes": slopes}


def _comparison_cells(cfg: ExperimentConfig):
    for kind_name in cfg.comparison.models:
        kind = ModelKind(kind_name)
        for sup in applicable_supervision(kind, cfg.comparison.supervision):
            loss = cfg.loss.to_dict()
            loss["model_kind"] = kind.value
            if kind in TRIPLET_KINDS and cfg.comparison.alpha is not None:
                loss["alpha"] = cfg.comparison.alpha
            sampler = cfg.sampler.to_dict()
            sampler["mode"] = "temporal" if sup == "none" else sup
            yield encoder_label(kind.value, sup), kind, sup, cfg.replace(loss=loss, sampler=sampler)


def run_model_comparison(cfg: ExperimentConfig, plot: bool = True) -> dict:
    """Train every model/supervision combination and record rank correlation."""
    store = RunStore(cfg.output_dir)
    records, labels = [], []
    for label, kind, sup, cell_cfg in _comparison_cells(cfg):
        labels.append((label, kind.value, sup))
        for seed in cfg.seeds:
            records.append(train_cell(cell_cfg, seed, "compare", label, store))
    summary = []
    for label, kind, sup in labels:
        recs = [r for r in records if r.label == label]
        for metric in ("rank_correlation", "mig"):
            mean, std, sem, n = _stats([r.metrics.get(metric) for r in recs])
            summary.append([label, kind, sup, metric, mean, std, sem, n])
    root = Path(cfg.output_dir)
    _write_table(root / "comparison_summary.csv",
                 ["label", "model_kind", "supervision", "metric", "mean", "std", "sem", "n"], summary)
    write_results_csv(store)
    if plot:
        from .plotting import plot_model_comparison

        plot_model_comparison(summary, root / "figures" / "model_comparison.png")
    return {"records": records, "summary": summary}


def _find_encoder_record(store: RunStore, cfg: ExperimentConfig, label: str, seed: int) -> RunRecord:
    for lab, kind, sup, cell_cfg in _comparison_cells(cfg):
        if lab != label:
            continue
        cell = _cell_config(cell_cfg, seed)
        run_id = _run_id("compare", lab, cell_cfg.grid.step_px, seed, config_hash(cell))
        rec = store.get(run_id, cell)
        if rec is None or rec.status != "ok" or "checkpoint" not in rec.artifacts:
            raise MissingCheckpointError(f"no trained encoder for run {run_id}; run compare-models first")
        if not (store.root / rec.artifacts["checkpoint"]).exists():
            raise MissingCheckpointError(f"checkpoint file missing for run {run_id}")
        return rec
    raise MissingCheckpointError(f"encoder {label!r} is not part of the comparison config")


def _resolve_encoder(store: RunStore, cfg: ExperimentConfig, name: str, seed: int):
    """Return ``(encoder, provenance)`` for a comparison label, ``oracle`` or ``random``."""
    if name == "oracle":
        return oracle_representation(cfg.grid), "oracle"
    if name == "random":
        _, init_seed, _ = cell_seeds(seed)
        return build_model(cfg.grid, cfg.loss.latent_dim, cfg.model, init_seed).eval(), f"random-seed{seed}"
    kind = ModelKind(name.split("/")[0])
    sup = name.split("/")[1] if "/" in name else (cfg.rl.supervision if kind in TRIPLET_KINDS else "none")
    label = encoder_label(kind.value, sup)
    rec = _find_encoder_record(store, cfg, label, seed)
    model, _ = load_checkpoint(store.root / rec.artifacts["checkpoint"])
    return model, rec.run_id


def run_rl_evaluation(cfg: ExperimentConfig, plot: bool = True) -> dict:
    """Run DQN on frozen features of each configured encoder.

    Compared encoders must already be trained by :func:`run_model_comparison`
    with the same config.
    """
    store = RunStore(cfg.output_dir)
    rl = cfg.rl
    task = corner_task(cfg.grid, gamma=rl.gamma, max_episode_steps=rl.max_episode_steps)
    records = []
    for name in rl.encoders:
        for i, dqn_seed in enumerate(rl.seeds):
            enc_seed = cfg.seeds[0] if rl.seed_mode == "dqn" else cfg.seeds[i % len(cfg.seeds)]
            encoder, provenance = _resolve_encoder(store, cfg, name, enc_seed)
            cell = {"encoder": provenance, "rl": cfg.to_dict()["rl"], "grid": cfg.grid.to_dict(), "dqn_seed": dqn_seed}
            h = config_hash(cell)
            run_id = f"rl-{name.replace('/', '-')}-encseed{enc_seed}-seed{dqn_seed}-{h[:10]}"
            rec = store.get(run_id, cell)
            if rec is None or rec.status != "ok":
                rec = RunRecord(run_id, "rl", name, name, cfg.grid.step_px, dqn_seed, h, cell)
                t0 = time.perf_counter()
                try:
                    res = dqn_train(task, encoder, rl.dqn, seed=dqn_seed)
                    mean, std, _ = evaluate_policy(res.policy(), task, rl.eval_episodes, dqn_seed)
                    window = res.returns[-rl.final_window:]
                    rec.metrics = {
                        "final_window_return": float(np.mean(window)),
                        "greedy_return": mean,
                        "greedy_return_std": std,
                        "returns": [float(r) for r in res.returns],
                    }
                except Exception as exc:
                    log.error("rl cell %s failed: %s", run_id, exc)
                    rec.status, rec.error = "failed", str(exc)
                rec.wall_clock = time.perf_counter() - t0
                store.put(rec)
            records.append(rec)
    root = Path(cfg.output_dir)
    curve_rows, summary = [], []
    for name in rl.encoders:
        recs = [r for r in records if r.label == name and r.status == "ok"]
        for r in recs:
            for ep, ret in enumerate(r.metrics["returns"]):
                curve_rows.append([name, r.seed, ep, float(ret)])
        for metric in ("final_window_return", "greedy_return"):
            mean, std, sem, n = _stats([r.metrics.get(metric) for r in recs])
            summary.append([name, metric, mean, std, sem, n])
    _write_table(root / "rl_curves.csv", ["encoder", "seed", "episode", "return"], curve_rows)
    _write_table(root / "rl_summary.csv", ["encoder", "metric", "mean", "std", "sem", "n"], summary)
    write_results_csv(store)
    if plot:
        from .plotting import plot_rl_curves

        plot_rl_curves(records, rl.encoders, root / "figures" / "rl_returns.png")
    return {"records": records, "summary": summary}
