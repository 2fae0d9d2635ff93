"""Command-line pipeline: synthesize, match, pre-train, fine-tune, evaluate.

Subcommands
-----------
synth      Generate a synthetic road network plus GPS trajectories.
match      Map-match a trajectory CSV onto a road network.
pretrain   Pre-train the trajectory model on matched trajectories.
finetune   Fine-tune a pre-trained checkpoint for one task.
eval       Evaluate a checkpoint on a task; per-example CSV + JSON summary.
search     Rank stored trajectories against one query trajectory.
embed      Write dense trajectory embeddings to CSV.
gradcheck  Finite-difference check of the full model's gradients.

Configuration resolves in three layers: built-in defaults, then a JSON file
given with ``--config``, then explicit flags (flags win).  Every run writes
its outputs plus a ``run.json`` provenance record (resolved configuration,
configuration hash, seed, library versions) into the per-run output
directory, so a run is reproducible from ``run.json`` alone.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .mapmatch import MatchedTrajectory, hmm_match, read_matched_csv, write_matched_csv
from .metrics import (
    MetricReport,
    averaged_precision_recall,
    rank_metrics,
    recovery_distances,
    regression_metrics,
)
from .model import ModelConfig, TrajModel
from .neuralcore import grad_check
from .pretrain import PretrainConfig, pretrain
from .roadnet import RoadNetwork, read_network_csv, synth_grid_network, write_network_csv
from .tasks import (
    TaskKind,
    TaskSpec,
    batch_rankings,
    finetune,
    od_tte,
    predict,
    recover,
    similar_search,
)
from .tokenizer import build_dense_plan, build_pretrain_plan
from .trajdata import (
    Dataset,
    Trajectory,
    chronological_split,
    ingest_csv,
    resample,
    synth_trajectories,
    write_trajectories_csv,
)

__all__ = ["CLIError", "RunConfig", "main"]

GRADCHECK_TOLERANCE = 1e-4


class CLIError(ValueError):
    """Raised for path and configuration problems detected before work starts."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one run; defaults follow the tuned optima."""

    network: str | None = None  # path prefix: <prefix>.nodes.csv / <prefix>.edges.csv
    data: str | None = None  # trajectory CSV
    matched: str | None = None  # matched-trajectory CSV
    checkpoint: str | None = None  # checkpoint directory
    out: str | None = None  # per-run output directory (default runs/<command>)
    d: int = 128
    n_heads: int = 8
    n_layers: int = 2
    delta_m: float = 100.0
    eta: float = 15.0
    mu: float = 60.0
    mu_choices: tuple[float, ...] = (60.0, 120.0, 240.0)
    phi: float = 0.2
    tau: float = 0.1
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu_choices", tuple(float(m) for m in self.mu_choices))
        for name in ("d", "n_heads", "n_layers", "batch_size", "epochs", "patience", "workers"):
            if getattr(self, name) < 1:
                raise CLIError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("delta_m", "eta", "mu", "tau", "learning_rate"):
            if getattr(self, name) <= 0:
                raise CLIError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.phi < 1.0:
            raise CLIError(f"phi must be in [0, 1), got {self.phi}")
        if not self.mu_choices or any(m <= 0 for m in self.mu_choices):
            raise CLIError(f"mu_choices must be positive, got {self.mu_choices}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["mu_choices"] = [float(m) for m in self.mu_choices]
        return out


# flag destination -> RunConfig field
_CONFIG_FLAGS = {
    "network": "network",
    "data": "data",
    "matched": "matched",
    "checkpoint": "checkpoint",
    "out": "out",
    "d": "d",
    "heads": "n_heads",
    "layers": "n_layers",
    "delta": "delta_m",
    "eta": "eta",
    "mu": "mu",
    "mu_choices": "mu_choices",
    "phi": "phi",
    "tau": "tau",
    "batch": "batch_size",
    "lr": "learning_rate",
    "epochs": "epochs",
    "patience": "patience",
    "seed": "seed",
    "workers": "workers",
}


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then explicit flags (flags win)."""
    values = RunConfig().to_dict()
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise CLIError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {path} is not valid JSON: {exc}") from None
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise CLIError(f"unknown config keys {unknown}; expected a subset of {sorted(values)}")
        values.update(loaded)
    for dest, field in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[field] = value
    return RunConfig(**values)


def _parse_mu_choices(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# shared plumbing


def _require_path(value: str | None, flag: str, kind: str = "file") -> Path:
    if value is None:
        raise CLIError(f"--{flag} is required for this command")
    path = Path(value)
    exists = path.is_dir() if kind == "dir" else path.is_file()
    if not exists:
        raise CLIError(f"{flag} not found: {path}")
    return path


def _network_paths(prefix: str) -> tuple[Path, Path]:
    return Path(f"{prefix}.nodes.csv"), Path(f"{prefix}.edges.csv")


def _load_network(cfg: RunConfig) -> RoadNetwork:
    if cfg.network is None:
        raise CLIError("--network is required for this command")
    nodes, edges = _network_paths(cfg.network)
    for path in (nodes, edges):
        if not path.is_file():
            raise CLIError(f"network not found: {path}")
    return read_network_csv(str(nodes), str(edges))


def _load_pairs(cfg: RunConfig) -> tuple[Dataset, list[tuple[Trajectory, MatchedTrajectory]]]:
    data_path = _require_path(cfg.data, "data")
    matched_path = _require_path(cfg.matched, "matched")
    dataset = ingest_csv(str(data_path), eta=cfg.eta)
    by_id = {m.traj_id: m for m in read_matched_csv(str(matched_path))}
    pairs = []
    for traj in dataset.trajectories:
        if traj.id not in by_id:
            raise CLIError(f"no matched trajectory for id {traj.id} in {matched_path}")
        pairs.append((traj, by_id[traj.id]))
    return dataset, pairs


def _load_model(cfg: RunConfig) -> TrajModel:
    path = _require_path(cfg.checkpoint, "checkpoint", kind="dir")
    return TrajModel.load(path)


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out) if cfg.out is not None else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out: Path, command: str, cfg: RunConfig, extras: dict) -> None:
    cfg_dict = cfg.to_dict()
    canon = json.dumps(cfg_dict, sort_keys=True).encode()
    payload = {
        "command": command,
        "args": extras,
        "config": cfg_dict,
        "config_hash": hashlib.sha256(canon).hexdigest(),
        "seed": cfg.seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "trajweave": __version__,
        },
    }
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _split_pairs(cfg: RunConfig, dataset: Dataset, pairs) -> tuple[list, list]:
    """Chronological train/validation pairs (test share held out untouched)."""
    by_id = {t.id: m for t, m in pairs}
    train_ds, val_ds, _ = chronological_split(dataset)
    train = [(t, by_id[t.id]) for t in train_ds.trajectories]
    val = [(t, by_id[t.id]) for t in val_ds.trajectories]
    return train, val


def _note_workers(cfg: RunConfig) -> None:
    if cfg.workers > 1:
        print(f"workers={cfg.workers} requested; running serially for reproducibility")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "synth")
    network = synth_grid_network(args.rows, args.cols, args.spacing)
    dataset, matched = synth_trajectories(
        network, args.n, eta=cfg.eta, seed=cfg.seed, noise_sigma_m=args.noise
    )
    nodes, edges = _network_paths(str(out / "network"))
    write_network_csv(network, str(nodes), str(edges))
    write_trajectories_csv(dataset, str(out / "trajectories.csv"))
    write_matched_csv(matched, str(out / "matched.csv"))
    _write_run_record(
        out,
        "synth",
        cfg,
        {"rows": args.rows, "cols": args.cols, "n": args.n, "spacing": args.spacing, "noise": args.noise},
    )
    n_points = sum(len(t) for t in dataset.trajectories)
    print(f"wrote {len(dataset)} trajectories ({n_points} points) and a "
          f"{args.rows}x{args.cols} network under {out}")
    return 0


def cmd_match(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "match")
    network = _load_network(cfg)
    dataset = ingest_csv(str(_require_path(cfg.data, "data")), eta=cfg.eta)
    _note_workers(cfg)
    matched = [hmm_match(network, traj) for traj in dataset.trajectories]
    write_matched_csv(matched, str(out / "matched.csv"))
    _write_run_record(out, "match", cfg, {})
    print(f"matched {len(matched)} trajectories -> {out / 'matched.csv'}")
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "pretrain")
    network = _load_network(cfg)
    dataset, pairs = _load_pairs(cfg)
    train, val = _split_pairs(cfg, dataset, pairs)
    _note_workers(cfg)
    model = TrajModel(
        ModelConfig.for_network(
            network, d=cfg.d, n_heads=cfg.n_heads, n_layers=cfg.n_layers, delta_m=cfg.delta_m
        ),
        seed=cfg.seed,
    )
    pretrain_cfg = PretrainConfig(
        mu_choices=cfg.mu_choices,
        phi=cfg.phi,
        tau=cfg.tau,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        seed=cfg.seed,
        patience=cfg.patience,
    )
    result = pretrain(
        train, model, network, cfg.eta, pretrain_cfg, val_pairs=val, log_path=out / "train_log.csv"
    )
    model.save(out / "checkpoint")
    _write_run_record(out, "pretrain", cfg, {"n_train": len(train), "n_val": len(val)})
    last = result.log[-1]
    print(
        f"pre-trained {len(result.log)} epochs on {len(train)} trajectories "
        f"(best epoch {result.best_epoch}, final recon {last.recon_loss:.4f}, "
        f"contrastive {last.cl_loss:.4f}) -> {out / 'checkpoint'}"
    )
    return 0


def cmd_finetune(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "finetune")
    network = _load_network(cfg)
    dataset, pairs = _load_pairs(cfg)
    model = _load_model(cfg)
    train, val = _split_pairs(cfg, dataset, pairs)
    _note_workers(cfg)
    spec = TaskSpec(kind=TaskKind(args.task), recovery_eta=cfg.eta, mu=cfg.mu)
    result = finetune(
        model,
        train,
        network,
        cfg.eta,
        spec,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        val_pairs=val,
        patience=cfg.patience,
        seed=cfg.seed,
    )
    _write_csv(
        out / "finetune_log.csv",
        ["epoch", "train_loss", "wall_seconds"],
        [[row.epoch, repr(row.train_loss), repr(row.wall_seconds)] for row in result.log],
    )
    model.save(out / "checkpoint")
    _write_run_record(out, "finetune", cfg, {"task": args.task, "n_train": len(train), "n_val": len(val)})
    print(
        f"fine-tuned for {args.task} over {len(result.log)} epochs "
        f"(best epoch {result.best_epoch}) -> {out / 'checkpoint'}"
    )
    return 0


def _eval_tte(model, network, pairs):
    preds, truths, rows = [], [], []
    for traj, _ in pairs:
        pts = traj.points
        pred = od_tte(model, network, (pts[0, 0], pts[0, 1]), (pts[-1, 0], pts[-1, 1]), pts[0, 2])
        truth = float(pts[-1, 2] - pts[0, 2])
        preds.append(pred)
        truths.append(truth)
        rows.append([traj.id, repr(pred), repr(truth), repr(abs(pred - truth))])
    reg = regression_metrics(preds, truths)
    report = MetricReport(
        task="tte",
        values={"mae": reg.mae, "rmse": reg.rmse, "mape_pct": reg.mape_pct},
        n_samples=len(pairs),
        exclusions={"mape_zero_truth": reg.n_zero_truth},
    )
    return report, ["traj_id", "pred_s", "truth_s", "abs_err_s"], rows


def _eval_recover(model, network, pairs, cfg):
    rec_sets, truth_sets, rows = [], [], []
    coor, road, time_ = [], [], []
    n_unaligned = 0
    for traj, matched in pairs:
        sparse = resample(traj, cfg.eta, cfg.mu)
        rec = recover(model, network, sparse, target_eta=cfg.eta)
        rec_sets.append({p.segment_id for p in rec.matched.points})
        truth_sets.append({p.segment_id for p in matched.points})
        dist = recovery_distances(
            network,
            rec.matched.points,
            rec.coords,
            rec.times,
            matched.points,
            traj.points[:, :2],
            traj.points[:, 2],
            eta=cfg.eta,
        )
        coor.append(dist.mae_coor_m)
        road.append(dist.mae_road_m)
        time_.append(dist.mae_time_s)
        n_unaligned += dist.n_unaligned
        rows.append(
            [
                traj.id,
                repr(dist.mae_coor_m),
                repr(dist.mae_road_m),
                repr(dist.mae_time_s),
                rec.n_generated,
                int(rec.times_monotonic),
            ]
        )
    pr = averaged_precision_recall(rec_sets, truth_sets)
    report = MetricReport(
        task="recover",
        values={
            "precision": pr.precision,
            "recall": pr.recall,
            "mae_coor_m": float(np.mean(coor)),
            "mae_road_m": float(np.mean(road)),
            "mae_time_s": float(np.mean(time_)),
        },
        n_samples=pr.n_samples,
        exclusions={"empty_recovered": pr.n_excluded, "unaligned_points": n_unaligned},
    )
    header = ["traj_id", "mae_coor_m", "mae_road_m", "mae_time_s", "n_generated", "times_monotonic"]
    return report, header, rows


def _eval_predict(model, network, pairs, cfg):
    rng = np.random.default_rng([cfg.seed, 97])
    rec_sets, truth_sets, rows = [], [], []
    n_short = 0
    for traj, matched in pairs:
        if len(traj) < 3:
            n_short += 1
            continue
        n = int(rng.integers(2, len(traj)))
        block = predict(model, network, traj, matched, n)
        rec_sets.append({tup.road.segment_id for tup in block})
        truth_sets.append({p.segment_id for p in matched.points[n:]})
        p, r = (0.0, 0.0)
        if rec_sets[-1]:
            hit = len(rec_sets[-1] & truth_sets[-1])
            p, r = hit / len(rec_sets[-1]), hit / len(truth_sets[-1])
        rows.append([traj.id, n, len(block), repr(p), repr(r)])
    if not rec_sets:
        raise CLIError("no trajectory long enough to evaluate prediction")
    pr = averaged_precision_recall(rec_sets, truth_sets)
    report = MetricReport(
        task="predict",
        values={"precision": pr.precision, "recall": pr.recall},
        n_samples=pr.n_samples,
        exclusions={"too_short": n_short, "empty_prediction": pr.n_excluded},
    )
    return report, ["traj_id", "n_history", "n_predicted", "precision", "recall"], rows


def _eval_search(model, network, pairs, cfg):
    candidates = [resample(traj, cfg.eta, cfg.mu) for traj, _ in pairs]
    rankings = batch_rankings(model, network, pairs, candidates, batch_size=cfg.batch_size)
    truths = [traj.id for traj, _ in pairs]
    rank = rank_metrics(rankings, truths)
    rows = [
        [truth, ranking.index(truth) + 1]
        for truth, ranking in zip(truths, rankings)
    ]
    report = MetricReport(
        task="search",
        values={"mean_rank": rank.mean_rank, "top1_acc_pct": rank.top1_acc_pct},
        n_samples=rank.n_queries,
    )
    return report, ["traj_id", "rank"], rows


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "eval")
    network = _load_network(cfg)
    model = _load_model(cfg)
    _, pairs = _load_pairs(cfg)
    _note_workers(cfg)
    if args.task == "tte":
        report, header, rows = _eval_tte(model, network, pairs)
    elif args.task == "recover":
        report, header, rows = _eval_recover(model, network, pairs, cfg)
    elif args.task == "predict":
        report, header, rows = _eval_predict(model, network, pairs, cfg)
    else:
        report, header, rows = _eval_search(model, network, pairs, cfg)
    _write_csv(out / "examples.csv", header, rows)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    _write_run_record(out, "eval", cfg, {"task": args.task})
    for key, value in sorted(report.values.items()):
        print(f"{args.task} {key}: {value:.4f}")
    return 0


def cmd_search(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "search")
    network = _load_network(cfg)
    model = _load_model(cfg)
    _, pairs = _load_pairs(cfg)
    query = next((pair for pair in pairs if str(pair[0].id) == args.query_id), None)
    if query is None:
        raise CLIError(f"query id {args.query_id} not found in {cfg.data}")
    candidates = [
        resample(traj, cfg.eta, cfg.mu) for traj, _ in pairs if str(traj.id) != args.query_id
    ]
    ranked = similar_search(model, network, query, candidates, batch_size=cfg.batch_size)
    _write_csv(out / "ranking.csv", ["rank", "traj_id"], list(enumerate(ranked, start=1)))
    _write_run_record(out, "search", cfg, {"query_id": args.query_id})
    top = ", ".join(str(t) for t in ranked[:5])
    print(f"ranked {len(ranked)} candidates for query {args.query_id}; top: {top}")
    return 0


def cmd_embed(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "embed")
    network = _load_network(cfg)
    model = _load_model(cfg)
    _, pairs = _load_pairs(cfg)
    delta = model.config.delta_m
    plans = [build_dense_plan(m, t, network, delta) for t, m in pairs]
    rows = []
    for start in range(0, len(plans), cfg.batch_size):
        emb = model.embed(plans[start : start + cfg.batch_size]).data
        for offset, vector in enumerate(emb):
            traj = pairs[start + offset][0]
            rows.append([traj.id] + [repr(float(v)) for v in vector])
    header = ["traj_id"] + [f"e{i}" for i in range(model.config.d)]
    _write_csv(out / "embeddings.csv", header, rows)
    _write_run_record(out, "embed", cfg, {})
    print(f"wrote {len(rows)} embeddings of dimension {model.config.d} -> {out / 'embeddings.csv'}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "gradcheck")
    network = synth_grid_network(6, 6, 100.0)
    dataset, matched = synth_trajectories(network, 1, eta=cfg.eta, seed=cfg.seed)
    traj = Trajectory(dataset.trajectories[0].id, dataset.trajectories[0].points[:3].copy())
    match = MatchedTrajectory(matched[0].traj_id, matched[0].points[:3])
    model = TrajModel(
        ModelConfig.for_network(
            network, d=args.d, n_heads=args.heads, n_layers=args.layers, delta_m=cfg.delta_m
        ),
        seed=cfg.seed,
    ).astype(np.float64)
    plan = build_pretrain_plan(
        match, traj, resample(traj, cfg.eta, cfg.eta), network, cfg.delta_m, shuffle=False
    )
    error = grad_check(
        lambda: model.reconstruction_loss([plan])[0], model.params, max_coords=args.max_coords
    )
    passed = error <= GRADCHECK_TOLERANCE
    (out / "gradcheck.json").write_text(
        json.dumps(
            {"max_rel_error": error, "tolerance": GRADCHECK_TOLERANCE, "passed": passed}, indent=2
        )
        + "\n"
    )
    _write_run_record(
        out, "gradcheck", cfg, {"d": args.d, "heads": args.heads, "layers": args.layers}
    )
    print(f"max relative gradient error: {error:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    print("PASS" if passed else "FAIL")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    add = parser.add_argument
    add("--config", default=None, metavar="JSON", help="JSON config file; flags override it")
    add("--seed", type=int, default=None, help="random seed (default 0)")
    add("--workers", type=int, default=None, help="worker count; serial by default")
    add("--network", default=None, metavar="PREFIX", help="road network path prefix")
    add("--data", default=None, metavar="CSV", help="trajectory CSV")
    add("--matched", default=None, metavar="CSV", help="matched-trajectory CSV")
    add("--checkpoint", default=None, metavar="DIR", help="model checkpoint directory")
    add("--out", default=None, metavar="DIR", help="output directory (default runs/<command>)")
    add("--d", type=int, default=None, help="embedding dimension (default 128)")
    add("--heads", type=int, default=None, help="attention heads (default 8)")
    add("--layers", type=int, default=None, help="attention layers (default 2)")
    add("--delta", type=float, default=None, help="road candidate radius in meters (default 100)")
    add("--eta", type=float, default=None, help="dense sampling interval in seconds (default 15)")
    add("--mu", type=float, default=None, help="sparse sampling interval in seconds (default 60)")
    add("--mu-choices", type=_parse_mu_choices, default=None, dest="mu_choices",
        help="pre-training sparse intervals, comma-separated (default 60,120,240)")
    add("--phi", type=float, default=None, help="feature removal probability (default 0.2)")
    add("--tau", type=float, default=None, help="contrastive temperature (default 0.1)")
    add("--batch", type=int, default=None, help="batch size (default 128)")
    add("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    add("--epochs", type=int, default=None, help="training epochs (default 50)")
    add("--patience", type=int, default=None, help="early-stopping patience (default 5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajweave",
        description="Self-supervised trajectory modeling pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic network and trajectories")
    p.add_argument("--rows", type=int, default=6)
    p.add_argument("--cols", type=int, default=6)
    p.add_argument("--n", type=int, default=500, help="number of trajectories")
    p.add_argument("--spacing", type=float, default=100.0, help="grid spacing in meters")
    p.add_argument("--noise", type=float, default=0.0, help="GPS noise sigma in meters")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="map-match a trajectory CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("pretrain", help="pre-train the model")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint for one task")
    p.add_argument("--task", required=True, choices=["tte", "recover", "predict"])
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p.add_argument("--task", required=True, choices=["tte", "recover", "predict", "search"])
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="rank stored trajectories against one query")
    p.add_argument("--query-id", required=True, dest="query_id")
    _add_config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("embed", help="write dense trajectory embeddings")
    _add_config_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p.add_argument("--d", type=int, default=16, help="probe model width")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--max-coords", type=int, default=120, dest="max_coords",
                   help="sampled coordinates per parameter")
    # gradcheck is self-contained; it shares only the global flags
    p.add_argument("--config", default=None, metavar="JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None, metavar="DIR")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _module_tag(exc: BaseException) -> str:
    """Name of the deepest package module on the exception's traceback."""
    tag = "cli"
    tb = exc.__traceback__
    while tb is not None:
        module = tb.tb_frame.f_globals.get("__name__", "")
        if module.startswith("trajweave."):
            tag = module.split(".", 1)[1]
        tb = tb.tb_next
    return tag


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except Exception as exc:
        print(f"error [{_module_tag(exc)}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
