"""Self-supervised pre-training over map-matched trajectories.

Each step pairs a dense trajectory with a sparse, feature-incomplete view of
itself: the model reconstructs the dense tuples from the sparse arrangement
(teacher-forced), while an InfoNCE term pulls the two whole-trajectory
embeddings together against the rest of the batch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neuralcore as nc
from .mapmatch import MatchedTrajectory
from .model import TrajModel
from .roadnet import RoadNetwork
from .tokenizer import SequencePlan, build_dense_plan, build_pretrain_plan
from .trajdata import SparseTrajectory, Trajectory, drop_features, resample


class PretrainError(RuntimeError):
    """Raised when a training run cannot proceed."""


# 128 is the tuned optimum batch size; 256 the diminishing-returns point for
# the contrastive term. Both are sensible presets.
BATCH_SIZE_PRESETS = (128, 256)


@dataclass(frozen=True)
class PretrainConfig:
    """Hyper-parameters of the self-supervised stage.

    mu_choices are the candidate sparse sampling intervals (seconds), drawn
    uniformly per example; phi is the probability that a kept point loses one
    of its remaining features; tau is the contrastive temperature.
    """

    mu_choices: tuple[float, ...] = (60.0, 120.0, 240.0)
    phi: float = 0.2
    tau: float = 0.1
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    patience: int = 5

    def __post_init__(self) -> None:
        if not self.mu_choices or any(m <= 0 for m in self.mu_choices):
            raise ValueError(f"mu_choices must be positive, got {self.mu_choices}")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must be in [0, 1), got {self.phi}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs, and patience must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    def to_dict(self) -> dict:
        return {
            "mu_choices": list(self.mu_choices),
            "phi": self.phi,
            "tau": self.tau,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        if "mu_choices" in d:
            d["mu_choices"] = tuple(float(m) for m in d["mu_choices"])
        return cls(**d)


Pair = tuple[Trajectory, MatchedTrajectory]


def make_pretrain_example(
    trajectory: Trajectory,
    matched: MatchedTrajectory,
    network: RoadNetwork,
    eta: float,
    delta_m: float,
    config: PretrainConfig,
    rng: np.random.Generator,
) -> tuple[SequencePlan, SparseTrajectory]:
    """One training example: a sparse view arranged for reconstruction.

    The sampling interval mu is drawn uniformly from the config choices, the
    trajectory is thinned to that interval, each kept point loses a feature
    with probability phi (road slots are always masked), and the generation
    order of the blocks is shuffled.
    """
    mu = float(config.mu_choices[int(rng.integers(len(config.mu_choices)))])
    sparse = drop_features(resample(trajectory, eta, mu), config.phi, rng)
    plan = build_pretrain_plan(
        matched, trajectory, sparse, network, delta_m, shuffle=True, rng=rng
    )
    return plan, sparse


def info_nce(dense: nc.Tensor, sparse: nc.Tensor, tau: float) -> tuple[nc.Tensor, nc.Tensor]:
    """Contrastive loss pairing each trajectory's dense and sparse embeddings.

    Row i of both matrices must embed the same trajectory. Dense rows act as
    queries against all sparse rows of the batch: the matching row is the
    positive and every sparse row (positive included) enters the denominator.
    Similarity is cosine. Returns (per-trajectory losses, batch mean); a batch
    of one yields exactly zero.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if dense.shape != sparse.shape or len(dense.shape) != 2:
        raise ValueError(f"embedding shapes disagree: {dense.shape} vs {sparse.shape}")
    b = dense.shape[0]

    def unit_rows(x: nc.Tensor, side: str) -> nc.Tensor:
        sq = nc.tensor_sum(x * x, axis=-1, keepdims=True)
        if not np.all(sq.data > 0.0):
            raise ValueError(f"zero-norm {side} embedding at row {int(np.argmin(sq.data))}")
        return x * sq ** -0.5

    sims = nc.matmul(unit_rows(dense, "dense"), nc.swapaxes(unit_rows(sparse, "sparse"), 0, 1))
    logits = sims * (1.0 / tau)
    row_max = logits.data.max(axis=1)  # detached: only shifts exp into range
    shifted = logits - nc.constant(row_max[:, None], logits.dtype)
    lse = nc.log(nc.tensor_sum(nc.exp(shifted), axis=1)) + nc.constant(row_max, logits.dtype)
    positive = nc.take(logits, (np.arange(b), np.arange(b)))
    per_trajectory = lse - positive
    return per_trajectory, nc.tensor_mean(per_trajectory)


@dataclass(frozen=True)
class EpochStats:
    """Mean losses per trajectory and the count of supervised tuples."""

    recon_loss: float
    cl_loss: float
    n_tuples: int
    n_trajectories: int


def pretrain_epoch(
    pairs: Sequence[Pair],
    model: TrajModel,
    network: RoadNetwork,
    eta: float,
    config: PretrainConfig,
    rng: np.random.Generator,
    update: bool = True,
) -> EpochStats:
    """One pass over the dataset.

    Per batch: build sparse examples, run one teacher-forced reconstruction
    pass whose class-token rows double as the sparse embeddings, embed the
    dense trajectories, add each trajectory's contrastive loss to its mean
    reconstruction loss, and take one optimizer step on the batch sum.
    """
    if not pairs:
        raise PretrainError("dataset is empty")
    delta_m = model.config.delta_m
    order = rng.permutation(len(pairs)) if update else np.arange(len(pairs))
    recon_sum = 0.0
    cl_sum = 0.0
    n_tuples = 0
    for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
        chosen = order[start : start + config.batch_size]
        plans: list[SequencePlan] = []
        dense_plans: list[SequencePlan] = []
        for i in chosen:
            trajectory, matched = pairs[int(i)]
            plan, _ = make_pretrain_example(
                trajectory, matched, network, eta, delta_m, config, rng
            )
            plans.append(plan)
            dense_plans.append(build_dense_plan(matched, trajectory, network, delta_m))
        model.params.zero_grad()
        recon_total, details = model.reconstruction_loss(plans, include_cls=True)
        dense_embeddings = model.embed(dense_plans)
        per_cl, _ = info_nce(dense_embeddings, details.embeddings, config.tau)
        batch_loss = recon_total + nc.tensor_sum(per_cl)
        if not np.isfinite(batch_loss.data):
            raise PretrainError(f"batch {batch_index}: loss is not finite")
        if update:
            batch_loss.backward()
            nc.adam_step(model.params, config.learning_rate)
        recon_sum += float(details.per_plan_loss.sum())
        cl_sum += float(per_cl.data.sum())
        n_tuples += len(details.per_position_loss)
    n = len(pairs)
    return EpochStats(recon_sum / n, cl_sum / n, n_tuples, n)


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    recon_loss: float
    cl_loss: float
    wall_seconds: float


@dataclass
class PretrainResult:
    log: list[TrainLogRow]
    val_losses: list[float]
    best_epoch: int  # -1 without a validation set
    stopped_early: bool


def _validation_loss(
    model: TrajModel, val_plans: Sequence[SequencePlan], batch_size: int
) -> float:
    total = 0.0
    for start in range(0, len(val_plans), batch_size):
        chunk = list(val_plans[start : start + batch_size])
        _, details = model.reconstruction_loss(chunk, include_cls=True)
        total += float(details.per_plan_loss.sum())
    return total / len(val_plans)


def pretrain(
    train_pairs: Sequence[Pair],
    model: TrajModel,
    network: RoadNetwork,
    eta: float,
    config: PretrainConfig,
    val_pairs: Sequence[Pair] = (),
    log_path: str | None = None,
) -> PretrainResult:
    """Run up to config.epochs passes with early stopping on validation loss.

    The validation views are built once with a fixed seed so the early
    stopping signal compares like with like across epochs; training example
    randomness is re-derived per epoch from the config seed. On return the
    model holds the best-validation parameters (the final ones when no
    validation set is given). The CSV log has one row per completed epoch.
    """
    if not train_pairs:
        raise PretrainError("training set is empty")
    val_rng = np.random.default_rng([config.seed, 2**31])
    val_plans = [
        make_pretrain_example(t, m, network, eta, model.config.delta_m, config, val_rng)[0]
        for t, m in val_pairs
    ]
    log_rows: list[TrainLogRow] = []
    val_losses: list[float] = []
    best_loss = float("inf")
    best_epoch = -1
    best_values: dict[str, np.ndarray] | None = None
    stopped_early = False
    start_time = time.monotonic()
    log_file = open(log_path, "w", newline="") if log_path else None
    try:
        writer = csv.writer(log_file) if log_file else None
        if writer:
            writer.writerow(["epoch", "recon_loss", "cl_loss", "wall_seconds"])
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch + 1])
            stats = pretrain_epoch(train_pairs, model, network, eta, config, rng)
            row = TrainLogRow(
                epoch, stats.recon_loss, stats.cl_loss, time.monotonic() - start_time
            )
            log_rows.append(row)
            if writer:
                writer.writerow([row.epoch, row.recon_loss, row.cl_loss, row.wall_seconds])
                log_file.flush()
            if not val_plans:
                continue
            val_loss = _validation_loss(model, val_plans, config.batch_size)
            val_losses.append(val_loss)
            if val_loss < best_loss:
                best_loss = val_loss
                best_epoch = epoch
                best_values = {
                    name: model.params[name].data.copy() for name in model.params.names()
                }
            elif epoch - best_epoch >= config.patience:
                stopped_early = True
                break
    finally:
        if log_file:
            log_file.close()
    if best_values is not None:
        model.params.load_values(best_values)
    return PretrainResult(log_rows, val_losses, best_epoch, stopped_early)


def save_checkpoint(model: TrajModel, path) -> None:
    """Write the model's manifest and parameter blob under a directory."""
    model.save(path)


def load_checkpoint(path) -> TrajModel:
    """Rebuild a model from a checkpoint directory."""
    return TrajModel.load(path)
