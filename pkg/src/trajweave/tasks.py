"""Task adapters sharing one trained checkpoint.

Each adapter only arranges its inputs — travel-time estimation, trajectory
recovery, trajectory prediction, and similar-trajectory search all drive the
same model through the same masked-block interface, matching how it was
pre-trained. Fine-tuning reuses the teacher-forced reconstruction loss on
task-shaped plans, without the contrastive term.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neuralcore as nc
from .mapmatch import MatchedPoint, MatchedTrajectory
from .model import TrajModel
from .roadnet import RoadNetwork
from .tokenizer import (
    G_END,
    G_MASK,
    PlanItem,
    SequencePlan,
    TargetBlock,
    TrajTuple,
    build_dense_plan,
    build_pretrain_plan,
    make_tuple,
)
from .trajdata import SparseTrajectory, Trajectory, resample


class TaskError(ValueError):
    """A task request is malformed or unsupported."""


class TaskKind(enum.Enum):
    OD_TTE = "tte"
    RECOVERY = "recover"
    PREDICTION = "predict"
    SIMILAR_SEARCH = "search"


@dataclass(frozen=True)
class TaskSpec:
    """Which task to run and its parameters.

    recovery_eta is the time gap (seconds) above which a mask tuple is
    inserted during recovery; history_n the evaluation history length for
    prediction; mu the sparse sampling interval used for recovery fine-tuning
    inputs and search candidates.
    """

    kind: TaskKind
    recovery_eta: float | None = None
    history_n: int | None = None
    mu: float | None = None

    def __post_init__(self) -> None:
        if self.recovery_eta is not None and self.recovery_eta <= 0:
            raise TaskError(f"recovery_eta must be positive, got {self.recovery_eta}")
        if self.history_n is not None and self.history_n < 1:
            raise TaskError(f"history_n must be at least 1, got {self.history_n}")
        if self.mu is not None and self.mu <= 0:
            raise TaskError(f"mu must be positive, got {self.mu}")


Pair = tuple[Trajectory, MatchedTrajectory]


# ------------------------------------------------------------------- OD TTE


def od_tte(
    model: TrajModel,
    network: RoadNetwork,
    origin: tuple[float, float],
    destination: tuple[float, float],
    departure: float,
) -> float:
    """Estimated seconds to drive origin -> destination leaving at departure.

    The input is the two-point arrangement (origin with its departure time,
    destination with time and road hidden); only the destination block is
    generated and its de-normalized time — anchored at the departure — is the
    travel time, clamped to be non-negative.
    """
    delta = model.config.delta_m
    o = make_tuple(None, origin, departure, departure, network, delta)
    d = make_tuple(None, destination, None, departure, network, delta)
    for name, tup in (("origin", o), ("destination", d)):
        if not tup.spatial.omega:
            raise TaskError(f"{name} has no road segment within {delta:g} m")
    block = model.generate([o, d], network, anchors=[1])[0]
    return max(0.0, float(block[0].temporal.t_norm))


# ----------------------------------------------------------------- recovery


@dataclass
class RecoveryResult:
    """A densified trajectory: one entry per output point, in input order."""

    matched: MatchedTrajectory
    coords: np.ndarray  # (n, 2) lng/lat
    times: np.ndarray  # absolute seconds
    times_monotonic: bool  # False when generated times fail to increase
    n_generated: int  # tuples produced for gap masks


def recover(
    model: TrajModel,
    network: RoadNetwork,
    sparse: SparseTrajectory,
    target_eta: float,
    max_block_len: int | None = None,
) -> RecoveryResult:
    """Reconstruct a dense matched trajectory from a sparse one.

    A mask tuple is inserted between consecutive points whose time gap
    exceeds target_eta; gap blocks and the known points' road completions are
    then generated in input order. Known coordinates and timestamps override
    the model's re-predictions in the output. Generated times are reported in
    generation order, with a flag recording whether they increase.
    """
    if target_eta <= 0:
        raise TaskError(f"target_eta must be positive, got {target_eta}")
    entries = sparse.entries
    if not entries:
        raise TaskError("sparse trajectory is empty")
    for e in entries:
        if e.t is None:
            raise TaskError("recovery needs a timestamp on every input point")
    t0 = float(entries[0].t)
    delta = model.config.delta_m

    items: list[TrajTuple] = []
    origins: list[int] = []  # entry index, or -1 for an inserted gap mask
    for k, e in enumerate(entries):
        if k > 0 and float(e.t) - float(entries[k - 1].t) > target_eta:
            items.append(G_MASK)
            origins.append(-1)
        items.append(make_tuple(None, e.coord, e.t, t0, network, delta))
        origins.append(k)
    blocks = model.generate(items, network, max_block_len=max_block_len)

    points: list[MatchedPoint] = []
    coords: list[tuple[float, float]] = []
    n_generated = 0
    for origin, block in zip(origins, blocks):
        if origin < 0:
            n_generated += len(block)
            for tup in block:
                t = t0 + float(tup.temporal.t_norm)
                points.append(MatchedPoint(tup.road.segment_id, tup.road.fraction, t))
                coords.append((tup.spatial.lng, tup.spatial.lat))
        else:
            entry = entries[origin]
            tup = block[0]  # partially masked anchors always yield one tuple
            lng, lat = entry.coord if entry.coord is not None else (
                tup.spatial.lng,
                tup.spatial.lat,
            )
            points.append(MatchedPoint(tup.road.segment_id, tup.road.fraction, float(entry.t)))
            coords.append((float(lng), float(lat)))
    times = np.array([p.timestamp for p in points])
    return RecoveryResult(
        matched=MatchedTrajectory(sparse.traj_id, points),
        coords=np.array(coords),
        times=times,
        times_monotonic=bool(np.all(np.diff(times) > 0)),
        n_generated=n_generated,
    )


# --------------------------------------------------------------- prediction


def predict(
    model: TrajModel,
    network: RoadNetwork,
    trajectory: Trajectory,
    matched: MatchedTrajectory,
    n: int,
    max_block_len: int | None = None,
) -> list[TrajTuple]:
    """Future tuples after the first n points, until the stop class or cap.

    The history enters as full tuples followed by one mask tuple; the mask's
    block is the future. The last generated tuple carries the predicted
    destination segment, fraction, coordinate, and time.
    """
    if n < 1:
        raise TaskError("history must contain at least one point")
    if n > len(trajectory):
        raise TaskError(f"history length {n} exceeds the trajectory ({len(trajectory)} points)")
    pts = trajectory.points
    t0 = float(pts[0, 2])
    delta = model.config.delta_m
    items = [
        make_tuple(matched.points[i], (pts[i, 0], pts[i, 1]), pts[i, 2], t0, network, delta)
        for i in range(n)
    ]
    items.append(G_MASK)
    return model.generate(items, network, max_block_len=max_block_len, anchors=[n])[0]


# ------------------------------------------------------------ similar search


def sparse_plan(sparse: SparseTrajectory, network: RoadNetwork, delta_m: float) -> SequencePlan:
    """The pre-training input arrangement of a sparse trajectory, without
    ground-truth blocks: kept tuples (road hidden) with one mask tuple per
    skipped-index gap. Suitable for embedding."""
    entries = sparse.entries
    if not entries:
        raise TaskError("sparse trajectory is empty")
    if entries[0].t is None:
        raise TaskError("first sparse entry is missing its timestamp")
    t0 = float(entries[0].t)
    items: list[PlanItem] = []
    prev_idx: int | None = None
    for e in entries:
        if prev_idx is not None and e.dense_index - prev_idx > 1:
            items.append(PlanItem(G_MASK, len(items) + 1))
        items.append(
            PlanItem(make_tuple(None, e.coord, e.t, t0, network, delta_m), len(items) + 1)
        )
        prev_idx = e.dense_index
    return SequencePlan(sparse.traj_id, t0, items, [])


def _embed_batched(model: TrajModel, plans: Sequence[SequencePlan], batch_size: int) -> np.ndarray:
    rows = [
        model.embed(plans[start : start + batch_size]).data
        for start in range(0, len(plans), batch_size)
    ]
    return np.concatenate(rows, axis=0)


def batch_rankings(
    model: TrajModel,
    network: RoadNetwork,
    queries: Sequence[Pair],
    candidates: Sequence[SparseTrajectory],
    batch_size: int = 128,
) -> list[list]:
    """Candidate ids ranked for every query; each side embeds exactly once.

    Queries embed as feature-complete sequences; candidates embed through the
    same sparse arrangement used in pre-training. Cosine similarity ranks
    candidates per query, ties breaking toward the lower candidate id.
    Zero-shot: no parameters change.
    """
    if not candidates:
        raise TaskError("candidate set is empty")
    if not queries:
        raise TaskError("query set is empty")
    delta = model.config.delta_m
    q_emb = _embed_batched(
        model, [build_dense_plan(m, t, network, delta) for t, m in queries], batch_size
    )
    c_emb = _embed_batched(
        model, [sparse_plan(c, network, delta) for c in candidates], batch_size
    )
    q_norms = np.linalg.norm(q_emb, axis=1)
    c_norms = np.linalg.norm(c_emb, axis=1)
    if np.any(q_norms == 0.0) or np.any(c_norms == 0.0):
        raise TaskError("zero-norm embedding")
    sims = (q_emb / q_norms[:, None]) @ (c_emb / c_norms[:, None]).T
    ids = [c.traj_id for c in candidates]
    rankings = []
    for row in sims:
        order = sorted(range(len(ids)), key=lambda i: (-row[i], ids[i]))
        rankings.append([ids[i] for i in order])
    return rankings


def similar_search(
    model: TrajModel,
    network: RoadNetwork,
    query: Pair,
    candidates: Sequence[SparseTrajectory],
    batch_size: int = 128,
) -> list:
    """Candidate ids ranked by cosine similarity to the query's embedding."""
    return batch_rankings(model, network, [query], candidates, batch_size)[0]


# ---------------------------------------------------------------- fine-tune


def build_task_plan(
    spec: TaskSpec,
    trajectory: Trajectory,
    matched: MatchedTrajectory,
    network: RoadNetwork,
    eta: float,
    delta_m: float,
    rng: np.random.Generator,
) -> SequencePlan:
    """One fine-tuning plan shaped exactly like the task's inference input."""
    pts = trajectory.points
    if spec.kind is TaskKind.OD_TTE:
        departure = float(pts[0, 2])
        o = make_tuple(None, (pts[0, 0], pts[0, 1]), departure, departure, network, delta_m)
        d = make_tuple(None, (pts[-1, 0], pts[-1, 1]), None, departure, network, delta_m)
        truth = make_tuple(
            matched.points[-1], (pts[-1, 0], pts[-1, 1]), pts[-1, 2], departure, network, delta_m
        )
        items = [PlanItem(o, 1), PlanItem(d, 2)]
        return SequencePlan(trajectory.id, departure, items, [TargetBlock(1, (truth, G_END))])
    if spec.kind is TaskKind.RECOVERY:
        mu = spec.mu if spec.mu is not None else 60.0
        sparse = resample(trajectory, eta, mu)
        return build_pretrain_plan(matched, trajectory, sparse, network, delta_m, shuffle=False)
    if spec.kind is TaskKind.PREDICTION:
        if len(pts) < 3:
            raise TaskError(f"trajectory {trajectory.id} is too short to split into "
                            "history and future")
        n = int(rng.integers(2, len(pts)))
        t0 = float(pts[0, 2])
        items = [
            PlanItem(
                make_tuple(matched.points[i], (pts[i, 0], pts[i, 1]), pts[i, 2], t0, network, delta_m),
                i + 1,
            )
            for i in range(n)
        ]
        items.append(PlanItem(G_MASK, n + 1))
        future = tuple(
            make_tuple(matched.points[i], (pts[i, 0], pts[i, 1]), pts[i, 2], t0, network, delta_m)
            for i in range(n, len(pts))
        )
        return SequencePlan(trajectory.id, t0, items, [TargetBlock(n, future + (G_END,))])
    raise TaskError("similar search is zero-shot; it has no fine-tuning plans")


@dataclass(frozen=True)
class FinetuneLogRow:
    epoch: int
    train_loss: float
    wall_seconds: float


@dataclass
class FinetuneResult:
    log: list[FinetuneLogRow]
    val_losses: list[float]
    best_epoch: int  # -1 without a validation set
    stopped_early: bool


def _mean_plan_loss(model: TrajModel, plans: Sequence[SequencePlan], batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(plans), batch_size):
        _, details = model.reconstruction_loss(
            list(plans[start : start + batch_size]), include_cls=True
        )
        total += float(details.per_plan_loss.sum())
    return total / len(plans)


def finetune(
    model: TrajModel,
    train_pairs: Sequence[Pair],
    network: RoadNetwork,
    eta: float,
    spec: TaskSpec,
    epochs: int,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    val_pairs: Sequence[Pair] = (),
    patience: int = 5,
    seed: int = 0,
) -> FinetuneResult:
    """Teacher-forced training on task-shaped plans; no contrastive term.

    Early stopping watches the mean validation plan loss with the given
    patience; on return the model holds the best-validation parameters (the
    final ones without a validation set). Prediction redraws each history
    length uniformly per example and epoch; the validation plans are fixed.
    """
    if spec.kind is TaskKind.SIMILAR_SEARCH:
        raise TaskError("similar search is zero-shot; nothing to fine-tune")
    if not train_pairs:
        raise TaskError("training set is empty")
    if epochs < 1 or patience < 1 or batch_size < 1:
        raise TaskError("epochs, patience, and batch_size must be at least 1")
    delta_m = model.config.delta_m
    val_rng = np.random.default_rng([seed, 2**31])
    val_plans = [
        build_task_plan(spec, t, m, network, eta, delta_m, val_rng) for t, m in val_pairs
    ]
    log: list[FinetuneLogRow] = []
    val_losses: list[float] = []
    best_loss = float("inf")
    best_epoch = -1
    best_values: dict[str, np.ndarray] | None = None
    stopped_early = False
    start_time = time.monotonic()
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch + 1])
        order = rng.permutation(len(train_pairs))
        train_sum = 0.0
        for batch_index, start in enumerate(range(0, len(order), batch_size)):
            plans = []
            for i in order[start : start + batch_size]:
                trajectory, matched = train_pairs[int(i)]
                plans.append(
                    build_task_plan(spec, trajectory, matched, network, eta, delta_m, rng)
                )
            model.params.zero_grad()
            total, details = model.reconstruction_loss(plans, include_cls=True)
            if not np.isfinite(total.data):
                raise TaskError(f"batch {batch_index}: loss is not finite")
            total.backward()
            nc.adam_step(model.params, learning_rate)
            train_sum += float(details.per_plan_loss.sum())
        log.append(
            FinetuneLogRow(epoch, train_sum / len(train_pairs), time.monotonic() - start_time)
        )
        if not val_plans:
            continue
        val_loss = _mean_plan_loss(model, val_plans, batch_size)
        val_losses.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_values = {
                name: model.params[name].data.copy() for name in model.params.names()
            }
        elif epoch - best_epoch >= patience:
            stopped_early = True
            break
    if best_values is not None:
        model.params.load_values(best_values)
    return FinetuneResult(log, val_losses, best_epoch, stopped_early)
