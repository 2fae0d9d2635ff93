"""Trajectory tokenization: maskable feature-domain tuples and sequence plans.

A trajectory point becomes a tuple of three independently maskable domains:
spatial (coordinate plus nearby segments), temporal (seconds since the
trajectory's first timestamp), and road (segment id and fraction). Sparse or
incomplete trajectories are arranged into a sequence plan: the visible tuples
form the input sequence, and every masked input anchors a target block that
spells out the missing tuples, terminated by an end token. Dual-layer
positions tie each block to its anchor (shared first-layer position) while
ordering tuples inside the block (second-layer position).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for annotations
    from .mapmatch import MatchedPoint, MatchedTrajectory
    from .roadnet import RoadNetwork
    from .trajdata import SparseTrajectory, Trajectory


class PlanError(ValueError):
    """A sequence plan or its ingredients are malformed."""


class Special(enum.Enum):
    """Special tokens a tuple slot may hold instead of a concrete domain."""

    MASK = 0
    START = 1
    END = 2
    CLS = 3


@dataclass(frozen=True)
class Spatial:
    lng: float
    lat: float
    omega: tuple[int, ...]  # segment ids within delta meters of the coordinate


@dataclass(frozen=True)
class Temporal:
    t_norm: float  # seconds since the trajectory's first available timestamp


@dataclass(frozen=True)
class Road:
    segment_id: int
    fraction: float


@dataclass(frozen=True)
class TrajTuple:
    spatial: Spatial | Special
    temporal: Temporal | Special
    road: Road | Special

    def special(self) -> Special | None:
        """The token this tuple represents when all three slots agree."""
        if (
            isinstance(self.spatial, Special)
            and self.spatial is self.temporal
            and self.spatial is self.road
        ):
            return self.spatial
        return None

    def has_mask(self) -> bool:
        return Special.MASK in (self.spatial, self.temporal, self.road)


G_MASK = TrajTuple(Special.MASK, Special.MASK, Special.MASK)
G_START = TrajTuple(Special.START, Special.START, Special.START)
G_END = TrajTuple(Special.END, Special.END, Special.END)
G_CLS = TrajTuple(Special.CLS, Special.CLS, Special.CLS)


@dataclass(frozen=True)
class PlanItem:
    """One input-sequence token with its first-layer position (P2 is 0)."""

    tup: TrajTuple
    p1: int


@dataclass(frozen=True)
class TargetBlock:
    """Ground truth generated at one masked input: tuples ending with G_END."""

    anchor: int  # index into SequencePlan.items
    targets: tuple[TrajTuple, ...]


@dataclass
class SequencePlan:
    traj_id: int
    t0: float
    items: list[PlanItem]
    blocks: list[TargetBlock]
    block_order: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.block_order:
            self.block_order = list(range(len(self.blocks)))


@dataclass(frozen=True)
class StreamToken:
    """One position of the teacher-forcing stream fed to the encoder.

    Input positions carry block=None and predict nothing; generated positions
    carry the block they extend and the ground-truth tuple they predict.
    """

    tup: TrajTuple
    p1: int
    p2: int
    block: int | None = None
    target: TrajTuple | None = None


def make_tuple(
    matched_point: "MatchedPoint | None",
    coordinate: tuple[float, float] | None,
    t: float | None,
    t0: float,
    network: "RoadNetwork",
    delta_m: float,
) -> TrajTuple:
    """Build one tuple; a missing domain becomes a mask token."""
    if delta_m <= 0:
        raise PlanError(f"delta_m must be positive, got {delta_m}")
    if coordinate is None:
        spatial: Spatial | Special = Special.MASK
    else:
        lng, lat = float(coordinate[0]), float(coordinate[1])
        omega = tuple(network.neighbors_within((lng, lat), delta_m))
        spatial = Spatial(lng, lat, omega)
    if t is None:
        temporal: Temporal | Special = Special.MASK
    else:
        temporal = Temporal(float(t) - t0)
    if matched_point is None:
        road: Road | Special = Special.MASK
    else:
        road = Road(matched_point.segment_id, matched_point.fraction)
    return TrajTuple(spatial, temporal, road)


def build_pretrain_plan(
    matched: "MatchedTrajectory",
    trajectory: "Trajectory",
    sparse: "SparseTrajectory",
    network: "RoadNetwork",
    delta_m: float,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
) -> SequencePlan:
    """Arrange a sparse view of a dense trajectory for reconstruction.

    The input sequence alternates the sparse trajectory's kept tuples (road
    slot always masked, coordinate/time slots masked where dropped) with one
    mask tuple per gap of skipped dense points. Every kept tuple anchors the
    block of its own ground-truth tuple; every gap mask anchors the block of
    all skipped tuples; each block ends with G_END. With shuffle=True the
    generation order of blocks is a uniform random permutation.
    """
    pts = trajectory.points
    n = len(pts)
    if len(matched.points) != n or sparse.n_dense != n:
        raise PlanError(
            f"trajectory {trajectory.id}: dense sizes disagree "
            f"(raw {n}, matched {len(matched.points)}, sparse expects {sparse.n_dense})"
        )
    entries = sparse.entries
    if not entries or entries[0].dense_index != 0 or entries[-1].dense_index != n - 1:
        raise PlanError(f"trajectory {trajectory.id}: sparse entries must span index 0..{n - 1}")
    if entries[0].t is None:
        raise PlanError(f"trajectory {trajectory.id}: first sparse entry is missing its timestamp")
    t0 = float(entries[0].t)

    def truth(i: int) -> TrajTuple:
        return make_tuple(
            matched.points[i], (pts[i, 0], pts[i, 1]), pts[i, 2], t0, network, delta_m
        )

    items: list[PlanItem] = []
    blocks: list[TargetBlock] = []
    prev_dense = -1
    for entry in entries:
        i = entry.dense_index
        if i <= prev_dense:
            raise PlanError(f"trajectory {trajectory.id}: sparse indices not increasing at {i}")
        if i - prev_dense > 1 and prev_dense >= 0:
            gap = tuple(truth(j) for j in range(prev_dense + 1, i))
            items.append(PlanItem(G_MASK, len(items) + 1))
            blocks.append(TargetBlock(len(items) - 1, gap + (G_END,)))
        kept = make_tuple(None, entry.coord, entry.t, t0, network, delta_m)
        if kept.special() is Special.MASK:
            raise PlanError(
                f"trajectory {trajectory.id}: entry for dense index {i} has no visible feature"
            )
        items.append(PlanItem(kept, len(items) + 1))
        blocks.append(TargetBlock(len(items) - 1, (truth(i), G_END)))
        prev_dense = i
    order = list(range(len(blocks)))
    if shuffle:
        if rng is None:
            raise PlanError("shuffle=True requires an rng")
        order = [int(k) for k in rng.permutation(len(blocks))]
    return SequencePlan(trajectory.id, t0, items, blocks, order)


def build_dense_plan(
    matched: "MatchedTrajectory",
    trajectory: "Trajectory",
    network: "RoadNetwork",
    delta_m: float,
) -> SequencePlan:
    """Arrange a feature-complete trajectory with no generation targets.

    Used wherever a whole-trajectory embedding is wanted: the dense side of
    contrastive alignment and similar-trajectory search queries.
    """
    pts = trajectory.points
    if len(matched.points) != len(pts):
        raise PlanError(
            f"trajectory {trajectory.id}: dense sizes disagree "
            f"(raw {len(pts)}, matched {len(matched.points)})"
        )
    if len(pts) == 0:
        raise PlanError(f"trajectory {trajectory.id}: empty trajectory")
    t0 = float(pts[0, 2])
    items = [
        PlanItem(
            make_tuple(matched.points[i], (pts[i, 0], pts[i, 1]), pts[i, 2], t0, network, delta_m),
            i + 1,
        )
        for i in range(len(pts))
    ]
    return SequencePlan(trajectory.id, t0, items, [])


def with_class_token(plan: SequencePlan) -> SequencePlan:
    """A copy of the plan with a leading class token (P1=0); anchors shift."""
    if plan.items and plan.items[0].tup.special() is Special.CLS:
        return plan
    items = [PlanItem(G_CLS, 0)] + plan.items
    blocks = [replace(b, anchor=b.anchor + 1) for b in plan.blocks]
    return SequencePlan(plan.traj_id, plan.t0, items, blocks, list(plan.block_order))


def assign_positions(plan: SequencePlan) -> list[StreamToken]:
    """Emit the teacher-forcing stream: inputs first, then each block in
    block_order as a start-shifted copy of its targets.

    Input tokens keep their stored first-layer position with P2=0. A block
    shares its anchor's first-layer position; its fed tokens are
    (G_START, target_1, ..., target_{N-1}) with P2 = 1..N, predicting
    (target_1, ..., target_N) where target_N is G_END.
    """
    stream: list[StreamToken] = []
    for k, item in enumerate(plan.items):
        is_cls = item.tup.special() is Special.CLS
        if is_cls and k != 0:
            raise PlanError("class token must be the first input item")
        expected = k if plan.items[0].tup.special() is Special.CLS else k + 1
        if item.p1 != (0 if is_cls else expected):
            raise PlanError(f"input item {k} carries position {item.p1}, expected {expected}")
        stream.append(StreamToken(item.tup, item.p1, 0))
    if sorted(plan.block_order) != list(range(len(plan.blocks))):
        raise PlanError("block_order is not a permutation of the blocks")
    seen: set[int] = set()
    for b in plan.blocks:
        if not 0 <= b.anchor < len(plan.items):
            raise PlanError(f"block anchored at {b.anchor} has no input item")
        if b.anchor in seen:
            raise PlanError(f"input item {b.anchor} anchors more than one block")
        seen.add(b.anchor)
        if not plan.items[b.anchor].tup.has_mask():
            raise PlanError(f"input item {b.anchor} anchors a block but is not masked")
        if not b.targets or b.targets[-1] != G_END:
            raise PlanError(f"block at {b.anchor} must end with the end token")
    for bi in plan.block_order:
        block = plan.blocks[bi]
        p1 = plan.items[block.anchor].p1
        fed = (G_START,) + block.targets[:-1]
        for j, tup in enumerate(fed):
            stream.append(StreamToken(tup, p1, j + 1, block=bi, target=block.targets[j]))
    return stream


def detokenize(plan: SequencePlan) -> tuple[list["MatchedPoint"], np.ndarray]:
    """Reassemble the dense trajectory a fully supervised plan describes.

    Walks the input items in order, reading each kept point and each gap from
    its anchored block's ground truth. Returns the matched points and the raw
    coordinate array; raises if any needed feature is masked.
    """
    from .mapmatch import MatchedPoint

    by_anchor = {b.anchor: b for b in plan.blocks}
    matched: list[MatchedPoint] = []
    coords: list[tuple[float, float]] = []

    def emit(tup: TrajTuple, where: str) -> None:
        if not (
            isinstance(tup.spatial, Spatial)
            and isinstance(tup.temporal, Temporal)
            and isinstance(tup.road, Road)
        ):
            raise PlanError(f"cannot detokenize {where}: feature still masked")
        matched.append(
            MatchedPoint(tup.road.segment_id, tup.road.fraction, plan.t0 + tup.temporal.t_norm)
        )
        coords.append((tup.spatial.lng, tup.spatial.lat))

    for k, item in enumerate(plan.items):
        if item.tup.special() is Special.CLS:
            continue
        block = by_anchor.get(k)
        if block is None:
            emit(item.tup, f"input item {k}")
            continue
        for tup in block.targets[:-1]:
            emit(tup, f"block at item {k}")
        if item.tup.special() is not Special.MASK and len(block.targets) != 2:
            raise PlanError(f"kept input {k} should anchor exactly one ground-truth tuple")
    return matched, np.array(coords, dtype=np.float64)
