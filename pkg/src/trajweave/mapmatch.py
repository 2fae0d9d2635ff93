"""Hidden-Markov-model map matching onto a directed road network.

Candidates for each GPS point are the nearest segments within a radius;
emission favors small projection offsets, transition favors candidate pairs
whose network distance agrees with the observed great-circle displacement
(direction-aware, so reverse-lane candidates pay for the implied detour).
Viterbi decoding recovers the jointly most likely segment sequence.

Scores are built from distances quantized to a micrometer so that physically
identical candidates (e.g. a node reached as fraction 1.0 of the incoming
segment or fraction 0.0 of an outgoing one) tie *exactly*; ties resolve by
candidate order (smaller offset, then larger fraction, then smaller id),
which attributes boundary points to the segment they were entered along.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .roadnet import RoadNetwork, directed_road_distance, haversine_m

if TYPE_CHECKING:  # pragma: no cover
    from .trajdata import Trajectory


class MatchError(RuntimeError):
    """Matching failed (no candidates, or no connected candidate path)."""


@dataclass(frozen=True)
class HmmParams:
    candidate_radius_m: float = 50.0
    emission_sigma_m: float = 10.0
    transition_beta: float = 0.05  # per meter of route/great-circle mismatch
    max_candidates: int = 8


@dataclass(frozen=True)
class Candidate:
    segment_id: int
    fraction: float
    offset_m: float


@dataclass(frozen=True)
class MatchedPoint:
    segment_id: int
    fraction: float
    timestamp: float


@dataclass
class MatchedTrajectory:
    traj_id: int | str
    points: list[MatchedPoint]

    def __len__(self) -> int:
        return len(self.points)


def _q(meters: float) -> float:
    return round(meters, 6)


# Infinitesimal preference for staying on the current segment.  Far below any
# quantized score difference (those are >= ~5e-8), it only resolves exact
# ties, attributing node-coincident points to the segment the vehicle is
# actually traversing (e.g. fraction 0.0 of the departed segment rather than
# fraction 1.0 of some unrelated incoming one).
_CONTINUITY_EPS = 1e-9


def candidates_for_point(
    network: RoadNetwork, point: tuple[float, float], params: HmmParams, first: bool = False
) -> list[Candidate]:
    """Up to max_candidates nearest segments within the radius, in the
    deterministic order Viterbi tie-breaking relies on.

    Ties prefer larger fractions (a node hit belongs to the segment just
    traversed), except at a trajectory's first point where smaller fractions
    come first (a departure belongs to the segment being entered).
    """
    out = []
    for sid in network.neighbors_within(point, params.candidate_radius_m)[: params.max_candidates]:
        off, frac, _ = network.segment_point(sid, point)
        # snap to exact endpoints within a micrometer so node-coincident
        # candidates score identically through the routing arithmetic
        length = network.segments[sid].length_m
        if frac * length < 1e-6:
            frac = 0.0
        elif (1.0 - frac) * length < 1e-6:
            frac = 1.0
        out.append(Candidate(sid, frac, off))
    sign = 1.0 if first else -1.0
    out.sort(key=lambda c: (_q(c.offset_m), sign * c.fraction, c.segment_id))
    return out


def log_emission(cand: Candidate, params: HmmParams) -> float:
    z = _q(cand.offset_m) / params.emission_sigma_m
    return -0.5 * z * z


def log_transition(
    network: RoadNetwork,
    cand_i: Candidate,
    cand_j: Candidate,
    greatcircle_m: float,
    params: HmmParams,
) -> float:
    """-beta * |route - greatcircle|; -inf when no route exists.

    The route is directed (driven from cand_i toward cand_j): a vehicle on a
    one-way segment continues along it and enters the next segment at its
    upstream end, which is what distinguishes a segment from its reverse twin.
    """
    route = directed_road_distance(
        network, (cand_i.segment_id, cand_i.fraction), (cand_j.segment_id, cand_j.fraction)
    )
    if math.isinf(route):
        return -math.inf
    bonus = _CONTINUITY_EPS if cand_i.segment_id == cand_j.segment_id else 0.0
    return -params.transition_beta * _q(abs(route - greatcircle_m)) + bonus


def hmm_match(
    network: RoadNetwork, trajectory: "Trajectory", params: HmmParams | None = None
) -> MatchedTrajectory:
    """Match a raw trajectory to the network by Viterbi decoding."""
    params = params or HmmParams()
    pts = trajectory.points
    n = len(pts)
    if n == 0:
        raise MatchError(f"trajectory {trajectory.id} is empty")
    cands: list[list[Candidate]] = []
    for i in range(n):
        cs = candidates_for_point(network, (float(pts[i, 0]), float(pts[i, 1])), params, first=(i == 0))
        if not cs:
            raise MatchError(
                f"trajectory {trajectory.id}: point {i} has no candidate segment "
                f"within {params.candidate_radius_m} m"
            )
        cands.append(cs)

    score = [log_emission(c, params) for c in cands[0]]
    back: list[list[int]] = []
    for t in range(1, n):
        gc = haversine_m(pts[t - 1, 0], pts[t - 1, 1], pts[t, 0], pts[t, 1])
        prev_score = score
        score = []
        back_t = []
        for c_j in cands[t]:
            best, best_i = -math.inf, -1
            for i, c_i in enumerate(cands[t - 1]):
                if prev_score[i] == -math.inf:
                    continue
                s = prev_score[i] + log_transition(network, c_i, c_j, gc, params)
                if s > best:
                    best, best_i = s, i
            score.append(best + log_emission(c_j, params) if best_i >= 0 else -math.inf)
            back_t.append(best_i)
        back.append(back_t)
        if all(s == -math.inf for s in score):
            raise MatchError(
                f"trajectory {trajectory.id}: no connected candidate path at point {t}"
            )

    j = max(range(len(score)), key=lambda k: (score[k], -k))
    rev = [j]
    for back_t in reversed(back):
        j = back_t[j]
        rev.append(j)
    rev.reverse()
    matched = [
        MatchedPoint(cands[t][j].segment_id, cands[t][j].fraction, float(pts[t, 2]))
        for t, j in enumerate(rev)
    ]
    return MatchedTrajectory(trajectory.id, matched)


# ------------------------------------------------------------------ file I/O

MATCHED_HEADER = ["traj_id", "point_idx", "segment_id", "fraction", "timestamp"]


def write_matched_csv(matched: list[MatchedTrajectory], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MATCHED_HEADER)
        for m in matched:
            for i, p in enumerate(m.points):
                w.writerow([m.traj_id, i, p.segment_id, repr(p.fraction), repr(p.timestamp)])


def read_matched_csv(path: str) -> list[MatchedTrajectory]:
    rows: dict[str, list[tuple[int, MatchedPoint]]] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                tid = row["traj_id"]
                rec = (
                    int(row["point_idx"]),
                    MatchedPoint(int(row["segment_id"]), float(row["fraction"]), float(row["timestamp"])),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise MatchError(f"{path}: bad matched row {i + 2}: {e}") from e
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append(rec)
    out = []
    for tid in order:
        recs = sorted(rows[tid])
        out.append(MatchedTrajectory(_maybe_int(tid), [p for _, p in recs]))
    return out


def _maybe_int(s: str) -> int | str:
    try:
        return int(s)
    except ValueError:
        return s
