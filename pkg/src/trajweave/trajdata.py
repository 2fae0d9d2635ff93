"""Trajectory datasets: synthesis on road networks, ingest, sparsification.

A dense trajectory samples a vehicle driving a shortest path at piecewise
constant (per-segment) speed every eta seconds, ending exactly at the
arrival point; per-segment speeds are rescaled so the total duration lands
on the eta grid.  Departure times are integer seconds so tokenize /
de-tokenize round trips are bit-exact.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mapmatch import MatchedPoint, MatchedTrajectory
from .roadnet import METERS_PER_DEG_LAT, RoadNetwork, node_route

log = logging.getLogger(__name__)

MIN_TRIP_POINTS = 6


@dataclass
class Trajectory:
    id: int | str
    points: np.ndarray  # (n, 3) float64 columns lng, lat, timestamp

    def __len__(self) -> int:
        return len(self.points)

    @property
    def departure(self) -> float:
        return float(self.points[0, 2])


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    eta: float
    bbox: tuple[float, float, float, float]  # min_lng, min_lat, max_lng, max_lat
    n_rejected_gap: int = 0
    n_rejected_short: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class SpeedModel:
    min_mps: float = 5.0
    max_mps: float = 15.0


@dataclass(frozen=True)
class SparseEntry:
    coord: tuple[float, float] | None
    t: float | None
    dense_index: int


@dataclass
class SparseTrajectory:
    traj_id: int | str
    entries: list[SparseEntry]
    mu: float
    eta: float
    n_dense: int

    def __len__(self) -> int:
        return len(self.entries)


def _bbox(trajs: list[Trajectory]) -> tuple[float, float, float, float]:
    all_pts = np.concatenate([t.points[:, :2] for t in trajs], axis=0)
    return (
        float(all_pts[:, 0].min()),
        float(all_pts[:, 1].min()),
        float(all_pts[:, 0].max()),
        float(all_pts[:, 1].max()),
    )


def validate_trajectory(traj: Trajectory, eta: float, tol: float = 1e-6) -> str | None:
    """None when valid, else a reason string."""
    if len(traj) < MIN_TRIP_POINTS:
        return f"fewer than {MIN_TRIP_POINTS} points"
    gaps = np.diff(traj.points[:, 2])
    if np.any(gaps <= 0):
        return "timestamps not strictly increasing"
    if np.any(np.abs(gaps - eta) > tol):
        return f"sampling gap not constant {eta}"
    return None


def make_dataset(trajs: list[Trajectory], eta: float) -> Dataset:
    for t in trajs:
        reason = validate_trajectory(t, eta)
        if reason:
            raise ValueError(f"trajectory {t.id}: {reason}")
    return Dataset(trajs, eta, _bbox(trajs))


# ----------------------------------------------------------------- synthesis

def synth_trajectories(
    network: RoadNetwork,
    n: int,
    eta: float,
    seed: int,
    speed: SpeedModel = SpeedModel(),
    noise_sigma_m: float = 0.0,
    od_pairs: list[tuple[int, int]] | None = None,
    min_points: int = MIN_TRIP_POINTS,
) -> tuple[Dataset, list[MatchedTrajectory]]:
    """Simulate n trips; returns the (possibly noisy) dataset plus exact
    matched ground truth (noise perturbs coordinates only).

    Noise uses its own rng stream, so the same seed yields the same routes
    and ground truth regardless of noise_sigma_m."""
    ss_route, ss_noise = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(ss_route)
    rng_noise = np.random.default_rng(ss_noise)
    node_ids = sorted(network.nodes)
    trajs: list[Trajectory] = []
    matched: list[MatchedTrajectory] = []
    for i in range(n):
        plan = None
        if od_pairs is not None:
            o, d = od_pairs[i % len(od_pairs)]
            got = _node_route(network, o, d)
            if got is None:
                raise ValueError(f"no path from node {o} to node {d}")
            segs, _ = got
            speeds = rng.uniform(speed.min_mps, speed.max_mps, size=len(segs))
            plan = (segs, speeds)
        else:
            disconnected = 0
            short = 0
            while plan is None:
                o, d = (int(node_ids[k]) for k in rng.integers(0, len(node_ids), size=2))
                if o == d:
                    continue
                got = _node_route(network, o, d)
                if got is None:
                    disconnected += 1
                    if disconnected > 10:
                        raise ValueError("no path between sampled OD pairs after 10 retries")
                    continue
                segs, _ = got
                speeds = rng.uniform(speed.min_mps, speed.max_mps, size=len(segs))
                dur = sum(network.segments[s].length_m / v for s, v in zip(segs, speeds))
                if round(dur / eta) < min_points - 1:
                    short += 1
                    if short > 500:
                        raise ValueError(
                            f"could not sample an OD pair long enough for {min_points} points"
                        )
                    continue
                plan = (segs, speeds)
        segs, speeds = plan
        lengths = np.array([network.segments[s].length_m for s in segs])
        durations = lengths / speeds
        total_t = float(durations.sum())
        m = max(int(round(total_t / eta)), min_points - 1, 1)
        cum_t = np.concatenate([[0.0], np.cumsum(durations)])
        cum_t *= (m * eta) / cum_t[-1]  # land the arrival exactly on the eta grid
        cum_t[-1] = m * eta
        cum_d = np.concatenate([[0.0], np.cumsum(lengths)])
        t0 = float(rng.integers(0, 30 * 86400))
        sample_t = np.arange(m + 1) * eta
        sample_s = np.interp(sample_t, cum_t, cum_d)

        pts = np.empty((m + 1, 3))
        gt: list[MatchedPoint] = []
        for k, s in enumerate(sample_s):
            # boundary samples attribute to the earlier segment at fraction 1
            j = int(np.searchsorted(cum_d[1:], s, side="left"))
            j = min(j, len(segs) - 1)
            frac = (s - cum_d[j]) / lengths[j]
            frac = min(max(float(frac), 0.0), 1.0)
            if frac * lengths[j] < 1e-9:
                frac = 0.0
            elif (1.0 - frac) * lengths[j] < 1e-9:
                frac = 1.0
            lng, lat = network.locate(segs[j], frac)
            ts = t0 + float(sample_t[k])
            gt.append(MatchedPoint(segs[j], frac, ts))
            if noise_sigma_m > 0.0:
                dx, dy = rng_noise.normal(0.0, noise_sigma_m, size=2)
                lng += dx / (METERS_PER_DEG_LAT * math.cos(math.radians(lat)))
                lat += dy / METERS_PER_DEG_LAT
            pts[k] = (lng, lat, ts)
        trajs.append(Trajectory(i, pts))
        matched.append(MatchedTrajectory(i, gt))
    return Dataset(trajs, eta, _bbox(trajs)), matched


def _node_route(network: RoadNetwork, o: int, d: int):
    """Node-to-node route as (segment ids, total length); None when o == d
    or no path exists."""
    got = node_route(network, o, d)
    if got is None or not got[0]:
        return None
    return got


# ------------------------------------------------------------ sparsification

def resample(traj: Trajectory, eta: float, mu: float) -> SparseTrajectory:
    """Keep every (mu/eta)-th point plus the final point."""
    if mu < eta:
        raise ValueError(f"mu ({mu}) must be >= eta ({eta})")
    k = mu / eta
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"mu ({mu}) must be an integer multiple of eta ({eta})")
    k = int(round(k))
    n = len(traj)
    idx = list(range(0, n, k))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    entries = [
        SparseEntry((float(traj.points[i, 0]), float(traj.points[i, 1])), float(traj.points[i, 2]), i)
        for i in idx
    ]
    return SparseTrajectory(traj.id, entries, mu, eta, n)


def drop_features(sparse: SparseTrajectory, phi: float, rng: np.random.Generator) -> SparseTrajectory:
    """Independently hide one feature per entry with probability phi.

    The victim is a fair coin between coordinate and timestamp, except the
    first entry's timestamp (the temporal origin) is never removed; an entry
    never loses both features.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    out = []
    for i, e in enumerate(sparse.entries):
        coord, t = e.coord, e.t
        if rng.random() < phi:
            if i == 0 or rng.random() < 0.5:
                coord = None
            else:
                t = None
        out.append(SparseEntry(coord, t, e.dense_index))
    return SparseTrajectory(sparse.traj_id, out, sparse.mu, sparse.eta, sparse.n_dense)


# ------------------------------------------------------------------ splits

def split_indices(dataset: Dataset, ratios=(0.8, 0.1, 0.1)) -> tuple[list[int], list[int], list[int]]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(dataset)
    order = sorted(range(n), key=lambda i: (dataset.trajectories[i].departure, i))
    n_valid = int(n * ratios[1] + 0.5)
    n_test = int(n * ratios[2] + 0.5)
    n_train = n - n_valid - n_test
    return order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :]


def chronological_split(dataset: Dataset, ratios=(0.8, 0.1, 0.1)) -> tuple[Dataset, Dataset, Dataset]:
    """Earliest departures to train, latest to test; sizes within 1 of exact
    ratio.  Splits share the parent bounding box and eta."""
    parts = split_indices(dataset, ratios)
    return tuple(
        Dataset([dataset.trajectories[i] for i in idx], dataset.eta, dataset.bbox) for idx in parts
    )


def write_split_manifests(dirpath: str, splits: dict[str, Dataset]) -> None:
    import os

    for name, ds in splits.items():
        with open(os.path.join(dirpath, f"{name}_ids.txt"), "w") as f:
            for t in ds.trajectories:
                f.write(f"{t.id}\n")


# ------------------------------------------------------------------ file I/O

TRAJ_HEADER = ["traj_id", "point_idx", "lng", "lat", "timestamp"]


def write_trajectories_csv(dataset: Dataset, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJ_HEADER)
        for t in dataset.trajectories:
            for i in range(len(t)):
                w.writerow(
                    [t.id, i, repr(float(t.points[i, 0])), repr(float(t.points[i, 1])), repr(float(t.points[i, 2]))]
                )


def ingest_csv(path: str, eta: float | None = None) -> Dataset:
    """Load a trajectory CSV, dropping invalid trips with a logged warning.

    eta is inferred from the first structurally valid trajectory when not
    given.  Malformed rows are a hard error naming the line.
    """
    groups: dict[str, list[tuple[int, float, float, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                tid = row["traj_id"]
                rec = (int(row["point_idx"]), float(row["lng"]), float(row["lat"]), float(row["timestamp"]))
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: bad row {i + 2}: {e}") from e
            if tid not in groups:
                groups[tid] = []
                order.append(tid)
            groups[tid].append(rec)

    trajs: list[Trajectory] = []
    n_gap = n_short = 0
    for tid in order:
        recs = sorted(groups[tid])
        pts = np.array([[lng, lat, ts] for _, lng, lat, ts in recs])
        traj = Trajectory(_maybe_int(tid), pts)
        if len(traj) < MIN_TRIP_POINTS:
            n_short += 1
            continue
        gaps = np.diff(pts[:, 2])
        if np.any(gaps <= 0):
            n_gap += 1
            continue
        if eta is None:
            eta = float(gaps[0])
        if np.any(np.abs(gaps - eta) > 1e-6):
            n_gap += 1
            continue
        trajs.append(traj)
    if n_gap or n_short:
        log.warning("%s: rejected %d non-constant-gap and %d short trajectories", path, n_gap, n_short)
    if not trajs:
        raise ValueError(f"{path}: no valid trajectories")
    return Dataset(trajs, float(eta), _bbox(trajs), n_rejected_gap=n_gap, n_rejected_short=n_short)


def _maybe_int(s: str) -> int | str:
    try:
        return int(s)
    except ValueError:
        return s
