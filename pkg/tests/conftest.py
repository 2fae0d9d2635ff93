"""Shared test helpers.

The route-overlap accuracy used for noisy map matching lives here because
both the matcher unit tests and the acceptance suite score with it.  The
acceptance tests record one line per criterion; a terminal-summary hook
prints them after the run.
"""

from __future__ import annotations

from trajweave.roadnet import RoadNetwork, shortest_path

ACCEPTANCE_RESULTS: list[tuple[int, str, str]] = []


def record_criterion(num: int, status: str, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((num, status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, status, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d}: {status} - {detail}")


def route_coverage(network: RoadNetwork, matched) -> dict[int, list[tuple[float, float]]]:
    """Per-segment fraction intervals driven by the route a matched
    trajectory implies (consecutive matched points joined by directed
    shortest paths)."""
    cov: dict[int, list[tuple[float, float]]] = {}

    def add(sid: int, a: float, b: float) -> None:
        if b - a > 1e-12:
            cov.setdefault(sid, []).append((a, b))

    for p, q in zip(matched.points[:-1], matched.points[1:]):
        res = shortest_path(network, (p.segment_id, p.fraction), (q.segment_id, q.fraction))
        if res is None or not res[0]:
            continue
        hops = res[0]
        if len(hops) == 1 and p.segment_id == q.segment_id == hops[0] and q.fraction >= p.fraction:
            add(hops[0], p.fraction, q.fraction)
            continue
        lo, hi = 0, len(hops)
        if hops[0] == p.segment_id and p.fraction < 1.0:
            add(hops[0], p.fraction, 1.0)
            lo = 1
        if hi > lo and hops[-1] == q.segment_id and q.fraction > 0.0:
            add(hops[-1], 0.0, q.fraction)
            hi -= 1
        for sid in hops[lo:hi]:
            add(sid, 0.0, 1.0)
    merged: dict[int, list[tuple[float, float]]] = {}
    for sid, ivs in cov.items():
        ivs = sorted(ivs)
        out = [list(ivs[0])]
        for a, b in ivs[1:]:
            if a <= out[-1][1] + 1e-12:
                out[-1][1] = max(out[-1][1], b)
            else:
                out.append([a, b])
        merged[sid] = [(a, b) for a, b in out]
    return merged


def _overlap_m(network: RoadNetwork, cov_a, cov_b) -> float:
    total = 0.0
    for sid, ivs in cov_a.items():
        if sid not in cov_b:
            continue
        length = network.segments[sid].length_m
        for a0, a1 in ivs:
            for b0, b1 in cov_b[sid]:
                total += length * max(0.0, min(a1, b1) - max(a0, b0))
    return total


def _length_m(network: RoadNetwork, cov) -> float:
    return sum(
        network.segments[sid].length_m * sum(b - a for a, b in ivs) for sid, ivs in cov.items()
    )


def route_segment_accuracy(network: RoadNetwork, predicted, truth) -> float:
    """Length-weighted route overlap: 1 - (spurious + missed) / truth length.

    Scores a matched trajectory against the generating path by how much
    driven length the two routes disagree on, so a metre-scale spur onto a
    wrong street near an endpoint costs metres, not a whole segment.
    """
    pred_cov = route_coverage(network, predicted)
    true_cov = route_coverage(network, truth)
    common = _overlap_m(network, pred_cov, true_cov)
    spurious = _length_m(network, pred_cov) - common
    missed = _length_m(network, true_cov) - common
    return max(0.0, 1.0 - (spurious + missed) / _length_m(network, true_cov))
