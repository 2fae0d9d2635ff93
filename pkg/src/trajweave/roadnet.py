"""Directed road-network graph: spatial queries, projection, shortest paths.

Coordinates are WGS84 (lng, lat) degrees.  Point-to-segment geometry uses a
local equirectangular projection around the query point, which is accurate to
well below GPS noise at city scale.  Arclengths are haversine sums over
polyline vertices.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
_DEG = math.pi / 180.0
METERS_PER_DEG_LAT = EARTH_RADIUS_M * _DEG  # ~111,195 m

# Spatial-index cell size: twice the largest neighborhood radius in routine
# use (delta default 100 m), so a query disc overlaps few cells.
GRID_CELL_M = 200.0


class NetworkError(ValueError):
    """Malformed network input (ids, polylines, references)."""


class DisconnectedError(RuntimeError):
    """No directed path exists in either direction between two points."""


@dataclass(frozen=True)
class Node:
    id: int
    lng: float
    lat: float


@dataclass(frozen=True)
class Segment:
    id: int
    from_node: int
    to_node: int
    polyline: tuple[tuple[float, float], ...]  # >= 2 (lng, lat) vertices
    length_m: float


def haversine_m(lng1, lat1, lng2, lat2):
    """Great-circle distance in meters; accepts scalars or numpy arrays."""
    lng1, lat1, lng2, lat2 = (np.asarray(v, dtype=np.float64) * _DEG for v in (lng1, lat1, lng2, lat2))
    dlat = lat2 - lat1
    dlng = lng2 - lng1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlng / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def local_xy(lng, lat, ref_lng: float, ref_lat: float):
    """Equirectangular meters relative to a reference point."""
    x = (np.asarray(lng, dtype=np.float64) - ref_lng) * METERS_PER_DEG_LAT * math.cos(ref_lat * _DEG)
    y = (np.asarray(lat, dtype=np.float64) - ref_lat) * METERS_PER_DEG_LAT
    return x, y


def _polyline_length_m(polyline) -> np.ndarray:
    """Cumulative haversine arclength at each vertex (first entry 0)."""
    pts = np.asarray(polyline, dtype=np.float64)
    seg = haversine_m(pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1])
    return np.concatenate([[0.0], np.cumsum(np.atleast_1d(seg))])


class RoadNetwork:
    """Immutable directed graph with a uniform-grid spatial index.

    Construct through :func:`build_network`.  Queries are safe to issue
    concurrently; the only mutation after construction is a memoized
    single-source shortest-path cache, which is benign under the GIL.
    """

    def __init__(self, nodes: list[Node], segments: list[Segment]):
        self.nodes: dict[int, Node] = {n.id: n for n in nodes}
        self.segments: list[Segment] = segments
        lngs = [n.lng for n in nodes]
        lats = [n.lat for n in nodes]
        for s in segments:
            lngs.extend(p[0] for p in s.polyline)
            lats.extend(p[1] for p in s.polyline)
        self.bbox = (min(lngs), min(lats), max(lngs), max(lats))
        self._ref_lat = 0.5 * (self.bbox[1] + self.bbox[3])
        self._cell_deg_lat = GRID_CELL_M / METERS_PER_DEG_LAT
        self._cell_deg_lng = GRID_CELL_M / (METERS_PER_DEG_LAT * math.cos(self._ref_lat * _DEG))

        # per-segment geometry caches
        self._poly = [np.asarray(s.polyline, dtype=np.float64) for s in segments]
        self._cum = [_polyline_length_m(s.polyline) for s in segments]

        # node adjacency: node id -> [(neighbor node, segment id, length)]
        self._out: dict[int, list[tuple[int, int, float]]] = {n.id: [] for n in nodes}
        for s in segments:
            self._out[s.from_node].append((s.to_node, s.id, s.length_m))
        for lst in self._out.values():
            lst.sort(key=lambda e: e[1])

        # uniform grid over segment bounding boxes
        self._grid: dict[tuple[int, int], list[int]] = {}
        for s in segments:
            pts = self._poly[s.id]
            c0 = self._cell(pts[:, 0].min(), pts[:, 1].min())
            c1 = self._cell(pts[:, 0].max(), pts[:, 1].max())
            for ix in range(c0[0], c1[0] + 1):
                for iy in range(c0[1], c1[1] + 1):
                    self._grid.setdefault((ix, iy), []).append(s.id)

        self._sssp_cache: dict[int, np.ndarray] = {}
        self._node_index = {nid: i for i, nid in enumerate(sorted(self.nodes))}

    # ------------------------------------------------------------------ grid

    def _cell(self, lng: float, lat: float) -> tuple[int, int]:
        return (int(math.floor(lng / self._cell_deg_lng)), int(math.floor(lat / self._cell_deg_lat)))

    def _candidates_in_disc(self, point: tuple[float, float], radius_m: float) -> list[int]:
        """Superset of segments possibly within radius_m of point."""
        lng, lat = point
        # 5% margin absorbs the equirectangular/haversine discrepancy
        r_lat = 1.05 * radius_m / METERS_PER_DEG_LAT
        r_lng = 1.05 * radius_m / (METERS_PER_DEG_LAT * max(math.cos(lat * _DEG), 1e-6))
        c0 = self._cell(lng - r_lng, lat - r_lat)
        c1 = self._cell(lng + r_lng, lat + r_lat)
        out: set[int] = set()
        for ix in range(c0[0], c1[0] + 1):
            for iy in range(c0[1], c1[1] + 1):
                out.update(self._grid.get((ix, iy), ()))
        return sorted(out)

    # ------------------------------------------------------------- geometry

    def segment_point(self, segment_id: int, point: tuple[float, float]) -> tuple[float, float, float]:
        """Closest position on a segment to a point.

        Returns (distance_m, fraction, arclength_m) of the closest point,
        measured in the local frame of `point`.  Fraction ties within a
        segment resolve to the smallest arclength.
        """
        seg = self._check_segment(segment_id)
        pts = self._poly[segment_id]
        cum = self._cum[segment_id]
        lng, lat = point
        x, y = local_xy(pts[:, 0], pts[:, 1], lng, lat)
        ax, ay = x[:-1], y[:-1]
        bx, by = x[1:], y[1:]
        dx, dy = bx - ax, by - ay
        den = dx * dx + dy * dy
        t = np.where(den > 0.0, -(ax * dx + ay * dy) / np.where(den > 0.0, den, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        px, py = ax + t * dx, ay + t * dy
        d2 = px * px + py * py
        i = int(np.argmin(d2))  # first minimum -> smallest arclength
        arc = cum[i] + t[i] * (cum[i + 1] - cum[i])
        frac = arc / seg.length_m if seg.length_m > 0 else 0.0
        return float(math.sqrt(d2[i])), float(min(max(frac, 0.0), 1.0)), float(arc)

    def neighbors_within(self, point: tuple[float, float], delta_m: float) -> list[int]:
        """Segment ids with geometry within delta_m of point, ordered by
        (distance, id)."""
        if delta_m <= 0.0:
            raise ValueError(f"delta must be positive, got {delta_m}")
        hits = []
        for sid in self._candidates_in_disc(point, delta_m):
            d, _, _ = self.segment_point(sid, point)
            if d <= delta_m:
                hits.append((d, sid))
        hits.sort()
        return [sid for _, sid in hits]

    def project(self, point: tuple[float, float]) -> tuple[int, float, float]:
        """Nearest segment to a point: (segment_id, fraction, offset_m).

        Exact nearest neighbor: the search ring expands until the best
        candidate provably dominates anything outside the searched radius.
        Distance ties (nanometer-quantized, so mirrored twin segments tie
        exactly) resolve to the lowest segment id.
        """
        if not self.segments:
            raise NetworkError("project on an empty network")
        radius = GRID_CELL_M
        best: tuple[float, int, float] | None = None
        while True:
            for sid in self._candidates_in_disc(point, radius):
                d, frac, _ = self.segment_point(sid, point)
                if best is None or (round(d, 9), sid) < (round(best[0], 9), best[1]):
                    best = (d, sid, frac)
            if best is not None and best[0] <= radius:
                return best[1], best[2], best[0]
            radius = max(radius * 2.0, (best[0] if best else radius) * 1.01)

    def locate(self, segment_id: int, fraction: float) -> tuple[float, float]:
        """Coordinate at an arclength fraction along a segment."""
        seg = self._check_segment(segment_id)
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {fraction} on segment {segment_id}")
        pts = self._poly[segment_id]
        cum = self._cum[segment_id]
        target = fraction * seg.length_m
        i = int(np.searchsorted(cum, target, side="right")) - 1
        i = min(max(i, 0), len(pts) - 2)
        span = cum[i + 1] - cum[i]
        t = (target - cum[i]) / span if span > 0 else 0.0
        t = min(max(t, 0.0), 1.0)
        lng = pts[i, 0] + t * (pts[i + 1, 0] - pts[i, 0])
        lat = pts[i, 1] + t * (pts[i + 1, 1] - pts[i, 1])
        return float(lng), float(lat)

    # ------------------------------------------------------------- routing

    def _check_segment(self, segment_id: int) -> Segment:
        if not 0 <= segment_id < len(self.segments):
            raise NetworkError(f"unknown segment {segment_id}")
        return self.segments[segment_id]

    def _sssp(self, source_node: int) -> np.ndarray:
        """Memoized single-source node-to-node distances (meters)."""
        cached = self._sssp_cache.get(source_node)
        if cached is not None:
            return cached
        if source_node not in self.nodes:
            raise NetworkError(f"unknown node {source_node}")
        dist = np.full(len(self.nodes), np.inf)
        dist[self._node_index[source_node]] = 0.0
        heap = [(0.0, source_node)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[self._node_index[u]]:
                continue
            for v, _, w in self._out[u]:
                nd = d + w
                vi = self._node_index[v]
                if nd < dist[vi]:
                    dist[vi] = nd
                    heapq.heappush(heap, (nd, v))
        self._sssp_cache[source_node] = dist
        return dist

    def node_distance(self, u: int, v: int) -> float:
        """Directed node-to-node shortest distance in meters (inf if none)."""
        if v not in self.nodes:
            raise NetworkError(f"unknown node {v}")
        return float(self._sssp(u)[self._node_index[v]])

    def _directed_point_distance(self, src: tuple[int, float], dst: tuple[int, float]) -> float:
        """Directed network distance between on-road points (inf if none).

        The drive departs along the source segment and arrives along the
        destination segment, so the two representations of a node-coincident
        point (fraction 1.0 of an incoming segment vs 0.0 of an outgoing
        one) are distinct positions with distinct onward costs — this
        direction evidence is what lets the map matcher resolve headings.
        """
        (sa, ra), (sb, rb) = src, dst
        a = self._check_segment(sa)
        b = self._check_segment(sb)
        best = math.inf
        if sa == sb and rb >= ra:
            best = a.length_m * (rb - ra)
        dist = self._sssp(a.to_node)
        c0 = (1.0 - ra) * a.length_m
        c1 = rb * b.length_m
        return min(best, c0 + dist[self._node_index[b.from_node]] + c1)


def build_network(nodes: list[Node], segments_raw: list[tuple[int, int, int, tuple]]) -> RoadNetwork:
    """Validate raw (id, from, to, polyline) rows and build a network.

    Segment ids must be exactly 0..|E|-1; polyline endpoints must coincide
    with the referenced node coordinates.  Lengths are computed from the
    polyline so the stored length always matches the geometry.
    """
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate node ids")
    node_by_id = {n.id: n for n in nodes}
    segs: list[Segment] = []
    seen = set()
    for sid, u, v, poly in sorted(segments_raw, key=lambda r: r[0]):
        if sid in seen:
            raise NetworkError(f"duplicate segment id {sid}")
        seen.add(sid)
        if u not in node_by_id:
            raise NetworkError(f"segment {sid} references unknown node {u}")
        if v not in node_by_id:
            raise NetworkError(f"segment {sid} references unknown node {v}")
        poly = tuple((float(p[0]), float(p[1])) for p in poly)
        if len(poly) < 2:
            raise NetworkError(f"segment {sid} polyline has fewer than 2 vertices")
        for node, vertex, which in ((node_by_id[u], poly[0], "first"), (node_by_id[v], poly[-1], "last")):
            if abs(node.lng - vertex[0]) > 1e-9 or abs(node.lat - vertex[1]) > 1e-9:
                raise NetworkError(
                    f"segment {sid} {which} vertex {vertex} does not coincide with node {node.id}"
                )
        length = float(_polyline_length_m(poly)[-1])
        if length <= 0.0:
            raise NetworkError(f"segment {sid} has zero length")
        segs.append(Segment(sid, u, v, poly, length))
    if [s.id for s in segs] != list(range(len(segs))):
        raise NetworkError("segment ids must be contiguous 0..|E|-1")
    return RoadNetwork(nodes, segs)


def shortest_path(
    network: RoadNetwork, src: tuple[int, float], dst: tuple[int, float]
) -> tuple[list[int], float] | None:
    """Shortest directed route between two on-road points.

    Points are (segment_id, fraction).  Returns (segment ids traversed,
    distance in meters), partial first/last segments included; None when no
    directed path exists.  src == dst yields ([], 0.0).
    """
    (sa, ra), (sb, rb) = src, dst
    a = network._check_segment(sa)
    b = network._check_segment(sb)
    for name, r in (("src", ra), ("dst", rb)):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"{name} fraction must be in [0, 1], got {r}")
    if sa == sb and ra == rb:
        return [], 0.0

    best_path: list[int] | None = None
    best_dist = math.inf
    if sa == sb and rb >= ra:
        best_path = [sa]
        best_dist = a.length_m * (rb - ra)

    # Dijkstra over nodes from the end of the source segment.
    dist = {u: math.inf for u in network.nodes}
    pred: dict[int, tuple[int, int]] = {}  # node -> (prev node, segment)
    c0 = (1.0 - ra) * a.length_m
    dist[a.to_node] = c0
    heap = [(c0, a.to_node)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, sid, w in network._out[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = (u, sid)
                heapq.heappush(heap, (nd, v))

    total = dist[b.from_node] + rb * b.length_m
    if total < best_dist:
        route = [sa] if ra < 1.0 else []
        hops: list[int] = []
        v = b.from_node
        while v != a.to_node:
            u, sid = pred[v]
            hops.append(sid)
            v = u
        route.extend(reversed(hops))
        if rb > 0.0:
            route.append(sb)
        best_path, best_dist = route, total
    if best_path is None:
        return None
    return best_path, float(best_dist)


def node_route(network: RoadNetwork, src_node: int, dst_node: int) -> tuple[list[int], float] | None:
    """Shortest node-to-node route as (segment ids, meters); None if none."""
    for n in (src_node, dst_node):
        if n not in network.nodes:
            raise NetworkError(f"unknown node {n}")
    if src_node == dst_node:
        return [], 0.0
    dist = {u: math.inf for u in network.nodes}
    pred: dict[int, tuple[int, int]] = {}
    dist[src_node] = 0.0
    heap = [(0.0, src_node)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == dst_node:
            break
        if d > dist[u]:
            continue
        for v, sid, w in network._out[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = (u, sid)
                heapq.heappush(heap, (nd, v))
    if math.isinf(dist[dst_node]):
        return None
    hops = []
    v = dst_node
    while v != src_node:
        u, sid = pred[v]
        hops.append(sid)
        v = u
    return hops[::-1], float(dist[dst_node])


def directed_road_distance(network: RoadNetwork, a: tuple[int, float], b: tuple[int, float]) -> float:
    """Directed driving distance a -> b in meters (inf when unreachable).

    Unlike :func:`road_distance` this composes: d(a,c) <= d(a,b) + d(b,c).
    """
    return network._directed_point_distance(a, b)


def road_distance(network: RoadNetwork, a: tuple[int, float], b: tuple[int, float]) -> float:
    """Network distance in meters: min over the two directed directions."""
    d = min(network._directed_point_distance(a, b), network._directed_point_distance(b, a))
    if math.isinf(d):
        raise DisconnectedError(f"no directed path between {a} and {b} in either direction")
    return float(d)


def synth_grid_network(
    rows: int,
    cols: int,
    spacing_m: float,
    origin: tuple[float, float] = (116.30, 39.90),
    seed: int = 0,
    jitter_m: float = 0.0,
) -> RoadNetwork:
    """Rows x cols lattice with bidirectional straight segments.

    Node id = row * cols + col; segments are emitted east then south per
    node, forward then reverse, giving 2*(rows*(cols-1) + cols*(rows-1))
    segments.  Optional coordinate jitter (meters, seeded) breaks the exact
    symmetry of the lattice when wanted.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 cols")
    rng = np.random.default_rng(seed)
    o_lng, o_lat = origin
    dlat = spacing_m / METERS_PER_DEG_LAT
    dlng = spacing_m / (METERS_PER_DEG_LAT * math.cos(o_lat * _DEG))
    nodes = []
    for r in range(rows):
        for c in range(cols):
            lng = o_lng + c * dlng
            lat = o_lat + r * dlat
            if jitter_m > 0.0:
                lng += rng.normal(0.0, jitter_m) / (METERS_PER_DEG_LAT * math.cos(o_lat * _DEG))
                lat += rng.normal(0.0, jitter_m) / METERS_PER_DEG_LAT
            nodes.append(Node(r * cols + c, lng, lat))
    raw = []
    sid = 0
    by_id = {n.id: n for n in nodes}

    def _pair(u: int, v: int):
        nonlocal sid
        pu, pv = by_id[u], by_id[v]
        raw.append((sid, u, v, ((pu.lng, pu.lat), (pv.lng, pv.lat))))
        raw.append((sid + 1, v, u, ((pv.lng, pv.lat), (pu.lng, pu.lat))))
        sid += 2

    for r in range(rows):
        for c in range(cols):
            n = r * cols + c
            if c + 1 < cols:
                _pair(n, n + 1)
            if r + 1 < rows:
                _pair(n, n + cols)
    return build_network(nodes, raw)


# ------------------------------------------------------------------ file I/O

def write_network_csv(network: RoadNetwork, nodes_path: str, edges_path: str) -> None:
    with open(nodes_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["node_id", "lng", "lat"])
        for nid in sorted(network.nodes):
            n = network.nodes[nid]
            w.writerow([n.id, repr(n.lng), repr(n.lat)])
    with open(edges_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["edge_id", "from_node", "to_node", "polyline"])
        for s in network.segments:
            poly = ";".join(f"{repr(p[0])} {repr(p[1])}" for p in s.polyline)
            w.writerow([s.id, s.from_node, s.to_node, poly])


def read_network_csv(nodes_path: str, edges_path: str) -> RoadNetwork:
    nodes = []
    with open(nodes_path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                nodes.append(Node(int(row["node_id"]), float(row["lng"]), float(row["lat"])))
            except (KeyError, TypeError, ValueError) as e:
                raise NetworkError(f"{nodes_path}: bad node row {i + 2}: {e}") from e
    raw = []
    with open(edges_path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                poly = tuple(
                    (float(p.split()[0]), float(p.split()[1]))
                    for p in row["polyline"].split(";")
                    if p.strip()
                )
                raw.append((int(row["edge_id"]), int(row["from_node"]), int(row["to_node"]), poly))
            except (KeyError, IndexError, TypeError, ValueError) as e:
                raise NetworkError(f"{edges_path}: bad edge row {i + 2}: {e}") from e
    return build_network(nodes, raw)
