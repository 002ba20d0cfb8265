"""Patch locations on the sphere and the neighbour/triplet geometry used by tile2vec."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0  # spherical Earth; pi * R = 20015.087 km
NEIGHBOR_RADIUS_DEG = 1.0


class NoNeighbor(ValueError):
    """Raised when an anchor has no neighbour (or no non-neighbour) to draw."""


def sample_sphere_uniform(seed: int, n: int) -> np.ndarray:
    """Area-uniform points on the sphere as an ``[n, 2]`` array of (lon, lat) degrees."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lon = rng.uniform(-180.0, 180.0, n)
    lat = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, n)))
    return np.column_stack([lon, lat])


def sample_clustered(seed: int, n: int, n_clusters: int, radius_deg: float = 0.4) -> np.ndarray:
    """Uniform cluster centres, members scattered within ``radius_deg`` of their centre.

    Points are assigned to clusters round-robin so every cluster is populated.
    Useful at desk scale, where ``n`` uniform points would rarely fall within
    one degree of each other.
    """
    if n_clusters < 1 or n < 1:
        raise ValueError("n and n_clusters must be >= 1")
    rng = np.random.default_rng(seed)
    centres = sample_sphere_uniform(int(rng.integers(2**63)), n_clusters)
    member = np.arange(n) % n_clusters
    # offsets drawn as an angular distance + bearing so they stay within radius_deg
    dist = radius_deg * np.sqrt(rng.uniform(0.0, 1.0, n))
    bearing = rng.uniform(0.0, 2 * np.pi, n)
    lon, lat = _destination(centres[member, 0], centres[member, 1], bearing, np.radians(dist))
    return np.column_stack([lon, lat])


def _destination(lon, lat, bearing, ang):
    phi1, lam1 = np.radians(lat), np.radians(lon)
    phi2 = np.arcsin(np.sin(phi1) * np.cos(ang) + np.cos(phi1) * np.sin(ang) * np.cos(bearing))
    lam2 = lam1 + np.arctan2(
        np.sin(bearing) * np.sin(ang) * np.cos(phi1), np.cos(ang) - np.sin(phi1) * np.sin(phi2)
    )
    lon2 = (np.degrees(lam2) + 180.0) % 360.0 - 180.0
    return lon2, np.clip(np.degrees(phi2), -90.0, 90.0)


def central_angle(lon1, lat1, lon2, lat2):
    """Great-circle central angle in radians (vectorised).

    Uses the atan2 form, which stays accurate from coincident to antipodal
    points; the arcsin of the plain haversine loses half its digits near pi.
    """
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    s1, c1, s2, c2 = np.sin(phi1), np.cos(phi1), np.sin(phi2), np.cos(phi2)
    cd = np.cos(dlam)
    y = np.hypot(c2 * np.sin(dlam), c1 * s2 - s1 * c2 * cd)
    x = s1 * s2 + c1 * c2 * cd
    return np.arctan2(y, x)


def haversine_km(a, b) -> float:
    """Great-circle distance in km between two (lon, lat) points."""
    if tuple(a) == tuple(b):
        return 0.0
    # ordering the pair makes d(a, b) == d(b, a) bit-exactly
    p, q = sorted([tuple(map(float, a)), tuple(map(float, b))])
    return float(EARTH_RADIUS_KM * central_angle(p[0], p[1], q[0], q[1]))


@dataclass
class NeighborGraph:
    points: np.ndarray
    neighbors: list[list[tuple[int, float]]]

    def __len__(self) -> int:
        return len(self.neighbors)

    def neighbor_ids(self, i: int) -> np.ndarray:
        return np.array([j for j, _ in self.neighbors[i]], dtype=np.int64)

    def neighbor_km(self, i: int) -> np.ndarray:
        return np.array([d for _, d in self.neighbors[i]], dtype=np.float64)

    def edges(self) -> set[tuple[int, int]]:
        return {(i, j) for i, nbrs in enumerate(self.neighbors) for j, _ in nbrs}

    def anchors(self) -> np.ndarray:
        """Indices of points that have at least one neighbour."""
        return np.array([i for i, n in enumerate(self.neighbors) if n], dtype=np.int64)

    def mean_edge_km(self) -> float:
        d = [km for nbrs in self.neighbors for _, km in nbrs]
        if not d:
            raise NoNeighbor("graph has no edges")
        return float(np.mean(d))

    def to_json(self) -> str:
        return json.dumps(
            {
                "points": self.points.tolist(),
                "neighbors": [[[j, d] for j, d in nbrs] for nbrs in self.neighbors],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NeighborGraph":
        d = json.loads(text)
        return cls(
            np.asarray(d["points"], dtype=np.float64).reshape(-1, 2),
            [[(int(j), float(km)) for j, km in nbrs] for nbrs in d["neighbors"]],
        )


def build_neighbor_graph(points, radius_deg: float = NEIGHBOR_RADIUS_DEG, chunk: int = 512) -> NeighborGraph:
    """All pairs closer than ``radius_deg`` of central angle.

    Brute force restricted to a latitude band: any pair closer than the
    radius also differs in latitude by less than the radius, so sorting by
    latitude bounds the candidate set without missing edges.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    limit = np.radians(radius_deg)
    order = np.argsort(pts[:, 1], kind="stable")
    lat_sorted = pts[order, 1]
    neighbors: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for start in range(0, n, chunk):
        rows = order[start : start + chunk]
        lo = np.searchsorted(lat_sorted, lat_sorted[start] - radius_deg, side="left")
        hi = np.searchsorted(lat_sorted, lat_sorted[min(start + chunk, n) - 1] + radius_deg, side="right")
        cols = order[lo:hi]
        ang = central_angle(pts[rows, 0, None], pts[rows, 1, None], pts[None, cols, 0], pts[None, cols, 1])
        # each unordered pair is decided once, from the row of its lower index
        ri, ci = np.nonzero(ang < limit)
        for a, b, t in zip(rows[ri], cols[ci], ang[ri, ci]):
            if a < b:
                km = float(EARTH_RADIUS_KM * t)
                neighbors[a].append((int(b), km))
                neighbors[b].append((int(a), km))
    for nbrs in neighbors:
        nbrs.sort()
    return NeighborGraph(pts, neighbors)


def neighbor_probabilities(distances_km, temperature_km: float) -> np.ndarray:
    """Softmax over negative distances: nearer neighbours are more likely."""
    d = np.asarray(distances_km, dtype=np.float64)
    if temperature_km <= 0:
        raise ValueError("temperature_km must be positive")
    logits = -d / temperature_km
    w = np.exp(logits - logits.max())
    return w / w.sum()


@dataclass(frozen=True)
class TripletDraw:
    anchor: int
    neighbor: int
    distant: int


def draw_triplet(graph: NeighborGraph, anchor: int, seed, temperature_km: float | None = None) -> TripletDraw:
    nbr_ids = graph.neighbor_ids(anchor)
    if nbr_ids.size == 0:
        raise NoNeighbor(f"point {anchor} has no neighbour within {NEIGHBOR_RADIUS_DEG} degree")
    if temperature_km is None:
        temperature_km = graph.mean_edge_km()
    rng = np.random.default_rng(seed)
    p = neighbor_probabilities(graph.neighbor_km(anchor), temperature_km)
    neighbor = int(nbr_ids[rng.choice(len(nbr_ids), p=p)])

    n = len(graph)
    n_far = n - 1 - nbr_ids.size
    if n_far <= 0:
        raise NoNeighbor(f"point {anchor} has no non-neighbour to use as distant sample")
    # k-th element of {0..n-1} \ ({anchor} U neighbours), without materialising it
    excluded = np.sort(np.append(nbr_ids, anchor))
    k = int(rng.integers(n_far))
    distant = k
    for e in excluded:
        if e <= distant:
            distant += 1
        else:
            break
    return TripletDraw(int(anchor), neighbor, int(distant))


def mean_nearest_neighbor_km(graph: NeighborGraph) -> float:
    """Mean over anchors of the distance to their closest neighbour.

    Points without any neighbour are excluded; the count is logged.
    """
    nearest = [min(d for _, d in nbrs) for nbrs in graph.neighbors if nbrs]
    isolated = len(graph) - len(nearest)
    if isolated:
        log.info("mean_nearest_neighbor_km: %d isolated points excluded", isolated)
    if not nearest:
        raise NoNeighbor("no point has a neighbour")
    return float(np.mean(nearest))
