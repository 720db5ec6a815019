"""Road networks, the link-to-node transformation and coordinate normalization.

A :class:`RoadNetwork` is the physical graph (nodes, links with a length and a
damage-information value).  :func:`transform_network` splits every link by an
artificial node placed on the perpendicular bisector of the link so that both
half-links have length ``L/2``; the original nodes become a complete graph of
direct transit moves.  All travel times are planar Euclidean distances in the
normalized coordinate frame (unit speed).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NetworkError(ValueError):
    """Raised when a network violates one of its structural invariants."""


@dataclass(frozen=True)
class Link:
    i: int
    j: int
    length: float
    value: float


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple[tuple[float, float], ...]
    links: tuple[Link, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((float(x), float(y)) for x, y in self.nodes))
        object.__setattr__(
            self,
            "links",
            tuple(
                lk if isinstance(lk, Link) else Link(int(lk[0]), int(lk[1]), float(lk[2]), float(lk[3]))
                for lk in self.links
            ),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def chord(self, link: Link) -> float:
        (xa, ya), (xb, yb) = self.nodes[link.i], self.nodes[link.j]
        return math.hypot(xb - xa, yb - ya)

    def is_connected(self) -> bool:
        return is_connected(self.n_nodes, [(lk.i, lk.j) for lk in self.links])

    def validate(self, require_unit_square: bool = True) -> None:
        """Check every RoadNetwork invariant; raise :class:`NetworkError` on the first failure."""
        if self.n_nodes == 0:
            raise NetworkError("network has no nodes")
        pts = np.asarray(self.nodes, dtype=np.float64)
        if require_unit_square and (pts.min() < 0.0 or pts.max() > 1.0):
            raise NetworkError("coordinates outside [0,1]^2")
        if len(set(self.nodes)) != self.n_nodes:
            raise NetworkError("two nodes share identical coordinates")
        for lk in self.links:
            if not (0 <= lk.i < self.n_nodes and 0 <= lk.j < self.n_nodes):
                raise NetworkError(f"link ({lk.i}, {lk.j}) references a missing node")
            if lk.i == lk.j:
                raise NetworkError("degenerate link")
            if lk.length < self.chord(lk):
                raise NetworkError(f"link ({lk.i}, {lk.j}) shorter than chord")
            if lk.value < 0:
                raise NetworkError(f"link ({lk.i}, {lk.j}) has negative value")
        if not self.is_connected():
            raise NetworkError("network is disconnected")

    def to_dict(self, depot: int | None = None, crs: str = "planar") -> dict:
        out = {
            "nodes": [list(p) for p in self.nodes],
            "links": [{"i": lk.i, "j": lk.j, "length": lk.length, "value": lk.value} for lk in self.links],
            "crs": crs,
        }
        if depot is not None:
            out["depot"] = int(depot)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RoadNetwork":
        links = tuple(Link(int(d["i"]), int(d["j"]), float(d["length"]), float(d["value"])) for d in data["links"])
        return cls(tuple(tuple(p) for p in data["nodes"]), links)


def is_connected(n: int, edges) -> bool:
    if n <= 1:
        return True
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = n
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            comps -= 1
    return comps == 1


def artificial_node_coords(a, b, length: float, side: int = 1) -> tuple[float, float]:
    """Point C on the perpendicular bisector of AB with ``|AC| = |BC| = length / 2``.

    ``side=+1`` offsets C along the left normal ``(-(yb-ya), xb-xa)``; ``side=-1``
    gives its mirror image across AB.
    """
    xa, ya = float(a[0]), float(a[1])
    xb, yb = float(b[0]), float(b[1])
    d_ab = math.hypot(xb - xa, yb - ya)
    if d_ab == 0.0:
        raise NetworkError("degenerate link")
    radicand = length * length - d_ab * d_ab
    if radicand < 0.0:
        if length < d_ab:
            raise NetworkError("link shorter than chord")
        radicand = 0.0
    half = math.sqrt(radicand) / 2.0
    s = 1.0 if side >= 0 else -1.0
    xc = (xa + xb) / 2.0 - s * half * (yb - ya) / d_ab
    yc = (ya + yb) / 2.0 + s * half * (xb - xa) / d_ab
    return xc, yc


@dataclass(frozen=True, eq=False)
class TransformedNetwork:
    """Node-based graph: original nodes ``0..n_original-1`` then one artificial node per link.

    ``dist`` is the full Euclidean distance matrix; ``adjacency`` marks the
    allowed moves (original nodes mutually, artificial nodes to their two link
    endpoints only).  ``endpoints[p]`` holds the link endpoints of artificial
    node ``p`` and ``-1`` for original nodes.
    """

    coords: np.ndarray
    value: np.ndarray
    is_value_node: np.ndarray
    endpoints: np.ndarray
    n_original: int
    depot: int
    sides: tuple[int, ...] = ()
    link_lengths: tuple[float, ...] = ()
    dist: np.ndarray = field(init=False, repr=False)
    adjacency: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "value", np.ascontiguousarray(self.value, dtype=np.float64))
        object.__setattr__(self, "is_value_node", np.ascontiguousarray(self.is_value_node, dtype=bool))
        object.__setattr__(self, "endpoints", np.ascontiguousarray(self.endpoints, dtype=np.int64))
        diff = coords[:, None, :] - coords[None, :, :]
        object.__setattr__(self, "dist", np.hypot(diff[..., 0], diff[..., 1]))
        n, m = self.node_count, self.n_original
        adj = np.zeros((n, n), dtype=bool)
        adj[:m, :m] = True
        for p in range(m, n):
            e1, e2 = self.endpoints[p]
            adj[p, e1] = adj[e1, p] = True
            adj[p, e2] = adj[e2, p] = True
        np.fill_diagonal(adj, False)
        object.__setattr__(self, "adjacency", adj)
        for arr in (self.coords, self.value, self.is_value_node, self.endpoints, self.dist, self.adjacency):
            arr.setflags(write=False)
        if not 0 <= self.depot < m:
            raise NetworkError("depot must be an original node")

    @property
    def node_count(self) -> int:
        return int(self.coords.shape[0])

    @property
    def n_value_nodes(self) -> int:
        return self.node_count - self.n_original

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    def edges(self) -> list[tuple[int, int]]:
        """Undirected adjacency as ``(i, j)`` pairs with ``i < j``, lexicographic."""
        ii, jj = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(a), int(b)) for a, b in zip(ii, jj)]

    def with_coords(self, coords) -> "TransformedNetwork":
        return TransformedNetwork(
            coords=np.asarray(coords, dtype=np.float64),
            value=self.value,
            is_value_node=self.is_value_node,
            endpoints=self.endpoints,
            n_original=self.n_original,
            depot=self.depot,
            sides=self.sides,
            link_lengths=self.link_lengths,
        )

    def min_edge_length(self) -> float:
        if self.node_count < 2:
            return math.inf
        return float(self.dist[self.adjacency].min())

    def validate(self, tol: float = 1e-9) -> None:
        m = self.n_original
        if self.is_value_node[:m].any() or not self.is_value_node[m:].all():
            raise NetworkError("value flags do not match node layout")
        if np.any(self.value[:m] != 0.0):
            raise NetworkError("original nodes must carry zero value")
        deg = self.adjacency.sum(axis=1)
        if m > 1 and not self.adjacency[:m, :m][~np.eye(m, dtype=bool)].all():
            raise NetworkError("original nodes are not a complete subgraph")
        for p in range(m, self.node_count):
            if deg[p] != 2:
                raise NetworkError(f"value node {p} does not have exactly two neighbours")
            e1, e2 = self.endpoints[p]
            if not (0 <= e1 < m and 0 <= e2 < m):
                raise NetworkError(f"value node {p} is attached to a non-original node")
            if self.link_lengths:
                half = self.link_lengths[p - m] / 2.0
                if abs(self.dist[p, e1] - half) > tol or abs(self.dist[p, e2] - half) > tol:
                    raise NetworkError(f"value node {p} is not at half-link distance")
        if self.node_count > 1 and not self.min_edge_length() > 0.0:
            raise NetworkError("zero-length edge in transformed network")

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "n_original": self.n_original,
            "coords": self.coords.tolist(),
            "value": self.value.tolist(),
            "is_value_node": self.is_value_node.tolist(),
            "endpoints": [[int(a), int(b)] for a, b in self.endpoints[self.n_original:]],
            "sides": list(self.sides),
            "link_lengths": list(self.link_lengths),
            "adjacency": [list(e) for e in self.edges()],
            "depot": self.depot,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TransformedNetwork":
        m = int(data["n_original"])
        n = int(data["node_count"])
        endpoints = np.full((n, 2), -1, dtype=np.int64)
        if n > m:
            endpoints[m:] = np.asarray(data["endpoints"], dtype=np.int64).reshape(n - m, 2)
        net = cls(
            coords=np.asarray(data["coords"], dtype=np.float64).reshape(n, 2),
            value=np.asarray(data["value"], dtype=np.float64),
            is_value_node=np.asarray(data["is_value_node"], dtype=bool),
            endpoints=endpoints,
            n_original=m,
            depot=int(data["depot"]),
            sides=tuple(int(s) for s in data.get("sides", ())),
            link_lengths=tuple(float(v) for v in data.get("link_lengths", ())),
        )
        if "adjacency" in data:
            stored = {tuple(e) for e in data["adjacency"]}
            if stored != set(net.edges()):
                raise NetworkError("stored adjacency disagrees with network structure")
        return net


def transform_network(road: RoadNetwork, depot: int, side_rng=None) -> TransformedNetwork:
    """Split every link by an artificial node; sides are drawn uniformly from ``side_rng``.

    ``side_rng`` may be a ``numpy.random.Generator``, an integer seed, or ``None``
    (seed 0).
    """
    if not 0 <= depot < road.n_nodes:
        raise NetworkError("depot out of range")
    road.validate(require_unit_square=False)
    rng = side_rng if isinstance(side_rng, np.random.Generator) else np.random.default_rng(side_rng or 0)
    m, a = road.n_nodes, road.n_links
    coords = np.zeros((m + a, 2), dtype=np.float64)
    coords[:m] = road.nodes
    value = np.zeros(m + a, dtype=np.float64)
    endpoints = np.full((m + a, 2), -1, dtype=np.int64)
    sides = rng.integers(0, 2, size=a) * 2 - 1 if a else np.zeros(0, dtype=np.int64)
    for k, lk in enumerate(road.links):
        p = m + k
        coords[p] = artificial_node_coords(road.nodes[lk.i], road.nodes[lk.j], lk.length, int(sides[k]))
        value[p] = lk.value
        endpoints[p] = (lk.i, lk.j)
    is_value = np.zeros(m + a, dtype=bool)
    is_value[m:] = True
    return TransformedNetwork(
        coords=coords,
        value=value,
        is_value_node=is_value,
        endpoints=endpoints,
        n_original=m,
        depot=depot,
        sides=tuple(int(s) for s in sides),
        link_lengths=tuple(lk.length for lk in road.links),
    )


def distance(net: TransformedNetwork, i: int, j: int) -> float:
    """Travel time between adjacent nodes (unit speed)."""
    if not net.adjacency[i, j]:
        raise NetworkError("no edge")
    return float(net.dist[i, j])


EARTH_RADIUS_M = 6_371_008.8


def project_equirectangular(lonlat) -> np.ndarray:
    """Project ``(lon, lat)`` degrees to metres about the centroid."""
    pts = np.asarray(lonlat, dtype=np.float64)
    lon0, lat0 = pts.mean(axis=0)
    x = np.radians(pts[:, 0] - lon0) * math.cos(math.radians(lat0)) * EARTH_RADIUS_M
    y = np.radians(pts[:, 1] - lat0) * EARTH_RADIUS_M
    return np.column_stack([x, y])


@dataclass(frozen=True)
class Normalization:
    offset: tuple[float, float]
    scale: float

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        out = (pts - np.asarray(self.offset)) * self.scale
        return np.clip(out, 0.0, 1.0)


def fit_normalization(pts) -> Normalization:
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise NetworkError("need at least two points")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if extent == 0.0:
        raise NetworkError("zero extent")
    return Normalization((float(lo[0]), float(lo[1])), 1.0 / extent)


def normalize_coords(raw, geographic: bool = False) -> np.ndarray:
    """Translate and uniformly scale points so their bounding box is inscribed in [0,1]^2.

    With ``geographic=True`` the input is ``(lon, lat)`` in degrees and is first
    projected equirectangularly about its centroid.
    """
    pts = project_equirectangular(raw) if geographic else np.asarray(raw, dtype=np.float64)
    return fit_normalization(pts).apply(pts)


def load_road_network(path) -> tuple[RoadNetwork, int | None, str]:
    data = json.loads(Path(path).read_text())
    road = RoadNetwork.from_dict(data)
    return road, data.get("depot"), data.get("crs", "planar")


def save_road_network(path, road: RoadNetwork, depot: int | None = None, crs: str = "planar") -> None:
    Path(path).write_text(json.dumps(road.to_dict(depot, crs), indent=1) + "\n")
