"""Synthetic instance generation and 8-fold coordinate augmentation.

Pipeline: square lattice -> boundary-biased link pruning that keeps the graph
connected -> bounded node perturbation -> link lengths and values -> link-to-node
transformation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netcore import Link, NetworkError, RoadNetwork, TransformedNetwork, is_connected, transform_network


@dataclass(frozen=True)
class GenSpec:
    n_nodes: int = 50
    n_links: int = 50
    boundary_weight: float = 2.0
    perturb: float = 0.4
    value_low: float = 1.0
    value_high: float = 10.0
    value_divisor: float = 10.0
    scale_low: float = 1.0
    scale_high: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 4:
            raise NetworkError("grid needs at least 4 nodes")
        if self.n_links < self.n_nodes - 1:
            raise NetworkError("target link count below spanning-tree size")
        if self.n_links > grid_link_count(self.n_nodes):
            raise NetworkError(f"a {self.n_nodes}-node grid has only {grid_link_count(self.n_nodes)} links")
        if not 0.0 <= self.perturb < 0.5:
            raise NetworkError("perturbation must lie in [0, 0.5)")
        if self.scale_low < 1.0 or self.scale_high < self.scale_low:
            raise NetworkError("length scale range must satisfy 1 <= low <= high")
        if self.value_high < self.value_low or self.value_divisor <= 0:
            raise NetworkError("invalid value range")

    @classmethod
    def for_node_count(cls, total: int, **kw) -> "GenSpec":
        """Split a transformed-node budget evenly between road nodes and links."""
        half = total // 2
        return cls(n_nodes=total - half, n_links=half, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        return cls(**data)


@dataclass(frozen=True)
class Grid:
    """Lattice skeleton: road network plus per-node boundary flags and the lattice spacing."""

    road: RoadNetwork
    boundary: tuple[bool, ...]
    spacing: float


def grid_link_count(n: int) -> int:
    """Links in the row-major lattice of ``n`` nodes built by :func:`generate_grid`."""
    m = math.ceil(math.sqrt(n))
    full, rest = divmod(n, m)
    horizontal = full * (m - 1) + max(rest - 1, 0)
    vertical = n - m
    return horizontal + vertical


def generate_grid(n: int) -> Grid:
    if n < 4:
        raise NetworkError("grid needs at least 4 nodes")
    m = math.ceil(math.sqrt(n))
    spacing = 1.0 / (m - 1)
    pos = [(k % m, k // m) for k in range(n)]
    index = {p: k for k, p in enumerate(pos)}
    nodes = tuple((c * spacing, r * spacing) for c, r in pos)
    links = []
    for k, (c, r) in enumerate(pos):
        for nb in ((c + 1, r), (c, r + 1)):
            if nb in index:
                j = index[nb]
                links.append(Link(k, j, spacing, 0.0))
    degree = [0] * n
    for lk in links:
        degree[lk.i] += 1
        degree[lk.j] += 1
    return Grid(RoadNetwork(nodes, tuple(links)), tuple(d < 4 for d in degree), spacing)


def prune_links(grid: Grid, target_links: int, rng: np.random.Generator, boundary_weight: float = 2.0) -> Grid:
    """Remove links at random, boundary-biased, until ``target_links`` remain; never disconnect."""
    road = grid.road
    n = road.n_nodes
    links = list(road.links)
    if target_links < n - 1:
        raise NetworkError("target link count below spanning-tree size")
    if target_links > len(links):
        raise NetworkError("target link count exceeds available links")
    weight_of = lambda lk: 1.0 + boundary_weight * (grid.boundary[lk.i] or grid.boundary[lk.j])
    bridges: set[int] = set()
    while len(links) > target_links:
        cand = [k for k in range(len(links)) if k not in bridges]
        if not cand:
            raise NetworkError("cannot prune further without disconnecting")
        w = np.array([weight_of(links[k]) for k in cand])
        k = cand[int(rng.choice(len(cand), p=w / w.sum()))]
        rest = links[:k] + links[k + 1:]
        if is_connected(n, [(lk.i, lk.j) for lk in rest]):
            links = rest
            bridges.clear()
        else:
            bridges.add(k)
    return Grid(RoadNetwork(road.nodes, tuple(links)), grid.boundary, grid.spacing)


def perturb_nodes(grid: Grid, delta: float, rng: np.random.Generator, max_tries: int = 1000) -> Grid:
    road = grid.road
    if delta == 0.0:
        return grid
    half = delta * grid.spacing
    placed: list[tuple[float, float]] = []
    taken: set[tuple[float, float]] = set()
    for x, y in road.nodes:
        for _ in range(max_tries):
            dx, dy = rng.uniform(-half, half, size=2)
            p = (min(max(x + dx, 0.0), 1.0), min(max(y + dy, 0.0), 1.0))
            if p not in taken:
                break
        else:
            raise NetworkError("perturbation infeasible")
        placed.append(p)
        taken.add(p)
    return Grid(RoadNetwork(tuple(placed), road.links), grid.boundary, grid.spacing)


def assign_attributes(road: RoadNetwork, spec: GenSpec, rng: np.random.Generator) -> RoadNetwork:
    links = []
    for lk in road.links:
        chord = road.chord(lk)
        u = rng.uniform(spec.scale_low, spec.scale_high) if spec.scale_high > spec.scale_low else spec.scale_low
        c = rng.uniform(spec.value_low, spec.value_high) / spec.value_divisor
        links.append(Link(lk.i, lk.j, chord * u, c))
    return RoadNetwork(road.nodes, tuple(links))


def generate_road_network(spec: GenSpec, rng: np.random.Generator | None = None) -> RoadNetwork:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    grid = generate_grid(spec.n_nodes)
    grid = prune_links(grid, spec.n_links, rng, spec.boundary_weight)
    grid = perturb_nodes(grid, spec.perturb, rng)
    return assign_attributes(grid.road, spec, rng)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    network: TransformedNetwork
    K: int
    p_max: float
    Q: float
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise NetworkError("K must be at least 1")
        if not 0 < self.p_max <= self.Q:
            raise NetworkError("parameters must satisfy 0 < p_max <= Q")
        if self.network.is_value_node[self.network.depot]:
            raise NetworkError("depot must be a zero-value node")

    @property
    def depot(self) -> int:
        return self.network.depot

    @property
    def budget(self) -> float:
        return min(self.p_max, self.Q)

    @property
    def pc(self) -> tuple[int, float, float]:
        return (self.K, self.p_max, self.Q)

    def with_network(self, network: TransformedNetwork) -> "ProblemInstance":
        return ProblemInstance(network, self.K, self.p_max, self.Q, self.seed, dict(self.provenance))

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "depot": self.depot,
            "K": self.K,
            "p_max": self.p_max,
            "Q": self.Q,
            "seed": self.seed,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        net = TransformedNetwork.from_dict(data["network"])
        if int(data["depot"]) != net.depot:
            raise NetworkError("instance depot disagrees with network depot")
        return cls(net, int(data["K"]), float(data["p_max"]), float(data["Q"]), int(data.get("seed", 0)),
                   data.get("provenance", {}))


def make_instance(road: RoadNetwork, depot: int, K: int, p_max: float, Q: float, seed: int = 0,
                  provenance: dict | None = None) -> ProblemInstance:
    if K < 1:
        raise NetworkError("K must be at least 1")
    if not 0 < p_max <= Q:
        raise NetworkError("parameters must satisfy 0 < p_max <= Q")
    net = transform_network(road, depot, np.random.default_rng([seed, 1]))
    return ProblemInstance(net, K, p_max, Q, seed, provenance or {})


def generate_instance(spec: GenSpec, K: int, p_max: float, Q: float, seed: int | None = None) -> ProblemInstance:
    """Fresh synthetic instance; the depot is drawn uniformly among road nodes."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    spec_s = GenSpec(**{**asdict(spec), "seed": seed})
    road = generate_road_network(spec_s, rng)
    depot = int(rng.integers(road.n_nodes))
    return make_instance(road, depot, K, p_max, Q, seed, {"genspec": asdict(spec_s)})


AUGMENTATIONS = (
    lambda x, y: (x, y),
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (y, x),
    lambda x, y: (1 - y, x),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - y, 1 - x),
)


def augment_coords(coords: np.ndarray) -> list[np.ndarray]:
    x, y = coords[:, 0], coords[:, 1]
    return [np.column_stack(f(x, y)) for f in AUGMENTATIONS]


def augment_8fold(inst: ProblemInstance) -> list[ProblemInstance]:
    variants = augment_coords(inst.network.coords)
    return [inst] + [inst.with_network(inst.network.with_coords(c)) for c in variants[1:]]


def save_instance(path, inst: ProblemInstance) -> None:
    Path(path).write_text(json.dumps(inst.to_dict(), separators=(",", ":")) + "\n")


def load_instance(path) -> ProblemInstance:
    return ProblemInstance.from_dict(json.loads(Path(path).read_text()))


def read_manifest(path) -> list[Path]:
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out
