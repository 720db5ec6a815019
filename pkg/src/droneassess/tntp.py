"""Import of road networks published in the TNTP text format.

A network comes as a node file (``node x y ;`` rows, or a GeoJSON point
collection) and a link file (metadata block, ``~`` header, then one row per
link).  Links are kept exactly as listed, so directed record pairs become two
links.  Coordinates are normalized into the unit square and link lengths are
scaled by the same factor; a length that ends up shorter than its chord (after
unit conversion and rounding in the source data) is raised to the chord.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netcore import Link, NetworkError, RoadNetwork, fit_normalization, project_equirectangular


class TNTPError(NetworkError):
    pass


@dataclass(frozen=True)
class ImportMapping:
    """How to read one TNTP dataset: columns, units and synthetic damage values."""

    init_column: int = 0
    term_column: int = 1
    length_column: int = 3
    length_to_coord: float = 1.0   # link-length unit -> coordinate unit (after projection)
    geographic: bool = False       # node coordinates are (lon, lat) degrees
    depot: int | None = None       # node id; default is the node nearest the centroid
    value_low: float = 1.0
    value_high: float = 10.0
    value_divisor: float = 10.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ImportMapping":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise TNTPError(f"unknown mapping keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ImportMapping":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ImportResult:
    road: RoadNetwork
    depot: int
    node_ids: list[int]
    metadata: dict = field(default_factory=dict)
    clamped_links: int = 0

    def summary(self) -> dict:
        return {"nodes": self.road.n_nodes, "links": self.road.n_links, "depot": self.depot,
                "depot_id": self.node_ids[self.depot], "clamped_links": self.clamped_links,
                "metadata": self.metadata}


_META = re.compile(r"^<([^>]+)>\s*(.*)$")


def _rows(text: str):
    """Yield ``(line_number, fields)`` for data rows, skipping blanks, comments and the metadata block."""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("~") or _META.match(line):
            continue
        line = line.rstrip(";").strip()
        if line:
            yield no, line.split()


def parse_metadata(text: str) -> dict[str, str]:
    meta = {}
    for raw in text.splitlines():
        m = _META.match(raw.strip())
        if m:
            meta[m.group(1).strip().upper()] = m.group(2).strip()
    return meta


def parse_nodes(text: str) -> dict[int, tuple[float, float]]:
    """Node rows ``id x y``; a non-numeric first row is treated as a column header."""
    if text.lstrip().startswith("{"):
        return _parse_geojson_nodes(text)
    nodes: dict[int, tuple[float, float]] = {}
    first = True
    for no, parts in _rows(text):
        if first and not _is_number(parts[0]):
            first = False
            continue
        first = False
        if len(parts) < 3:
            raise TNTPError(f"line {no}: expected 'node x y', got {len(parts)} fields")
        try:
            nid, x, y = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise TNTPError(f"line {no}: malformed node row") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise TNTPError(f"line {no}: non-finite coordinate")
        if nid in nodes:
            raise TNTPError(f"line {no}: duplicate node id {nid}")
        nodes[nid] = (x, y)
    if not nodes:
        raise TNTPError("node file is empty")
    return nodes


def _parse_geojson_nodes(text: str) -> dict[int, tuple[float, float]]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TNTPError(f"line {exc.lineno}: malformed GeoJSON") from None
    nodes: dict[int, tuple[float, float]] = {}
    for k, feat in enumerate(data.get("features", [])):
        props = feat.get("properties") or {}
        nid = props.get("id", props.get("node"))
        coords = (feat.get("geometry") or {}).get("coordinates")
        if nid is None or not coords or len(coords) < 2:
            raise TNTPError(f"feature {k}: missing id or point coordinates")
        nid = int(nid)
        if nid in nodes:
            raise TNTPError(f"feature {k}: duplicate node id {nid}")
        nodes[nid] = (float(coords[0]), float(coords[1]))
    if not nodes:
        raise TNTPError("node file is empty")
    return nodes


def parse_links(text: str, mapping: ImportMapping = ImportMapping()) -> list[tuple[int, int, float]]:
    cols = (mapping.init_column, mapping.term_column, mapping.length_column)
    links = []
    for no, parts in _rows(text):
        if len(parts) <= max(cols):
            raise TNTPError(f"line {no}: expected at least {max(cols) + 1} fields, got {len(parts)}")
        try:
            i, j, length = int(parts[cols[0]]), int(parts[cols[1]]), float(parts[cols[2]])
        except ValueError:
            raise TNTPError(f"line {no}: malformed link row") from None
        if not math.isfinite(length) or length <= 0:
            raise TNTPError(f"line {no}: link length must be positive")
        links.append((i, j, length))
    if not links:
        raise TNTPError("link file is empty")
    return links


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def import_tntp(node_path, link_path, mapping: ImportMapping | None = None) -> ImportResult:
    mapping = mapping or ImportMapping()
    node_text = Path(node_path).read_text()
    link_text = Path(link_path).read_text()
    nodes = parse_nodes(node_text)
    links = parse_links(link_text, mapping)
    meta = parse_metadata(link_text)
    for key, actual in (("NUMBER OF NODES", len(nodes)), ("NUMBER OF LINKS", len(links))):
        if key in meta and int(meta[key]) != actual:
            raise TNTPError(f"metadata says {key.lower()} = {meta[key]}, files contain {actual}")

    ids = sorted(nodes)
    index = {nid: k for k, nid in enumerate(ids)}
    raw = np.array([nodes[nid] for nid in ids], dtype=np.float64)
    pts = project_equirectangular(raw) if mapping.geographic else raw
    norm = fit_normalization(pts)
    xy = norm.apply(pts)

    rng = np.random.default_rng(mapping.seed)
    values = rng.uniform(mapping.value_low, mapping.value_high, size=len(links)) / mapping.value_divisor
    out_links, clamped = [], 0
    for (i, j, length), value in zip(links, values):
        if i not in index or j not in index:
            raise TNTPError(f"link ({i}, {j}) references an unknown node id")
        a, b = index[i], index[j]
        scaled = length * mapping.length_to_coord * norm.scale
        chord = math.hypot(xy[b, 0] - xy[a, 0], xy[b, 1] - xy[a, 1])
        if scaled < chord:
            scaled = chord
            clamped += 1
        out_links.append(Link(a, b, float(scaled), float(value)))

    road = RoadNetwork(tuple(map(tuple, xy)), tuple(out_links))
    if mapping.depot is not None:
        if mapping.depot not in index:
            raise TNTPError(f"depot id {mapping.depot} is not a node")
        depot = index[mapping.depot]
    else:
        centre = xy.mean(axis=0)
        depot = int(np.argmin(np.hypot(xy[:, 0] - centre[0], xy[:, 1] - centre[1])))
    info = {"mapping": asdict(mapping), "normalization": {"offset": list(norm.offset), "scale": norm.scale},
            "source_metadata": meta}
    return ImportResult(road, depot, ids, info, clamped)
