"""Scene records, labeled scene graphs, rule sets, file formats and DOT export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EMPTY = 0


class SceneFormatError(ValueError):
    """A scene or rules document is malformed or inconsistent."""


@dataclass
class SceneGraph:
    """``m`` labeled nodes and an ``m x m`` relation matrix (0 = empty).

    ``edge_labels[i, j]`` is the relation with ``i`` as subject and ``j`` as
    object.
    """

    node_labels: np.ndarray
    edge_labels: np.ndarray

    def __post_init__(self):
        self.node_labels = np.asarray(self.node_labels, dtype=np.int64).reshape(-1)
        m = len(self.node_labels)
        self.edge_labels = np.asarray(self.edge_labels, dtype=np.int64).reshape(m, m)
        if np.any(np.diag(self.edge_labels) != EMPTY):
            bad = np.flatnonzero(np.diag(self.edge_labels)).tolist()
            raise SceneFormatError(f"self-relations on nodes {bad}")

    @classmethod
    def empty(cls) -> "SceneGraph":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int64))

    @property
    def num_nodes(self) -> int:
        return len(self.node_labels)

    @property
    def adjacency(self) -> np.ndarray:
        return self.edge_labels != EMPTY

    def edges(self) -> list[tuple[int, int, int]]:
        ii, jj = np.nonzero(self.edge_labels)
        return [(int(i), int(j), int(self.edge_labels[i, j])) for i, j in zip(ii, jj)]

    def undirected_neighbors(self) -> list[set[int]]:
        adj = self.adjacency | self.adjacency.T
        return [set(np.flatnonzero(adj[i]).tolist()) for i in range(self.num_nodes)]

    def subgraph(self, keep: Sequence[int]) -> "SceneGraph":
        keep = np.asarray(keep, dtype=np.int64)
        return SceneGraph(self.node_labels[keep], self.edge_labels[np.ix_(keep, keep)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (np.array_equal(self.node_labels, other.node_labels)
                and np.array_equal(self.edge_labels, other.edge_labels))


@dataclass(frozen=True)
class RuleSet:
    object_classes: tuple[str, ...]
    relation_classes: tuple[str, ...]
    valid_triples: frozenset[tuple[str, str, str]]
    room_allowed: dict[str, frozenset[str]]
    volume_stats: dict[str, tuple[float, float]]
    architectural: frozenset[str]
    volume_ratio_mean: float
    aspect: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.relation_classes or self.relation_classes[0] != "empty":
            raise SceneFormatError("relation_classes[0] must be 'empty'")
        objs, rels = set(self.object_classes), set(self.relation_classes)
        for s, r, o in self.valid_triples:
            if s not in objs or o not in objs:
                raise SceneFormatError(f"triple ({s}, {r}, {o}) names an undeclared object class")
            if r not in rels:
                raise SceneFormatError(f"triple ({s}, {r}, {o}) names an undeclared relation")
            if r == "empty":
                raise SceneFormatError(f"triple ({s}, {r}, {o}) uses the empty relation")
        for room, allowed in self.room_allowed.items():
            extra = set(allowed) - objs
            if extra:
                raise SceneFormatError(f"room {room!r} allows undeclared classes {sorted(extra)}")
        for name, (_, std) in self.volume_stats.items():
            if name not in objs:
                raise SceneFormatError(f"volume_stats for undeclared class {name!r}")
            if not std > 0:
                raise SceneFormatError(f"volume std for {name!r} must be positive")
        if not set(self.architectural) <= objs:
            raise SceneFormatError("architectural set names undeclared classes")

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_relations(self) -> int:
        return len(self.relation_classes)

    def object_id(self, name: str) -> int:
        try:
            return self.object_classes.index(name)
        except ValueError:
            raise SceneFormatError(f"undeclared object class {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_classes.index(name)
        except ValueError:
            raise SceneFormatError(f"undeclared relation class {name!r}") from None

    def architectural_ids(self) -> np.ndarray:
        return np.array(sorted(self.object_id(n) for n in self.architectural), dtype=np.int64)

    def is_architectural(self, cls: int) -> bool:
        return self.object_classes[cls] in self.architectural

    def triple_ok(self, subj: int, rel: int, obj: int) -> bool:
        return (self.object_classes[subj], self.relation_classes[rel],
                self.object_classes[obj]) in self.valid_triples

    def room_ok(self, room_function: str | None, cls: int) -> bool:
        if room_function is None or room_function not in self.room_allowed:
            return True
        return self.object_classes[cls] in self.room_allowed[room_function]

    def checksum(self) -> str:
        from .numeric import label_checksum
        return label_checksum(self.object_classes, self.relation_classes)

    def to_json(self) -> dict:
        return {
            "object_classes": list(self.object_classes),
            "relation_classes": list(self.relation_classes),
            "valid_triples": sorted(list(t) for t in self.valid_triples),
            "room_allowed": {k: sorted(v) for k, v in sorted(self.room_allowed.items())},
            "volume_stats": {k: {"mean": m, "std": s} for k, (m, s) in sorted(self.volume_stats.items())},
            "architectural": sorted(self.architectural),
            "volume_ratio_mean": self.volume_ratio_mean,
            "aspect": {k: list(v) for k, v in sorted(self.aspect.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RuleSet":
        try:
            return cls(
                object_classes=tuple(doc["object_classes"]),
                relation_classes=tuple(doc["relation_classes"]),
                valid_triples=frozenset(tuple(t) for t in doc["valid_triples"]),
                room_allowed={k: frozenset(v) for k, v in doc.get("room_allowed", {}).items()},
                volume_stats={k: (float(v["mean"]), float(v["std"]))
                              for k, v in doc.get("volume_stats", {}).items()},
                architectural=frozenset(doc.get("architectural", ())),
                volume_ratio_mean=float(doc.get("volume_ratio_mean", 0.0)),
                aspect={k: tuple(map(float, v)) for k, v in doc.get("aspect", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise SceneFormatError(f"rules document: missing or malformed field {exc}") from exc


def load_rules(path) -> RuleSet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return RuleSet.from_json(doc)


def save_rules(rules: RuleSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(rules.to_json(), fh, indent=1)


def aabb_volume(points: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    ext = points[:, :3].max(axis=0) - points[:, :3].min(axis=0)
    return float(np.prod(ext))


@dataclass
class SceneRecord:
    points: np.ndarray
    indicator: np.ndarray
    graph: SceneGraph
    room_function: str | None = None
    room_volume: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.indicator = np.asarray(self.indicator, dtype=np.int64).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[1] < 3:
            raise SceneFormatError(f"points must be n x c with c >= 3, got {self.points.shape}")
        n, m = len(self.points), self.graph.num_nodes
        if len(self.indicator) != n:
            raise SceneFormatError(f"indicator has {len(self.indicator)} entries for {n} points")
        if n and (self.indicator.min() < 0 or self.indicator.max() >= m):
            raise SceneFormatError(f"indicator values must lie in [0, {m})")
        # generated graphs carry nodes beyond existing_count that have no points
        observed = int(self.meta.get("existing_count", m))
        missing = np.flatnonzero(np.bincount(self.indicator, minlength=m)[:observed] == 0)
        if missing.size:
            raise SceneFormatError(f"instances without points: {missing.tolist()}")
        if self.room_volume is None:
            self.room_volume = aabb_volume(self.points)

    @property
    def num_instances(self) -> int:
        return self.graph.num_nodes

    def instance_volumes(self) -> np.ndarray:
        return np.array([aabb_volume(self.points[self.indicator == k]) for k in range(self.num_instances)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.indicator, other.indicator)
                and self.graph == other.graph
                and self.room_function == other.room_function
                and self.room_volume == other.room_volume)


def scene_to_json(record: SceneRecord, rules: RuleSet) -> dict:
    g = record.graph
    doc = {
        "points": record.points.tolist(),
        "indicator": record.indicator.tolist(),
        "nodes": [rules.object_classes[c] for c in g.node_labels],
        "edges": [[i, j, rules.relation_classes[r]] for i, j, r in g.edges()],
        "room_function": record.room_function,
        "room_volume": record.room_volume,
    }
    doc.update(record.meta)
    return doc


_CORE_KEYS = {"points", "indicator", "nodes", "edges", "room_function", "room_volume"}


def scene_from_json(doc: dict, rules: RuleSet, where: str = "<scene>") -> SceneRecord:
    for key in ("points", "indicator", "nodes", "edges"):
        if key not in doc:
            raise SceneFormatError(f"{where}: missing field {key!r}")
    nodes = doc["nodes"]
    labels = []
    for k, name in enumerate(nodes):
        if name not in rules.object_classes:
            raise SceneFormatError(f"{where}: nodes[{k}]: undeclared object class {name!r}")
        labels.append(rules.object_classes.index(name))
    m = len(labels)
    edges = np.zeros((m, m), dtype=np.int64)
    for k, e in enumerate(doc["edges"]):
        if not (isinstance(e, (list, tuple)) and len(e) == 3):
            raise SceneFormatError(f"{where}: edges[{k}]: expected [i, j, relation]")
        i, j, rel = e
        if not (isinstance(i, int) and isinstance(j, int) and 0 <= i < m and 0 <= j < m):
            raise SceneFormatError(f"{where}: edges[{k}]: endpoint out of range for {m} nodes")
        if rel not in rules.relation_classes:
            raise SceneFormatError(f"{where}: edges[{k}]: undeclared relation {rel!r}")
        r = rules.relation_classes.index(rel)
        if r == EMPTY:
            raise SceneFormatError(f"{where}: edges[{k}]: explicit 'empty' edge")
        if i == j:
            raise SceneFormatError(f"{where}: edges[{k}]: self-relation on node {i}")
        edges[i, j] = r
    points = doc["points"]
    if not points:
        points = np.zeros((0, 3))
    try:
        graph = SceneGraph(np.array(labels, dtype=np.int64), edges)
        rec = SceneRecord(
            points=np.asarray(points, dtype=np.float64),
            indicator=np.asarray(doc["indicator"], dtype=np.int64),
            graph=graph,
            room_function=doc.get("room_function"),
            room_volume=None if doc.get("room_volume") is None else float(doc["room_volume"]),
            meta={k: v for k, v in doc.items() if k not in _CORE_KEYS},
        )
    except SceneFormatError as exc:
        raise SceneFormatError(f"{where}: {exc}") from exc
    except ValueError as exc:
        raise SceneFormatError(f"{where}: {exc}") from exc
    return rec


def load_scene(path, rules: RuleSet) -> SceneRecord:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: top level must be an object")
    return scene_from_json(doc, rules, where=str(path))


def save_scene(record: SceneRecord, path, rules: RuleSet) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(record, rules), fh)


def scene_files(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json") if p.name != "rules.json")


def empty_room(record: SceneRecord, rules: RuleSet) -> SceneRecord:
    """Drop every non-architectural instance together with its points."""
    keep = [k for k, c in enumerate(record.graph.node_labels) if rules.is_architectural(int(c))]
    remap = np.full(record.num_instances, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = remap[record.indicator] >= 0
    return SceneRecord(
        points=record.points[mask],
        indicator=remap[record.indicator[mask]],
        graph=record.graph.subgraph(keep),
        room_function=record.room_function,
        room_volume=None,
        meta=dict(record.meta),
    )


# ---------------------------------------------------------------- DOT export


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def graph_to_dot(graph: SceneGraph, rules: RuleSet, existing_count: int, name: str = "scene") -> str:
    """Graphviz text for ``graph``; the first ``existing_count`` nodes are green."""
    lines = [f"digraph {_dot_quote(name)} {{", "  node [shape=box, style=filled];"]
    for k, c in enumerate(graph.node_labels):
        colour = "palegreen" if k < existing_count else "lightskyblue"
        label = _dot_quote(f"{rules.object_classes[c]}_{k}")
        lines.append(f"  n{k} [label={label}, fillcolor={colour}];")
    for i, j, r in graph.edges():
        colour = "darkgreen" if i < existing_count and j < existing_count else "black"
        lines.append(f"  n{i} -> n{j} [label={_dot_quote(rules.relation_classes[r])}, color={colour}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
