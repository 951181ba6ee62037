"""Evaluation of generated scene graphs: validity, MMD, uniqueness, diversity."""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .scene import RuleSet, SceneGraph

CLUSTER_BINS = 10


@dataclass
class MarkedGraph:
    """A graph whose first ``existing_count`` nodes pre-existed generation."""

    graph: SceneGraph
    existing_count: int
    room_function: str | None = None


# ---------------------------------------------------------------- validity


def validity(graphs: Sequence[MarkedGraph], rules: RuleSet, mode: str = "furniture_only") -> tuple[float, float]:
    """Percent of generated nodes and generated edges that are valid.

    Nodes must be non-architectural; in ``room_function`` mode they must
    also be allowed in the graph's room.  An edge counts as generated when
    either endpoint is a generated node, and is valid when its
    (subject, relation, object) triple is in the rule table.
    """
    if mode not in ("furniture_only", "room_function"):
        raise ValueError(f"unknown validity mode {mode!r}")
    n_ok = n_all = e_ok = e_all = 0
    for mg in graphs:
        g, k0 = mg.graph, mg.existing_count
        for k in range(k0, g.num_nodes):
            c = int(g.node_labels[k])
            ok = not rules.is_architectural(c)
            if ok and mode == "room_function":
                ok = rules.room_ok(mg.room_function, c)
            n_all += 1
            n_ok += ok
        for i, j, r in g.edges():
            if i >= k0 or j >= k0:
                e_all += 1
                e_ok += rules.triple_ok(int(g.node_labels[i]), r, int(g.node_labels[j]))
    if n_all == 0:
        raise ValueError("validity: batch contains no generated nodes")
    edge_pct = 100.0 * e_ok / e_all if e_all else math.nan
    return 100.0 * n_ok / n_all, edge_pct


# ---------------------------------------------------------------- graph statistics


def degrees(g: SceneGraph) -> np.ndarray:
    return np.array([len(n) for n in g.undirected_neighbors()], dtype=np.int64)


def degree_histogram(g: SceneGraph) -> np.ndarray:
    """Fraction of nodes with degree 0, 1, 2, ... (undirected, distinct neighbours)."""
    d = degrees(g)
    if len(d) == 0:
        return np.zeros(1)
    return np.bincount(d).astype(np.float64) / len(d)


def clustering_coefficients(g: SceneGraph) -> np.ndarray:
    nbrs = g.undirected_neighbors()
    out = np.zeros(g.num_nodes)
    for v, nv in enumerate(nbrs):
        k = len(nv)
        if k < 2:
            continue
        links = sum(1 for a in nv for b in nv if a < b and b in nbrs[a])
        out[v] = 2.0 * links / (k * (k - 1))
    return out


def clustering_histogram(g: SceneGraph) -> np.ndarray:
    cc = clustering_coefficients(g)
    hist, _ = np.histogram(cc, bins=CLUSTER_BINS, range=(0.0, 1.0))
    return hist / max(len(cc), 1)


def _pad(vectors: Sequence[np.ndarray], width: int) -> np.ndarray:
    out = np.zeros((len(vectors), width))
    for k, v in enumerate(vectors):
        out[k, :len(v)] = v
    return out


def mmd(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray]) -> float:
    """Squared MMD (V-statistic) with a Gaussian kernel.

    Vectors are zero-padded to a common length; the bandwidth is the median
    pairwise distance over the pooled sample.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("mmd: both sets must be non-empty")
    width = max(len(v) for v in [*set_a, *set_b])
    a, b = _pad(set_a, width), _pad(set_b, width)
    pooled = np.vstack([a, b])
    d = np.sqrt(((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(pooled), k=1)
    dists = d[iu]
    bw = float(np.median(dists)) if dists.size else 0.0
    if bw <= 0:
        nz = dists[dists > 0]
        bw = float(nz.mean()) if nz.size else 1.0

    def kmean(x, y):
        sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        return float(np.exp(-sq / (2 * bw * bw)).mean())

    val = kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b)
    return max(val, 0.0)


def mmd_degree(graphs_a: Sequence[SceneGraph], graphs_b: Sequence[SceneGraph]) -> float:
    return mmd([degree_histogram(g) for g in graphs_a], [degree_histogram(g) for g in graphs_b])


def mmd_cluster(graphs_a: Sequence[SceneGraph], graphs_b: Sequence[SceneGraph]) -> float:
    return mmd([clustering_histogram(g) for g in graphs_a], [clustering_histogram(g) for g in graphs_b])


# ---------------------------------------------------------------- isomorphism


def _edge_count(g: SceneGraph) -> int:
    return int(np.count_nonzero(g.edge_labels))


def embeds(small: SceneGraph, big: SceneGraph) -> bool:
    """True if ``small`` maps injectively into ``big`` preserving node labels
    and every labeled directed edge (extra edges in ``big`` are allowed)."""
    ms, mb = small.num_nodes, big.num_nodes
    if ms > mb or _edge_count(small) > _edge_count(big):
        return False
    if ms == 0:
        return True
    ls, lb = small.node_labels, big.node_labels
    cs, cb = Counter(ls.tolist()), Counter(lb.tolist())
    if any(cb[c] < n for c, n in cs.items()):
        return False
    es, eb = small.edge_labels, big.edge_labels
    out_s, in_s = (es != 0).sum(1), (es != 0).sum(0)
    out_b, in_b = (eb != 0).sum(1), (eb != 0).sum(0)
    cand = [[v for v in range(mb) if lb[v] == ls[u] and out_b[v] >= out_s[u] and in_b[v] >= in_s[u]]
            for u in range(ms)]
    if any(not c for c in cand):
        return False

    # match connected, constrained nodes first
    adj = (es != 0) | (es != 0).T
    order: list[int] = []
    placed = np.zeros(ms, bool)
    while len(order) < ms:
        best, key = -1, None
        for u in range(ms):
            if placed[u]:
                continue
            k = (-int(adj[u, placed].sum()), len(cand[u]), -int(adj[u].sum()), u)
            if key is None or k < key:
                best, key = u, k
        order.append(best)
        placed[best] = True

    checks = []
    for pos, u in enumerate(order):
        prev = order[:pos]
        checks.append([(w, int(es[u, w]), int(es[w, u])) for w in prev if es[u, w] or es[w, u]])

    mapping = [-1] * ms
    used = np.zeros(mb, bool)

    def extend(pos: int) -> bool:
        if pos == ms:
            return True
        u = order[pos]
        for v in cand[u]:
            if used[v]:
                continue
            ok = True
            for w, r_out, r_in in checks[pos]:
                x = mapping[w]
                if (r_out and eb[v, x] != r_out) or (r_in and eb[x, v] != r_in):
                    ok = False
                    break
            if not ok:
                continue
            mapping[u] = v
            used[v] = True
            if extend(pos + 1):
                return True
            used[v] = False
        mapping[u] = -1
        return False

    return extend(0)


def _signature(g: SceneGraph) -> tuple:
    e = g.edge_labels != 0
    return (g.num_nodes, _edge_count(g),
            tuple(sorted(zip(g.node_labels.tolist(), e.sum(1).tolist(), e.sum(0).tolist()))),
            tuple(sorted(Counter(g.edge_labels[e].tolist()).items())))


def isomorphic(a: SceneGraph, b: SceneGraph) -> bool:
    return _signature(a) == _signature(b) and embeds(a, b)


def uniqueness(graphs: Sequence[SceneGraph]) -> float:
    """Percent of graphs left after collapsing labeled-isomorphic copies."""
    if not graphs:
        return math.nan
    reps: dict[tuple, list[SceneGraph]] = {}
    distinct = 0
    for g in graphs:
        bucket = reps.setdefault(_signature(g), [])
        if not any(embeds(g, h) for h in bucket):
            bucket.append(g)
            distinct += 1
    return 100.0 * distinct / len(graphs)


def diversity_scene(graphs: Sequence[SceneGraph]) -> float:
    """Fraction of one scene's graphs that are not contained in another of them.

    A graph is excluded when it embeds into a strictly larger graph of the
    set, or when it duplicates an earlier graph (one copy survives).
    """
    n = len(graphs)
    if n == 0:
        return math.nan
    sigs = [_signature(g) for g in graphs]
    kept = 0
    for i in range(n):
        excluded = False
        for j in range(n):
            if i == j:
                continue
            if sigs[i] == sigs[j]:
                if j < i and embeds(graphs[i], graphs[j]):
                    excluded = True
            elif embeds(graphs[i], graphs[j]):
                excluded = True
            if excluded:
                break
        kept += not excluded
    return kept / n


def diversity(per_scene: Sequence[Sequence[SceneGraph]]) -> float:
    vals = [diversity_scene(gs) for gs in per_scene if len(gs)]
    return 100.0 * float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    node_validity: float
    edge_validity: float
    mmd_degree: float
    mmd_cluster: float
    uniqueness: float
    diversity: float
    node_validity_room: float = math.nan
    num_graphs: int = 0
    per_scene: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    COLUMNS = (("Node Validity (%)", "node_validity"), ("Edge Validity (%)", "edge_validity"),
               ("MMD Degree", "mmd_degree"), ("MMD Cluster", "mmd_cluster"),
               ("Uniqueness (%)", "uniqueness"), ("Diversity (%)", "diversity"))

    def __post_init__(self):
        for name in ("node_validity", "edge_validity", "uniqueness", "diversity", "node_validity_room"):
            v = getattr(self, name)
            if not math.isnan(v) and not -1e-9 <= v <= 100 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 100]")
        for name in ("mmd_degree", "mmd_cluster"):
            v = getattr(self, name)
            if not math.isnan(v):
                if v < -1e-12:
                    raise ValueError(f"{name}={v} is negative")
                setattr(self, name, max(v, 0.0))

    def to_json(self) -> dict:
        doc = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in doc.items()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    def table(self) -> str:
        heads = [h for h, _ in self.COLUMNS]
        vals = []
        for _, key in self.COLUMNS:
            v = getattr(self, key)
            vals.append("n/a" if math.isnan(v) else (f"{v:.1f}" if key.endswith("ity") or key == "uniqueness"
                                                      else f"{v:.3f}"))
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        row = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([row(heads), sep, row(vals)])


def evaluate(per_scene: Sequence[Sequence[MarkedGraph]], reference: Sequence[SceneGraph],
             rules: RuleSet, mode: str = "furniture_only", config: dict | None = None,
             jobs: int = 1) -> EvalReport:
    """Full metric suite over generated graphs grouped by source scene.

    ``jobs > 1`` computes the per-scene subgraph tests on a thread pool.
    """
    flat = [mg for scene in per_scene for mg in scene]
    scene_graphs = [[mg.graph for mg in scene] for scene in per_scene]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        div = list(pool.map(lambda gs: diversity_scene(gs) if gs else math.nan, scene_graphs))
    nv, ev = validity(flat, rules, mode)
    nv_room, _ = validity(flat, rules, "room_function")
    graphs = [mg.graph for mg in flat]
    breakdown = []
    for k, scene in enumerate(per_scene):
        if not scene:
            continue
        gs = scene_graphs[k]
        entry = {"scene": k, "graphs": len(gs), "diversity": 100.0 * div[k],
                 "nodes": [int(g.num_nodes) for g in gs]}
        try:
            entry["node_validity"], entry["edge_validity"] = validity(scene, rules, mode)
        except ValueError:
            entry["node_validity"] = entry["edge_validity"] = None
        if isinstance(entry["edge_validity"], float) and math.isnan(entry["edge_validity"]):
            entry["edge_validity"] = None
        breakdown.append(entry)
    md = mmd_degree(graphs, reference) if reference else math.nan
    mc = mmd_cluster(graphs, reference) if reference else math.nan
    return EvalReport(
        node_validity=nv, edge_validity=ev, mmd_degree=md, mmd_cluster=mc,
        uniqueness=uniqueness(graphs), diversity=100.0 * float(np.nanmean(div)) if any(scene_graphs) else math.nan,
        node_validity_room=nv_room, num_graphs=len(graphs), per_scene=breakdown, config=dict(config or {}),
    )
