"""Instance-incremental generation.

Training decomposes an observed scene graph into a trajectory of node and
edge elements, each conditioned on the subgraph built so far.  Inference
runs the same loop forwards: sample a node, then one relation to every
existing node, and stop as soon as a new node receives no relation at all.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import condition as cond
from .numeric import ModelParams
from .scene import RuleSet, SceneGraph, SceneRecord

log = logging.getLogger(__name__)

SEMANTIC_MODES = ("none", "furniture_only", "room_function")


class ConstraintsUnsatisfiable(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    alpha: float = 0.9
    lam: float = 0.8
    beta: float = 1.2
    space_constraint: bool = False
    semantic_mode: str = "none"
    anti_overlap: bool = False
    max_nodes: int = 50
    max_retries: int = 25
    graphs_per_scene: int = 5
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lam <= self.beta:
            raise ValueError(f"need 0 < lambda <= beta, got lambda={self.lam}, beta={self.beta}")
        if self.max_nodes < 1 or self.max_retries < 1:
            raise ValueError("max_nodes and max_retries must be at least 1")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class Step:
    kind: str  # "node" | "edge"
    target: int
    num_nodes: int  # nodes of the conditioning subgraph
    num_edges: int  # committed edges of the conditioning subgraph
    subject: int = -1
    object: int = -1
    terminal: bool = False


@dataclass
class Trajectory:
    """Ordered elements of one scene graph.

    ``labels`` and ``edges`` are in trajectory order; the subgraph of a step
    is ``labels[:num_nodes]`` with ``edges[:num_edges]``.
    """

    labels: np.ndarray
    edges: list[tuple[int, int, int]]
    order: list[int]  # original node id of each trajectory position
    seed_count: int
    steps: list[Step] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def _node_order(graph: SceneGraph, seed: list[int]) -> list[int]:
    """BFS from the seed over non-empty edges (ties by id), then a stable
    repair so every relation's object precedes its subject."""
    m = graph.num_nodes
    nbrs = graph.undirected_neighbors()
    seen = set(seed)
    queue = deque(seed)
    order: list[int] = []
    while queue:
        u = queue.popleft()
        for v in sorted(nbrs[u]):
            if v not in seen:
                seen.add(v)
                order.append(v)
                queue.append(v)
    rest = [v for v in range(m) if v not in seen]
    if rest:
        log.info("nodes %s unreachable from the seed; appended in id order", rest)
    order += rest
    rank = {v: k for k, v in enumerate(order)}
    pending = set(order)
    out = []
    while pending:
        ready = [v for v in pending
                 if not any(graph.edge_labels[v, j] and j in pending for j in range(m) if j != v)]
        pick = min(ready or pending, key=rank.__getitem__)
        out.append(pick)
        pending.remove(pick)
    return out


def build_trajectory(record: SceneRecord, rules: RuleSet, rng: np.random.Generator | None = None,
                     stop_step: bool = False) -> Trajectory:
    """Decompose ``record.graph`` into seed + node/edge steps.

    With ``stop_step`` a terminal node (class drawn from the room's menu)
    is appended whose relations are all empty, giving the model examples of
    the stop signal.  Terminal node elements carry no likelihood term.
    """
    g = record.graph
    seed = [k for k, c in enumerate(g.node_labels) if rules.is_architectural(int(c))]
    if not seed:
        raise ValueError("build_trajectory: scene has no architectural node to seed from")
    order = seed + _node_order(g, seed)
    pos = {v: k for k, v in enumerate(order)}
    labels = g.node_labels[order].copy()
    edges = [(pos[i], pos[j], r) for i, j, r in g.edges() if i in seed and j in seed]
    edges.sort()
    traj = Trajectory(labels, edges, order, len(seed))
    dropped = 0
    for k in range(len(seed), len(order)):
        traj.steps.append(Step("node", int(labels[k]), k, len(edges)))
        for i in range(k):
            r = int(g.edge_labels[order[k], order[i]])
            traj.steps.append(Step("edge", r, k + 1, len(edges), subject=k, object=i))
            if r:
                edges.append((k, i, r))
            if g.edge_labels[order[i], order[k]]:
                dropped += 1
    if dropped:
        log.warning("%d relations point from an older to a newer node and are not modelled", dropped)
    if stop_step:
        rng = rng or np.random.default_rng(0)
        pool = rules.room_allowed.get(record.room_function) if record.room_function else None
        pool = sorted(pool) if pool else [c for c in rules.object_classes if c not in rules.architectural]
        cls = rules.object_id(pool[int(rng.integers(len(pool)))])
        k = len(order)
        traj.labels = np.append(labels, cls)
        traj.steps.append(Step("node", cls, k, len(edges), terminal=True))
        for i in range(k):
            traj.steps.append(Step("edge", 0, k + 1, len(edges), subject=k, object=i))
    return traj


def replay(traj: Trajectory, num_nodes: int | None = None) -> SceneGraph:
    """Rebuild the graph from the trajectory targets in original node ids.

    Nodes left without any relation (the terminal stop node) are dropped,
    exactly as generation does.
    """
    labels = list(traj.labels[:traj.seed_count])
    edges = [e for e in traj.edges if e[0] < traj.seed_count and e[1] < traj.seed_count]
    pending = None
    for st in traj.steps:
        if st.kind == "node":
            pending = (st.target, [])
            labels.append(st.target)
        else:
            if st.target:
                pending[1].append((st.subject, st.object, st.target))
            if st.object == st.subject - 1:
                if pending[1]:
                    edges.extend(pending[1])
                else:
                    labels.pop()
                pending = None
    n = len(labels)
    if num_nodes is not None and n != num_nodes:
        raise ValueError(f"replay produced {n} nodes, expected {num_nodes}")
    inv = traj.order[:n]
    out_labels = np.zeros(n, dtype=np.int64)
    out_edges = np.zeros((n, n), dtype=np.int64)
    for k, c in enumerate(labels):
        out_labels[inv[k]] = c
    for i, j, r in edges:
        out_edges[inv[i], inv[j]] = r
    return SceneGraph(out_labels, out_edges)


# ---------------------------------------------------------------- constraints


def check_space(volumes: Sequence[float], room_volume: float, rules: RuleSet, lam: float, beta: float) -> str:
    """Where the total generated volume falls relative to the allowed band."""
    if not room_volume > 0:
        raise ValueError(f"room volume must be positive, got {room_volume}")
    total = float(np.sum(volumes)) if len(volumes) else 0.0
    lo = lam * rules.volume_ratio_mean * room_volume
    hi = beta * rules.volume_ratio_mean * room_volume
    if total < lo:
        return "under"
    if total > hi:
        return "over"
    return "within"


def sample_volume(rules: RuleSet, cls: int, rng: np.random.Generator) -> float:
    name = rules.object_classes[cls]
    if name in rules.volume_stats:
        mean, std = rules.volume_stats[name]
    else:
        vals = np.array(list(rules.volume_stats.values()) or [(0.1, 0.05)])
        mean, std = float(vals[:, 0].mean()), float(vals[:, 1].mean())
    return max(float(rng.normal(mean, std)), 0.01)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def intersects(self, other: "Box", tol: float = 1e-9) -> bool:
        return bool(np.all(np.minimum(self.hi, other.hi) - np.maximum(self.lo, other.lo) > tol))

    def inside(self, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(self.lo >= lo - tol) and np.all(self.hi <= hi + tol))

    def to_json(self) -> list:
        return [self.lo.tolist(), self.hi.tolist()]


def box_extents(rules: RuleSet, cls: int, volume: float) -> np.ndarray:
    aspect = np.array(rules.aspect.get(rules.object_classes[cls], (1.0, 1.0, 1.0)))
    aspect = aspect / np.cbrt(np.prod(aspect))
    return np.cbrt(volume) * aspect


_ON_TOP = {"standing on", "lying on", "supported by", "built in", "cover"}
_ON_WALL = {"hanging on", "attached to", "leaning against"}


def place_box(node_class: int, relations: Sequence[tuple[int, int]], labels: Sequence[int],
              boxes: dict[int, Box], room_lo: np.ndarray, room_hi: np.ndarray, rules: RuleSet,
              volume: float, rng: np.random.Generator, max_retries: int = 25) -> Box | None:
    """Axis-aligned pose for a new object, consistent with its relations.

    ``relations`` lists ``(object_index, relation_id)`` of the new node's
    outgoing edges; ``boxes`` maps already placed node indices to boxes.
    Returns ``None`` when no free pose is found within the retry budget.
    """
    size = box_extents(rules, node_class, volume)
    room_ext = room_hi - room_lo
    if np.any(size > room_ext):
        return None
    anchor = None
    for obj, rel in relations:
        rname = rules.relation_classes[rel]
        oname = rules.object_classes[labels[obj]]
        if rname in _ON_TOP and (oname == "floor" or obj in boxes):
            anchor = ("top", obj if oname != "floor" else None)
            break
        if rname in _ON_WALL and oname in ("wall", "door", "window"):
            anchor = ("wall", None)
            break
        if rname in _ON_WALL and oname == "ceiling":
            anchor = ("ceiling", None)
            break
    occupied = list(boxes.values())
    for _ in range(max_retries):
        lo = room_lo + rng.uniform(0, 1, 3) * (room_ext - size)
        if anchor is None or anchor[0] == "top":
            lo[2] = room_lo[2]
            if anchor is not None and anchor[1] is not None:
                sup = boxes[anchor[1]]
                span = np.maximum(sup.hi[:2] - sup.lo[:2] - size[:2], 0.0)
                lo[:2] = sup.lo[:2] + rng.uniform(0, 1, 2) * span
                lo[:2] = np.clip(lo[:2], room_lo[:2], room_hi[:2] - size[:2])
                lo[2] = sup.hi[2]
        elif anchor[0] == "ceiling":
            lo[2] = room_hi[2] - size[2]
        else:
            axis = int(rng.integers(2))
            lo[axis] = room_lo[axis] if rng.random() < 0.5 else room_hi[axis] - size[axis]
        box = Box(lo, lo + size)
        if box.inside(room_lo, room_hi) and not any(box.intersects(b) for b in occupied):
            return box
    return None


# ---------------------------------------------------------------- sampling loop


@dataclass
class GenerationResult:
    graph: SceneGraph
    existing_count: int
    events: list[dict]
    stop_reason: str
    volumes: dict[int, float] = field(default_factory=dict)
    boxes: dict[int, Box] = field(default_factory=dict)

    def to_record(self, empty_scene: SceneRecord, generated_from: str | None = None) -> SceneRecord:
        meta = {"existing_count": self.existing_count, "stop_reason": self.stop_reason}
        if generated_from is not None:
            meta["generated_from"] = generated_from
        if self.boxes:
            meta["boxes"] = {str(k): b.to_json() for k, b in self.boxes.items()}
        return SceneRecord(empty_scene.points, empty_scene.indicator, self.graph,
                           room_function=empty_scene.room_function,
                           room_volume=empty_scene.room_volume, meta=meta)


class _Graph:
    """Mutable growing graph with cached conditioning state."""

    def __init__(self, seed: SceneGraph, mp: ModelParams, c_n: int):
        self.labels = list(int(c) for c in seed.node_labels)
        self.edges = {(i, j): int(r) for i, j, r in seed.edges()}
        self.mp = mp
        self.c_n = c_n
        self._state = None

    def freeze(self) -> SceneGraph:
        m = len(self.labels)
        e = np.zeros((m, m), dtype=np.int64)
        for (i, j), r in self.edges.items():
            e[i, j] = r
        return SceneGraph(np.array(self.labels, dtype=np.int64), e)

    def state(self) -> cond.SubgraphState:
        if self._state is None:
            self._state = cond.gcn_embed(self.freeze(), self.mp, self.c_n)
        return self._state

    def add_node(self, c: int) -> None:
        self.labels.append(c)
        self._state = None

    def add_edge(self, i: int, j: int, r: int) -> None:
        self.edges[(i, j)] = r
        self._state = None

    def pop_node(self) -> None:
        k = len(self.labels) - 1
        self.labels.pop()
        for key in [e for e in self.edges if k in e]:
            del self.edges[key]
        self._state = None


def _sample(mu: np.ndarray, sigma: np.ndarray, rng: np.random.Generator, temperature: float):
    eps = rng.standard_normal(mu.shape) * temperature
    z = mu + sigma * eps
    return eps, int(np.argmax(z))


def _event(step, kind, eps, mu, sigma, argmax, accepted, reason, **extra) -> dict:
    ev = {"step": step, "kind": kind, "sampled_eps": eps.tolist(), "mu": mu.tolist(),
          "sigma": sigma.tolist(), "argmax": argmax, "accepted": accepted, "reason": reason}
    ev.update(extra)
    return ev


def room_box(scene: SceneRecord) -> tuple[np.ndarray, np.ndarray]:
    pts = scene.points[:, :3]
    return pts.min(axis=0), pts.max(axis=0)


def generate(empty_scene: SceneRecord, mp: ModelParams, rules: RuleSet, config: GenerationConfig,
             rng: np.random.Generator, seed_graph: SceneGraph | None = None) -> GenerationResult:
    """Grow new nodes and relations onto the seed graph of ``empty_scene``."""
    seed = seed_graph if seed_graph is not None else empty_scene.graph
    if seed.num_nodes == 0:
        raise ValueError("generate: empty seed graph")
    c_n = rules.num_objects
    G = _Graph(seed, mp, c_n)
    existing = seed.num_nodes
    events: list[dict] = []
    volumes: dict[int, float] = {}
    boxes: dict[int, Box] = {}
    room_lo = room_hi = None
    if config.anti_overlap:
        room_lo, room_hi = room_box(empty_scene)
    step = 0
    stop_reason = "max_nodes"
    mode = config.semantic_mode
    committed = 0

    while committed < config.max_nodes:
        k = len(G.labels)
        outcome = None
        for attempt in range(config.max_retries):
            state = G.state()
            mu, sigma = cond.node_condition(state, mp)
            eps, c = _sample(mu, sigma, rng, config.temperature)
            reason = None
            if mode != "none" and rules.is_architectural(c):
                reason = "architectural_class"
            elif mode == "room_function" and not rules.room_ok(empty_scene.room_function, c):
                reason = "not_allowed_in_room"
            events.append(_event(step, "node", eps, mu, sigma, c, reason is None, reason or "ok", node=k))
            step += 1
            if reason is not None:
                continue
            G.add_node(c)
            kept = []
            for i in range(k):
                st = G.state()
                emu, esig = cond.edge_condition(st, k, i, mp)
                eeps, raw = _sample(emu, esig, rng, config.temperature)
                r = raw
                why = "ok" if r else "empty"
                if r and mode != "none" and not rules.triple_ok(c, r, G.labels[i]):
                    why, r = "invalid_triple", 0
                events.append(_event(step, "edge", eeps, emu, esig, raw,
                                     r != 0, why, subject=k, object=i))
                step += 1
                if r:
                    G.add_edge(k, i, r)
                    kept.append((i, r))
            if not kept:
                G.pop_node()
                outcome = "all_edges_empty"
                break
            vol = None
            if config.space_constraint or config.anti_overlap:
                vol = sample_volume(rules, c, rng)
            if config.space_constraint:
                side = check_space(list(volumes.values()) + [vol], empty_scene.room_volume,
                                   rules, config.lam, config.beta)
                if side == "over":
                    G.pop_node()
                    events.append({"step": step, "kind": "rollback", "node": k, "reason": "space_over",
                                   "accepted": False})
                    step += 1
                    outcome = "space_over"
                    break
            if config.anti_overlap:
                box = place_box(c, kept, G.labels, boxes, room_lo, room_hi, rules, vol, rng,
                                config.max_retries)
                if box is None:
                    G.pop_node()
                    events.append({"step": step, "kind": "rollback", "node": k, "reason": "no_free_pose",
                                   "accepted": False})
                    step += 1
                    continue
                boxes[k] = box
            if vol is not None:
                volumes[k] = vol
            outcome = "committed"
            break
        if outcome is None:
            if committed == 0:
                raise ConstraintsUnsatisfiable(
                    f"constraints unsatisfiable: no acceptable first node in {config.max_retries} attempts")
            stop_reason = "retry_exhausted"
            break
        if outcome != "committed":
            stop_reason = outcome
            break
        committed += 1
    if config.space_constraint and stop_reason != "space_over":
        if check_space(list(volumes.values()), empty_scene.room_volume, rules,
                       config.lam, config.beta) == "under":
            log.warning("generation stopped with total volume under the lower limit")
            events.append({"step": step, "kind": "warning", "reason": "space_under", "accepted": True})
            step += 1
    events.append({"step": step, "kind": "stop", "reason": stop_reason, "accepted": True})
    return GenerationResult(G.freeze(), existing, events, stop_reason, volumes, boxes)


def config_dict(config: GenerationConfig) -> dict:
    return asdict(config)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))
