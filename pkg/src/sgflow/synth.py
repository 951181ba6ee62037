"""Grammar-based sampler of furnished rooms, used as the desk-scale corpus.

Each sample is a box-world room: four walls, a floor and a ceiling (plus an
optional door and window) and 2-8 pieces of furniture placed by simple
support rules.  Every relation the sampler emits is drawn from the same rule
table that defines ``valid_triples``, so the corpus is valid by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import RuleSet, SceneGraph, SceneRecord

ARCHITECTURAL = ("wall", "floor", "ceiling", "door", "window")
FURNITURE = (
    "chair", "table", "sofa", "bed", "cabinet", "shelf", "desk", "lamp", "tv", "plant",
    "picture", "curtain", "pillow", "sink", "toilet", "bathtub", "stove", "refrigerator",
    "counter", "box", "nightstand", "stool",
)
OBJECT_CLASSES = ARCHITECTURAL + FURNITURE
RELATION_CLASSES = (
    "empty", "attached to", "standing on", "hanging on", "lying on", "supported by",
    "close by", "leaning against", "part of", "connected to", "built in", "belonging to",
    "cover", "in front of", "behind", "left of", "right of",
)

ROOM_MENUS = {
    "living room": ("sofa", "table", "chair", "lamp", "tv", "plant", "picture", "curtain",
                    "pillow", "shelf", "box", "cabinet"),
    "bedroom": ("bed", "nightstand", "lamp", "pillow", "cabinet", "picture", "curtain",
                "desk", "chair", "plant", "box"),
    "kitchen": ("stove", "refrigerator", "counter", "sink", "table", "chair", "stool",
                "cabinet", "box", "lamp", "plant"),
    "office": ("desk", "chair", "shelf", "lamp", "cabinet", "box", "plant", "picture", "table"),
    "bathroom": ("toilet", "sink", "bathtub", "cabinet", "box", "picture", "curtain"),
}

# nominal (width, depth, height) in metres
SIZES = {
    "chair": (0.5, 0.5, 0.9), "table": (1.2, 0.8, 0.75), "sofa": (2.0, 0.9, 0.85),
    "bed": (2.0, 1.6, 0.5), "cabinet": (1.0, 0.5, 1.8), "shelf": (1.0, 0.35, 1.8),
    "desk": (1.4, 0.7, 0.75), "lamp": (0.3, 0.3, 0.5), "tv": (1.0, 0.15, 0.6),
    "plant": (0.4, 0.4, 0.8), "picture": (0.8, 0.05, 0.6), "curtain": (1.5, 0.1, 2.0),
    "pillow": (0.5, 0.3, 0.15), "sink": (0.6, 0.45, 0.2), "toilet": (0.4, 0.7, 0.8),
    "bathtub": (1.7, 0.75, 0.6), "stove": (0.6, 0.6, 0.9), "refrigerator": (0.7, 0.7, 1.8),
    "counter": (2.0, 0.6, 0.9), "box": (0.4, 0.3, 0.3), "nightstand": (0.5, 0.4, 0.55),
    "stool": (0.4, 0.4, 0.7),
}
SIZE_JITTER = 0.15

# primary placement: (relation, candidate supports); first available support wins
# in random order, a class with no available support cannot be placed yet
PLACEMENT = {
    "chair": [("standing on", ("floor",))],
    "table": [("standing on", ("floor",))],
    "sofa": [("standing on", ("floor",))],
    "bed": [("standing on", ("floor",))],
    "cabinet": [("standing on", ("floor",))],
    "shelf": [("standing on", ("floor",))],
    "desk": [("standing on", ("floor",))],
    "stool": [("standing on", ("floor",))],
    "toilet": [("standing on", ("floor",))],
    "bathtub": [("standing on", ("floor",))],
    "stove": [("standing on", ("floor",))],
    "refrigerator": [("standing on", ("floor",))],
    "counter": [("standing on", ("floor",))],
    "nightstand": [("standing on", ("floor",))],
    "plant": [("standing on", ("floor", "table"))],
    "box": [("standing on", ("floor", "shelf", "table", "cabinet"))],
    "lamp": [("standing on", ("table", "desk", "nightstand")), ("hanging on", ("ceiling",))],
    "tv": [("standing on", ("cabinet", "table")), ("hanging on", ("wall",))],
    "picture": [("hanging on", ("wall",))],
    "curtain": [("hanging on", ("window", "wall"))],
    "pillow": [("lying on", ("bed", "sofa"))],
    "sink": [("built in", ("counter",)), ("attached to", ("wall",))],
}
LEANS = {"sofa", "bed", "cabinet", "shelf", "desk", "refrigerator", "counter", "bathtub"}
CLOSE_BY = {
    "chair": ("table", "desk"), "stool": ("counter", "table"), "nightstand": ("bed",),
    "sofa": ("table",), "toilet": ("sink",), "table": ("sofa",), "plant": ("sofa", "bed"),
}


def rule_triples() -> set[tuple[str, str, str]]:
    triples = {("wall", "attached to", "floor"), ("wall", "attached to", "ceiling"),
               ("door", "attached to", "wall"), ("window", "attached to", "wall")}
    for cls, options in PLACEMENT.items():
        for rel, supports in options:
            triples.update((cls, rel, s) for s in supports)
    triples.update((cls, "leaning against", "wall") for cls in LEANS)
    for cls, targets in CLOSE_BY.items():
        triples.update((cls, "close by", t) for t in targets)
    return triples


@dataclass
class GrammarConfig:
    room_width: tuple[float, float] = (3.5, 6.0)
    room_depth: tuple[float, float] = (3.5, 6.0)
    room_height: tuple[float, float] = (2.4, 3.0)
    menus: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(ROOM_MENUS))
    min_furniture: int = 2
    max_furniture: int = 8
    max_instances: int = 12
    points_per_instance: int = 64
    door_prob: float = 0.5
    window_prob: float = 0.5
    lean_prob: float = 0.7
    close_prob: float = 0.8


class GrammarError(ValueError):
    pass


def _class_colour(name: str) -> np.ndarray:
    k = OBJECT_CLASSES.index(name)
    return np.random.default_rng(1000 + k).uniform(0.1, 0.9, size=3)


@dataclass
class _Instance:
    cls: str
    lo: np.ndarray
    hi: np.ndarray


def _layout(cfg: GrammarConfig, rng: np.random.Generator):
    """Room shell plus furniture boxes and relation triples (by index)."""
    if not cfg.menus or any(len(v) == 0 for v in cfg.menus.values()):
        raise GrammarError("grammar needs a non-empty furniture menu for every room function")
    rooms = sorted(cfg.menus)
    room = rooms[rng.integers(len(rooms))]
    W = rng.uniform(*cfg.room_width)
    D = rng.uniform(*cfg.room_depth)
    H = rng.uniform(*cfg.room_height)
    t = 0.1
    inst = [
        _Instance("wall", np.array([-t, -t, 0]), np.array([0, D + t, H])),
        _Instance("wall", np.array([W, -t, 0]), np.array([W + t, D + t, H])),
        _Instance("wall", np.array([-t, -t, 0]), np.array([W + t, 0, H])),
        _Instance("wall", np.array([-t, D, 0]), np.array([W + t, D + t, H])),
        _Instance("floor", np.array([-t, -t, -t]), np.array([W + t, D + t, 0])),
        _Instance("ceiling", np.array([-t, -t, H]), np.array([W + t, D + t, H + t])),
    ]
    edges = []
    for w in range(4):
        edges.append((w, 4, "attached to"))
        edges.append((w, 5, "attached to"))
    for name, prob, z0, z1 in (("door", cfg.door_prob, 0.0, 2.0), ("window", cfg.window_prob, 0.9, 2.0)):
        if rng.random() < prob:
            w = int(rng.integers(4))
            lo, hi = _wall_patch(w, W, D, min(z0, H - 0.3), min(z1, H - 0.1), 0.9, rng)
            edges.append((len(inst), w, "attached to"))
            inst.append(_Instance(name, lo, hi))

    budget = min(cfg.max_furniture, cfg.max_instances - len(inst))
    if budget < cfg.min_furniture:
        raise GrammarError("max_instances leaves no room for the minimum furniture count")
    n_furn = int(rng.integers(cfg.min_furniture, budget + 1))
    menu = cfg.menus[room]
    for _ in range(n_furn):
        placed = False
        for _attempt in range(20):
            cls = menu[rng.integers(len(menu))]
            if _place(cls, inst, edges, W, D, H, cfg, rng):
                placed = True
                break
        if not placed:
            break
    return room, inst, edges


def _wall_patch(w, W, D, z0, z1, width, rng):
    if w in (0, 1):
        y = rng.uniform(0.2, D - width - 0.2)
        x0 = 0.0 if w == 0 else W - 0.05
        return np.array([x0, y, z0]), np.array([x0 + 0.05, y + width, z1])
    x = rng.uniform(0.2, W - width - 0.2)
    y0 = 0.0 if w == 2 else D - 0.05
    return np.array([x, y0, z0]), np.array([x + width, y0 + 0.05, z1])


def _size(cls, rng):
    return np.array(SIZES[cls]) * rng.uniform(1 - SIZE_JITTER, 1 + SIZE_JITTER, size=3)


def _place(cls, inst, edges, W, D, H, cfg, rng) -> bool:
    options = list(PLACEMENT[cls])
    rng.shuffle(options)
    for rel, supports in options:
        cands = [k for k, it in enumerate(inst) if it.cls in supports]
        if not cands:
            continue
        sup = cands[int(rng.integers(len(cands)))]
        size = _size(cls, rng)
        s = inst[sup]
        if rel in ("standing on", "lying on", "built in"):
            if s.cls == "floor":
                x = rng.uniform(0, max(W - size[0], 1e-3))
                y = rng.uniform(0, max(D - size[1], 1e-3))
                lo = np.array([x, y, 0.0])
            else:
                span = np.maximum(s.hi[:2] - s.lo[:2] - size[:2], 0.0)
                lo = np.array([*(s.lo[:2] + rng.uniform(0, 1, 2) * span), s.hi[2]])
            if rel == "built in":
                lo[2] = s.hi[2] - size[2]
            hi = lo + size
        elif s.cls == "ceiling":
            x = rng.uniform(0, max(W - size[0], 1e-3))
            y = rng.uniform(0, max(D - size[1], 1e-3))
            lo = np.array([x, y, H - size[2]])
            hi = lo + size
        else:
            # flush with a wall-like support face
            size[2] = min(size[2], H - 0.1)
            z_hi = H - size[2] - 0.05
            z = rng.uniform(min(0.8, z_hi), z_hi)
            c = 0.5 * (s.lo + s.hi)
            lo = np.array([c[0] - size[0] / 2, c[1] - size[1] / 2, z])
            lo[:2] = np.clip(lo[:2], 0, [W - size[0], D - size[1]])
            hi = lo + size
        new = len(inst)
        inst.append(_Instance(cls, np.asarray(lo, float), np.asarray(hi, float)))
        edges.append((new, sup, rel))
        if cls in LEANS and rng.random() < cfg.lean_prob:
            walls = [k for k, it in enumerate(inst) if it.cls == "wall"]
            edges.append((new, walls[int(rng.integers(len(walls)))], "leaning against"))
        if cls in CLOSE_BY and rng.random() < cfg.close_prob:
            near = [k for k, it in enumerate(inst[:new]) if it.cls in CLOSE_BY[cls] and k != sup]
            if near:
                edges.append((new, near[int(rng.integers(len(near)))], "close by"))
        return True
    return False


def _surface_points(lo, hi, n, rng):
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(0, 1, size=(n, 3))
    pts = lo + u * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def synth_sample(cfg: GrammarConfig, rng: np.random.Generator, rules: RuleSet | None = None) -> SceneRecord:
    """Draw one furnished room from the grammar."""
    rules = rules if rules is not None else default_rules()
    room, inst, edges = _layout(cfg, rng)
    m = len(inst)
    labels = np.array([rules.object_id(it.cls) for it in inst], dtype=np.int64)
    E = np.zeros((m, m), dtype=np.int64)
    for i, j, rel in edges:
        E[i, j] = rules.relation_id(rel)
    pts, ind = [], []
    for k, it in enumerate(inst):
        p = _surface_points(it.lo, it.hi, cfg.points_per_instance, rng)
        rgb = np.clip(_class_colour(it.cls) + rng.normal(0, 0.03, size=(len(p), 3)), 0, 1)
        pts.append(np.hstack([p, rgb]))
        ind.append(np.full(len(p), k))
    return SceneRecord(np.vstack(pts), np.concatenate(ind), SceneGraph(labels, E), room_function=room)


def synth_corpus(count: int, seed: int, cfg: GrammarConfig | None = None,
                 rules: RuleSet | None = None) -> list[SceneRecord]:
    cfg = cfg or GrammarConfig()
    rules = rules or default_rules()
    root = np.random.SeedSequence(seed)
    return [synth_sample(cfg, np.random.default_rng(s), rules) for s in root.spawn(count)]


def _volume_stats(n: int = 2000) -> dict[str, tuple[float, float]]:
    rng = np.random.default_rng(7)
    out = {}
    for cls, size in SIZES.items():
        v = np.prod(np.array(size) * rng.uniform(1 - SIZE_JITTER, 1 + SIZE_JITTER, size=(n, 3)), axis=1)
        out[cls] = (float(v.mean()), float(v.std()))
    return out


def _ratio_mean(cfg: GrammarConfig, n: int = 300) -> float:
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(n):
        _, inst, _ = _layout(cfg, rng)
        room = inst[4].hi - inst[4].lo
        room_vol = room[0] * room[1] * (inst[5].hi[2] - inst[4].lo[2])
        furn = sum(np.prod(it.hi - it.lo) for it in inst if it.cls not in ARCHITECTURAL)
        ratios.append(furn / room_vol)
    return float(np.mean(ratios))


_DEFAULT: RuleSet | None = None


def default_rules(cfg: GrammarConfig | None = None) -> RuleSet:
    """Label space, rule table and volume statistics of the grammar."""
    global _DEFAULT
    if cfg is None and _DEFAULT is not None:
        return _DEFAULT
    grammar = cfg or GrammarConfig()
    aspect = {}
    for cls, size in SIZES.items():
        s = np.array(size) / np.cbrt(np.prod(size))
        aspect[cls] = tuple(float(x) for x in s)
    rules = RuleSet(
        object_classes=OBJECT_CLASSES,
        relation_classes=RELATION_CLASSES,
        valid_triples=frozenset(rule_triples()),
        room_allowed={k: frozenset(v) for k, v in grammar.menus.items()},
        volume_stats=_volume_stats(),
        architectural=frozenset(ARCHITECTURAL),
        volume_ratio_mean=_ratio_mean(grammar),
        aspect=aspect,
    )
    if cfg is None:
        _DEFAULT = rules
    return rules
