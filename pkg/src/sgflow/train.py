"""End-to-end training: representation cross-entropy plus flow likelihood."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import numeric as nm
from .condition import pack_steps
from .flow import flow_nll, joint_loss
from .generator import build_trajectory
from .model import build_model, check_model
from .numeric import AdamState, ModelParams, Tape
from .representation import batch_repr_loss, represent_batch
from .scene import RuleSet, SceneRecord

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    seed: int = 0
    alpha: float = 0.9
    gcn_layers: int = 4
    cross_entropy: bool = True
    stop_steps: bool = True
    allow_large_alpha: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.alpha < 0 or (self.alpha >= 1 and not self.allow_large_alpha):
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be at least 1")


def check_dataset(records: Sequence[SceneRecord], rules: RuleSet) -> None:
    if len(records) == 0:
        raise DataError("empty dataset")
    for k, rec in enumerate(records):
        if rec.graph.num_nodes and rec.graph.node_labels.max() >= rules.num_objects:
            raise DataError(f"scene {k}: node label outside the rule set's label space")
        if rec.graph.edge_labels.size and rec.graph.edge_labels.max() >= rules.num_relations:
            raise DataError(f"scene {k}: relation label outside the rule set's label space")
    dims = {rec.points.shape[1] for rec in records}
    if len(dims) != 1:
        raise DataError(f"scenes disagree on point channels: {sorted(dims)}")


def prepare_trajectories(records, rules, cfg: TrainConfig, rng):
    return [build_trajectory(r, rules, rng, stop_step=cfg.stop_steps) for r in records]


def _batch_loss(mp, recs, trajs, rules, cfg, rng, training=True):
    c_n, c_e = rules.num_objects, rules.num_relations
    batch = pack_steps(trajs, c_n)
    terms = flow_nll(mp, batch, c_n, c_e, cfg.alpha, rng, strict=not cfg.allow_large_alpha)
    out = represent_batch(mp, recs, training=training)
    ln, le = batch_repr_loss(out, recs)
    total = joint_loss(ln, le, terms.nll) if cfg.cross_entropy else terms.nll
    return total, ln, le, terms


def train(records: Sequence[SceneRecord], rules: RuleSet, cfg: TrainConfig, mp: ModelParams | None = None,
          progress: Callable[[dict], None] | None = None) -> tuple[ModelParams, list[dict]]:
    """Train with Adam for ``cfg.epochs`` passes; returns the model and per-epoch mean losses."""
    check_dataset(records, rules)
    point_dim = records[0].points.shape[1]
    if mp is None:
        mp = build_model(rules, point_dim=point_dim, gcn_layers=cfg.gcn_layers, seed=cfg.seed)
    check_model(mp, rules)
    mp.config["train"] = asdict(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    trajs = prepare_trajectories(records, rules, cfg, rng)
    state = AdamState(lr=cfg.lr)
    history = []
    n = len(records)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = np.zeros(4)
        nb = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            recs = [records[i] for i in idx]
            with Tape() as tape:
                total, ln, le, terms = _batch_loss(mp, recs, [trajs[i] for i in idx], rules, cfg, rng)
                grads = tape.gradient(total, mp.params)
            nm.adam_step(mp.params, grads, state)
            sums += [ln.item(), le.item(), terms.nll.item(), total.item()]
            nb += 1
        row = dict(zip(("L_n", "L_e", "L_m", "L"), (sums / nb).tolist()))
        row["epoch"] = epoch
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d: L_n=%.4f L_e=%.4f L_m=%.4f L=%.4f", epoch, row["L_n"], row["L_e"], row["L_m"], row["L"])
        if progress:
            progress(row)
    mp.config["adam_steps"] = state.step
    return mp, history


def evaluate_losses(mp: ModelParams, records: Sequence[SceneRecord], rules: RuleSet,
                    cfg: TrainConfig, seed: int = 0) -> dict:
    """Losses of a fixed model on ``records`` (inference BatchNorm, fixed noise)."""
    rng = np.random.default_rng(seed)
    trajs = prepare_trajectories(records, rules, cfg, rng)
    total, ln, le, terms = _batch_loss(mp, list(records), trajs, rules, cfg, rng, training=False)
    return {"L_n": ln.item(), "L_e": le.item(), "L_m": terms.nll.item(), "L": total.item()}


def epsilon_stats(mp: ModelParams, records: Sequence[SceneRecord], rules: RuleSet,
                  cfg: TrainConfig, seed: int = 0, chunk: int = 32) -> dict:
    """Per-dimension mean/std of the mapped Gaussian noise over ``records``."""
    rng = np.random.default_rng(seed)
    trajs = prepare_trajectories(records, rules, cfg, rng)
    node, edge = [], []
    for s in range(0, len(records), chunk):
        batch = pack_steps(trajs[s:s + chunk], rules.num_objects)
        terms = flow_nll(mp, batch, rules.num_objects, rules.num_relations, cfg.alpha, rng,
                         strict=not cfg.allow_large_alpha)
        node.append(terms.node_eps)
        edge.append(terms.edge_eps)
    out = {}
    for name, parts in (("node", node), ("edge", edge)):
        eps = np.vstack(parts)
        out[name] = {"mean": eps.mean(axis=0), "std": eps.std(axis=0), "count": len(eps)}
    allv = np.concatenate([np.concatenate([out[k]["mean"] for k in ("node", "edge")])])
    alls = np.concatenate([out[k]["std"] for k in ("node", "edge")])
    out["mean_abs_mean"] = float(np.abs(allv).mean())
    out["mean_abs_std_dev"] = float(np.abs(alls - 1).mean())
    return out


def write_curve(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "L_n", "L_e", "L_m", "L", "seconds"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})
