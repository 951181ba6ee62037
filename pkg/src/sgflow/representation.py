"""Point-cloud to scene-graph representation.

A shared pointwise MLP encodes every point, a per-instance max pool turns the
points of each instance into one 256-d feature, and two MLP heads score node
classes and (from pairwise feature differences) relation classes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .numeric import ModelParams, Tensor
from .scene import SceneGraph, SceneRecord

log = logging.getLogger(__name__)

POINT_WIDTHS = (64, 128, 256)
HEAD_HIDDEN = 128


def init_repr(mp: ModelParams, point_dim: int, c_n: int, c_e: int, rng: np.random.Generator) -> None:
    fan = point_dim
    for k, w in enumerate(POINT_WIDTHS):
        mp.add(f"repr.point.{k}.w", nm.init_uniform(rng, fan, (fan, w)))
        mp.add(f"repr.point.{k}.b", nm.init_uniform(rng, fan, (w,)))
        if k < len(POINT_WIDTHS) - 1:
            mp.add_batch_norm(f"repr.point.{k}.bn", w)
        fan = w
    for head, out in (("node", c_n), ("edge", c_e)):
        mp.add(f"repr.{head}.0.w", nm.init_uniform(rng, fan, (fan, HEAD_HIDDEN)))
        mp.add(f"repr.{head}.0.b", nm.init_uniform(rng, fan, (HEAD_HIDDEN,)))
        mp.add_batch_norm(f"repr.{head}.0.bn", HEAD_HIDDEN)
        mp.add(f"repr.{head}.1.w", nm.init_uniform(rng, HEAD_HIDDEN, (HEAD_HIDDEN, out)))
        mp.add(f"repr.{head}.1.b", nm.init_uniform(rng, HEAD_HIDDEN, (out,)))


def _bn_relu(mp: ModelParams, name: str, x: Tensor, training: bool) -> Tensor:
    y = nm.batch_norm(x, mp[f"{name}.gamma"], mp[f"{name}.beta"], mp.buffers[name], training)
    return nm.relu(y)


def encode_instances(mp: ModelParams, points, indicator, m: int, training: bool = False) -> Tensor:
    """``m x 256`` instance features; row ``k`` pools the points with indicator ``k``."""
    x = nm.as_tensor(points)
    last = len(POINT_WIDTHS) - 1
    for k in range(len(POINT_WIDTHS)):
        x = nm.linear(x, mp[f"repr.point.{k}.w"], mp[f"repr.point.{k}.b"])
        if k < last:
            x = _bn_relu(mp, f"repr.point.{k}.bn", x, training)
    return nm.segment_max(x, indicator, m)


def _head(mp: ModelParams, head: str, x: Tensor, training: bool) -> Tensor:
    h = nm.linear(x, mp[f"repr.{head}.0.w"], mp[f"repr.{head}.0.b"])
    h = _bn_relu(mp, f"repr.{head}.0.bn", h, training)
    return nm.linear(h, mp[f"repr.{head}.1.w"], mp[f"repr.{head}.1.b"])


def node_logits(mp: ModelParams, xv: Tensor, training: bool = False) -> Tensor:
    return _head(mp, "node", xv, training)


def node_head(mp: ModelParams, xv: Tensor, training: bool = False) -> Tensor:
    """Class probabilities per instance (rows sum to one)."""
    return nm.softmax(node_logits(mp, xv, training))


def _pair_index(m: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    return ii.ravel() + offset, jj.ravel() + offset


def edge_init(xv: Tensor) -> Tensor:
    """``E_init[i, j] = X_v[i] - X_v[j]`` as an ``m x m x d`` tensor."""
    m, d = xv.shape
    ii, jj = _pair_index(m)
    diff = nm.sub(nm.take_rows(xv, ii), nm.take_rows(xv, jj))
    return nm.reshape(diff, (m, m, d))


def edge_logits(mp: ModelParams, e_init: Tensor, training: bool = False) -> Tensor:
    """Relation logits; accepts stacked pairs (``p x d``) or a square ``m x m x d`` block."""
    if e_init.ndim == 3:
        m, _, d = e_init.shape
        out = _head(mp, "edge", nm.reshape(e_init, (m * m, d)), training)
        return nm.reshape(out, (m, m, out.shape[-1]))
    return _head(mp, "edge", e_init, training)


def edge_head(mp: ModelParams, e_init: Tensor, training: bool = False) -> Tensor:
    """Relation probabilities per ordered pair, ``m x m x c_e``."""
    return nm.softmax(edge_logits(mp, e_init, training))


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` rows."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    ll = nm.sum(nm.mul(nm.log_softmax(logits), onehot))
    return nm.mul(ll, -1.0 / n)


def repr_loss(node_lg: Tensor, edge_lg: Tensor, truth: SceneGraph) -> tuple[Tensor, Tensor]:
    """Node and masked edge cross-entropy for one scene, computed from logits.

    Only pairs with a non-empty ground-truth relation enter the edge loss.
    """
    m = truth.num_nodes
    if node_lg.shape[0] != m or edge_lg.shape[:2] != (m, m):
        raise nm.ShapeError(f"repr_loss: predictions {node_lg.shape}/{edge_lg.shape} vs {m} nodes")
    ln = _cross_entropy(node_lg, truth.node_labels)
    return ln, _masked_edge_ce(nm.reshape(edge_lg, (m * m, edge_lg.shape[-1])), truth.edge_labels.ravel())


def _masked_edge_ce(flat_logits: Tensor, flat_labels: np.ndarray) -> Tensor:
    keep = np.flatnonzero(flat_labels != 0)
    if keep.size == 0:
        log.warning("scene batch has no non-empty edges; edge loss set to 0")
        return Tensor(0.0)
    return _cross_entropy(nm.take_rows(flat_logits, keep), flat_labels[keep])


@dataclass
class ReprOutput:
    node_logits: Tensor
    edge_logits: Tensor  # (sum of m_s^2) x c_e, scenes stacked
    node_offsets: np.ndarray
    pair_offsets: np.ndarray


def represent_batch(mp: ModelParams, records: Sequence[SceneRecord], training: bool = False) -> ReprOutput:
    """Run the representation network over several scenes with shared BatchNorm statistics."""
    pts, ind, ii, jj = [], [], [], []
    node_off = [0]
    pair_off = [0]
    for rec in records:
        m = rec.num_instances
        pts.append(rec.points)
        ind.append(rec.indicator + node_off[-1])
        a, b = _pair_index(m, node_off[-1])
        ii.append(a)
        jj.append(b)
        node_off.append(node_off[-1] + m)
        pair_off.append(pair_off[-1] + m * m)
    xv = encode_instances(mp, np.vstack(pts), np.concatenate(ind), node_off[-1], training)
    nl = node_logits(mp, xv, training)
    e0 = nm.sub(nm.take_rows(xv, np.concatenate(ii)), nm.take_rows(xv, np.concatenate(jj)))
    el = edge_logits(mp, e0, training)
    return ReprOutput(nl, el, np.array(node_off), np.array(pair_off))


def batch_repr_loss(out: ReprOutput, records: Sequence[SceneRecord]) -> tuple[Tensor, Tensor]:
    """Batch means: node CE over all instances, edge CE over all non-empty pairs."""
    node_t = np.concatenate([r.graph.node_labels for r in records])
    edge_t = np.concatenate([r.graph.edge_labels.ravel() for r in records])
    return _cross_entropy(out.node_logits, node_t), _masked_edge_ce(out.edge_logits, edge_t)


def predict_graph(mp: ModelParams, record: SceneRecord) -> SceneGraph:
    """Arg-max node and relation labels (inference-mode BatchNorm)."""
    out = represent_batch(mp, [record], training=False)
    m = record.num_instances
    nodes = out.node_logits.data.argmax(axis=1)
    edges = out.edge_logits.data.argmax(axis=1).reshape(m, m)
    np.fill_diagonal(edges, 0)
    return SceneGraph(nodes, edges)
