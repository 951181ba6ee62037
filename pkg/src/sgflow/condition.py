"""Conditional evaluation: GCN embeddings of the current subgraph and the
Gaussian-parameter heads for the next node or edge."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .numeric import ModelParams, Tensor
from .scene import SceneGraph

EMBED = 128
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -7.0, 7.0


def init_condition(mp: ModelParams, c_n: int, c_e: int, rng: np.random.Generator, layers: int = 4) -> None:
    if layers < 1:
        raise ValueError("GCN needs at least one layer")
    fan = c_n
    for k in range(layers):
        mp.add(f"cond.gcn.{k}.w", nm.init_uniform(rng, fan, (fan, EMBED)))
        fan = EMBED
    for head, fan_in, out in (("node", EMBED, c_n), ("edge", 3 * EMBED, c_e)):
        mp.add(f"cond.{head}.0.w", nm.init_uniform(rng, fan_in, (fan_in, EMBED)))
        mp.add(f"cond.{head}.0.b", nm.init_uniform(rng, fan_in, (EMBED,)))
        mp.add(f"cond.{head}.1.w", nm.init_uniform(rng, EMBED, (EMBED, 2 * out)))
        mp.add(f"cond.{head}.1.b", nm.init_uniform(rng, EMBED, (2 * out,)))


def gcn_layers(mp: ModelParams) -> int:
    return sum(1 for k in mp.params if k.startswith("cond.gcn."))


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` over the undirected view of ``adj``."""
    a = (np.asarray(adj, bool) | np.asarray(adj, bool).T).astype(np.float64)
    np.fill_diagonal(a, 1.0)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_forward(mp: ModelParams, x: np.ndarray, a_hat: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Batched GCN over ``S`` padded subgraphs.

    ``x`` is ``S x M x c_n`` one-hot labels, ``a_hat`` the normalized
    adjacencies (zero rows on padding), ``mask`` marks real nodes. Returns
    node embeddings ``S x M x 128`` and sum-pooled graph embeddings ``S x 128``.
    """
    h = nm.Tensor(x)
    a = nm.Tensor(a_hat)
    for k in range(gcn_layers(mp)):
        h = nm.relu(nm.matmul(a, nm.matmul(h, mp[f"cond.gcn.{k}.w"])))
    h = nm.mul(h, np.broadcast_to(mask[..., None], h.shape).astype(np.float64))
    return h, nm.sum(h, axis=1)


def _gaussian_head(mp: ModelParams, head: str, x: Tensor) -> tuple[Tensor, Tensor]:
    h = nm.relu(nm.linear(x, mp[f"cond.{head}.0.w"], mp[f"cond.{head}.0.b"]))
    out = nm.linear(h, mp[f"cond.{head}.1.w"], mp[f"cond.{head}.1.b"])
    d = out.shape[-1] // 2
    mu = nm.index(out, (Ellipsis, slice(0, d)))
    log_sigma = nm.clamp(nm.index(out, (Ellipsis, slice(d, 2 * d))), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, log_sigma


def node_gaussian(mp: ModelParams, h_graph: Tensor) -> tuple[Tensor, Tensor]:
    """(mu, clamped log sigma) for the next node class vector."""
    return _gaussian_head(mp, "node", h_graph)


def edge_gaussian(mp: ModelParams, h_graph: Tensor, h_subj: Tensor, h_obj: Tensor) -> tuple[Tensor, Tensor]:
    """(mu, clamped log sigma) for the relation from ``subj`` to ``obj``."""
    return _gaussian_head(mp, "edge", nm.concat([h_graph, h_subj, h_obj], axis=-1))


@dataclass
class SubgraphState:
    node_onehot: np.ndarray
    adj_norm: np.ndarray
    H: Tensor  # m x 128
    h: Tensor  # 1 x 128

    @property
    def num_nodes(self) -> int:
        return self.node_onehot.shape[0]


def gcn_embed(graph: SceneGraph, mp: ModelParams, c_n: int) -> SubgraphState:
    m = graph.num_nodes
    if m == 0:
        raise ValueError("gcn_embed: subgraph has no nodes")
    onehot = np.zeros((m, c_n))
    onehot[np.arange(m), graph.node_labels] = 1.0
    a_hat = normalized_adjacency(graph.adjacency)
    H, h = gcn_forward(mp, onehot[None], a_hat[None], np.ones((1, m)))
    return SubgraphState(onehot, a_hat, nm.reshape(H, (m, EMBED)), h)


def node_condition(state: SubgraphState, mp: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    mu, ls = node_gaussian(mp, state.h)
    return mu.data[0].copy(), np.exp(ls.data[0])


def edge_condition(state: SubgraphState, i: int, j: int, mp: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    if i == j:
        raise ValueError(f"edge_condition: self-relation requested on node {i}")
    m = state.num_nodes
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"edge_condition: endpoints ({i}, {j}) outside {m} nodes")
    mu, ls = edge_gaussian(mp, state.h, nm.take_rows(state.H, [i]), nm.take_rows(state.H, [j]))
    return mu.data[0].copy(), np.exp(ls.data[0])


# ---------------------------------------------------------------- training batches


@dataclass
class StepBatch:
    """Flattened conditioning inputs for many trajectory steps.

    Distinct subgraph snapshots are stored once, padded to ``M`` nodes; node
    and edge steps index into them.
    """

    x: np.ndarray
    a_hat: np.ndarray
    mask: np.ndarray
    node_snap: np.ndarray
    node_target: np.ndarray
    edge_snap: np.ndarray
    edge_subj: np.ndarray
    edge_obj: np.ndarray
    edge_target: np.ndarray

    @property
    def num_elements(self) -> int:
        return len(self.node_target) + len(self.edge_target)


def pack_steps(trajectories: Sequence, c_n: int) -> StepBatch:
    """Pack the steps of several trajectories (see ``generator.Trajectory``)."""
    snaps: list[tuple[int, int, int]] = []  # (trajectory, nodes, edges)
    index: dict[tuple[int, int, int], int] = {}
    node_snap, node_target = [], []
    edge_snap, edge_subj, edge_obj, edge_target = [], [], [], []
    for t, traj in enumerate(trajectories):
        for st in traj.steps:
            key = (t, st.num_nodes, st.num_edges)
            s = index.get(key)
            if s is None:
                s = index[key] = len(snaps)
                snaps.append(key)
            if st.kind == "node":
                if not st.terminal:
                    node_snap.append(s)
                    node_target.append(st.target)
            else:
                edge_snap.append(s)
                edge_subj.append(st.subject)
                edge_obj.append(st.object)
                edge_target.append(st.target)
    S = len(snaps)
    M = max((k[1] for k in snaps), default=1)
    x = np.zeros((S, M, c_n))
    a_hat = np.zeros((S, M, M))
    mask = np.zeros((S, M))
    for s, (t, mt, et) in enumerate(snaps):
        traj = trajectories[t]
        x[s, np.arange(mt), traj.labels[:mt]] = 1.0
        adj = np.zeros((mt, mt), bool)
        for i, j, _ in traj.edges[:et]:
            adj[i, j] = True
        a_hat[s, :mt, :mt] = normalized_adjacency(adj)
        mask[s, :mt] = 1.0
    es = np.asarray(edge_snap, dtype=np.int64)
    return StepBatch(
        x=x, a_hat=a_hat, mask=mask,
        node_snap=np.asarray(node_snap, dtype=np.int64),
        node_target=np.asarray(node_target, dtype=np.int64),
        edge_snap=es,
        edge_subj=es * M + np.asarray(edge_subj, dtype=np.int64),
        edge_obj=es * M + np.asarray(edge_obj, dtype=np.int64),
        edge_target=np.asarray(edge_target, dtype=np.int64),
    )


def batch_gaussians(mp: ModelParams, batch: StepBatch):
    """(mu, log sigma) for all node steps and all edge steps of ``batch``."""
    H, h = gcn_forward(mp, batch.x, batch.a_hat, batch.mask)
    S, M, _ = H.shape
    flat = nm.reshape(H, (S * M, EMBED))
    node = edge = None
    if len(batch.node_snap):
        node = node_gaussian(mp, nm.take_rows(h, batch.node_snap))
    if len(batch.edge_snap):
        edge = edge_gaussian(mp, nm.take_rows(h, batch.edge_snap),
                             nm.take_rows(flat, batch.edge_subj), nm.take_rows(flat, batch.edge_obj))
    return node, edge
