"""Assembling, checking and persisting the full parameter set."""

from __future__ import annotations

import numpy as np

from .condition import init_condition
from .numeric import ModelParams
from .representation import init_repr
from .scene import RuleSet


class LabelSpaceMismatch(ValueError):
    pass


def build_model(rules: RuleSet, point_dim: int = 6, gcn_layers: int = 4, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    mp = ModelParams(config={
        "point_dim": point_dim,
        "gcn_layers": gcn_layers,
        "num_objects": rules.num_objects,
        "num_relations": rules.num_relations,
        "label_checksum": rules.checksum(),
        "object_classes": list(rules.object_classes),
        "relation_classes": list(rules.relation_classes),
        "init_seed": seed,
    })
    init_repr(mp, point_dim, rules.num_objects, rules.num_relations, rng)
    init_condition(mp, rules.num_objects, rules.num_relations, rng, layers=gcn_layers)
    return mp


def check_model(mp: ModelParams, rules: RuleSet) -> None:
    got = mp.config.get("label_checksum")
    if got != rules.checksum():
        raise LabelSpaceMismatch(
            f"model label space {got!r} does not match rules {rules.checksum()!r}")
