import numpy as np
import pytest

from sgflow.metrics import MarkedGraph, mmd_degree, validity
from sgflow.scene import SceneGraph, scene_to_json
from sgflow.synth import GrammarConfig, GrammarError, synth_corpus, synth_sample


def test_same_seed_is_bit_identical(rules):
    a = synth_sample(GrammarConfig(), np.random.default_rng(9), rules)
    b = synth_sample(GrammarConfig(), np.random.default_rng(9), rules)
    assert scene_to_json(a, rules) == scene_to_json(b, rules)
    assert a.points.tobytes() == b.points.tobytes()


def test_corpus_shape(corpus, rules):
    for rec in corpus:
        labels = [rules.object_classes[c] for c in rec.graph.node_labels]
        assert labels[:6] == ["wall"] * 4 + ["floor", "ceiling"]
        furniture = [c for c in rec.graph.node_labels if not rules.is_architectural(int(c))]
        assert 2 <= len(furniture) <= 8
        assert rec.num_instances <= 12
        assert np.bincount(rec.indicator).min() >= 64
        assert rec.points.shape[1] == 6
        for w in range(4):
            assert rules.relation_classes[rec.graph.edge_labels[w, 4]] == "attached to"
            assert rules.relation_classes[rec.graph.edge_labels[w, 5]] == "attached to"


def test_every_furniture_node_has_a_relation(corpus, rules):
    for rec in corpus:
        for k, c in enumerate(rec.graph.node_labels):
            if not rules.is_architectural(int(c)):
                assert rec.graph.adjacency[k].any()


def test_corpus_is_fully_valid(rules):
    recs = synth_corpus(60, seed=1, rules=rules)
    for rec in recs:
        for i, j, r in rec.graph.edges():
            assert rules.triple_ok(int(rec.graph.node_labels[i]), r, int(rec.graph.node_labels[j]))
    marked = [MarkedGraph(r.graph, int(np.isin(r.graph.node_labels, rules.architectural_ids()).sum()),
                          r.room_function) for r in recs]
    assert validity(marked, rules, "room_function") == (100.0, 100.0)


def test_furniture_inside_room(rules):
    for rec in synth_corpus(40, seed=5, rules=rules):
        arch = np.isin(rec.graph.node_labels[rec.indicator], rules.architectural_ids())
        lo, hi = rec.points[arch, :3].min(0), rec.points[arch, :3].max(0)
        assert np.all(rec.points[:, :3] >= lo - 1e-9) and np.all(rec.points[:, :3] <= hi + 1e-9)


def test_empty_menu_rejected(rules):
    with pytest.raises(GrammarError):
        synth_sample(GrammarConfig(menus={"bedroom": ()}), np.random.default_rng(0), rules)


def _erdos_renyi_control(recs, rng):
    out = []
    for rec in recs:
        m = rec.num_instances
        p = len(rec.graph.edges()) / (m * (m - 1))
        e = (rng.random((m, m)) < p).astype(int)
        np.fill_diagonal(e, 0)
        out.append(SceneGraph(rec.graph.node_labels, e))
    return out


def test_halves_closer_than_random_control(rules):
    recs = synth_corpus(200, seed=0, rules=rules)
    a, b = [r.graph for r in recs[:100]], [r.graph for r in recs[100:]]
    control = _erdos_renyi_control(recs[100:], np.random.default_rng(0))
    assert mmd_degree(a, b) < mmd_degree(a, control)
