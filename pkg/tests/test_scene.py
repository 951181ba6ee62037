import json

import numpy as np
import pydot
import pytest

from sgflow.scene import (RuleSet, SceneFormatError, SceneGraph, SceneRecord, aabb_volume, empty_room,
                          graph_to_dot, load_rules, load_scene, save_rules, save_scene, scene_files,
                          scene_to_json)


def test_round_trip_is_identity(tmp_path, corpus, rules):
    for k, rec in enumerate(corpus[:4]):
        save_scene(rec, tmp_path / f"s{k}.json", rules)
        back = load_scene(tmp_path / f"s{k}.json", rules)
        assert back == rec
        assert back.room_volume == pytest.approx(rec.room_volume)


def test_rules_round_trip(tmp_path, rules):
    save_rules(rules, tmp_path / "rules.json")
    back = load_rules(tmp_path / "rules.json")
    assert back.checksum() == rules.checksum()
    assert back.valid_triples == rules.valid_triples
    assert back.volume_stats == rules.volume_stats


def test_scene_files_skip_rules(tmp_path, corpus, rules):
    save_rules(rules, tmp_path / "rules.json")
    save_scene(corpus[0], tmp_path / "a.json", rules)
    assert [p.name for p in scene_files(tmp_path)] == ["a.json"]


def test_self_relation_rejected():
    e = np.zeros((3, 3), dtype=int)
    e[1, 1] = 2
    with pytest.raises(SceneFormatError, match=r"\[1\]"):
        SceneGraph([0, 1, 2], e)


def test_adjacency_counts_non_empty_edges():
    e = np.zeros((6, 6), dtype=int)
    e[0, 1] = 3
    e[4, 2] = 1
    g = SceneGraph(np.zeros(6), e)
    assert g.adjacency.sum() == 2
    assert g.edges() == [(0, 1, 3), (4, 2, 1)]


def _doc(rules, **over):
    doc = {"points": [[0, 0, 0], [1, 1, 1], [2, 0, 1]], "indicator": [0, 1, 1],
           "nodes": ["floor", "chair"], "edges": [[1, 0, "standing on"]], "room_function": "bedroom"}
    doc.update(over)
    return doc


@pytest.mark.parametrize("over, match", [
    ({"nodes": ["floor", "spaceship"]}, r"nodes\[1\].*spaceship"),
    ({"edges": [[1, 0, "orbits"]]}, r"edges\[0\].*orbits"),
    ({"edges": [[1, 5, "standing on"]]}, r"edges\[0\].*out of range"),
    ({"edges": [[1, 1, "standing on"]]}, "self-relation"),
    ({"indicator": [0, 1, 2]}, "indicator"),
    ({"indicator": [0, 0, 0]}, "without points"),
])
def test_malformed_documents(tmp_path, rules, over, match):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(_doc(rules, **over)))
    with pytest.raises(SceneFormatError, match=match):
        load_scene(path, rules)


def test_json_syntax_error_reports_line(tmp_path, rules):
    path = tmp_path / "bad.json"
    path.write_text('{\n "points": [\n')
    with pytest.raises(SceneFormatError, match="line"):
        load_scene(path, rules)


def test_room_volume_defaults_to_aabb(rules):
    from sgflow.scene import scene_from_json
    rec = scene_from_json(_doc(rules), rules)
    assert rec.room_volume == pytest.approx(2.0)
    assert aabb_volume(np.array([[0, 0, 0], [1, 2, 3.0]])) == pytest.approx(6.0)


def test_extra_keys_survive_as_meta(rules):
    from sgflow.scene import scene_from_json
    rec = scene_from_json(_doc(rules, generated_from="x.json", existing_count=2), rules)
    assert rec.meta == {"generated_from": "x.json", "existing_count": 2}
    assert scene_to_json(rec, rules)["generated_from"] == "x.json"


def test_rules_validation():
    base = dict(object_classes=("a", "b"), relation_classes=("empty", "on"),
                valid_triples=frozenset({("a", "on", "b")}), room_allowed={"r": frozenset({"a"})},
                volume_stats={"a": (1.0, 0.1)}, architectural=frozenset({"b"}), volume_ratio_mean=0.1)
    RuleSet(**base)
    with pytest.raises(SceneFormatError):
        RuleSet(**{**base, "valid_triples": frozenset({("a", "empty", "b")})})
    with pytest.raises(SceneFormatError):
        RuleSet(**{**base, "valid_triples": frozenset({("a", "on", "z")})})
    with pytest.raises(SceneFormatError):
        RuleSet(**{**base, "volume_stats": {"a": (1.0, 0.0)}})
    with pytest.raises(SceneFormatError):
        RuleSet(**{**base, "relation_classes": ("on", "empty")})


def test_empty_room_keeps_architecture(corpus, rules):
    rec = corpus[0]
    er = empty_room(rec, rules)
    assert all(rules.is_architectural(int(c)) for c in er.graph.node_labels)
    assert er.num_instances == sum(rules.is_architectural(int(c)) for c in rec.graph.node_labels)
    assert set(er.indicator.tolist()) == set(range(er.num_instances))
    assert er.room_volume == pytest.approx(rec.room_volume)


def _parse(text):
    graphs = pydot.graph_from_dot_data(text)
    assert graphs and len(graphs) == 1
    return graphs[0]


def test_dot_empty_graph(rules):
    g = _parse(graph_to_dot(SceneGraph.empty(), rules, 0))
    assert [n for n in g.get_nodes() if n.get_name() not in ("node", "edge", "graph")] == []


def test_dot_single_edge(rules):
    e = np.zeros((2, 2), dtype=int)
    e[1, 0] = rules.relation_id("standing on")
    text = graph_to_dot(SceneGraph([rules.object_id("floor"), rules.object_id("chair")], e), rules, 1)
    g = _parse(text)
    edges = g.get_edges()
    assert len(edges) == 1
    assert edges[0].get_label().strip('"') == "standing on"
    fill = {n.get_name(): n.get("fillcolor") for n in g.get_nodes()}
    assert fill["n0"] == "palegreen" and fill["n1"] == "lightskyblue"


def test_dot_corpus_parses(corpus, rules):
    for rec in corpus:
        g = _parse(graph_to_dot(rec.graph, rules, 6, name='room "1"'))
        assert len(g.get_edges()) == len(rec.graph.edges())


def test_record_invariants():
    g = SceneGraph([0, 1], np.zeros((2, 2)))
    with pytest.raises(SceneFormatError):
        SceneRecord(np.zeros((3, 3)), np.array([0, 1]), g)
    with pytest.raises(SceneFormatError):
        SceneRecord(np.zeros((2, 3)), np.array([0, 0]), g)
