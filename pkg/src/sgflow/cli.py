"""Command-line entry point: synth, train, generate, evaluate, export-dot.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .generator import ConstraintsUnsatisfiable, GenerationConfig, config_dict, derive_rng, generate
from .metrics import MarkedGraph, evaluate
from .model import LabelSpaceMismatch, check_model
from .numeric import ModelParams
from .representation import predict_graph
from .scene import (RuleSet, SceneFormatError, empty_room, graph_to_dot, load_rules, load_scene, save_rules,
                    save_scene, scene_files)
from .train import DataError, TrainConfig, train, write_curve

log = logging.getLogger("sgflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

SEMANTIC = {"none": "none", "furniture": "furniture_only", "room": "room_function"}

DEFAULTS = {
    "epochs": 50, "batch": 32, "lr": 0.001, "seed": 0, "alpha": 0.9, "gcn_layers": 4,
    "no_cross_entropy": False, "allow_large_alpha": False,
    "lam": 0.8, "beta": 1.2, "semantic_constraint": "none", "space_constraint": False,
    "anti_overlap": False, "num": 5, "max_nodes": 50, "max_retries": 25, "temperature": 1.0,
    "jobs": 1, "json": False, "count": 200, "predict_seed": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, *names):
    # defaults stay None so config-file values can fill the gaps
    opts = {
        "data": lambda: p.add_argument("--data", type=Path, help="scene directory (or a single scene file)"),
        "rules": lambda: p.add_argument("--rules", type=Path, help="rules JSON (default: <data>/rules.json)"),
        "model": lambda: p.add_argument("--model", type=Path, help="model JSON"),
        "out": lambda: p.add_argument("--out", type=Path, help="output directory"),
        "seed": lambda: p.add_argument("--seed", type=int),
        "jobs": lambda: p.add_argument("--jobs", type=int, help="worker threads"),
        "json": lambda: p.add_argument("--json", action="store_true", default=None, help="machine-readable output"),
    }
    for n in names:
        opts[n]()
    p.add_argument("--config", type=Path, help="JSON file of option defaults; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sgflow", description="Scene-graph generation with a conditional affine flow.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene corpus and its rules file")
    _common(p, "out", "seed", "json")
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train a model")
    _common(p, "data", "rules", "model", "out", "seed", "json")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gcn-layers", type=int)
    p.add_argument("--no-cross-entropy", action="store_true", default=None)
    p.add_argument("--allow-large-alpha", action="store_true", default=None,
                   help="permit alpha >= 1 (ablation sweeps only)")

    p = sub.add_parser("generate", help="grow scene graphs in empty rooms")
    _common(p, "data", "rules", "model", "out", "seed", "jobs", "json")
    p.add_argument("--num", type=int, help="graphs per scene")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--semantic-constraint", choices=sorted(SEMANTIC))
    p.add_argument("--space-constraint", action="store_true", default=None)
    p.add_argument("--anti-overlap", action="store_true", default=None)
    p.add_argument("--max-nodes", type=int)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--predict-seed", action="store_true", default=None,
                   help="label the room from its points instead of the stored graph")
    p.add_argument("--allow-large-alpha", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="score generated graphs")
    _common(p, "data", "rules", "out", "jobs", "json")
    p.add_argument("--reference", type=Path, help="reference scenes (default: the generating sources)")
    p.add_argument("--semantic-constraint", choices=sorted(SEMANTIC))

    p = sub.add_parser("export-dot", help="write Graphviz files for scene graphs")
    _common(p, "data", "rules", "out")
    return ap


def _resolve(args) -> dict:
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("--config must hold a JSON object")
        for k, v in doc.items():
            key = k.replace("-", "_")
            key = "lam" if key == "lambda" else key
            opts[key] = v
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
    for k in ("data", "rules", "model", "out", "reference"):
        if opts.get(k) is not None:
            opts[k] = Path(opts[k])
    return opts


def _validate(o: dict) -> None:
    alpha = o.get("alpha", 0.9)
    if alpha < 0 or (alpha >= 1 and not o.get("allow_large_alpha")):
        raise UsageError(f"--alpha must lie in [0, 1), got {alpha} (use --allow-large-alpha for ablations)")
    if o["command"] == "generate" and not 0 < o["lam"] <= o["beta"]:
        raise UsageError(f"need 0 < lambda <= beta, got lambda={o['lam']}, beta={o['beta']}")
    for key in ("epochs", "batch", "num", "max_nodes", "max_retries", "jobs", "gcn_layers", "count"):
        if key in o and o[key] is not None and o[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be at least 1")
    if o.get("semantic_constraint") not in SEMANTIC:
        raise UsageError(f"unknown --semantic-constraint {o.get('semantic_constraint')!r}")
    need = {"train": ("data", "model"), "generate": ("data", "model", "out"), "evaluate": ("data",),
            "export-dot": ("data", "out"), "synth": ("out",)}[o["command"]]
    for key in need:
        if o.get(key) is None:
            raise UsageError(f"{o['command']}: --{key} is required")


def _rules(o) -> RuleSet:
    path = o.get("rules")
    if path is None:
        data = o["data"]
        path = (data if data.is_dir() else data.parent) / "rules.json"
    if not path.exists():
        raise DataError(f"rules file {path} not found (pass --rules)")
    return load_rules(path)


def _scene_paths(data: Path) -> list[Path]:
    if data.is_file():
        return [data]
    if not data.is_dir():
        raise DataError(f"{data}: no such file or directory")
    paths = scene_files(data)
    if not paths:
        raise DataError(f"{data}: no scene files")
    return paths


def _emit(o, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1) if o["json"] else text)


# ---------------------------------------------------------------- commands


def cmd_synth(o) -> int:
    from .synth import default_rules, synth_corpus

    rules = default_rules()
    out = o["out"]
    out.mkdir(parents=True, exist_ok=True)
    save_rules(rules, out / "rules.json")
    recs = synth_corpus(o["count"], o["seed"], rules=rules)
    width = max(4, len(str(len(recs) - 1)))
    for k, rec in enumerate(recs):
        save_scene(rec, out / f"scene_{k:0{width}d}.json", rules)
    _emit(o, {"scenes": len(recs), "out": str(out), "rules": str(out / "rules.json")},
          f"wrote {len(recs)} scenes and rules.json to {out}")
    return EXIT_OK


def cmd_train(o) -> int:
    from .plotting import plot_loss_curve

    rules = _rules(o)
    paths = _scene_paths(o["data"])
    if len(paths) < 2:
        raise DataError(f"{o['data']}: training needs at least 2 scene files, found {len(paths)}")
    records = [load_scene(p, rules) for p in paths]
    cfg = TrainConfig(epochs=o["epochs"], batch_size=o["batch"], lr=o["lr"], seed=o["seed"], alpha=o["alpha"],
                      gcn_layers=o["gcn_layers"], cross_entropy=not o["no_cross_entropy"],
                      allow_large_alpha=bool(o["allow_large_alpha"]))

    mp, history = train(records, rules, cfg)
    model = o["model"]
    model.parent.mkdir(parents=True, exist_ok=True)
    mp.save(model)
    out = o.get("out") or model.parent
    out.mkdir(parents=True, exist_ok=True)
    curve = out / f"{model.stem}_curve.csv"
    write_curve(history, curve)
    fig = plot_loss_curve(history, out / f"{model.stem}_curve.png")
    first, last = history[0], history[-1]
    payload = {"model": str(model), "curve": str(curve), "figure": str(fig), "epochs": len(history),
               "first": first, "last": last}
    text = (f"model   {model}\ncurve   {curve}\nfigure  {fig}\n"
            f"L_m     {first['L_m']:.4f} -> {last['L_m']:.4f}\n"
            f"L       {first['L']:.4f} -> {last['L']:.4f}")
    _emit(o, payload, text)
    return EXIT_OK


def _generation_config(o) -> GenerationConfig:
    return GenerationConfig(alpha=o["alpha"], lam=o["lam"], beta=o["beta"],
                            space_constraint=bool(o["space_constraint"]),
                            semantic_mode=SEMANTIC[o["semantic_constraint"]], anti_overlap=bool(o["anti_overlap"]),
                            max_nodes=o["max_nodes"], max_retries=o["max_retries"], graphs_per_scene=o["num"],
                            temperature=o["temperature"], seed=o["seed"])


def cmd_generate(o) -> int:
    rules = _rules(o)
    mp = ModelParams.load(o["model"])
    check_model(mp, rules)
    cfg = _generation_config(o)
    paths = _scene_paths(o["data"])
    rooms = []
    for p in paths:
        rec = load_scene(p, rules)
        room = empty_room(rec, rules)
        seed_graph = predict_graph(mp, room) if o["predict_seed"] else None
        rooms.append((p, room, seed_graph))
    out = o["out"]
    out.mkdir(parents=True, exist_ok=True)
    save_rules(rules, out / "rules.json")

    def job(task):
        s, k = task
        path, room, seed_graph = rooms[s]
        res = generate(room, mp, rules, cfg, derive_rng(cfg.seed, s, k), seed_graph=seed_graph)
        return s, k, res

    tasks = [(s, k) for s in range(len(rooms)) for k in range(cfg.graphs_per_scene)]
    with ThreadPoolExecutor(max_workers=o["jobs"]) as pool:
        results = list(pool.map(job, tasks))
    written = []
    for s, k, res in results:
        path, room, _ = rooms[s]
        stem = f"{path.stem}_gen{k}"
        rec = res.to_record(room, generated_from=str(path))
        rec.meta["config"] = config_dict(cfg)
        save_scene(rec, out / f"{stem}.json", rules)
        with open(out / f"{stem}.events.jsonl", "w") as fh:
            for ev in res.events:
                fh.write(json.dumps(ev) + "\n")
        written.append({"file": str(out / f"{stem}.json"), "source": str(path),
                        "new_nodes": res.graph.num_nodes - res.existing_count, "stop": res.stop_reason})
    n_new = [w["new_nodes"] for w in written]
    _emit(o, {"graphs": written, "config": config_dict(cfg)},
          f"wrote {len(written)} graphs to {out} (new nodes per graph: mean {np.mean(n_new):.2f}, "
          f"max {max(n_new)})")
    return EXIT_OK


def _existing_count(rec, rules) -> int:
    if "existing_count" in rec.meta:
        return int(rec.meta["existing_count"])
    k = 0
    while k < rec.num_instances and rules.is_architectural(int(rec.graph.node_labels[k])):
        k += 1
    return k


def cmd_evaluate(o) -> int:
    from .plotting import plot_degree_comparison, plot_report

    rules = _rules(o)
    paths = _scene_paths(o["data"])
    groups: dict[str, list[MarkedGraph]] = defaultdict(list)
    sources: dict[str, Path] = {}
    for p in paths:
        rec = load_scene(p, rules)
        key = rec.meta.get("generated_from", str(p))
        sources[key] = Path(key)
        groups[key].append(MarkedGraph(rec.graph, _existing_count(rec, rules), rec.room_function))
    if o.get("reference") is not None:
        reference = [load_scene(p, rules).graph for p in _scene_paths(o["reference"])]
    else:
        reference = []
        for key, src in sources.items():
            if not src.exists():
                raise DataError(f"reference scene {src} (generated_from) not found; pass --reference")
            reference.append(load_scene(src, rules).graph)
    mode = SEMANTIC[o["semantic_constraint"]]
    mode = "furniture_only" if mode == "none" else mode
    keys = sorted(groups)
    report = evaluate([groups[k] for k in keys], reference, rules, mode=mode,
                      config={"data": str(o["data"]), "validity_mode": mode, "scenes": len(keys)},
                      jobs=o["jobs"])
    for entry, key in zip(report.per_scene, keys):
        entry["source"] = key
    payload = report.to_json()
    out = o.get("out")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.dumps() + "\n")
        (out / "report.txt").write_text(report.table() + "\n")
        payload["figures"] = [str(plot_report(report, out / "metrics.png")),
                              str(plot_degree_comparison([m.graph for g in groups.values() for m in g], reference,
                                                         out / "degree_histogram.png"))]
    text = report.table() + f"\n\n{report.num_graphs} graphs over {len(keys)} scenes"
    if not np.isnan(report.node_validity_room):
        text += f"; room-aware node validity {report.node_validity_room:.1f}%"
    _emit(o, payload, text)
    return EXIT_OK


def cmd_export_dot(o) -> int:
    rules = _rules(o)
    out = o["out"]
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for p in _scene_paths(o["data"]):
        rec = load_scene(p, rules)
        target = out / f"{p.stem}.dot"
        target.write_text(graph_to_dot(rec.graph, rules, _existing_count(rec, rules), name=p.stem))
        files.append(str(target))
    print(f"wrote {len(files)} DOT files to {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate,
            "export-dot": cmd_export_dot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        o = _resolve(args)
        _validate(o)
        return COMMANDS[o["command"]](o)
    except UsageError as exc:
        print(f"sgflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFormatError, LabelSpaceMismatch, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"sgflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConstraintsUnsatisfiable, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"sgflow: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
