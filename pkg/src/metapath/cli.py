"""Command-line entry point: ``metapath <command> [flags]``.

Commands: generate, learn, train, evaluate, grid, report. Every command that
writes files also writes ``run_manifest.json`` next to its outputs.
Exit codes are 0 on success, 2 on usage or configuration errors and 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .hetgraph import GraphFormatError, HetGraph, MetaPath, load_graph
from .mpgnn import MPGNNModel, TrainConfig, TrainingError, evaluate, f1_from_confusion, train
from .scoring import ScorerConfig
from .search import SearchConfig, SearchError, learn_beam, learn_single
from .syngen import InfeasibleSpec, SynSpec, generate, write_dataset

log = logging.getLogger("metapath")

WORKERS_ENV = "METAPATH_WORKERS"
GRID_HEADER = ["relations", "shared", "gt_length", "seed", "recovered", "exact_match", "f1", "seconds"]

# defaults for every option that may also come from --config
DEFAULTS = {
    "seed": 0,
    "ratios": [0.8, 0.1, 0.1],
    # generate / grid
    "nodes_per_type": 1000,
    "density": 1.0,
    "min_positive": 0.15,
    "attribute": False,
    # search
    "l_max": 4,
    "beam": 3,
    "search_epochs": 150,
    "prune": True,
    "no_node_features": False,
    # scorer
    "restarts": 10,
    "scorer_lr": 0.05,
    "max_steps": 300,
    "patience_steps": 20,
    "tol": 1e-6,
    "threshold": 0.5,
    # MP-GNN
    "lr": 0.01,
    "epochs": 300,
    "hidden": 64,
    "patience": 50,
    "activation": "relu",
}

COMMAND_DEFAULTS = {
    "generate": {"shared": 0, "gt_length": 2},
    "grid": {"relations": [4, 8], "shared": [0, 2], "gt_length": [2, 3], "seeds": 5},
}
# commands whose --out names a file rather than a directory
FILE_OUTPUT = {"grid", "report"}


class UsageError(Exception):
    pass


def artifact_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace("/", ",").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be three numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"ratios must be three numbers, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p, seed=True):
    p.add_argument("--config", type=Path, help="JSON file with option values (flags override it)")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p, labels=True):
    p.add_argument("--data", type=Path, required=True,
                   help="directory with nodes.tsv, edges.tsv" + (", labels.tsv" if labels else ""))
    p.add_argument("--ratios", type=_ratios, help="train,val,test ratios when labels.tsv has no split column")
    p.add_argument("--no-node-features", dest="no_node_features", action="store_const", const=True,
                   help="replace every node feature by a constant")


def _add_train(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--activation", choices=["relu", "identity", "sigmoid"])


def _add_search(p):
    p.add_argument("--l-max", dest="l_max", type=int)
    p.add_argument("--beam", type=int, help="beam size K; 1 runs the greedy learner")
    p.add_argument("--search-epochs", dest="search_epochs", type=int)
    p.add_argument("--no-prune", dest="prune", action="store_const", const=False)
    p.add_argument("--restarts", type=int)
    p.add_argument("--scorer-lr", dest="scorer_lr", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--patience-steps", dest="patience_steps", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--threshold", type=float)


def _add_syn(p):
    p.add_argument("--nodes-per-type", dest="nodes_per_type", type=int)
    p.add_argument("--density", type=float, help="mean out-edges per node and relation")
    p.add_argument("--min-positive", dest="min_positive", type=float)
    p.add_argument("--attribute", action="store_const", const=True,
                   help="require a binary node attribute on the first hop")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metapath", description="Meta-path learning and MP-GNN node classification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic benchmark")
    _add_common(p)
    p.add_argument("--relations", type=int)
    p.add_argument("--shared", type=int)
    p.add_argument("--gt-length", dest="gt_length", type=int)
    _add_syn(p)
    p.add_argument("--ratios", type=_ratios)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("learn", help="learn meta-paths and train the final MP-GNN")
    _add_common(p)
    _add_data(p)
    _add_search(p)
    _add_train(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train an MP-GNN on given meta-paths")
    _add_common(p)
    _add_data(p)
    _add_train(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mp", action="append", help="relation names joined by ',' (repeat for several paths)")
    src.add_argument("--mp-file", dest="mp_file", type=Path, help="mp.json written by learn")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="F1-macro and confusion matrices of a checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grid", help="recovery experiment over a grid of synthetic settings")
    _add_common(p, seed=False)
    p.add_argument("--relations", type=_int_list, help="comma-separated (default 4,8)")
    p.add_argument("--shared", type=_int_list, help="comma-separated (default 0,2)")
    p.add_argument("--gt-length", dest="gt_length", type=_int_list, help="comma-separated (default 2,3)")
    p.add_argument("--seeds", type=int, help="seeds 0..N-1 per cell (default 5)")
    p.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    _add_syn(p)
    _add_search(p)
    _add_train(p)
    p.add_argument("--ratios", type=_ratios)
    p.add_argument("--out", type=Path, required=True, help="results CSV")

    p = sub.add_parser("report", help="summarise a trace.json or a grid results CSV")
    _add_common(p, seed=False)
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, help="write the summary here instead of stdout")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Effective options: flags > config file > defaults."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = set(loaded) - set(cfg) - set(vars(args)) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in ("config", "verbose", "command"):
            continue
        if v is not None:
            cfg[k] = v
    return cfg


def search_config(cfg: dict) -> SearchConfig:
    try:
        scorer = ScorerConfig(restarts=cfg["restarts"], lr=cfg["scorer_lr"], max_steps=cfg["max_steps"],
                              patience=cfg["patience_steps"], tol=cfg["tol"], threshold=cfg["threshold"],
                              seed=cfg["seed"])
        return SearchConfig(l_max=cfg["l_max"], beam=cfg["beam"], scorer=scorer, train=train_config(cfg),
                            search_epochs=cfg["search_epochs"], prune=cfg["prune"], seed=cfg["seed"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid search configuration: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], hidden=cfg["hidden"], patience=cfg["patience"],
                           seed=cfg["seed"], activation=cfg["activation"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def load_data(cfg: dict, labels: bool = True):
    d = Path(cfg["data"])
    for name in ("nodes.tsv", "edges.tsv") + (("labels.tsv",) if labels else ()):
        if not (d / name).is_file():
            raise UsageError(f"{d / name} not found")
    g, split = load_graph(d / "nodes.tsv", d / "edges.tsv", d / "labels.tsv" if labels else None,
                          ratios=cfg["ratios"], seed=cfg["seed"])
    if cfg.get("no_node_features"):
        g = g.with_features(None, keep_types=False)
    return g, split


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(out_dir: Path, command: str, cfg: dict, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(cfg.items())},
        "seed": cfg.get("seed"),
        "artifact_version": artifact_version(),
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(str(p) for p in outputs),
    }
    return _dump(Path(out_dir) / "run_manifest.json", manifest)


def _paths_json(g: HetGraph, paths) -> dict:
    return {"paths": [{"relations": list(p.relations), "names": p.names(g)} for p in paths]}


def _metrics(model, g, split) -> dict:
    res = evaluate(model, g, split)
    return {"class_names": list(split.class_names), "splits": res}


# --- commands -------------------------------------------------------------

def cmd_generate(cfg: dict) -> list[Path]:
    if cfg.get("relations") is None:
        raise UsageError("--relations is required")
    try:
        spec = SynSpec(nodes_per_type=cfg["nodes_per_type"], num_relations=cfg["relations"],
                       num_shared=cfg["shared"], gt_length=cfg["gt_length"], edge_density=cfg["density"],
                       min_positive=cfg["min_positive"], attribute=bool(cfg["attribute"]), seed=cfg["seed"])
    except InfeasibleSpec as exc:
        raise UsageError(str(exc)) from None
    ds = generate(spec)
    log.info("generated %d nodes, %d edges, ground truth %s, positive rate %.3f",
             ds.graph.num_nodes, ds.graph.num_edges(), ds.gt_path, ds.positive_rate)
    return write_dataset(ds, cfg["out"], ratios=cfg["ratios"])


def run_learner(g, split, scfg: SearchConfig):
    if scfg.beam == 1:
        mp, model, trace = learn_single(g, None, split, scfg)
        return [mp], model, trace
    return learn_beam(g, None, split, scfg)


def cmd_learn(cfg: dict) -> list[Path]:
    scfg = search_config(cfg)
    g, split = load_data(cfg)
    paths, model, trace = run_learner(g, split, scfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json", g.relation_names)
    written = [out / "model.json",
               _dump(out / "mp.json", _paths_json(g, paths)),
               _dump(out / "trace.json", trace.to_dict()),
               _dump(out / "metrics.json", _metrics(model, g, split))]
    log.info("learned %s", [" > ".join(p.names(g)) for p in paths])
    return written


def _parse_paths(g: HetGraph, cfg: dict) -> list[MetaPath]:
    if cfg.get("mp_file") is not None:
        data = json.loads(Path(cfg["mp_file"]).read_text(encoding="utf-8"))
        specs = [p["names"] for p in data["paths"]]
    else:
        specs = [s.split(",") for s in cfg["mp"]]
    paths = []
    for names in specs:
        try:
            paths.append(MetaPath([g.relation_id(n.strip()) for n in names]))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad meta-path {names}: {exc}") from None
    return paths


def cmd_train(cfg: dict) -> list[Path]:
    tcfg = train_config(cfg)
    g, split = load_data(cfg)
    paths = _parse_paths(g, cfg)
    model, hist = train(g, paths, split, tcfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json", g.relation_names)
    return [out / "model.json",
            _dump(out / "history.json", hist.to_dict()),
            _dump(out / "metrics.json", _metrics(model, g, split))]


def cmd_evaluate(cfg: dict) -> list[Path]:
    g, split = load_data(cfg)
    model = MPGNNModel.load(cfg["model"])
    model.check_compatible(g)
    metrics = _metrics(model, g, split)
    for name, part in metrics["splits"].items():
        if part["n"]:
            assert abs(f1_from_confusion(np.array(part["confusion"])) - part["f1_macro"]) < 1e-12
    return [_dump(Path(cfg["out"]) / "metrics.json", metrics)]


def grid_cell(key: tuple, cfg: dict) -> dict:
    """Generate one synthetic setting, learn on it and score the outcome."""
    relations, shared, gt_length, seed = key
    t0 = time.perf_counter()
    cell = dict(cfg, seed=seed)
    spec = SynSpec(nodes_per_type=cfg["nodes_per_type"], num_relations=relations, num_shared=shared,
                   gt_length=gt_length, edge_density=cfg["density"], min_positive=cfg["min_positive"],
                   attribute=bool(cfg["attribute"]), seed=seed)
    ds = generate(spec)
    g, split = ds.graph, ds.split(cfg["ratios"])
    if cfg.get("no_node_features"):
        g = g.with_features(None, keep_types=False)
    paths, model, _ = run_learner(g, split, search_config(cell))
    f1 = evaluate(model, g, split)["test"]["f1_macro"]
    return {"relations": relations, "shared": shared, "gt_length": gt_length, "seed": seed,
            "recovered": "|".join("-".join(g.relation_names[r] for r in p.relations) for p in paths),
            "exact_match": int(len(paths) == 1 and paths[0] == ds.gt_path),
            "f1": f"{f1:.6f}", "seconds": f"{time.perf_counter() - t0:.2f}"}


def _grid_worker(key, cfg):
    # one BLAS thread per worker keeps a full pool from oversubscribing cores
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    return grid_cell(key, cfg)


def _row_key(row) -> tuple:
    return tuple(int(row[k]) for k in ("relations", "shared", "gt_length", "seed"))


def _worker_count(cfg: dict) -> int:
    w = cfg.get("workers")
    if w is None:
        env = os.environ.get(WORKERS_ENV)
        try:
            w = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if w < 1:
        raise UsageError(f"worker count must be >= 1, got {w}")
    return w


def cmd_grid(cfg: dict) -> list[Path]:
    search_config(cfg)  # fail early on a bad configuration
    if cfg["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    workers = _worker_count(cfg)
    keys = [(R, S, L, s) for R in cfg["relations"] for S in cfg["shared"] for L in cfg["gt_length"]
            for s in range(cfg["seeds"])]
    for R, S, _, _ in keys:
        if not 0 <= S <= R:
            raise UsageError(f"shared ({S}) must lie in [0, relations ({R})]")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    done = {}
    if out.exists() and out.stat().st_size:
        with open(out, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != GRID_HEADER:
                raise UsageError(f"{out} exists with a different header; refusing to append")
            for row in reader:
                done[_row_key(row)] = row
    todo = [k for k in keys if k not in done]
    log.info("grid: %d cells done, %d to run on %d worker(s)", len(done), len(todo), workers)
    new_file = not done
    with open(out, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_HEADER, lineterminator="\n")
        if new_file:
            writer.writeheader()
            fh.flush()

        def record(row):
            writer.writerow(row)
            fh.flush()
            done[_row_key(row)] = row
            log.info("cell %s: %s exact=%s f1=%s (%ss)", _row_key(row), row["recovered"], row["exact_match"],
                     row["f1"], row["seconds"])

        if workers == 1:
            for k in todo:
                record(grid_cell(k, cfg))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_grid_worker, k, cfg) for k in todo]
                for fut in as_completed(futures):
                    record(fut.result())
    # rewrite in grid order so the file does not depend on completion order
    rows = sorted(done.values(), key=_row_key)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return [out]


def summarize_grid(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cells: dict[tuple, list] = {}
    for row in rows:
        cells.setdefault(_row_key(row)[:3], []).append(row)
    summary = []
    for key in sorted(cells):
        rs = cells[key]
        f1 = np.array([float(r["f1"]) for r in rs])
        summary.append({"relations": key[0], "shared": key[1], "gt_length": key[2], "seeds": len(rs),
                        "exact_match_rate": float(np.mean([int(r["exact_match"]) for r in rs])),
                        "f1_mean": float(f1.mean()), "f1_min": float(f1.min())})
    overall = float(np.mean([int(r["exact_match"]) for r in rows])) if rows else 0.0
    return {"cells": summary, "exact_match_rate": overall, "rows": len(rows)}


def summarize_trace(path: Path) -> dict:
    trace = json.loads(Path(path).read_text(encoding="utf-8"))
    depths = []
    for it in trace.get("iterations", []):
        if "kept" in it:
            depths.append({"depth": it["depth"], "kept": [(k["path"], k["score"], k["val_f1"]) for k in it["kept"]]})
        else:
            depths.append({"depth": it["depth"], "chosen": it["chosen"], "prefix": it["prefix"],
                           "score": it["scores"][str(it["chosen"])], "val_f1": it["val_f1"]})
    return {"best_path": trace.get("best_path"), "best_f1": trace.get("best_f1"), "depths": depths,
            "pruning": trace.get("pruning", [])}


def cmd_report(cfg: dict) -> list[Path]:
    src = Path(cfg["input"])
    if not src.is_file():
        raise UsageError(f"{src} not found")
    summary = summarize_grid(src) if src.suffix == ".csv" else summarize_trace(src)
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if cfg.get("out") is None:
        sys.stdout.write(text)
        return []
    return [_dump(Path(cfg["out"]), summary)]


COMMANDS = {"generate": cmd_generate, "learn": cmd_learn, "train": cmd_train, "evaluate": cmd_evaluate,
            "grid": cmd_grid, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        cfg = resolve(args)
        cfg["command"] = args.command
        outputs = COMMANDS[args.command](cfg)
        if outputs:
            out = Path(cfg["out"])
            write_manifest(out.parent if args.command in FILE_OUTPUT else out, args.command, cfg, outputs,
                           started)
    except UsageError as exc:
        print(f"metapath {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GraphFormatError, SearchError, TrainingError, InfeasibleSpec, ValueError, OSError) as exc:
        print(f"metapath {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
