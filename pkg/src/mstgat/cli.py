"""Command-line entry point: ``mstgat <subcommand> --config run.json [flags]``.

The JSON config is the single source of truth for a run; flags given on the
command line override the matching config entries. Every subcommand writes a
manifest under ``<output>/manifests`` holding the resolved config, its hash,
the seed and the sha256 of every file it produced.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import NormStats, WindowSpec, horizon_to_windowspec, prepare
from .evaluation import (dataset_tables, evaluate, tables_to_json, transfer_evaluate, write_occurrence_csv,
                         write_summary_csv)
from .graph import StationGraph, build_station_graph, export_graph, load_graph, parse_station_metadata, read_manual_edges
from .ingest import align, infer_grid, load_observations, save_observations
from .models import KINDS, ModelConfig, load_checkpoint, save_checkpoint
from .synth import FILES, SynthConfig, export_synth, generate_corridor
from .training import TrainConfig, train, write_history

log = logging.getLogger("mstgat")

OUTPUT_ENV = "MSTGAT_OUTPUT_DIR"
INPUT_KEYS = ("metadata", "speed", "closures", "weather", "weather_stations")
HORIZONS = (30, 45, 60)
MODEL_KEYS = ("hidden", "heads", "head_dim", "kernel", "conv_channels")


class UsageError(Exception):
    """A validated failure reported as a diagnostic with a nonzero exit."""


# ---------------------------------------------------------------- config handling

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path) -> tuple[dict, Path]:
    """Read a JSON run config; relative paths inside it resolve against its folder."""
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg, path.resolve().parent


def output_dir(args, cfg: dict, base: Path) -> Path:
    """Flag, then environment variable, then config entry, then the working directory."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    configured = cfg.get("paths", {}).get("output_dir")
    return _resolve(configured, base) if configured else Path.cwd()


def _resolve(p, base: Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def input_paths(cfg: dict, base: Path, out: Path) -> dict[str, Path | None]:
    """Input CSVs from the config, falling back to the files ``synth`` writes into ``out``."""
    paths = cfg.get("paths", {})
    resolved = {}
    for key in INPUT_KEYS:
        resolved[key] = _resolve(paths[key], base) if paths.get(key) else out / FILES[key]
    resolved["manual_edges"] = _resolve(paths["manual_edges"], base) if paths.get("manual_edges") else None
    for key, p in resolved.items():
        if p is not None and not p.exists():
            raise UsageError(f"input file for {key!r} does not exist: {p}")
    return resolved


def window_spec(cfg: dict, horizon_flag: int | None) -> WindowSpec:
    """Horizon minutes in {30, 45, 60}, or an explicit ``window`` with history/horizon steps."""
    if horizon_flag is None and "window" in cfg:
        w = cfg["window"]
        return WindowSpec(int(w["history"]), int(w["horizon"]))
    minutes = horizon_flag if horizon_flag is not None else cfg.get("horizon_minutes", 30)
    if minutes not in HORIZONS:
        raise UsageError(f"horizon must be one of {HORIZONS} minutes, got {minutes}; "
                         "give an explicit window (history/horizon steps) in the config for other lengths")
    try:
        return horizon_to_windowspec(int(minutes))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _seed(args, cfg: dict) -> int:
    return int(args.seed) if getattr(args, "seed", None) is not None else int(cfg.get("seed", 0))


def write_manifest(out: Path, command: str, resolved: dict, seed: int, produced) -> Path:
    """Record what ran and the hash of every artifact so a rerun can be compared byte for byte."""
    mdir = out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "seed": seed,
        "config": resolved,
        "config_sha256": hashlib.sha256(_canonical(resolved).encode()).hexdigest(),
        "files": {str(Path(p).resolve()): _sha256(p) for p in sorted(map(str, produced))},
    }
    path = mdir / f"{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg, base, out) -> list[Path]:
    section = dict(cfg.get("synth", {}))
    if args.seed is not None or "seed" not in section:
        section["seed"] = _seed(args, cfg)
    if args.steps is not None:
        section["steps"] = args.steps
    if args.nodes is not None:
        section["n_nodes"] = args.nodes
    try:
        sc = SynthConfig.from_json(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    paths = export_synth(generate_corridor(sc), out)
    args.resolved = {"synth": sc.to_json()}
    print(f"wrote synthetic corridor ({sc.n_nodes} stations, {sc.steps} steps) to {out}")
    return list(paths.values())


def _build_graph(cfg, inputs) -> tuple[StationGraph, list, int]:
    stations, skipped = parse_station_metadata(inputs["metadata"])
    manual = read_manual_edges(inputs["manual_edges"]) if inputs["manual_edges"] else None
    gap = cfg.get("graph", {}).get("max_gap_miles")
    return build_station_graph(stations, manual_edges=manual, max_gap_miles=gap), stations, skipped


def cmd_graph(args, cfg, base, out) -> list[Path]:
    paths = cfg.get("paths", {})
    if args.metadata:
        metadata = Path(args.metadata)
    else:
        metadata = _resolve(paths["metadata"], base) if paths.get("metadata") else out / FILES["metadata"]
    manual = _resolve(paths["manual_edges"], base) if paths.get("manual_edges") else None
    for p in (metadata, manual):
        if p is not None and not p.exists():
            raise UsageError(f"input file does not exist: {p}")
    inputs = {"metadata": metadata, "manual_edges": manual}
    graph, _, skipped = _build_graph(cfg, inputs)
    out.mkdir(parents=True, exist_ok=True)
    edge_path, nodes_path = out / "graph.txt", out / "graph.json"
    export_graph(graph, edge_path, nodes_path)
    args.resolved = {"metadata": str(inputs["metadata"]), "graph": cfg.get("graph", {})}
    print(f"graph: {len(graph)} nodes, {len(graph.edges)} edges, {skipped} stations skipped")
    return [edge_path, nodes_path]


def cmd_ingest(args, cfg, base, out) -> list[Path]:
    inputs = input_paths(cfg, base, out)
    max_gap = int(cfg.get("max_gap_steps", 6))
    graph, stations, _ = _build_graph(cfg, inputs)
    obs = align(stations, graph, infer_grid(inputs["speed"]), inputs["speed"], inputs["closures"],
                inputs["weather"], inputs["weather_stations"], max_gap)
    out.mkdir(parents=True, exist_ok=True)
    tensor = save_observations(obs, out / "observations")
    edge_path, nodes_path = out / "graph.txt", out / "graph.json"
    export_graph(graph, edge_path, nodes_path)
    args.resolved = {"inputs": {k: str(v) if v else None for k, v in inputs.items()}, "max_gap_steps": max_gap,
                     "graph": cfg.get("graph", {})}
    S, N, _ = obs.values.shape
    print(f"observation tensor: {S} steps x {N} stations, {int(obs.missing.sum())} missing speed cells")
    return [tensor.with_suffix(".bin"), tensor, edge_path, nodes_path]


def _tensor_path(args, cfg, base, out) -> Path:
    if getattr(args, "tensor", None):
        return Path(args.tensor)
    configured = cfg.get("paths", {}).get("tensor")
    return _resolve(configured, base) if configured else out / "observations.bin"


def _graph_for(obs, out: Path) -> StationGraph:
    edge_path = out / "graph.txt"
    if not edge_path.exists():
        raise UsageError(f"no graph found in {out}; run ingest first")
    graph = load_graph(edge_path, out / "graph.json")
    if graph.nodes != obs.nodes:
        raise UsageError("graph nodes do not match the observation tensor; rerun ingest")
    return graph


def cmd_train(args, cfg, base, out) -> list[Path]:
    kind = args.model or cfg.get("model", {}).get("kind", "m-stgat")
    if kind not in KINDS:
        raise UsageError(f"unknown model kind {kind!r}; choose from {', '.join(KINDS)}")
    spec = window_spec(cfg, args.horizon)
    seed = _seed(args, cfg)
    try:
        obs = load_observations(_tensor_path(args, cfg, base, out))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read observation tensor: {exc}") from None
    graph = _graph_for(obs, out)
    model_section = {k: v for k, v in cfg.get("model", {}).items() if k in MODEL_KEYS}
    mc = ModelConfig(kind=kind, history=spec.history, horizon=spec.horizon, seed=seed, **model_section)
    train_section = dict(cfg.get("train", {}))
    train_section["seed"] = seed
    if args.epochs is not None:
        train_section["epochs"] = args.epochs
    tc = TrainConfig.for_kind(kind, **train_section)
    data = prepare(obs, spec, mc.n_features)
    mask = graph.attention_mask()
    result = train(mc, data.train, data.val, mask, tc,
                   progress=lambda e, tr, va: log.info("epoch %d train %.5f val %.5f", e, tr, va))
    minutes = spec.horizon * 5
    ckpt = out / "checkpoints" / f"{kind}-{minutes}"
    extra = {"window": {"history": spec.history, "horizon": spec.horizon}, "norm_stats": data.stats.to_json(),
             "tensor": str(_tensor_path(args, cfg, base, out).resolve()),
             "graph": {"nodes": list(graph.nodes), "edges": [list(e) for e in graph.edges]},
             "train": tc.to_json(), "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}
    save_checkpoint(ckpt, mc, result.params, extra)
    write_history(result.history, ckpt / "history.csv")
    args.resolved = {"model": mc.to_json(), "train": tc.to_json(), "window": extra["window"],
                     "tensor": extra["tensor"]}
    print(f"trained {kind} for {tc.epochs} epochs; best epoch {result.best_epoch}, "
          f"val loss {result.best_val_loss:.6f}; checkpoint in {ckpt}")
    return sorted(p for p in ckpt.iterdir() if p.is_file())


def _open_checkpoint(path):
    try:
        config, params, manifest = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    extra = manifest
    g = extra["graph"]
    graph = StationGraph(tuple(g["nodes"]), tuple(tuple(e) for e in g["edges"]))
    return config, params, extra, graph


def cmd_eval(args, cfg, base, out) -> list[Path]:
    config, params, extra, graph = _open_checkpoint(args.checkpoint)
    stats = NormStats.from_json(extra["norm_stats"])
    spec = WindowSpec(**extra["window"])
    tensor = Path(args.tensor) if args.tensor else Path(extra["tensor"])
    obs = load_observations(tensor)
    if obs.nodes != graph.nodes:
        raise UsageError("tensor stations differ from the checkpoint's graph")
    data = prepare(obs, spec, config.n_features)
    ds = {"train": data.train, "val": data.val, "test": data.test}[args.split]
    report = evaluate(config, params, ds, graph.attention_mask(), stats, batch_size=args.batch_size)
    payload = {"split": args.split, "model": config.kind, "horizon_minutes": spec.horizon * 5, **report.to_json()}
    text = json.dumps(payload, indent=2)
    print(text)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"metrics-{config.kind}-{spec.horizon * 5}-{args.split}.json"
    path.write_text(text + "\n")
    args.resolved = {"checkpoint": str(Path(args.checkpoint).resolve()), "split": args.split, "tensor": str(tensor)}
    return [path]


def cmd_transfer(args, cfg, base, out) -> list[Path]:
    config, params, extra, graph = _open_checkpoint(args.checkpoint)
    stats = NormStats.from_json(extra["norm_stats"])
    spec = WindowSpec(**extra["window"])
    names = args.names or [Path(t).stem for t in args.tensor]
    if len(names) != len(args.tensor) or len(set(names)) != len(names):
        raise UsageError("--names must give one distinct name per --tensor")
    sets = {}
    for name, t in zip(names, args.tensor):
        obs = load_observations(t)
        if obs.nodes != graph.nodes:
            raise UsageError(f"transfer tensor {t} has different stations than the checkpoint")
        sets[name] = obs
    reports = transfer_evaluate(config, params, sets, stats, spec, graph.attention_mask())
    payload = {name: rep.to_json() for name, rep in reports.items()}
    text = json.dumps(payload, indent=2)
    print(text)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"transfer-{config.kind}-{spec.horizon * 5}.json"
    path.write_text(text + "\n")
    args.resolved = {"checkpoint": str(Path(args.checkpoint).resolve()),
                     "tensors": dict(zip(names, map(str, args.tensor)))}
    return [path]


def cmd_stats(args, cfg, base, out) -> list[Path]:
    tensors = args.tensor or [str(_tensor_path(args, cfg, base, out))]
    names = args.names or (["PD"] if len(tensors) == 1 else [Path(t).stem for t in tensors])
    if len(names) != len(tensors):
        raise UsageError("--names must give one name per --tensor")
    tables = []
    for name, t in zip(names, tensors):
        try:
            tables.append(dataset_tables(load_observations(t), name))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read tensor {t}: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary_stats.csv", out / "occurrence_stats.csv", out / "stats.json"]
    write_summary_csv(tables, paths[0])
    write_occurrence_csv(tables, paths[1])
    text = tables_to_json(tables)
    paths[2].write_text(text + "\n")
    print(text)
    args.resolved = {"tensors": dict(zip(names, map(str, tensors)))}
    return paths


COMMANDS = {"synth": cmd_synth, "graph": cmd_graph, "ingest": cmd_ingest, "train": cmd_train,
            "eval": cmd_eval, "transfer": cmd_transfer, "stats": cmd_stats}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    common.add_argument("--seed", type=int, help="top-level seed for every random draw")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mstgat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corridor as CSV inputs")
    p.add_argument("--steps", type=int)
    p.add_argument("--nodes", type=int)

    p = sub.add_parser("graph", parents=[common], help="build and export the station graph")
    p.add_argument("--metadata", help="station metadata CSV")

    sub.add_parser("ingest", parents=[common], help="align raw inputs into an observation tensor")

    p = sub.add_parser("train", parents=[common], help="train one model on the aligned tensor")
    p.add_argument("--model", choices=KINDS)
    p.add_argument("--horizon", type=int, help="prediction horizon in minutes (30, 45 or 60)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--tensor", help="observation tensor (.bin); defaults to <out>/observations.bin")

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--tensor", help="tensor to evaluate; defaults to the one used for training")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("transfer", parents=[common], help="zero-shot metrics on other periods")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tensor", action="append", required=True, help="repeatable")
    p.add_argument("--names", nargs="+")

    p = sub.add_parser("stats", parents=[common], help="summary and occurrence tables of tensors")
    p.add_argument("--tensor", action="append", help="repeatable; defaults to <out>/observations.bin")
    p.add_argument("--names", nargs="+")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, base = load_config(args.config)
        out = output_dir(args, cfg, base)
        with _thread_limit(args.threads):
            produced = COMMANDS[args.command](args, cfg, base, out)
        seed = _seed(args, cfg)
        write_manifest(out, args.command, {"argv": list(argv) if argv is not None else sys.argv[1:],
                                           **args.resolved}, seed, produced)
    except UsageError as exc:
        print(f"mstgat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"mstgat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
