"""Command-line entry point: ``scenegcn <command> [options]``.

Configuration is layered: built-in defaults, then an optional JSON file
(``--config``), then ``SCENEGCN_<SECTION>_<KEY>`` environment variables,
then command-line flags.  The effective configuration is written as
``config.json`` into every output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .graph import DEFAULT_DEADBAND, GraphError, build_graph, load_graphs, random_graph, save_graphs
from .metrics import EvalReport
from .models import ConfigError, ModelConfig, attention_summary, load_checkpoint, model_grad_check, save_checkpoint
from .scene import SceneError, load_scenes, save_scenes
from .synth import REGIMES, SynthConfig, SynthConfigError, regime_config, split_corpus, subsample_labels, synth_corpus
from .training import (
    SCARCITY_FRACTIONS,
    TrainConfig,
    build_graphs,
    evaluate_model,
    evaluate_rules,
    scarcity_experiment,
    train,
    transfer_experiment,
)

log = logging.getLogger("scenegcn")

ENV_PREFIX = "SCENEGCN_"
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad flags, bad config or conflicting inputs (exit code 2)."""


# --------------------------------------------------------------------------
# configuration

def default_config() -> dict:
    return {
        "seed": 1,
        "split": [0.7, 0.15, 0.15],
        "deadband": DEFAULT_DEADBAND,
        "jobs": 1,
        "synth": SynthConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "paths": {"scenes": None, "graphs": None, "checkpoint": None, "out": None},
    }


def _merge(base: dict, update: dict, where: str) -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _env_overrides(environ: dict) -> dict:
    """``SCENEGCN_TRAIN_EPOCHS=5`` -> {"train": {"epochs": 5}}; values parsed as JSON when possible."""
    sections = set(default_config())
    update: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        section, _, rest = key.partition("_")
        if section in sections and isinstance(default_config()[section], dict) and rest:
            update.setdefault(section, {})[rest] = value
        else:
            update[key] = value
    return update


def load_config(path: str | None, environ: dict | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, doc, "")
    return _merge(cfg, _env_overrides(os.environ if environ is None else environ), "env:")


def _set(cfg: dict, dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, key = dotted.split(".")
    node = cfg
    for p in parents:
        node = node[p]
    node[key] = value


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    """Flags override everything else; absent flags leave the config alone."""
    g = vars(args).get
    _set(cfg, "seed", g("seed"))
    _set(cfg, "split", g("split"))
    _set(cfg, "deadband", g("deadband"))
    _set(cfg, "jobs", g("jobs"))
    if g("seed") is not None:
        cfg["synth"]["seed"] = g("seed")
    for flag, key in [
        ("scenes_per_class", "synth.scenes_per_class"),
        ("noise_sigma", "synth.noise_sigma"),
        ("dropout", "synth.dropout"),
        ("frames", "synth.T"),
        ("lane_width", "synth.lane_width"),
        ("epochs", "train.epochs"),
        ("lr", "train.lr"),
        ("patience", "train.patience"),
        ("seeds", "train.seeds"),
        ("label_fraction", "train.label_fraction"),
        ("layer_dims", "model.layer_dims"),
        ("embedding_dim", "model.embedding_dim"),
        ("heads", "model.heads"),
        ("scenes", "paths.scenes"),
        ("graphs", "paths.graphs"),
        ("checkpoint", "paths.checkpoint"),
        ("out", "paths.out"),
    ]:
        _set(cfg, key, g(flag))
    if g("model") is not None:
        cfg["model"]["use_attention"] = g("model") == "rel-att-gcn"
    if g("no_skip"):
        cfg["model"]["use_skip"] = False
    return cfg


def build_configs(cfg: dict) -> tuple[SynthConfig, ModelConfig, TrainConfig]:
    try:
        return (
            SynthConfig.from_dict(cfg["synth"]),
            ModelConfig.from_dict(cfg["model"]),
            TrainConfig.from_dict(cfg["train"]),
        )
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _flag_model_overrides(args: argparse.Namespace) -> dict:
    """Model fields given explicitly on the command line (for conflict checks)."""
    out = {}
    if getattr(args, "layer_dims", None) is not None:
        out["layer_dims"] = tuple(args.layer_dims)
    if getattr(args, "embedding_dim", None) is not None:
        out["embedding_dim"] = args.embedding_dim
    if getattr(args, "heads", None) is not None:
        out["heads"] = args.heads
    if getattr(args, "model", None) is not None:
        out["use_attention"] = args.model == "rel-att-gcn"
    if getattr(args, "no_skip", False):
        out["use_skip"] = False
    return out


def write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _out_dir(cfg: dict, required: bool = True) -> Path | None:
    out = cfg["paths"]["out"]
    if out is None:
        if required:
            raise UsageError("--out is required")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    write_json(path / "config.json", cfg)
    return path


# --------------------------------------------------------------------------
# data loading helpers

def _split_files(root: Path) -> dict[str, Path]:
    return {name: root / f"{name}.jsonl" for name in SPLITS if (root / f"{name}.jsonl").exists()}


def _load_split_graphs(cfg: dict) -> dict[str, list]:
    """Graphs per split from --graphs (graph JSONL) or --scenes (built on the fly).

    A directory is read as train/val/test.jsonl; a single file becomes the
    "test" split.
    """
    src = cfg["paths"]["graphs"]
    scenes = cfg["paths"]["scenes"]
    if src is None and scenes is None:
        raise UsageError("one of --graphs or --scenes is required")
    root = Path(src if src is not None else scenes)
    if not root.exists():
        raise UsageError(f"input path does not exist: {root}")
    files = _split_files(root) if root.is_dir() else {"test": root}
    if not files:
        raise UsageError(f"no train/val/test .jsonl files in {root}")
    out = {}
    for name, path in files.items():
        if src is not None:
            out[name] = load_graphs(path)
        else:
            out[name] = build_graphs(load_scenes(path), cfg["deadband"])
    return out


def _eval_split(graphs: dict[str, list], name: str) -> list:
    if name not in graphs:
        raise UsageError(f"split {name!r} not found (have {sorted(graphs)})")
    if not graphs[name]:
        raise UsageError(f"split {name!r} is empty")
    return graphs[name]


def _emit_report(report: EvalReport, out: Path | None, stem: str = "report") -> None:
    if out is None:
        sys.stdout.write(report.to_json() + "\n")
        return
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.csv").write_text(report.table())
    sys.stdout.write(report.table())


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict, args) -> int:
    synth_cfg, _, _ = build_configs(cfg)
    if args.regime:
        synth_cfg = regime_config(synth_cfg, args.regime)
        cfg["synth"] = synth_cfg.to_dict()
    try:
        ratios = [float(r) for r in cfg["split"]]
        scenes = synth_corpus(synth_cfg)
        parts = split_corpus(scenes, ratios, cfg["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(cfg)
    for name, part in zip(SPLITS, parts):
        save_scenes(part, out / f"{name}.jsonl")
    manifest = {
        "scenes": len(scenes),
        "splits": {name: len(part) for name, part in zip(SPLITS, parts)},
        "version": __version__,
    }
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(scenes)} scenes to {out}: " + ", ".join(f"{k}={v}" for k, v in manifest["splits"].items()))
    return 0


def _scene_files(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    skip = {"manifest.json", "config.json"}
    return sorted(p for p in root.iterdir() if p.suffix in (".json", ".jsonl") and p.name not in skip)


def cmd_graph(cfg: dict, args) -> int:
    src = cfg["paths"]["scenes"]
    if src is None:
        raise UsageError("--scenes is required")
    root = Path(src)
    if not root.exists():
        raise UsageError(f"input path does not exist: {root}")
    out = _out_dir(cfg)
    errors = []
    total = 0
    for path in _scene_files(root):
        graphs = []
        for scene in load_scenes(path, max_vehicles=cfg["synth"]["max_vehicles"]):
            try:
                graphs.append(build_graph(scene, cfg["deadband"]))
            except GraphError as e:
                errors.append({"file": path.name, "scene": scene.id, "error": str(e)})
        save_graphs(graphs, out / (path.stem + ".jsonl"))
        total += len(graphs)
    write_json(out / "errors.json", errors)
    print(f"wrote {total} graphs to {out}; {len(errors)} scene(s) failed")
    for e in errors:
        log.error("%s: %s", e["file"], e["error"])
    return 1 if errors else 0


def cmd_train(cfg: dict, args) -> int:
    _, model_cfg, train_cfg = build_configs(cfg)
    graphs = _load_split_graphs(cfg)
    for name in SPLITS:
        if name not in graphs:
            raise UsageError(f"training needs a {name} split")
    if train_cfg.label_fraction < 1.0:
        if cfg["paths"]["scenes"] is None:
            raise UsageError("label_fraction < 1 needs --scenes input")
        scenes = load_scenes(Path(cfg["paths"]["scenes"]) / "train.jsonl")
        graphs["train"] = build_graphs(subsample_labels(scenes, train_cfg.label_fraction, cfg["seed"]), cfg["deadband"])
    out = _out_dir(cfg)
    start = time.perf_counter()
    res = train(model_cfg, (graphs["train"], graphs["val"], graphs["test"]), train_cfg, cfg["jobs"])
    for run in res.runs:
        if run.failed:
            log.error(run.diagnostics)
            continue
        save_checkpoint(out / f"seed{run.seed}.ckpt.json", run.params, replace(model_cfg, seed=run.seed),
                        {"best_epoch": run.best_epoch, "epochs_run": run.epochs_run, "losses": run.losses})
    if res.report is None:
        print("every seed diverged", file=sys.stderr)
        return 1
    _emit_report(res.report, out)
    print(f"trained {len(res.runs)} seed(s) in {time.perf_counter() - start:.1f}s; "
          f"test macro-F1 {res.report.macro_f1:.2f}")
    return 1 if res.failed_seeds else 0


def cmd_eval(cfg: dict, args) -> int:
    ckpt = cfg["paths"]["checkpoint"]
    if ckpt is None:
        raise UsageError("--checkpoint is required")
    try:
        params, model_cfg = load_checkpoint(ckpt)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {ckpt}") from None
    for key, value in _flag_model_overrides(args).items():
        have = getattr(model_cfg, key)
        if have != value:
            raise UsageError(f"config conflict: checkpoint has {key}={have!r}, flags ask for {value!r}")
    graphs = _eval_split(_load_split_graphs(cfg), args.subset)
    report = evaluate_model(params, model_cfg, graphs)
    report.meta = {"checkpoint": str(ckpt), "split": args.subset}
    _emit_report(report, _out_dir(cfg, required=False))
    return 0


def cmd_rules(cfg: dict, args) -> int:
    graphs = _eval_split(_load_split_graphs(cfg), args.subset)
    report = evaluate_rules(graphs)
    report.meta = {"split": args.subset}
    _emit_report(report, _out_dir(cfg, required=False))
    return 0


def _scene_splits(cfg: dict) -> tuple[list, list, list]:
    src = cfg["paths"]["scenes"]
    if src is None:
        raise UsageError("--scenes is required")
    root = Path(src)
    files = _split_files(root) if root.is_dir() else {}
    if set(files) != set(SPLITS):
        raise UsageError(f"{root} must contain train/val/test .jsonl scene files")
    return tuple(load_scenes(files[name]) for name in SPLITS)


def cmd_scarcity(cfg: dict, args) -> int:
    _, model_cfg, train_cfg = build_configs(cfg)
    splits = _scene_splits(cfg)
    out = _out_dir(cfg)
    models = [replace(model_cfg, use_attention=False), replace(model_cfg, use_attention=True)]
    res = scarcity_experiment(splits, models, train_cfg, args.fractions or SCARCITY_FRACTIONS,
                              cfg["deadband"], cfg["jobs"])
    (out / "scarcity.csv").write_text(res.to_csv())
    write_json(out / "scarcity.json", {f"{f}/{m}": json.loads(r.to_json()) for (f, m), r in res.reports.items()})
    sys.stdout.write(res.to_csv())
    return 0


def cmd_transfer(cfg: dict, args) -> int:
    synth_cfg, model_cfg, train_cfg = build_configs(cfg)
    graphs = _load_split_graphs(cfg)
    for name in SPLITS:
        if name not in graphs:
            raise UsageError(f"transfer needs a {name} split for the source corpus")
    targets: dict[str, list] = {"source": graphs["test"]}
    for path in args.target or []:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"target path does not exist: {p}")
        scenes = load_scenes(p / "test.jsonl" if p.is_dir() and (p / "test.jsonl").exists() else p)
        targets[p.stem if p.is_file() else p.name] = build_graphs(scenes, cfg["deadband"])
    for regime in args.regime or []:
        try:
            rc = regime_config(synth_cfg, regime)
        except SynthConfigError as e:
            raise UsageError(str(e)) from None
        _, _, test = split_corpus(synth_corpus(rc), cfg["split"], cfg["seed"])
        if not test:
            raise UsageError(f"regime {regime!r} test split is empty; raise --scenes-per-class")
        targets[regime] = build_graphs(test, cfg["deadband"])
    out = _out_dir(cfg)
    _, reports = transfer_experiment(model_cfg, (graphs["train"], graphs["val"], graphs["test"]), targets,
                                     train_cfg, cfg["jobs"])
    write_json(out / "transfer.json", {name: json.loads(r.to_json()) for name, r in reports.items()})
    lines = ["target,macro_precision,macro_recall,macro_f1,micro_f1"]
    for name, r in reports.items():
        lines.append(f"{name},{r.macro['precision']:.2f},{r.macro['recall']:.2f},{r.macro['f1']:.2f},{r.micro['f1']:.2f}")
        (out / f"transfer_{name}.csv").write_text(r.table())
    (out / "transfer.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_attn(cfg: dict, args) -> int:
    ckpt = cfg["paths"]["checkpoint"]
    if ckpt is None:
        raise UsageError("--checkpoint is required")
    params, model_cfg = load_checkpoint(ckpt)
    if not model_cfg.use_attention:
        raise UsageError("checkpoint is a plain MRGCN; attention export needs rel-att-gcn")
    graphs = _eval_split(_load_split_graphs(cfg), args.subset)
    summary = attention_summary(graphs, params, model_cfg)
    out = _out_dir(cfg, required=False)
    text = summary.to_csv()
    if out is not None:
        (out / "attention.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(cfg: dict, args) -> int:
    _, model_cfg, _ = build_configs(cfg)
    g = random_graph(np.random.default_rng(cfg["seed"]), n=args.nodes)
    variants = {"mrgcn": False, "rel-att-gcn": True}
    chosen = [args.model] if args.model else list(variants)
    ok = True
    for name in chosen:
        start = time.perf_counter()
        rep = model_grad_check(replace(model_cfg, use_attention=variants[name]), g, seed=cfg["seed"], tol=args.tol)
        status = "pass" if rep.passed else "FAIL"
        print(f"{name}: {status} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_param}{rep.worst_index} "
              f"entries={rep.checked} time={time.perf_counter() - start:.1f}s")
        ok &= rep.passed
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "graph": cmd_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "rules": cmd_rules,
    "scarcity": cmd_scarcity,
    "transfer": cmd_transfer,
    "attn": cmd_attn,
    "gradcheck": cmd_gradcheck,
}


# --------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel workers across seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deadband", type=float, help="quadrant hysteresis in metres")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--scenes", help="scene file or directory with train/val/test.jsonl")
    data.add_argument("--graphs", help="graph file or directory with train/val/test.jsonl")
    data.add_argument("--subset", default="test", choices=SPLITS, help="split to evaluate")

    model = _Parser(add_help=False)
    model.add_argument("--model", choices=["mrgcn", "rel-att-gcn"])
    model.add_argument("--layer-dims", type=_csv_ints)
    model.add_argument("--embedding-dim", type=int)
    model.add_argument("--heads", type=int)
    model.add_argument("--no-skip", action="store_true")

    training = _Parser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--patience", type=int)
    training.add_argument("--seeds", type=_csv_ints)
    training.add_argument("--label-fraction", type=float)

    synth = _Parser(add_help=False)
    synth.add_argument("--scenes-per-class", type=int)
    synth.add_argument("--noise-sigma", type=float)
    synth.add_argument("--dropout", type=float)
    synth.add_argument("--frames", type=int)
    synth.add_argument("--lane-width", type=float)

    parser = _Parser(prog="scenegcn", description="Vehicle behaviour classification over interaction graphs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common, synth], help="generate a split synthetic corpus")
    p.add_argument("--ratios", dest="split", type=_csv_floats, help="train,val,test ratios")
    p.add_argument("--regime", choices=sorted(REGIMES))

    p = sub.add_parser("graph", parents=[common], help="build interaction graphs from scenes")
    p.add_argument("--scenes", required=True)

    sub.add_parser("train", parents=[common, data, model, training], help="train one model per seed")
    p = sub.add_parser("eval", parents=[common, data, model], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    sub.add_parser("rules", parents=[common, data], help="evaluate the rule baseline")

    p = sub.add_parser("scarcity", parents=[common, model, training], help="label-scarcity comparison")
    p.add_argument("--scenes", required=True)
    p.add_argument("--fractions", type=_csv_floats)

    p = sub.add_parser("transfer", parents=[common, data, model, training, synth], help="cross-corpus evaluation")
    p.add_argument("--target", action="append", help="target scene file or directory (repeatable)")
    p.add_argument("--regime", action="append", choices=sorted(REGIMES), help="synthesize a target regime")

    p = sub.add_parser("attn", parents=[common, data], help="export the class x relation attention matrix")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", parents=[common, model], help="finite-difference gradient check")
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = apply_flags(load_config(args.config), args)
        build_configs(cfg)
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, SynthConfigError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return 2
    except (SceneError, GraphError, RuntimeError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
