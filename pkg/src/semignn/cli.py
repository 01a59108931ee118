"""Command-line entry point: ``semignn {gen,train,eval,explain,sweep}``.

Exit codes: 0 success, 2 configuration or usage error, 3 missing artifact,
4 data validation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_value, sweepable
from .graph import GraphError, load_multiview, read_label_file
from .interpret import format_ranking, node_importance, view_importance
from .metrics import EvalReport, evaluate
from .model import CheckpointError, load_checkpoint, save_checkpoint, score_users
from .synth import InvalidConfig, generate, read_splits, write_dataset
from .training import NoLabeledUsers, NoRelationView, train

log = logging.getLogger("semignn")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ckpt"
TELEMETRY_NAME = "telemetry.tsv"


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# --- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="random seed for generation and training")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _data(p):
    p.add_argument("--data", help="dataset manifest file or the directory holding manifest.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semignn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a planted-signal synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint and telemetry")
    _common(p)
    _data(p)
    p.add_argument("--alpha", help="weight of the supervised term")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    p.add_argument("--telemetry", help="telemetry path (default OUT/telemetry.tsv)")

    p = sub.add_parser("eval", help="score a split and report AUC, KS, F1 and top-k precision")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", help="train, test or val (default test)")
    p.add_argument("--truth", help="truth file; adds metrics over never-labeled users")
    p.add_argument("--report", help="report path (default OUT/eval_<split>.txt)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--fraction", type=float, default=0.01, help="top fraction for top-k precision")

    p = sub.add_parser("explain", help="attention-based node and view importance reports")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--top", type=int, default=15)
    p.add_argument("--mean", action="store_true", help="divide by the number of attending users")

    p = sub.add_parser("sweep", help="train once per value of one parameter and tabulate metrics")
    _common(p)
    _data(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--split", default="test")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        key, val = parse_value(k.strip(), v.strip())
        out[key] = val
    for flag in ("seed", "out", "data", "checkpoint", "telemetry", "truth", "report", "alpha"):
        val = getattr(args, flag, None)
        if val is not None:
            key, parsed = parse_value(flag, str(val))
            out[key] = parsed
    return out


# --- helpers ------------------------------------------------------------------

def _manifest(cfg: RunConfig) -> Path:
    data = cfg.get("data")
    if not data:
        raise UsageError("--data is required")
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise MissingArtifact(f"dataset manifest {path} not found")
    return path


def _out_dir(cfg: RunConfig, required=True):
    out = cfg.get("out")
    if out is None:
        if required:
            raise UsageError("--out is required")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.get("checkpoint"):
        return Path(cfg.get("checkpoint"))
    if cfg.get("out"):
        return Path(cfg.get("out")) / CHECKPOINT_NAME
    raise UsageError("--checkpoint or --out is required")


def _load_model(cfg: RunConfig, graph):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    params, _ = load_checkpoint(path)
    if params.dims.m != graph.m or params.dims.k != graph.class_count:
        raise CheckpointError(f"checkpoint expects {params.dims.m} views / {params.dims.k} classes, "
                              f"dataset has {graph.m} / {graph.class_count}")
    return params


def _split_labels(manifest: Path, graph, split: str) -> list:
    splits_path = manifest.parent / "splits.tsv"
    if splits_path.exists():
        splits = read_splits(splits_path)
        if split in splits:
            return sorted(splits[split])
    if split == "train":
        return list(graph.labeled)
    if not splits_path.exists():
        raise MissingArtifact(f"split {split!r} needs {splits_path}")
    raise UsageError(f"unknown split {split!r}")


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _evaluate_split(graph, params, labeled, threshold=0.5, fraction=0.01) -> EvalReport:
    users = [u for u, _ in labeled]
    scores = score_users(graph, params, users)
    return evaluate(scores, [y for _, y in labeled], threshold, fraction)


# --- commands -----------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    data = generate(cfg.synth())
    manifest = write_dataset(data, out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    tcfg = cfg.train()
    ckpt = _checkpoint_path(cfg)
    if cfg.get("telemetry"):
        tel_path = Path(cfg.get("telemetry"))
    elif cfg.get("out"):
        tel_path = Path(cfg.get("out")) / TELEMETRY_NAME
    else:
        tel_path = ckpt.parent / TELEMETRY_NAME
    graph = load_multiview(manifest)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tel_path.parent.mkdir(parents=True, exist_ok=True)
    with open(tel_path, "w", encoding="utf-8", newline="\n") as tel:
        result = train(graph, tcfg, telemetry=tel, log=log.info)
    save_checkpoint(ckpt, result.params, tcfg.to_dict(), tcfg.rng_seed)
    print(f"wrote {ckpt} and {tel_path} ({len(result.reports)} steps)")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    graph = load_multiview(manifest)
    params = _load_model(cfg, graph)
    labeled = _split_labels(manifest, graph, args.split)
    sections = [(args.split, _evaluate_split(graph, params, labeled, args.threshold, args.fraction))]
    if cfg.get("truth"):
        truth_path = Path(cfg.get("truth"))
        if not truth_path.exists():
            raise MissingArtifact(f"truth file {truth_path} not found")
        truth = dict(read_label_file(truth_path))
        seen = set(graph.labels)
        splits_path = manifest.parent / "splits.tsv"
        if splits_path.exists():
            for rows in read_splits(splits_path).values():
                seen.update(u for u, _ in rows)
        never = sorted((u, y) for u, y in truth.items() if u not in seen)
        if never:
            sections.append(("never_labeled", _evaluate_split(graph, params, never, args.threshold,
                                                               args.fraction)))
    out = _out_dir(cfg, required=False)
    for name, rep in sections:
        text = rep.to_text()
        print(f"# {name}\n{text}", end="")
        if cfg.get("report") and name == args.split:
            _write(Path(cfg.get("report")), text)
        elif out is not None:
            _write(out / f"eval_{name}.txt", text)
    return EXIT_OK


def _fraud_users(manifest: Path, graph) -> list:
    users = {u for u, y in graph.labeled if y == 1}
    splits_path = manifest.parent / "splits.tsv"
    if splits_path.exists():
        for rows in read_splits(splits_path).values():
            users.update(u for u, y in rows if y == 1)
    return sorted(users)


def cmd_explain(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    graph = load_multiview(manifest)
    params = _load_model(cfg, graph)
    users = _fraud_users(manifest, graph)
    if not users:
        raise GraphError("no fraud-labeled users to explain")
    for v in graph.views[1:]:
        ranking = node_importance(graph, params, users, v.view_id, mean=args.mean)
        name = v.name or f"view{v.view_id}"
        _write(out / f"importance_{name}.tsv", format_ranking(ranking, args.top))
        print(f"# {name}")
        print(format_ranking(ranking, args.top), end="")
    vi = view_importance(graph, params, users)
    lines = [f"{v.view_id}\t{v.name or v.view_id}\t{float(a)!r}" for v, a in zip(graph.views, vi)]
    _write(out / "view_importance.tsv", "\n".join(lines) + "\n")
    print("# views")
    print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    if not sweepable(args.param):
        raise ConfigError(f"cannot sweep unknown parameter {args.param!r}")
    parsed = [parse_value(args.param, v.strip()) for v in args.values.split(",") if v.strip()]
    if not parsed:
        raise ConfigError("--values is empty")
    key = parsed[0][0]
    regenerate = key.startswith("synth.")
    if not regenerate:
        manifest = _manifest(cfg)
        graph = load_multiview(manifest)
        labeled = _split_labels(manifest, graph, args.split)
    rows = ["value\tauc\tks\tf1\ttopk"]
    for text, (_, value) in zip([v.strip() for v in args.values.split(",") if v.strip()], parsed):
        run = cfg.with_value(key, value)
        if regenerate:
            data = generate(run.synth())
            graph = data.graph
            labeled = data.split_labels(args.split)
        result = train(graph, run.train(), log=log.info)
        rep = _evaluate_split(graph, result.params, labeled)
        rows.append(f"{text}\t{rep.auc!r}\t{rep.ks!r}\t{rep.f1!r}\t{rep.topk!r}")
        log.info("%s=%s auc=%.4f", key, text, rep.auc)
    table = "\n".join(rows) + "\n"
    print(table, end="")
    out = _out_dir(cfg, required=False)
    if out is not None:
        _write(out / f"sweep_{key}.tsv", table)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (GraphError, CheckpointError, NoLabeledUsers, NoRelationView) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

