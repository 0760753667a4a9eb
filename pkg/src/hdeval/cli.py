"""Command-line entry point: decompose, train, evaluate, attribute, report, bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .aggregators import SHORT_NAMES, TrainingSet
from .artifact import AlignmentArtifact, load_artifact, save_artifact
from .attribution import permutation_importance, shapley_sampled, ImportanceTable
from .backend import BackendConfig, decompose, make_backend
from .criteria import ROOT_ID, feature_order, new_tree
from .datasets import DatasetManifest, EvalSample, labels_matrix, load_dataset, split, write_dataset
from .errors import DatasetError, HDEvalError
from .metaeval import (
    ABLATION_LABELS,
    ABLATION_MODES,
    compare_aggregators,
    correlation_report,
    format_reports,
    run_ablation,
)
from .synthetic import WorldConfig, generate
from .trainer import TrainConfig, apply, seed_layer1, train

log = logging.getLogger("hdeval")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad paths or inputs detected before any work starts (exit 2)."""


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {"level": record.levelname.lower(), "logger": record.name, "event": record.getMessage()}
        if record.exc_info:
            event["exc"] = self.formatException(record.exc_info)
        return json.dumps(event, ensure_ascii=False)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root.addHandler(handler)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    log.setLevel(logging.INFO)


# --- run configuration -----------------------------------------------------


@dataclass
class RunConfig:
    manifest_path: Path | None
    data_path: Path | None
    backend: BackendConfig
    train: TrainConfig
    output: Path | None
    base_dir: Path


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _override(section: dict[str, Any], key: str, value: Any, where: str) -> None:
    if value is None:
        return
    if key in section and section[key] != value:
        log.info("flag --%s=%r overrides %s value %r", key.replace("_", "-"), value, where, section[key])
    section[key] = value


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        base = path.resolve().parent
    unknown = set(raw) - {"dataset", "backend", "train", "output"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")

    dataset = raw.get("dataset", {})
    backend = dict(raw.get("backend", {}))
    train_cfg = dict(raw.get("train", {}))

    _override(backend, "kind", getattr(args, "backend", None), "config")
    cache = getattr(args, "cache_dir", None)
    if cache is not None:
        cache = str(Path(cache).resolve())
    elif backend.get("cache_dir"):
        backend["cache_dir"] = str(_resolve(base, backend["cache_dir"]))
    _override(backend, "cache_dir", cache, "config")
    fixtures = backend.get("fixtures")
    if isinstance(fixtures, str):
        fpath = _resolve(base, fixtures)
        if not fpath.is_file():
            raise UsageError(f"fixtures file not found: {fpath}")
        backend["fixtures"] = json.loads(fpath.read_text(encoding="utf-8"))

    _override(train_cfg, "seed", getattr(args, "seed", None), "config")
    _override(train_cfg, "train_fraction", getattr(args, "train_fraction", None), "config")
    _override(train_cfg, "prune_k", getattr(args, "prune_k", None), "config")
    _override(train_cfg, "max_layers", getattr(args, "max_layers", None), "config")
    _override(train_cfg, "aggregator", getattr(args, "aggregator", None), "config")
    _override(train_cfg, "attribution", getattr(args, "attribution", None), "config")

    output = getattr(args, "output", None)
    output_path = Path(output) if output else _resolve(base, raw.get("output"))
    return RunConfig(
        manifest_path=_resolve(base, dataset.get("manifest")),
        data_path=_resolve(base, dataset.get("data")),
        backend=BackendConfig.from_dict(backend),
        train=TrainConfig.from_dict(train_cfg),
        output=output_path,
        base_dir=base,
    )


def _load_data(manifest_path: Path | None, data_path: Path | None) -> tuple[DatasetManifest, list[EvalSample]]:
    for label, p in (("manifest", manifest_path), ("data", data_path)):
        if p is None:
            raise UsageError(f"no dataset {label} path configured")
        if not p.is_file():
            raise UsageError(f"dataset {label} not found: {p}")
    return load_dataset(manifest_path, data_path)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --- commands --------------------------------------------------------------


def cmd_decompose(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    if run.manifest_path is None or not run.manifest_path.is_file():
        raise UsageError(f"dataset manifest not found: {run.manifest_path}")
    manifest = DatasetManifest.from_dict(json.loads(run.manifest_path.read_text(encoding="utf-8")))
    backend = make_backend(run.backend)
    children = args.children or run.train.children_per_parent
    tree = new_tree(manifest.task_description, run.train.max_layers, max(children, run.train.children_per_parent))
    if args.parent is None:
        parent_id = ROOT_ID
    else:
        tree = seed_layer1(tree, manifest, "expert_aspects")
        hits = tree.find(args.parent, layer=1)
        if not hits:
            raise UsageError(f"no layer-1 criterion named {args.parent!r}; choose from {manifest.aspect_names}")
        parent_id = hits[0].id
    found = decompose(backend, tree, parent_id, children, manifest.task_background)
    for name, definition in found:
        print(f"{name}: {definition}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    manifest, samples = _load_data(run.manifest_path, run.data_path)
    if run.output is None:
        raise UsageError("no output directory configured (use --output or the config's 'output')")
    config = run.train
    train_samples, test_samples = split(samples, config.test_fraction, config.split_seed)
    checkpoint = run.output / "checkpoint.csv"
    artifact = train(config, manifest, train_samples, run.backend, checkpoint_path=checkpoint)
    artifact.provenance["n_test"] = len(test_samples)
    save_artifact(artifact, run.output)
    split_info = {
        "manifest": str(run.manifest_path.resolve()),
        "data": str(run.data_path.resolve()),
        "test_fraction": config.test_fraction,
        "split_seed": config.split_seed,
        "train": [s.sample_id for s in train_samples],
        "test": [s.sample_id for s in test_samples],
    }
    _write(run.output / "split.json", json.dumps(split_info, indent=2) + "\n")
    checkpoint.unlink(missing_ok=True)

    tree = artifact.tree
    for it in artifact.provenance["iterations"]:
        top = sorted(it["importances"].items(), key=lambda kv: -kv[1])[:3]
        print(
            f"layer {it['layer']}: +{len(it['added'])} criteria, {it['n_features']} features; "
            f"top importances: " + ", ".join(f"{tree.get(f).name}={v:.4f}" for f, v in top)
            + "; selected: " + ", ".join(tree.get(f).name for f in it["selected"])
        )
    print(f"artifact written to {run.output} ({len(artifact.feature_ids)} criteria, {len(artifact.scores.sample_ids)} train samples)")
    if len(test_samples) >= 2:
        # scoring the held-out split here also fills the response cache for replay runs
        pred, _ = apply(artifact, test_samples, run.backend)
        report = correlation_report(pred, labels_matrix(test_samples, artifact.aspect_names), artifact.aspect_names)
        print(format_reports([("HD-Eval (test)", report)], "table"), end="")
    return EXIT_OK


def _open_artifact(path: str) -> AlignmentArtifact:
    directory = Path(path)
    if not directory.is_dir():
        raise UsageError(f"artifact directory not found: {directory}")
    return load_artifact(directory)


def _eval_inputs(args: argparse.Namespace, artifact: AlignmentArtifact) -> tuple[list[EvalSample], BackendConfig]:
    """Test samples and backend for rescoring held-out data."""
    art_dir = Path(args.artifact)
    split_file = art_dir / "split.json"
    split_info = json.loads(split_file.read_text(encoding="utf-8")) if split_file.is_file() else {}
    if args.config:
        run = load_run_config(args)
        manifest_path, data_path, backend = run.manifest_path, run.data_path, run.backend
    else:
        manifest_path = Path(split_info["manifest"]) if "manifest" in split_info else None
        data_path = Path(split_info["data"]) if "data" in split_info else None
        stored = dict(artifact.provenance.get("backend", {}))
        if args.backend:
            stored["kind"] = args.backend
        if args.cache_dir:
            stored["cache_dir"] = str(Path(args.cache_dir).resolve())
        backend = BackendConfig.from_dict(stored)
    if args.manifest:
        manifest_path = Path(args.manifest)
    if args.data:
        data_path = Path(args.data)
    manifest, samples = _load_data(manifest_path, data_path)
    if manifest.aspect_names != artifact.aspect_names:
        raise UsageError(
            f"dataset aspects {manifest.aspect_names} do not match artifact aspects {artifact.aspect_names}"
        )
    if "test" in split_info and not args.all_samples:
        wanted = set(split_info["test"])
        samples = [s for s in samples if s.sample_id in wanted]
        if len(samples) != len(wanted):
            raise UsageError("dataset does not contain every test sample recorded in split.json")
    if len(samples) < 2:
        raise UsageError("need at least 2 evaluation samples")
    return samples, backend


def _predictions_csv(samples: Sequence[EvalSample], aspects: Sequence[str], pred: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", *aspects])
    for s, row in zip(samples, pred):
        w.writerow([s.sample_id, *(repr(float(v)) for v in row)])
    return buf.getvalue()


_EXT = {"csv": "csv", "table": "txt", "json": "json"}


def cmd_evaluate(args: argparse.Namespace) -> int:
    artifact = _open_artifact(args.artifact)
    samples, backend = _eval_inputs(args, artifact)
    pred, _ = apply(artifact, samples, backend)
    labels = labels_matrix(samples, artifact.aspect_names)
    report = correlation_report(
        pred, labels, artifact.aspect_names,
        metadata={"artifact_digest": artifact.score_matrix_digest, "n": len(samples)},
    )
    out = Path(args.output) if args.output else Path(args.artifact)
    _write(out / "predictions.csv", _predictions_csv(samples, artifact.aspect_names, pred))
    text = format_reports([("HD-Eval", report)], args.report)
    _write(out / f"report.{_EXT[args.report]}", text)
    sys.stdout.write(text)
    return EXIT_OK


def _importance_csv(artifact: AlignmentArtifact, table: ImportanceTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature_id", "name", "layer", "aspect", "method", "importance"])
    for row in table.rows():
        node = artifact.tree.get(row["feature_id"])
        w.writerow([node.id, node.name, node.layer, row["aspect"], row["method"], repr(row["importance"])])
    return buf.getvalue()


def _importances(artifact: AlignmentArtifact, method: str, repeats: int, samples: int) -> ImportanceTable:
    config = TrainConfig.from_dict(artifact.config)
    seed = config.derived_seed("attribution")
    data = TrainingSet(artifact.scores.values, artifact.labels, artifact.feature_ids, artifact.aspect_names)
    tables = []
    for model in artifact.models.values():
        sub = data.select_aspects(model.aspect_names)
        if method == "permutation":
            tables.append(permutation_importance(model, sub, repeats=repeats, seed=seed))
        else:
            tables.append(shapley_sampled(model, sub, n_samples=samples, seed=seed))
    table = ImportanceTable.concat_aspects(tables)
    order = [table.aspect_names.index(a) for a in artifact.aspect_names]
    return ImportanceTable(table.feature_ids, list(artifact.aspect_names), table.values[:, order],
                           table.method, table.repeats, table.seed)


def cmd_attribute(args: argparse.Namespace) -> int:
    artifact = _open_artifact(args.artifact)
    config = TrainConfig.from_dict(artifact.config)
    method = args.attribution or config.attribution
    table = _importances(artifact, method, args.repeats or config.repeats, args.repeats or config.shapley_samples)
    text = _importance_csv(artifact, table)
    out = Path(args.output) if args.output else Path(args.artifact)
    _write(out / f"importances_{method}.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def _ablation_modes(text: str) -> list[str]:
    modes: list[str] = []
    for part in text.split(","):
        part = part.strip()
        if part == "all":
            modes.extend(m for m in ABLATION_MODES if m != "full")
        elif part in ABLATION_MODES:
            modes.append(part)
        else:
            raise UsageError(f"unknown ablation mode {part!r}; expected 'all' or one of {ABLATION_MODES}")
    return list(dict.fromkeys(modes))


def _aggregator_kinds(text: str) -> list[str]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in SHORT_NAMES]
    if bad:
        raise UsageError(f"unknown aggregators {bad}; expected any of {sorted(SHORT_NAMES)}")
    return kinds


def cmd_report(args: argparse.Namespace) -> int:
    if not (args.ablation or args.aggregators or args.importance):
        raise UsageError("report needs at least one of --ablation, --aggregators, --importance")
    artifact = _open_artifact(args.artifact)
    if not artifact.provenance.get("iterations"):
        raise UsageError("artifact has no training provenance")
    out = Path(args.output) if args.output else Path(args.artifact)
    modes = _ablation_modes(args.ablation) if args.ablation else []
    kinds = _aggregator_kinds(args.aggregators) if args.aggregators else []
    chunks = []
    if modes or kinds:
        samples, backend = _eval_inputs(args, artifact)
        _, matrix = apply(artifact, samples, backend)
        labels = labels_matrix(samples, artifact.aspect_names)
        if modes:
            rows = [(ABLATION_LABELS[m], run_ablation(artifact, matrix, labels, m)) for m in modes]
            text = format_reports(rows, args.report)
            _write(out / f"ablation.{_EXT[args.report]}", text)
            chunks.append(text)
        if kinds:
            rows = compare_aggregators(artifact, matrix, labels, kinds)
            rows = [(f"HD-Eval-{k.upper()}", rep) for k, rep in rows]
            text = format_reports(rows, args.report)
            _write(out / f"aggregators.{_EXT[args.report]}", text)
            chunks.append(text)
    if args.importance:
        config = TrainConfig.from_dict(artifact.config)
        table = _importances(artifact, args.importance, config.repeats, config.shapley_samples)
        text = _importance_csv(artifact, table)
        _write(out / f"importances_{args.importance}.csv", text)
        chunks.append(text)
    sys.stdout.write("\n".join(chunks))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    out = Path(args.output)
    world_cfg = WorldConfig(
        n_aspects=args.n_aspects,
        branching=tuple(int(b) for b in args.branching.split(",")) if args.branching else (),
        weight_mode=args.weight_mode,
        noise_sigma=args.noise_sigma,
        scorer_noise=args.scorer_noise,
    )
    seed = args.seed if args.seed is not None else 0
    manifest, samples, world, backend = generate(world_cfg, args.n_samples, seed=seed)
    write_bench_bundle(out, manifest, samples, world, backend, world_cfg)
    print(f"synthetic bundle with {len(samples)} samples and {len(world.criteria)} latent criteria written to {out}")
    return EXIT_OK


def write_bench_bundle(out: Path, manifest, samples, world, backend: BackendConfig, world_cfg: WorldConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(manifest, samples, out / "manifest.json", out / "data.jsonl")
    _write(out / "fixtures.json", json.dumps(backend.fixtures, indent=1, sort_keys=True) + "\n")
    _write(out / "world.json", json.dumps(world.to_dict(), indent=2) + "\n")
    backend_dict = {k: v for k, v in backend.to_dict().items() if v is not None}
    backend_dict.update({"fixtures": "fixtures.json", "cache_dir": "cache"})
    config = {
        "dataset": {"manifest": "manifest.json", "data": "data.jsonl"},
        "backend": backend_dict,
        "train": {
            "max_layers": world_cfg.n_layers,
            "children_per_parent": max([4, *world_cfg.branching]),
            "prune_k": 2,
            "aggregator": "linear",
            "seed": world.seed,
        },
        "output": "artifact",
    }
    _write(out / "config.json", json.dumps(config, indent=2) + "\n")


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; relative paths resolve against its directory")
    common.add_argument("--backend", choices=("remote", "mock", "replay"), help="LLM backend kind")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--train-fraction", type=float, help="fraction of the train split to use, in (0, 1]")
    common.add_argument("--prune-k", type=int, help="criteria kept per layer for further decomposition")
    common.add_argument("--max-layers", type=int, help="maximum hierarchy depth")
    common.add_argument("--aggregator", choices=sorted(SHORT_NAMES), help="aggregator kind")
    common.add_argument("--attribution", choices=("permutation", "shapley"), help="saliency method")
    common.add_argument("--report", choices=("csv", "table", "json"), default="table", help="report format")
    common.add_argument("--cache-dir", help="response cache directory")
    common.add_argument("--output", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress events to stderr")

    parser = argparse.ArgumentParser(prog="hdeval", description="Hierarchical criteria evaluation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="decompose the task or one aspect into sub-criteria")
    p.add_argument("--parent", help="layer-1 aspect name to decompose (default: the task itself)")
    p.add_argument("--children", type=int, help="number of sub-criteria to request")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", parents=[common], help="run iterative alignment training")
    p.set_defaults(func=cmd_train)

    def eval_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--artifact", required=True, help="artifact bundle directory")
        p.add_argument("--manifest", help="dataset manifest (default: the one used for training)")
        p.add_argument("--data", help="dataset samples (default: the one used for training)")
        p.add_argument("--all-samples", action="store_true", help="evaluate every sample, not only the test split")

    p = sub.add_parser("evaluate", parents=[common], help="score held-out samples and report correlations")
    eval_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", parents=[common], help="feature importances of a trained artifact")
    p.add_argument("--artifact", required=True, help="artifact bundle directory")
    p.add_argument("--repeats", type=int, help="shuffles (permutation) or orderings (shapley)")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("report", parents=[common], help="ablation, aggregator comparison and importance reports")
    eval_args(p)
    p.add_argument("--ablation", help="'all' or comma list of " + ",".join(ABLATION_MODES))
    p.add_argument("--aggregators", help="comma list of aggregators to refit and compare, e.g. lr,dt,rf,nn")
    p.add_argument("--importance", choices=("permutation", "shapley"), help="emit per-aspect importances")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", parents=[common], help="write a synthetic planted-hierarchy dataset bundle")
    p.add_argument("--n-samples", type=int, default=400)
    p.add_argument("--n-aspects", type=int, default=2)
    p.add_argument("--branching", default="3,3", help="children per latent criterion below layer 1, per layer")
    p.add_argument("--weight-mode", choices=("deep", "dense"), default="deep")
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--scorer-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "bench" and not args.output:
        parser.error("bench needs --output")
    try:
        return args.func(args)
    except UsageError as e:
        log.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as e:
        log.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except HDEvalError as e:
        log.error("%s: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
