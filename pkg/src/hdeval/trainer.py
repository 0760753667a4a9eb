"""Iterative alignment training: decompose, score, fit, attribute, prune, per layer."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import aggregators as agg
from .artifact import AlignmentArtifact, ScoreMatrix
from .attribution import (
    ImportanceTable,
    aggregate_importance,
    permutation_importance,
    select_top_k,
    shapley_sampled,
)
from .backend import Backend, BackendConfig, decompose, make_backend, score
from .criteria import (
    ROOT_ID,
    CriteriaTree,
    Criterion,
    attach_children,
    feature_order,
    new_tree,
    nodes_at_layer,
)
from .datasets import DatasetManifest, EvalSample, check_partition, labels_matrix, subsample_train
from .errors import ArtifactError, ValidationError

log = logging.getLogger(__name__)

LAYER1_MODES = ("expert_aspects", "llm_decomposed")


@dataclass
class TrainConfig:
    max_layers: int = 3
    children_per_parent: int = 4
    prune_k: int = 4
    aggregator: str = "linear"
    hyper: dict[str, Any] = field(default_factory=dict)
    attribution: str = "permutation"
    repeats: int = 10
    shapley_samples: int = 100
    seed: int = 0
    layer1_mode: str = "expert_aspects"
    aspect_groups: dict[str, list[str]] | None = None
    train_fraction: float = 1.0
    test_fraction: float = 0.5
    split_seed: int = 0

    def __post_init__(self) -> None:
        self.aggregator = agg.resolve_kind(self.aggregator)
        agg.merged_hyper(self.aggregator, self.hyper)
        if self.max_layers < 1:
            raise ValidationError("max_layers must be >= 1")
        if self.children_per_parent < 1:
            raise ValidationError("children_per_parent must be >= 1")
        if self.prune_k < 0:
            raise ValidationError("prune_k must be >= 0")
        if self.attribution not in ("permutation", "shapley"):
            raise ValidationError(f"unknown attribution method {self.attribution!r}")
        if self.layer1_mode not in LAYER1_MODES:
            raise ValidationError(f"layer1_mode must be one of {LAYER1_MODES}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValidationError("train_fraction must lie in (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def derived_seed(self, purpose: str) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(purpose.encode("utf-8"))) % (2 ** 31)


@dataclass
class TrainState:
    tree: CriteriaTree
    samples: list[EvalSample]
    scores: ScoreMatrix
    labels: np.ndarray
    aspect_names: list[str]
    groups: dict[str, list[str]]
    to_expand: list[str] = field(default_factory=list)
    layer: int = 0
    models: dict[str, agg.AggregatorModel] = field(default_factory=dict)
    importances: dict[int, ImportanceTable] = field(default_factory=dict)
    iterations: list[dict[str, Any]] = field(default_factory=list)


def score_criteria(
    backend: Backend,
    tree: CriteriaTree,
    samples: Sequence[EvalSample],
    criteria: Sequence[Criterion],
    template_id: str,
    on_column: Callable[[str, np.ndarray, np.ndarray], None] | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Score every (sample, criterion) cell; returns id -> (values, imputed mask).

    Cells fan out over ``backend.config.max_in_flight`` workers. Results are
    written by index, so the outcome does not depend on completion order.
    """
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    workers = backend.config.max_in_flight
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for crit in criteria:
            if pool is None:
                results = [score(backend, s, crit, tree, template_id) for s in samples]
            else:
                results = list(pool.map(lambda s, c=crit: score(backend, s, c, tree, template_id), samples))
            values = np.array([r.value for r in results], dtype=float)
            imputed = np.array([r.imputed for r in results], dtype=bool)
            out[crit.id] = (values, imputed)
            if on_column is not None:
                on_column(crit.id, values, imputed)
    finally:
        if pool is not None:
            pool.shutdown()
    return out


class Checkpoint:
    """Score-matrix columns flushed to disk as soon as each is complete."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def load(self, sample_ids: Sequence[str]) -> dict[str, np.ndarray]:
        if not self.path.exists():
            return {}
        matrix = ScoreMatrix.from_csv(self.path.read_text(encoding="utf-8"))
        if matrix.sample_ids != list(sample_ids):
            log.warning("checkpoint %s covers different samples; ignoring it", self.path)
            return {}
        return {f: matrix.column(f) for f in matrix.feature_ids}

    def write(self, matrix: ScoreMatrix) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(matrix.to_csv(), encoding="utf-8")
        tmp.replace(self.path)


def seed_layer1(
    tree: CriteriaTree,
    manifest: DatasetManifest,
    mode: str = "expert_aspects",
    backend: Backend | None = None,
    children: int | None = None,
) -> CriteriaTree:
    if mode == "expert_aspects":
        if not manifest.aspects:
            raise ValidationError("expert_aspects mode needs aspect names and definitions in the manifest")
        if len(manifest.aspects) > tree.max_children:
            tree = CriteriaTree(tree.task, tree.nodes, tree.max_layers, max(tree.max_children, len(manifest.aspects)))
        return attach_children(tree, ROOT_ID, list(manifest.aspects.items()))
    if backend is None:
        raise ValidationError("llm_decomposed mode needs a backend")
    found = decompose(backend, tree, ROOT_ID, children or tree.max_children, manifest.task_background)
    return attach_children(tree, ROOT_ID, found)


def _fit_and_attribute(
    state: TrainState, config: TrainConfig
) -> tuple[dict[str, agg.AggregatorModel], ImportanceTable]:
    feats = feature_order(state.tree)
    X = state.scores.select(feats).values
    full = agg.TrainingSet(X, state.labels, feats, state.aspect_names)
    models: dict[str, agg.AggregatorModel] = {}
    tables = []
    fit_seed = config.derived_seed("aggregator")
    attr_seed = config.derived_seed("attribution")
    for group, aspects in state.groups.items():
        data = full.select_aspects(aspects)
        model = agg.fit(config.aggregator, data, config.hyper, seed=fit_seed)
        models[group] = model
        if config.attribution == "permutation":
            tables.append(permutation_importance(model, data, repeats=config.repeats, seed=attr_seed))
        else:
            tables.append(shapley_sampled(model, data, n_samples=config.shapley_samples, seed=attr_seed))
    table = ImportanceTable.concat_aspects(tables)
    order = [table.aspect_names.index(a) for a in state.aspect_names]
    table = ImportanceTable(table.feature_ids, list(state.aspect_names), table.values[:, order],
                            table.method, table.repeats, table.seed)
    return models, table


def _score_layer(
    state: TrainState,
    backend: Backend,
    new_nodes: Sequence[Criterion],
    template_id: str,
    checkpoint: Checkpoint | None,
) -> ScoreMatrix:
    matrix = state.scores
    resumed = checkpoint.load(matrix.sample_ids) if checkpoint else {}
    todo = []
    for node in new_nodes:
        if node.id in resumed:
            matrix = matrix.with_column(node.id, resumed[node.id])
        else:
            todo.append(node)
    holder = {"m": matrix}

    def flush(fid: str, values: np.ndarray, imputed: np.ndarray) -> None:
        holder["m"] = holder["m"].with_column(fid, values, imputed)
        if checkpoint:
            checkpoint.write(holder["m"])

    score_criteria(backend, state.tree, state.samples, todo, template_id, on_column=flush)
    return holder["m"]


def _finish_iteration(
    state: TrainState,
    config: TrainConfig,
    layer: int,
    expanded: Sequence[str],
    new_nodes: Sequence[Criterion],
) -> TrainState:
    models, table = _fit_and_attribute(state, config)
    scalar = aggregate_importance(table)
    layer_ids = [n.id for n in nodes_at_layer(state.tree, layer)]
    if layer == 1:
        # every expert aspect is expanded at layer 2; no pruning yet
        selected = list(layer_ids)
    else:
        selected = select_top_k(layer_ids, scalar, config.prune_k, order=feature_order(state.tree))
    state.models = models
    state.importances[layer] = table
    state.to_expand = selected if layer < config.max_layers else []
    state.layer = layer
    state.iterations.append(
        {
            "layer": layer,
            "expanded": list(expanded),
            "added": [{"id": n.id, "name": n.name, "parent_id": n.parent_id} for n in new_nodes],
            "n_features": len(feature_order(state.tree)),
            "importances": {f: scalar[f] for f in feature_order(state.tree)},
            "selected": selected,
            "train_mse": {g: m.train_mse for g, m in models.items()},
        }
    )
    log.info(
        "layer %d: +%d criteria, %d features, selected %s",
        layer, len(new_nodes), len(feature_order(state.tree)), [state.tree.get(i).name for i in selected],
    )
    return state


def run_iteration(
    state: TrainState,
    layer: int,
    backend: Backend | BackendConfig,
    config: TrainConfig,
    manifest: DatasetManifest,
    checkpoint: Checkpoint | None = None,
) -> TrainState:
    """Grow the tree by one layer below ``state.to_expand`` and refit."""
    backend = backend if isinstance(backend, Backend) else make_backend(backend)
    if layer > config.max_layers:
        log.warning("layer %d exceeds max_layers %d; nothing to do", layer, config.max_layers)
        return state
    if layer != state.layer + 1:
        raise ValidationError(f"expected layer {state.layer + 1}, got {layer}")
    expanded = list(state.to_expand)
    tree = state.tree
    for parent_id in expanded:
        found = decompose(backend, tree, parent_id, config.children_per_parent, manifest.task_background)
        tree = attach_children(tree, parent_id, found)
    state.tree = tree
    new_nodes = nodes_at_layer(tree, layer)
    state.scores = _score_layer(state, backend, new_nodes, manifest.template_id, checkpoint)
    return _finish_iteration(state, config, layer, expanded, new_nodes)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    samples: Sequence[EvalSample],
    backend: Backend | BackendConfig,
    checkpoint_path: str | Path | None = None,
) -> AlignmentArtifact:
    """Run the full per-layer loop on the training split ``samples``.

    ``config.train_fraction`` below 1 first draws a seeded group-respecting
    subsample of ``samples``.
    """
    if not samples:
        raise ValidationError("training set is empty")
    samples = subsample_train(samples, config.train_fraction, config.derived_seed("subsample"))
    backend = backend if isinstance(backend, Backend) else make_backend(backend)
    aspects = manifest.aspect_names
    groups = config.aspect_groups or manifest.groups()
    check_partition(groups, aspects)
    checkpoint = Checkpoint(checkpoint_path) if checkpoint_path else None

    tree = new_tree(manifest.task_description, config.max_layers, config.children_per_parent)
    tree = seed_layer1(tree, manifest, config.layer1_mode, backend, config.children_per_parent)
    state = TrainState(
        tree=tree,
        samples=list(samples),
        scores=ScoreMatrix.empty([s.sample_id for s in samples]),
        labels=labels_matrix(samples, aspects),
        aspect_names=aspects,
        groups=groups,
    )
    layer1 = nodes_at_layer(tree, 1)
    state.scores = _score_layer(state, backend, layer1, manifest.template_id, checkpoint)
    state = _finish_iteration(state, config, 1, [ROOT_ID], layer1)
    for layer in range(2, config.max_layers + 1):
        if not state.to_expand:
            log.info("no criteria selected for layer %d; stopping", layer)
            break
        state = run_iteration(state, layer, backend, config, manifest, checkpoint)

    feats = feature_order(state.tree)
    artifact = AlignmentArtifact(
        tree=state.tree,
        models=state.models,
        feature_ids=feats,
        scores=state.scores.select(feats),
        labels=state.labels,
        aspect_names=aspects,
        config=config.to_dict(),
        manifest=manifest,
        provenance={
            "iterations": state.iterations,
            "n_train": len(samples),
            "train_fraction": config.train_fraction,
            "backend": backend.config.to_dict(),
        },
        importances=state.importances,
    )
    artifact.validate()
    return artifact


def apply(
    artifact: AlignmentArtifact,
    samples: Sequence[EvalSample],
    backend: Backend | BackendConfig,
) -> tuple[np.ndarray, ScoreMatrix]:
    """Score unseen samples on every criterion and predict their aspect scores."""
    backend = backend if isinstance(backend, Backend) else make_backend(backend)
    feats = feature_order(artifact.tree)
    if feats != artifact.feature_ids:
        raise ArtifactError("artifact feature order does not match its tree")
    criteria = [artifact.tree.get(f) for f in feats]
    columns = score_criteria(backend, artifact.tree, samples, criteria, artifact.template_id)
    matrix = ScoreMatrix(
        [s.sample_id for s in samples],
        feats,
        np.column_stack([columns[f][0] for f in feats]) if samples else np.zeros((0, len(feats))),
        np.column_stack([columns[f][1] for f in feats]) if samples else None,
    )
    return artifact.predict(matrix.values), matrix


def refit(
    artifact: AlignmentArtifact,
    feature_ids: Sequence[str],
    kind: str | None = None,
    hyper: dict[str, Any] | None = None,
) -> dict[str, agg.AggregatorModel]:
    """Refit the per-group aggregators on a column subset of the stored train scores."""
    config = TrainConfig.from_dict(artifact.config)
    kind = agg.resolve_kind(kind or config.aggregator)
    if hyper is None:
        hyper = config.hyper if kind == config.aggregator else {}
    data = agg.TrainingSet(
        artifact.scores.select(feature_ids).values, artifact.labels, list(feature_ids), artifact.aspect_names
    )
    seed = config.derived_seed("aggregator")
    return {
        group: agg.fit(kind, data.select_aspects(model.aspect_names), hyper, seed=seed)
        for group, model in artifact.models.items()
    }


def predict_groups(models: dict[str, agg.AggregatorModel], X: np.ndarray, aspects: Sequence[str]) -> np.ndarray:
    out = np.empty((X.shape[0], len(aspects)))
    for model in models.values():
        pred = model.predict(X)
        for j, a in enumerate(model.aspect_names):
            out[:, list(aspects).index(a)] = pred[:, j]
    return out


def with_config(config: TrainConfig, **changes: Any) -> TrainConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
