"""Score matrices and the on-disk alignment artifact bundle."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .aggregators import AggregatorModel
from .attribution import ImportanceTable
from .criteria import CriteriaTree, feature_order
from .datasets import DatasetManifest
from .errors import ArtifactError, DigestMismatchError, DimensionMismatchError

BUNDLE_FILES = ("tree.json", "scores.csv", "labels.csv", "provenance.json", "config.json")


@dataclass
class ScoreMatrix:
    """Samples x criteria matrix of LLM scores, plus a mask of imputed cells."""

    sample_ids: list[str]
    feature_ids: list[str]
    values: np.ndarray
    imputed: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.sample_ids = list(self.sample_ids)
        self.feature_ids = list(self.feature_ids)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.sample_ids), len(self.feature_ids))
        if self.imputed is None:
            self.imputed = np.zeros(self.values.shape, dtype=bool)
        self.imputed = np.asarray(self.imputed, dtype=bool).reshape(self.values.shape)

    @classmethod
    def empty(cls, sample_ids: Sequence[str]) -> ScoreMatrix:
        return cls(list(sample_ids), [], np.zeros((len(sample_ids), 0)))

    def column(self, feature_id: str) -> np.ndarray:
        return self.values[:, self.feature_ids.index(feature_id)]

    def with_column(self, feature_id: str, values: np.ndarray, imputed: np.ndarray | None = None) -> ScoreMatrix:
        if feature_id in self.feature_ids:
            raise ArtifactError(f"column {feature_id} already scored")
        imputed = np.zeros(len(self.sample_ids), dtype=bool) if imputed is None else imputed
        return ScoreMatrix(
            self.sample_ids,
            self.feature_ids + [feature_id],
            np.column_stack([self.values, np.asarray(values, dtype=float)]),
            np.column_stack([self.imputed, np.asarray(imputed, dtype=bool)]),
        )

    def select(self, feature_ids: Sequence[str]) -> ScoreMatrix:
        missing = [f for f in feature_ids if f not in self.feature_ids]
        if missing:
            raise DimensionMismatchError(f"score matrix lacks features {missing}")
        cols = [self.feature_ids.index(f) for f in feature_ids]
        return ScoreMatrix(self.sample_ids, list(feature_ids), self.values[:, cols], self.imputed[:, cols])

    def select_rows(self, sample_ids: Sequence[str]) -> ScoreMatrix:
        index = {s: i for i, s in enumerate(self.sample_ids)}
        rows = [index[s] for s in sample_ids]
        return ScoreMatrix(list(sample_ids), self.feature_ids, self.values[rows], self.imputed[rows])

    def imputed_cells(self) -> list[dict[str, str]]:
        rows, cols = np.nonzero(self.imputed)
        return [{"sample_id": self.sample_ids[r], "feature_id": self.feature_ids[c]} for r, c in zip(rows, cols)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", *self.feature_ids])
        for sid, row in zip(self.sample_ids, self.values):
            w.writerow([sid, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ScoreMatrix:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["sample_id"]:
            raise ArtifactError("score matrix CSV must start with a sample_id header")
        header, body = rows[0], rows[1:]
        try:
            values = np.array([[float(v) for v in r[1:]] for r in body], dtype=float)
        except ValueError as e:
            raise ArtifactError(f"corrupt score matrix: {e}") from None
        return cls([r[0] for r in body], header[1:], values.reshape(len(body), len(header) - 1))


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def labels_to_csv(sample_ids: Sequence[str], aspects: Sequence[str], Y: np.ndarray) -> str:
    return ScoreMatrix(sample_ids, aspects, Y).to_csv()


@dataclass
class AlignmentArtifact:
    tree: CriteriaTree
    models: dict[str, AggregatorModel]
    feature_ids: list[str]
    scores: ScoreMatrix
    labels: np.ndarray
    aspect_names: list[str]
    config: dict[str, Any]
    manifest: DatasetManifest
    provenance: dict[str, Any] = field(default_factory=dict)
    importances: dict[int, ImportanceTable] = field(default_factory=dict)

    @property
    def score_matrix_digest(self) -> str:
        return digest(self.scores.to_csv())

    @property
    def template_id(self) -> str:
        return self.manifest.template_id

    def validate(self) -> None:
        order = feature_order(self.tree)
        if order != self.feature_ids:
            raise ArtifactError("artifact feature order does not match its tree")
        for name, model in self.models.items():
            if model.feature_ids != order:
                raise ArtifactError(f"model {name!r} feature ids do not match the tree")
        covered = [a for m in self.models.values() for a in m.aspect_names]
        if sorted(covered) != sorted(self.aspect_names):
            raise ArtifactError("models do not cover the artifact's aspects exactly once")

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predicted aspect scores, columns in ``aspect_names`` order."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((X.shape[0], len(self.aspect_names)))
        for model in self.models.values():
            pred = model.predict(X)
            for j, a in enumerate(model.aspect_names):
                out[:, self.aspect_names.index(a)] = pred[:, j]
        return out


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def save_artifact(artifact: AlignmentArtifact, directory: str | Path, timestamp: str | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    artifact.validate()
    scores_csv = artifact.scores.to_csv()
    provenance = dict(artifact.provenance)
    provenance["score_matrix_digest"] = digest(scores_csv)
    provenance["created_at"] = timestamp or datetime.now(timezone.utc).isoformat()
    provenance["models"] = {g: f"model_{g}.json" for g in artifact.models}
    provenance["imputed_cells"] = artifact.scores.imputed_cells()
    (out / "tree.json").write_text(artifact.tree.to_json(), encoding="utf-8")
    for group, model in artifact.models.items():
        (out / f"model_{group}.json").write_text(model.to_json(), encoding="utf-8")
    (out / "scores.csv").write_text(scores_csv, encoding="utf-8")
    (out / "labels.csv").write_text(
        labels_to_csv(artifact.scores.sample_ids, artifact.aspect_names, artifact.labels), encoding="utf-8"
    )
    for layer, table in sorted(artifact.importances.items()):
        (out / f"importances_layer{layer}.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "provenance.json").write_text(_dump(provenance), encoding="utf-8")
    config = {"train": artifact.config, "manifest": artifact.manifest.to_dict()}
    (out / "config.json").write_text(_dump(config), encoding="utf-8")
    return out


def load_artifact(directory: str | Path) -> AlignmentArtifact:
    src = Path(directory)
    for name in BUNDLE_FILES:
        if not (src / name).is_file():
            raise ArtifactError(f"artifact bundle {src} is missing {name}")
    try:
        provenance = json.loads((src / "provenance.json").read_text(encoding="utf-8"))
        config = json.loads((src / "config.json").read_text(encoding="utf-8"))
        tree = CriteriaTree.from_json((src / "tree.json").read_text(encoding="utf-8"))
    except (json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"corrupt artifact bundle {src}: {e}") from None
    scores_csv = (src / "scores.csv").read_text(encoding="utf-8")
    if digest(scores_csv) != provenance.get("score_matrix_digest"):
        raise DigestMismatchError(f"scores.csv in {src} does not match the recorded digest")
    scores = ScoreMatrix.from_csv(scores_csv)
    labels = ScoreMatrix.from_csv((src / "labels.csv").read_text(encoding="utf-8"))
    models = {}
    for group, filename in provenance.get("models", {}).items():
        path = src / filename
        if not path.is_file():
            raise ArtifactError(f"artifact bundle {src} is missing {filename}")
        models[group] = AggregatorModel.from_json(path.read_text(encoding="utf-8"))
    if not models:
        raise ArtifactError(f"artifact bundle {src} lists no models")
    imputed = np.zeros(scores.values.shape, dtype=bool)
    for cell in provenance.get("imputed_cells", []):
        imputed[scores.sample_ids.index(cell["sample_id"]), scores.feature_ids.index(cell["feature_id"])] = True
    scores.imputed = imputed
    importances = {}
    for path in sorted(src.glob("importances_layer*.csv")):
        layer = int(path.stem.removeprefix("importances_layer"))
        importances[layer] = ImportanceTable.from_csv(path.read_text(encoding="utf-8"))
    artifact = AlignmentArtifact(
        tree=tree,
        models=models,
        feature_ids=feature_order(tree),
        scores=scores,
        labels=labels.values,
        aspect_names=labels.feature_ids,
        config=config["train"],
        manifest=DatasetManifest.from_dict(config["manifest"]),
        provenance=provenance,
        importances=importances,
    )
    if scores.feature_ids != artifact.feature_ids:
        raise ArtifactError("scores.csv columns do not match the tree's feature order")
    artifact.validate()
    return artifact
