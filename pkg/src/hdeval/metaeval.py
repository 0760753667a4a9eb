"""Segment-level human correlation, ranking accuracy and ablation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .artifact import AlignmentArtifact, ScoreMatrix
from .criteria import feature_order
from .errors import DimensionMismatchError, UndefinedCorrelationError, ValidationError
from .trainer import predict_groups, refit

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "drop_layer3", "drop_layers23", "drop_layers123", "mean_aggregator")
ABLATION_LABELS = {
    "full": "HD-Eval",
    "drop_layer3": "w/o Layer 3",
    "drop_layers23": "w/o Layer 2,3",
    "drop_layers123": "w/o Layer 1,2,3",
    "mean_aggregator": "w/o Aggregator",
}


def _vectors(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.shape != y.shape:
        raise DimensionMismatchError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValidationError("correlation needs at least 2 points")
    return x, y


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    x, y = _vectors(a, b)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rankdata(a: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(a, dtype=float).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and xs[stop] == xs[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    x, y = _vectors(a, b)
    return pearson(rankdata(x), rankdata(y))


@dataclass
class CorrelationCell:
    pearson_r: float | None
    spearman_rho: float | None
    n: int


def _mean_defined(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class CorrelationReport:
    aspect_names: list[str]
    cells: dict[str, CorrelationCell]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def average_pearson(self) -> float | None:
        return _mean_defined([self.cells[a].pearson_r for a in self.aspect_names])

    @property
    def average_spearman(self) -> float | None:
        return _mean_defined([self.cells[a].spearman_rho for a in self.aspect_names])

    def flat(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for a in self.aspect_names:
            out[f"{a}_r"] = self.cells[a].pearson_r
            out[f"{a}_rho"] = self.cells[a].spearman_rho
        out["average_r"] = self.average_pearson
        out["average_rho"] = self.average_spearman
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "aspects": {
                a: {"pearson_r": c.pearson_r, "spearman_rho": c.spearman_rho, "n": c.n}
                for a, c in self.cells.items()
            },
            "average": {"pearson_r": self.average_pearson, "spearman_rho": self.average_spearman},
            "metadata": self.metadata,
        }


def correlation_report(
    predictions: Mapping[str, Sequence[float]] | np.ndarray,
    labels: Mapping[str, Sequence[float]] | np.ndarray,
    aspect_names: Sequence[str],
    prediction_ids: Sequence[str] | None = None,
    label_ids: Sequence[str] | None = None,
    metadata: dict[str, Any] | None = None,
) -> CorrelationReport:
    """Per-aspect Pearson/Spearman between predictions and labels.

    Inputs are (samples x aspects) arrays or {aspect: vector} maps. When ids
    are given for both sides they must list the same samples in the same order.
    Undefined coefficients (a constant column) are stored as None.
    """
    if prediction_ids is not None and label_ids is not None and list(prediction_ids) != list(label_ids):
        raise DimensionMismatchError("prediction and label sample ids are not aligned")
    pred = _as_columns(predictions, aspect_names)
    gold = _as_columns(labels, aspect_names)
    cells = {}
    for a in aspect_names:
        x, y = pred[a], gold[a]
        if x.size != y.size:
            raise DimensionMismatchError(f"aspect {a}: {x.size} predictions vs {y.size} labels")
        if x.size < 2:
            raise ValidationError("correlation report needs at least 2 samples")
        cells[a] = CorrelationCell(_safe(pearson, x, y, a), _safe(spearman, x, y, a), int(x.size))
    return CorrelationReport(list(aspect_names), cells, dict(metadata or {}))


def _safe(fn, x: np.ndarray, y: np.ndarray, aspect: str) -> float | None:
    try:
        return fn(x, y)
    except UndefinedCorrelationError:
        log.warning("correlation undefined for aspect %s (constant input)", aspect)
        return None


def _as_columns(data: Any, aspects: Sequence[str]) -> dict[str, np.ndarray]:
    if isinstance(data, Mapping):
        return {a: np.asarray(data[a], dtype=float).ravel() for a in aspects}
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[1] != len(aspects):
        raise DimensionMismatchError(f"{arr.shape[1]} columns for {len(aspects)} aspects")
    return {a: arr[:, j] for j, a in enumerate(aspects)}


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.3f}"


def format_reports(rows: Sequence[tuple[str, CorrelationReport]], fmt: str = "table") -> str:
    """Render one or more reports; each row is (label, report)."""
    if not rows:
        return ""
    aspects = rows[0][1].aspect_names
    if fmt == "json":
        return json.dumps({label: rep.to_dict() for label, rep in rows}, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = list(rows[0][1].flat())
        w.writerow(["system", *keys])
        for label, rep in rows:
            flat = rep.flat()
            w.writerow([label, *("" if flat[k] is None else repr(flat[k]) for k in keys)])
        return buf.getvalue()
    if fmt != "table":
        raise ValidationError(f"unknown report format {fmt!r}")
    groups = [a.capitalize() for a in aspects] + ["Average"]
    label_w = max(len("Metrics"), *(len(label) for label, _ in rows))
    col_w = max(13, *(len(g) for g in groups))
    head1 = "Metrics".ljust(label_w) + "".join(f"  {g:^{col_w}}" for g in groups)
    sub = f"{'r':>6} {'rho':>6}".center(col_w)
    head2 = " " * label_w + "".join(f"  {sub}" for _ in groups)
    lines = [head1, head2, "-" * len(head1)]
    for label, rep in rows:
        cells = [(rep.cells[a].pearson_r, rep.cells[a].spearman_rho) for a in aspects]
        cells.append((rep.average_pearson, rep.average_spearman))
        body = "".join(f"  {(_fmt(r).rjust(6) + ' ' + _fmt(p).rjust(6)).center(col_w)}" for r, p in cells)
        lines.append(label.ljust(label_w) + body)
    return "\n".join(lines) + "\n"


def ranking_accuracy(
    predictions: Mapping[str, float],
    labels: Mapping[str, float],
    groups: Mapping[str, Sequence[str]],
) -> float:
    """Fraction of groups whose predicted ordering reproduces the human ordering.

    Two candidates are ordered consistently when the sign of their prediction
    difference equals the sign of their label difference, so a tie in the
    predictions only counts as a match if the labels tie too.
    """
    matched = 0
    counted = 0
    for gid, members in groups.items():
        members = sorted(members)
        if len(members) < 2:
            log.warning("skipping group %s with fewer than 2 candidates", gid)
            continue
        counted += 1
        ok = True
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = members[i], members[j]
                dp = np.sign(predictions[a] - predictions[b])
                dl = np.sign(labels[a] - labels[b])
                if dp != dl:
                    ok = False
                    break
            if not ok:
                break
        matched += ok
    if counted == 0:
        raise ValidationError("no group has at least 2 candidates")
    return matched / counted


# --- ablations -------------------------------------------------------------


def _features_up_to(artifact: AlignmentArtifact, layer: int) -> list[str]:
    return [f for f in feature_order(artifact.tree) if artifact.tree.get(f).layer <= layer]


def ablation_predictions(artifact: AlignmentArtifact, test_scores: ScoreMatrix, mode: str) -> np.ndarray:
    if mode not in ABLATION_MODES:
        raise ValidationError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    feats = feature_order(artifact.tree)
    if mode == "full":
        return artifact.predict(test_scores.select(feats).values)
    if mode == "drop_layers123":
        cols = []
        for aspect in artifact.aspect_names:
            hits = [n for n in artifact.tree.find(aspect, layer=1)] or [
                n for n in artifact.tree.nodes if n.layer == 1 and n.name.lower() == aspect.lower()
            ]
            if not hits:
                raise ValidationError(f"no layer-1 criterion named {aspect!r} to score it directly")
            cols.append(test_scores.column(hits[0].id))
        return np.column_stack(cols)
    if mode == "mean_aggregator":
        models = refit(artifact, feats, kind="mean_baseline")
        return predict_groups(models, test_scores.select(feats).values, artifact.aspect_names)
    keep = _features_up_to(artifact, 2 if mode == "drop_layer3" else 1)
    if keep == feats:
        return artifact.predict(test_scores.select(feats).values)
    models = refit(artifact, keep)
    return predict_groups(models, test_scores.select(keep).values, artifact.aspect_names)


def run_ablation(
    artifact: AlignmentArtifact,
    test_scores: ScoreMatrix,
    test_labels: np.ndarray,
    mode: str,
) -> CorrelationReport:
    """Test-split correlations after masking layers or swapping in the mean baseline.

    Layer removal masks columns of the stored train matrix and refits; nothing
    is rescored.
    """
    pred = ablation_predictions(artifact, test_scores, mode)
    return correlation_report(
        pred, test_labels, artifact.aspect_names,
        metadata={"mode": mode, "artifact_digest": artifact.score_matrix_digest, "split": "test"},
    )


def compare_aggregators(
    artifact: AlignmentArtifact,
    test_scores: ScoreMatrix,
    test_labels: np.ndarray,
    kinds: Sequence[str],
) -> list[tuple[str, CorrelationReport]]:
    feats = feature_order(artifact.tree)
    rows = []
    for kind in kinds:
        models = refit(artifact, feats, kind=kind)
        pred = predict_groups(models, test_scores.select(feats).values, artifact.aspect_names)
        rows.append((kind, correlation_report(pred, test_labels, artifact.aspect_names, metadata={"aggregator": kind})))
    return rows
