"""Saliency of criterion scores under a trained aggregator, and top-k pruning."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregators import AggregatorModel, TrainingSet, evaluate_mse
from .errors import DimensionMismatchError, ValidationError

METHODS = ("permutation", "shapley")
CSV_FIELDS = ("feature_id", "aspect", "method", "importance", "repeats", "seed")


@dataclass
class ImportanceTable:
    feature_ids: list[str]
    aspect_names: list[str]
    values: np.ndarray  # (features, aspects)
    method: str
    repeats: int
    seed: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.feature_ids), len(self.aspect_names)):
            raise DimensionMismatchError("importance values do not cover every feature x aspect pair")
        if self.method not in METHODS:
            raise ValidationError(f"unknown attribution method {self.method!r}")

    def get(self, feature_id: str, aspect: str) -> float:
        return float(self.values[self.feature_ids.index(feature_id), self.aspect_names.index(aspect)])

    def rows(self) -> list[dict[str, object]]:
        return [
            {
                "feature_id": f,
                "aspect": a,
                "method": self.method,
                "importance": float(self.values[i, j]),
                "repeats": self.repeats,
                "seed": self.seed,
            }
            for i, f in enumerate(self.feature_ids)
            for j, a in enumerate(self.aspect_names)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({**row, "importance": repr(row["importance"])})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ImportanceTable:
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValidationError("empty importance table")
        features = list(dict.fromkeys(r["feature_id"] for r in rows))
        aspects = list(dict.fromkeys(r["aspect"] for r in rows))
        values = np.full((len(features), len(aspects)), np.nan)
        for r in rows:
            values[features.index(r["feature_id"]), aspects.index(r["aspect"])] = float(r["importance"])
        if np.isnan(values).any():
            raise ValidationError("importance table is incomplete")
        return cls(features, aspects, values, rows[0]["method"], int(rows[0]["repeats"]), int(rows[0]["seed"]))

    @classmethod
    def concat_aspects(cls, tables: Sequence[ImportanceTable]) -> ImportanceTable:
        """Join tables computed on disjoint aspect groups over the same features."""
        first = tables[0]
        for t in tables[1:]:
            if t.feature_ids != first.feature_ids:
                raise DimensionMismatchError("tables disagree on feature ids")
        return cls(
            list(first.feature_ids),
            [a for t in tables for a in t.aspect_names],
            np.concatenate([t.values for t in tables], axis=1),
            first.method,
            first.repeats,
            first.seed,
        )


def _check(model: AggregatorModel, data: TrainingSet) -> None:
    if data.feature_ids != model.feature_ids or data.aspect_names != model.aspect_names:
        raise DimensionMismatchError("data does not match the model's features/aspects")


def _feature_rng(seed: int, feature_id: str, repeat: int) -> np.random.Generator:
    # keyed on the feature's id so results do not depend on processing order
    return np.random.default_rng([seed, zlib.crc32(feature_id.encode("utf-8")), repeat])


def permutation_importance(
    model: AggregatorModel,
    data: TrainingSet,
    repeats: int = 10,
    seed: int = 0,
    features: Iterable[str] | None = None,
) -> ImportanceTable:
    """Mean increase in per-aspect MSE when one feature column is shuffled."""
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    _check(model, data)
    baseline = evaluate_mse(model, data)
    order = list(features) if features is not None else data.feature_ids
    values = np.zeros((len(data.feature_ids), len(data.aspect_names)))
    for fid in order:
        j = data.feature_ids.index(fid)
        deltas = np.zeros((repeats, len(data.aspect_names)))
        for r in range(repeats):
            perm = _feature_rng(seed, fid, r).permutation(data.n_samples)
            Xp = data.X.copy()
            Xp[:, j] = data.X[perm, j]
            mse = np.mean((model.predict(Xp) - data.Y) ** 2, axis=0)
            deltas[r] = mse - baseline
        values[j] = deltas.mean(axis=0)
    return ImportanceTable(list(data.feature_ids), list(data.aspect_names), values, "permutation", repeats, seed)


def shapley_values(
    model: AggregatorModel,
    X_explain: np.ndarray,
    baseline: np.ndarray,
    n_samples: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Monte-Carlo Shapley values, shape (rows, features, aspects).

    Absent features take the ``baseline`` value. Orderings are drawn in
    antithetic pairs (an ordering and its reverse). For every ordering the
    marginal contributions telescope, so ``phi.sum(axis=1) + f(baseline)``
    equals ``f(x)`` exactly.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    X_explain = np.atleast_2d(np.asarray(X_explain, dtype=float))
    baseline = np.asarray(baseline, dtype=float)
    n, d = X_explain.shape
    p = len(model.aspect_names)
    rng = np.random.default_rng(seed)
    phi = np.zeros((n, d, p))
    base_pred = model.predict(np.tile(baseline, (n, 1)))
    orderings: list[np.ndarray] = []
    while len(orderings) < n_samples:
        perm = rng.permutation(d)
        orderings.append(perm)
        if len(orderings) < n_samples:
            orderings.append(perm[::-1].copy())
    for perm in orderings:
        current = np.tile(baseline, (n, 1))
        prev = base_pred
        for j in perm:
            current[:, j] = X_explain[:, j]
            pred = model.predict(current)
            phi[:, j, :] += pred - prev
            prev = pred
    return phi / len(orderings)


def shapley_sampled(
    model: AggregatorModel,
    data: TrainingSet,
    background_size: int | None = None,
    n_samples: int = 100,
    seed: int = 0,
) -> ImportanceTable:
    """Global Shapley importance: mean |phi| over the rows of ``data``.

    The baseline is the feature mean of ``background_size`` rows drawn from
    ``data`` (all rows when None).
    """
    _check(model, data)
    if background_size is None:
        background_size = data.n_samples
    if not 1 <= background_size <= data.n_samples:
        raise ValidationError(f"background_size must lie in [1, {data.n_samples}]")
    rng = np.random.default_rng([seed, 1])
    rows = np.sort(rng.choice(data.n_samples, size=background_size, replace=False))
    baseline = data.X[rows].mean(axis=0)
    phi = shapley_values(model, data.X, baseline, n_samples=n_samples, seed=seed)
    values = np.abs(phi).mean(axis=0)
    return ImportanceTable(list(data.feature_ids), list(data.aspect_names), values, "shapley", n_samples, seed)


def aggregate_importance(table: ImportanceTable) -> dict[str, float]:
    return {f: float(table.values[i].mean()) for i, f in enumerate(table.feature_ids)}


def select_top_k(
    candidates: Iterable[str],
    scores: Mapping[str, float],
    k: int,
    order: Sequence[str] | None = None,
) -> list[str]:
    """The k best candidates by score; ties go to the one earlier in ``order``.

    ``order`` is the canonical feature order; when omitted, candidate order is used.
    """
    if k < 0:
        raise ValidationError("k must be >= 0")
    candidates = list(dict.fromkeys(candidates))
    missing = [c for c in candidates if c not in scores]
    if missing:
        raise ValidationError(f"candidates without scores: {missing}")
    rank = {c: i for i, c in enumerate(order if order is not None else candidates)}
    fallback = len(rank)
    ranked = sorted(candidates, key=lambda c: (-scores[c], rank.get(c, fallback)))
    return ranked[:k]
