"""Annotated corpora: manifests, line-delimited samples, and group-atomic splits."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DatasetError

TEMPLATE_IDS = ("conversation", "summarization", "data_to_text")

_SAMPLE_FIELDS = ("sample_id", "group_id", "context", "fact", "candidate", "labels")


@dataclass(frozen=True)
class EvalSample:
    sample_id: str
    context: str
    candidate: str
    labels: dict[str, float]
    group_id: str | None = None
    fact: str | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def group(self) -> str:
        return self.group_id if self.group_id is not None else self.sample_id

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"sample_id": self.sample_id}
        if self.group_id is not None:
            out["group_id"] = self.group_id
        out["context"] = self.context
        if self.fact is not None:
            out["fact"] = self.fact
        out["candidate"] = self.candidate
        out["labels"] = dict(self.labels)
        return out


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    task_description: str
    aspects: dict[str, str]
    task_background: str = ""
    aspect_groups: dict[str, list[str]] | None = None
    template_id: str = "summarization"

    def __post_init__(self) -> None:
        if not self.aspects:
            raise DatasetError("manifest declares no aspects")
        if self.template_id not in TEMPLATE_IDS:
            raise DatasetError(f"unknown template_id {self.template_id!r}; expected one of {TEMPLATE_IDS}")
        if self.aspect_groups is not None:
            check_partition(self.aspect_groups, self.aspect_names)

    @property
    def aspect_names(self) -> list[str]:
        return list(self.aspects)

    def groups(self) -> dict[str, list[str]]:
        if self.aspect_groups:
            return {g: list(a) for g, a in self.aspect_groups.items()}
        return {"all": self.aspect_names}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "task_description": self.task_description,
            "task_background": self.task_background,
            "aspects": dict(self.aspects),
            "aspect_groups": self.aspect_groups,
            "template_id": self.template_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DatasetManifest:
        try:
            return cls(
                name=str(data["name"]),
                task_description=str(data["task_description"]),
                task_background=str(data.get("task_background", "")),
                aspects={str(k): str(v) for k, v in dict(data["aspects"]).items()},
                aspect_groups=data.get("aspect_groups"),
                template_id=str(data.get("template_id", "summarization")),
            )
        except KeyError as e:
            raise DatasetError(f"manifest missing field {e.args[0]!r}") from None


def check_partition(groups: dict[str, Sequence[str]], aspects: Sequence[str]) -> None:
    flat = [a for g in groups.values() for a in g]
    if sorted(flat) != sorted(aspects) or len(set(flat)) != len(flat):
        raise DatasetError(f"aspect groups {dict(groups)} do not partition aspects {list(aspects)}")


def _sample_from_obj(obj: Any, aspects: Sequence[str] | None, line: int | None) -> EvalSample:
    if not isinstance(obj, dict):
        raise DatasetError("expected a JSON object", line)
    for key in ("sample_id", "context", "candidate", "labels"):
        if key not in obj:
            raise DatasetError(f"missing field {key!r}", line)
    labels = obj["labels"]
    if not isinstance(labels, dict):
        raise DatasetError("labels must be an object", line)
    try:
        labels = {str(k): float(v) for k, v in labels.items()}
    except (TypeError, ValueError):
        raise DatasetError("label values must be numeric", line) from None
    if any(not math.isfinite(v) for v in labels.values()):
        raise DatasetError("label values must be finite", line)
    if aspects is not None and set(labels) != set(aspects):
        raise DatasetError(
            f"aspect mismatch: labels {sorted(labels)} vs manifest {sorted(aspects)}", line
        )
    return EvalSample(
        sample_id=str(obj["sample_id"]),
        group_id=None if obj.get("group_id") is None else str(obj["group_id"]),
        context=str(obj["context"]),
        fact=None if obj.get("fact") is None else str(obj["fact"]),
        candidate=str(obj["candidate"]),
        labels=labels,
        extra={k: v for k, v in obj.items() if k not in _SAMPLE_FIELDS},
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest {path} is not valid JSON: {e}") from None
    return DatasetManifest.from_dict(data)


def load_samples(path: str | Path, aspects: Sequence[str] | None = None) -> list[EvalSample]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"data file not found: {path}")
    samples: list[EvalSample] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"malformed JSON ({e.msg})", lineno) from None
            sample = _sample_from_obj(obj, aspects, lineno)
            if sample.sample_id in seen:
                raise DatasetError(f"duplicate sample_id {sample.sample_id!r}", lineno)
            seen.add(sample.sample_id)
            samples.append(sample)
    return samples


def load_dataset(manifest_path: str | Path, data_path: str | Path) -> tuple[DatasetManifest, list[EvalSample]]:
    manifest = load_manifest(manifest_path)
    return manifest, load_samples(data_path, manifest.aspect_names)


def write_dataset(
    manifest: DatasetManifest,
    samples: Iterable[EvalSample],
    manifest_path: str | Path,
    data_path: str | Path,
) -> None:
    Path(manifest_path).write_text(json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    with Path(data_path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def _shuffled_groups(samples: Sequence[EvalSample], seed: int) -> list[list[EvalSample]]:
    groups: dict[str, list[EvalSample]] = {}
    for s in samples:
        groups.setdefault(s.group, []).append(s)
    keys = sorted(groups)
    random.Random(seed).shuffle(keys)
    return [groups[k] for k in keys]


def split(
    samples: Sequence[EvalSample], test_fraction: float, seed: int
) -> tuple[list[EvalSample], list[EvalSample]]:
    """Seeded group-atomic train/test split; ``test_fraction`` counts groups."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    groups = _shuffled_groups(samples, seed)
    n_test = int(round(test_fraction * len(groups)))
    if len(groups) >= 2:
        n_test = min(max(n_test, 1), len(groups) - 1)
    test_keys = {g[0].group for g in groups[:n_test]}
    train = [s for s in samples if s.group not in test_keys]
    test = [s for s in samples if s.group in test_keys]
    return train, test


def subsample_train(samples: Sequence[EvalSample], fraction: float, seed: int) -> list[EvalSample]:
    """Take ceil(fraction * n) samples, walking whole groups in seeded order.

    Only the last group visited can be cut short.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(samples)
    target = math.ceil(fraction * len(samples) - 1e-9)
    picked: set[str] = set()
    for group in _shuffled_groups(samples, seed):
        for s in group:
            if len(picked) == target:
                break
            picked.add(s.sample_id)
    return [s for s in samples if s.sample_id in picked]


def labels_matrix(samples: Sequence[EvalSample], aspects: Sequence[str]) -> np.ndarray:
    return np.array([[s.labels[a] for a in aspects] for s in samples], dtype=float).reshape(len(samples), len(aspects))
