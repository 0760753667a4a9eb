"""Synthetic evaluation tasks with a planted criteria hierarchy.

Every sample gets an integer quality in [1, 5] for each latent criterion.
Leaf qualities are uniform draws; an internal criterion's quality is the
rounded mean of its children's underlying draws, so coarse criteria carry a
blurred copy of the fine-grained signal. Human labels are a planted linear
function of the qualities plus Gaussian noise, clipped to [1, 5]. The mock
backend scores (sample, criterion) as the quality plus optional scorer noise
and decomposes each latent criterion into its planted children.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .artifact import AlignmentArtifact
from .backend import BackendConfig
from .criteria import feature_order
from .datasets import DatasetManifest, EvalSample
from .errors import ValidationError
from .metaeval import pearson

WEIGHT_MODES = ("deep", "dense", "explicit")


@dataclass
class WorldConfig:
    n_aspects: int = 2
    branching: tuple[int, ...] = (3, 3)
    weight_mode: str = "deep"
    weights: dict[str, float | list[float]] | None = None
    default_weight: float = 0.0
    noise_sigma: float = 0.3
    scorer_noise: float = 0.0
    normalize: bool = True

    def __post_init__(self) -> None:
        self.branching = tuple(int(b) for b in self.branching)
        if self.n_aspects < 1:
            raise ValidationError("n_aspects must be >= 1")
        if any(b < 1 for b in self.branching):
            raise ValidationError("branching factors must be >= 1")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValidationError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.noise_sigma < 0 or self.scorer_noise < 0:
            raise ValidationError("noise levels must be >= 0")
        if self.weight_mode == "explicit" and not self.weights:
            raise ValidationError("explicit weight mode needs a weights table")

    @property
    def n_layers(self) -> int:
        return 1 + len(self.branching)


@dataclass
class LatentCriterion:
    name: str
    layer: int
    parent: str | None
    children: list[str] = field(default_factory=list)

    @property
    def definition(self) -> str:
        return f"How well the text satisfies planted criterion {self.name}."


@dataclass
class PlantedWorld:
    criteria: list[LatentCriterion]
    aspect_names: list[str]
    weights: np.ndarray  # (aspects, criteria), effective label weights
    intercept: float
    noise_sigma: float
    scorer_noise: float
    seed: int
    sample_ids: list[str]
    qualities: np.ndarray  # (samples, criteria) integers in [1, 5]
    scorer_replies: np.ndarray  # (samples, criteria) integers in [1, 5]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.criteria]

    def weight(self, name: str, aspect: str | int) -> float:
        a = aspect if isinstance(aspect, int) else self.aspect_names.index(aspect)
        return float(self.weights[a, self.names.index(name)])

    def label_signal(self) -> np.ndarray:
        return self.intercept + (self.qualities - 3.0) @ self.weights.T

    def correlation_ceiling(self) -> np.ndarray:
        """Best achievable Pearson per aspect: sd(signal) / sqrt(sd(signal)^2 + noise^2)."""
        sd = self.label_signal().std(axis=0)
        return sd / np.sqrt(sd ** 2 + self.noise_sigma ** 2)

    def to_dict(self) -> dict[str, Any]:
        return {
            "criteria": [
                {"name": c.name, "layer": c.layer, "parent": c.parent, "children": c.children} for c in self.criteria
            ],
            "aspect_names": self.aspect_names,
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "noise_sigma": self.noise_sigma,
            "scorer_noise": self.scorer_noise,
            "seed": self.seed,
        }


def _latent_tree(config: WorldConfig) -> list[LatentCriterion]:
    out: list[LatentCriterion] = []
    frontier = []
    for i in range(1, config.n_aspects + 1):
        c = LatentCriterion(f"aspect_{i}", 1, None)
        out.append(c)
        frontier.append(c)
    for depth, branch in enumerate(config.branching, start=2):
        nxt = []
        for parent in frontier:
            for k in range(1, branch + 1):
                c = LatentCriterion(f"{parent.name}.{k}", depth, parent.name)
                parent.children.append(c.name)
                out.append(c)
                nxt.append(c)
        frontier = nxt
    # canonical order: layer, then parent-major
    return sorted(out, key=lambda c: (c.layer, [int(p) for p in c.name.split("_")[1].split(".")]))


def _subtree_of(name: str, aspect: str) -> bool:
    return name == aspect or name.startswith(aspect + ".")


def _planted_weights(config: WorldConfig, criteria: list[LatentCriterion], aspects: list[str],
                     rng: np.random.Generator) -> np.ndarray:
    W = np.zeros((len(aspects), len(criteria)))
    deepest = config.n_layers
    for a, aspect in enumerate(aspects):
        for j, c in enumerate(criteria):
            if config.weight_mode == "explicit":
                w = config.weights.get(c.name, config.default_weight)
                W[a, j] = w[a] if isinstance(w, (list, tuple)) else w
            elif config.weight_mode == "dense":
                W[a, j] = rng.normal()
            elif _subtree_of(c.name, aspect) and c.layer >= 2:
                # one "hot" branch per aspect carries most of the signal at the deepest layer
                hot = c.name.startswith(f"{aspect}.1")
                if c.layer == deepest:
                    W[a, j] = rng.uniform(1.0, 2.0) if hot or deepest == 2 else 0.1
                else:
                    W[a, j] = 0.0 if hot else rng.uniform(0.2, 0.4)
    if config.normalize:
        scale = np.abs(W).sum(axis=1, keepdims=True)
        scale[scale == 0] = 1.0
        W = W / scale
    return W


def generate(
    config: WorldConfig, n_samples: int, seed: int = 0
) -> tuple[DatasetManifest, list[EvalSample], PlantedWorld, BackendConfig]:
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    criteria = _latent_tree(config)
    aspects = [c.name for c in criteria if c.layer == 1]
    index = {c.name: j for j, c in enumerate(criteria)}

    raw = np.zeros((n_samples, len(criteria)))
    for c in sorted(criteria, key=lambda c: -c.layer):
        j = index[c.name]
        if c.children:
            raw[:, j] = raw[:, [index[k] for k in c.children]].mean(axis=1)
        else:
            raw[:, j] = rng.uniform(1.0, 5.0, size=n_samples)
    q = np.clip(np.rint(raw), 1, 5)

    W = _planted_weights(config, criteria, aspects, rng)
    # With normalize on, 3 + W(q - 3) stays inside [1, 5] before noise.
    intercept = 3.0
    signal = intercept + (q - 3.0) @ W.T
    noise = rng.normal(0.0, config.noise_sigma, size=signal.shape) if config.noise_sigma > 0 else 0.0
    labels = np.clip(signal + noise, 1.0, 5.0)

    scorer_noise = rng.normal(0.0, config.scorer_noise, size=q.shape) if config.scorer_noise > 0 else 0.0
    replies = np.clip(np.rint(q + scorer_noise), 1, 5).astype(int)

    sample_ids = [f"s{i:05d}" for i in range(n_samples)]
    samples = [
        EvalSample(
            sample_id=sid,
            group_id=f"g{i // 4:05d}",
            context=f"Synthetic source document {i // 4}.",
            candidate=f"Synthetic candidate {sid}.",
            labels={a: float(labels[i, k]) for k, a in enumerate(aspects)},
        )
        for i, sid in enumerate(sample_ids)
    ]
    manifest = DatasetManifest(
        name="synthetic",
        task_description="synthetic text quality",
        task_background="Synthetic texts whose quality follows a planted hierarchy of criteria.",
        aspects={a: criteria[index[a]].definition for a in aspects},
        template_id="summarization",
    )
    world = PlantedWorld(
        criteria=criteria,
        aspect_names=aspects,
        weights=W,
        intercept=intercept,
        noise_sigma=config.noise_sigma,
        scorer_noise=config.scorer_noise,
        seed=seed,
        sample_ids=sample_ids,
        qualities=q,
        scorer_replies=replies,
    )
    fixtures = build_fixtures(world)
    backend = BackendConfig(kind="mock", model_name="synthetic-mock", seed=seed, fixtures=fixtures)
    return manifest, samples, world, backend


def build_fixtures(world: PlantedWorld) -> dict[str, Any]:
    by_name = {c.name: c for c in world.criteria}
    decompositions = {
        c.name: [[k, by_name[k].definition] for k in c.children] for c in world.criteria if c.children
    }
    names = world.names
    scores = {
        sid: {name: int(world.scorer_replies[i, j]) for j, name in enumerate(names)}
        for i, sid in enumerate(world.sample_ids)
    }
    return {"decompositions": decompositions, "scores": scores}


@dataclass
class RecoveryReport:
    cosine: dict[str, float] | None
    pruning: list[dict[str, Any]]
    test_pearson: dict[str, float] | None

    @property
    def pruning_ok(self) -> bool:
        return all(p["match"] for p in self.pruning)

    @property
    def mean_test_pearson(self) -> float | None:
        if not self.test_pearson:
            return None
        return float(np.mean(list(self.test_pearson.values())))

    def to_dict(self) -> dict[str, Any]:
        return {
            "cosine": self.cosine,
            "pruning": self.pruning,
            "pruning_ok": self.pruning_ok,
            "test_pearson": self.test_pearson,
            "mean_test_pearson": self.mean_test_pearson,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def planted_top_k(world: PlantedWorld, candidates: Sequence[str], k: int) -> list[str]:
    """Candidates ranked by planted signal: mean over aspects of the summed
    |weight| of the candidate and all of its latent descendants."""
    names = world.names
    mag = {}
    for n in candidates:
        cols = [j for j, m in enumerate(names) if m == n or m.startswith(n + ".")]
        mag[n] = float(np.abs(world.weights[:, cols]).sum(axis=1).mean())
    order = {n: i for i, n in enumerate(candidates)}
    return sorted(candidates, key=lambda n: (-mag[n], order[n]))[:k]


def recovery_check(
    artifact: AlignmentArtifact,
    world: PlantedWorld,
    test_predictions: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
) -> RecoveryReport:
    """Compare a trained artifact against the world it was trained on.

    Reports (a) per-aspect cosine between fitted linear weights and the planted
    weights over the artifact's criteria (None unless every model is linear),
    (b) whether each pruning step picked the criteria with the largest planted
    weights among its candidates, and (c) per-aspect test Pearson when test
    predictions and labels are supplied.
    """
    tree = artifact.tree
    feats = feature_order(tree)
    names = [tree.get(f).name for f in feats]
    cosine = None
    if all(m.kind == "linear" for m in artifact.models.values()):
        cosine = {}
        for model in artifact.models.values():
            W_fit = model.parameters["weights"]
            for a_idx, aspect in enumerate(model.aspect_names):
                planted = np.array([world.weight(n, aspect) for n in names])
                cosine[aspect] = _cosine(W_fit[a_idx], planted)

    pruning = []
    k = int(artifact.config.get("prune_k", 0))
    for it in artifact.provenance.get("iterations", []):
        layer = it["layer"]
        if layer < 2 or layer >= tree.max_layers:
            continue
        candidates = [tree.get(f).name for f in feats if tree.get(f).layer == layer]
        selected = [tree.get(f).name for f in it["selected"]]
        expected = planted_top_k(world, candidates, k)
        pruning.append({"layer": layer, "selected": selected, "expected": expected,
                        "match": sorted(selected) == sorted(expected)})

    test_pearson = None
    if test_predictions is not None and test_labels is not None:
        test_pearson = {
            a: pearson(test_predictions[:, j], test_labels[:, j]) for j, a in enumerate(artifact.aspect_names)
        }
    return RecoveryReport(cosine, pruning, test_pearson)


def world_config_from_dict(data: dict[str, Any]) -> WorldConfig:
    known = set(WorldConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown world options: {sorted(unknown)}")
    return WorldConfig(**data)
