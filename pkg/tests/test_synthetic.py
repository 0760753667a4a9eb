import numpy as np
import pytest

from hdeval.backend import make_backend, score
from hdeval.criteria import ROOT_ID, attach_children, new_tree
from hdeval.datasets import labels_matrix, split
from hdeval.errors import ValidationError
from hdeval.synthetic import WorldConfig, generate, planted_top_k, recovery_check
from hdeval.trainer import TrainConfig, apply, refit, train
from oracles import least_squares


def _run(wc, n, seed, cfg):
    manifest, samples, world, backend = generate(wc, n, seed=seed)
    train_s, test_s = split(samples, 0.5, seed)
    art = train(cfg, manifest, train_s, backend)
    pred, matrix = apply(art, test_s, backend)
    return art, world, pred, matrix, labels_matrix(test_s, art.aspect_names)


def test_noiseless_labels_follow_weights():
    m, samples, world, _ = generate(WorldConfig(branching=(2,), noise_sigma=0.0, weight_mode="dense"), 50, seed=1)
    Y = labels_matrix(samples, m.aspect_names)
    np.testing.assert_allclose(Y, 3.0 + (world.qualities - 3.0) @ world.weights.T, atol=1e-12)
    W, b = least_squares(world.qualities, Y)
    np.testing.assert_allclose(W, world.weights, atol=1e-9)


def test_generation_is_deterministic():
    a = generate(WorldConfig(), 30, seed=4)
    b = generate(WorldConfig(), 30, seed=4)
    assert [s.to_dict() for s in a[1]] == [s.to_dict() for s in b[1]]
    assert a[2].to_dict() == b[2].to_dict()
    assert a[3].fixtures == b[3].fixtures
    c = generate(WorldConfig(), 30, seed=5)
    assert [s.labels for s in c[1]] != [s.labels for s in a[1]]


def test_qualities_are_integer_scores():
    _, _, world, _ = generate(WorldConfig(scorer_noise=0.7), 200, seed=0)
    for arr in (world.qualities, world.scorer_replies):
        assert set(np.unique(arr)) <= {1, 2, 3, 4, 5}
    assert (world.scorer_replies != world.qualities).any()


def test_mock_answers_every_cell_offline():
    manifest, samples, world, backend_cfg = generate(WorldConfig(branching=(2,)), 500, seed=0)
    assert len(world.criteria) == 6
    backend = make_backend(backend_cfg)
    tree = attach_children(new_tree(manifest.task_description, 2, 4), ROOT_ID, list(manifest.aspects.items()))
    for parent in ("1", "2"):
        name = tree.get(parent).name
        kids = backend_cfg.fixtures["decompositions"][name]
        tree = attach_children(tree, parent, [tuple(k) for k in kids])
    answered = 0
    for i, s in enumerate(samples):
        for j, c in enumerate(world.criteria):
            node = tree.find(c.name)[0]
            assert score(backend, s, node, tree, manifest.template_id).value == world.scorer_replies[i, j]
            answered += 1
    assert answered == 3000


def test_invalid_configs():
    for bad in (dict(n_aspects=0), dict(branching=(0,)), dict(weight_mode="x"), dict(noise_sigma=-1),
                dict(weight_mode="explicit")):
        with pytest.raises(ValidationError):
            WorldConfig(**bad)
    with pytest.raises(ValidationError):
        generate(WorldConfig(), 0)


def test_planted_top_k_counts_subtree():
    _, _, world, _ = generate(WorldConfig(), 10, seed=0)
    assert planted_top_k(world, ["aspect_1.1", "aspect_1.2", "aspect_1.3"], 1) == ["aspect_1.1"]


def test_noise_05_reaches_ceiling():
    # one criterion per aspect carries the whole label, so the planted signal sd is large
    wc = WorldConfig(branching=(2,), noise_sigma=0.5, weight_mode="explicit",
                     weights={"aspect_1.1": [1.0, 0.0], "aspect_2.1": [0.0, 1.0]}, normalize=False)
    rs, ceilings = [], []
    for seed in range(5):
        art, world, pred, _, Y = _run(wc, 1000, seed, TrainConfig(max_layers=2, repeats=3))
        rs.append(recovery_check(art, world, pred, Y).mean_test_pearson)
        ceilings.append(world.correlation_ceiling().mean())
    assert np.mean(rs) >= 0.95 * np.mean(ceilings)
    assert np.mean(rs) >= 0.9


def test_more_noise_lowers_correlation():
    means = []
    for sigma in (0.1, 0.4, 0.8):
        rs = []
        for seed in range(5):
            art, world, pred, _, Y = _run(WorldConfig(noise_sigma=sigma), 200, seed,
                                          TrainConfig(prune_k=2, repeats=2))
            rs.append(recovery_check(art, world, pred, Y).mean_test_pearson)
        means.append(np.mean(rs))
    assert means[0] > means[1] > means[2]


def test_recovery_report_is_deterministic():
    reports = []
    for _ in range(2):
        art, world, pred, _, Y = _run(WorldConfig(), 120, 3, TrainConfig(prune_k=2, repeats=2))
        reports.append(recovery_check(art, world, pred, Y).to_json())
    assert reports[0] == reports[1]


def test_nonlinear_artifact_skips_cosine():
    art, world, pred, _, Y = _run(WorldConfig(), 120, 0, TrainConfig(prune_k=2, repeats=2))
    art.models = refit(art, art.feature_ids, kind="dt")
    rep = recovery_check(art, world, art.predict(np.zeros((3, len(art.feature_ids))) + 3), None)
    assert rep.cosine is None and rep.pruning and rep.test_pearson is None
