import json

import numpy as np
import pytest

from hdeval.artifact import ScoreMatrix, load_artifact, save_artifact
from hdeval.errors import ArtifactError, DigestMismatchError
from hdeval.synthetic import WorldConfig, generate
from hdeval.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    manifest, samples, world, backend = generate(WorldConfig(branching=(2, 2)), 80, seed=2)
    return train(TrainConfig(prune_k=2, repeats=2), manifest, samples, backend)


def test_score_matrix_csv_round_trip():
    m = ScoreMatrix(["a", "b"], ["1", "1.1"], np.array([[1.0, 2.5], [1 / 3, 5.0]]))
    back = ScoreMatrix.from_csv(m.to_csv())
    assert back.sample_ids == m.sample_ids and back.feature_ids == m.feature_ids
    assert np.array_equal(back.values, m.values)


def test_score_matrix_helpers():
    m = ScoreMatrix.empty(["a", "b"]).with_column("1", [1.0, 2.0]).with_column("2", [3.0, 4.0], [True, False])
    assert m.column("2").tolist() == [3.0, 4.0]
    assert m.imputed_cells() == [{"sample_id": "a", "feature_id": "2"}]
    assert m.select(["2", "1"]).values.tolist() == [[3.0, 1.0], [4.0, 2.0]]
    with pytest.raises(ArtifactError):
        m.with_column("1", [0.0, 0.0])


@pytest.mark.parametrize("kind", ["lr", "rf", "nn"])
def test_round_trip_bit_identical(tmp_path, trained, kind):
    from hdeval.trainer import refit

    art = trained
    if kind != "lr":
        hyper = {"n_trees": 5} if kind == "rf" else {"epochs": 10}
        art.models = refit(trained, trained.feature_ids, kind=kind, hyper=hyper)
    save_artifact(art, tmp_path / kind)
    back = load_artifact(tmp_path / kind)
    X = np.random.default_rng(0).uniform(1, 5, size=(50, len(art.feature_ids)))
    assert np.array_equal(art.predict(X), back.predict(X))
    assert back.tree.to_json() == art.tree.to_json()
    assert sorted(back.importances) == sorted(art.importances)


def test_tampered_scores_rejected(tmp_path, trained):
    save_artifact(trained, tmp_path)
    path = tmp_path / "scores.csv"
    data = bytearray(path.read_bytes())
    data[-3] = ord("9") if data[-3] != ord("9") else ord("8")
    path.write_bytes(bytes(data))
    with pytest.raises(DigestMismatchError):
        load_artifact(tmp_path)


def test_missing_files_rejected(tmp_path, trained):
    with pytest.raises(ArtifactError):
        load_artifact(tmp_path)
    save_artifact(trained, tmp_path)
    (tmp_path / "model_all.json").unlink()
    with pytest.raises(ArtifactError):
        load_artifact(tmp_path)


def test_bundle_layout(tmp_path, trained):
    save_artifact(trained, tmp_path, timestamp="2000-01-01T00:00:00+00:00")
    names = {p.name for p in tmp_path.iterdir()}
    assert {"tree.json", "model_all.json", "scores.csv", "labels.csv", "provenance.json", "config.json",
            "importances_layer1.csv", "importances_layer2.csv"} <= names
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["created_at"] == "2000-01-01T00:00:00+00:00"
    assert prov["models"] == {"all": "model_all.json"}
    assert json.loads((tmp_path / "config.json").read_text())["train"]["prune_k"] == 2
