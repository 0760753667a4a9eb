import json

import pytest
from hypothesis import given, settings, strategies as st

from hdeval.datasets import (
    DatasetManifest,
    EvalSample,
    labels_matrix,
    load_dataset,
    split,
    subsample_train,
    write_dataset,
)
from hdeval.errors import DatasetError


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


def test_round_trip(tmp_path, small_manifest, make_samples):
    samples = make_samples(12)
    samples[3] = EvalSample("x003", "ctx", "cand", {"coherence": 2.0, "fluency": 5.0}, group_id=None, fact="f")
    write_dataset(small_manifest, samples, tmp_path / "m.json", tmp_path / "d.jsonl")
    manifest, back = load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")
    assert manifest == small_manifest
    assert [s.to_dict() for s in back] == [s.to_dict() for s in samples]


def test_summeval_sized_corpus(tmp_path, make_samples):
    manifest = DatasetManifest("summeval", "summaries",
                               {a: a for a in ("coherence", "consistency", "fluency", "relevance")})
    samples = make_samples(1600, per_group=16, aspects=("coherence", "consistency", "fluency", "relevance"))
    write_dataset(manifest, samples, tmp_path / "m.json", tmp_path / "d.jsonl")
    assert len(load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")[1]) == 1600


def test_missing_field_reports_line(tmp_path, small_manifest):
    (tmp_path / "m.json").write_text(json.dumps(small_manifest.to_dict()))
    good = {"sample_id": "a", "context": "c", "candidate": "x", "labels": {"coherence": 1, "fluency": 2}}
    bad = {"sample_id": "b", "context": "c", "labels": {"coherence": 1, "fluency": 2}}
    _write_lines(tmp_path / "d.jsonl", [good, bad])
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")


@pytest.mark.parametrize("labels", [
    {"coherence": 1, "fluency": 2, "relevance": 3},
    {"coherence": 1},
    {"coherence": 1, "fluency": "high"},
    {"coherence": 1, "fluency": float("nan")},
])
def test_bad_labels(tmp_path, small_manifest, labels):
    (tmp_path / "m.json").write_text(json.dumps(small_manifest.to_dict()))
    (tmp_path / "d.jsonl").write_text(
        json.dumps({"sample_id": "a", "context": "c", "candidate": "x", "labels": labels}).replace("NaN", "NaN") + "\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")


def test_duplicate_ids_and_malformed_json(tmp_path, small_manifest):
    (tmp_path / "m.json").write_text(json.dumps(small_manifest.to_dict()))
    obj = {"sample_id": "a", "context": "c", "candidate": "x", "labels": {"coherence": 1, "fluency": 2}}
    _write_lines(tmp_path / "d.jsonl", [obj, obj])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")
    (tmp_path / "d.jsonl").write_text("{not json\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")


def test_unknown_fields_kept_aside(tmp_path, small_manifest):
    (tmp_path / "m.json").write_text(json.dumps(small_manifest.to_dict()))
    _write_lines(tmp_path / "d.jsonl", [{"sample_id": "a", "context": "c", "candidate": "x", "system": "m7",
                                         "labels": {"coherence": 1, "fluency": 2}}])
    s = load_dataset(tmp_path / "m.json", tmp_path / "d.jsonl")[1][0]
    assert s.extra == {"system": "m7"}


def test_manifest_validation():
    with pytest.raises(DatasetError):
        DatasetManifest("x", "t", {})
    with pytest.raises(DatasetError):
        DatasetManifest("x", "t", {"a": "d"}, template_id="poem")
    with pytest.raises(DatasetError):
        DatasetManifest("x", "t", {"a": "d", "b": "e"}, aspect_groups={"g": ["a"]})
    m = DatasetManifest("x", "t", {"a": "d", "b": "e"}, aspect_groups={"g1": ["a"], "g2": ["b"]})
    assert m.groups() == {"g1": ["a"], "g2": ["b"]}


def test_split_counts_groups(make_samples):
    samples = make_samples(40, per_group=4)
    train, test = split(samples, 0.5, seed=0)
    assert len({s.group for s in train}) == 5 and len({s.group for s in test}) == 5
    assert split(samples, 0.5, seed=0) == (train, test)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_bounds(make_samples, fraction):
    with pytest.raises(DatasetError):
        split(make_samples(10), fraction, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(1, 5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_group_atomic_partition(n, per_group, fraction, seed):
    samples = [EvalSample(f"s{i}", "c", "x", {"a": 1.0}, group_id=f"g{i // per_group}") for i in range(n)]
    train, test = split(samples, fraction, seed)
    ids_train = {s.sample_id for s in train}
    ids_test = {s.sample_id for s in test}
    assert not ids_train & ids_test
    assert ids_train | ids_test == {s.sample_id for s in samples}
    assert not {s.group for s in train} & {s.group for s in test}


@pytest.mark.parametrize("fraction,expected", [(0.25, 200), (0.05, 40), (1.0, 800)])
def test_subsample_sizes(make_samples, fraction, expected):
    train = make_samples(800, per_group=8)
    sub = subsample_train(train, fraction, seed=1)
    assert len(sub) == expected
    assert subsample_train(train, fraction, seed=1) == sub


def test_subsample_walks_whole_groups(make_samples):
    train = make_samples(100, per_group=6)
    sub = subsample_train(train, 0.3, seed=4)
    counts = {}
    for s in sub:
        counts[s.group] = counts.get(s.group, 0) + 1
    partial = [g for g, c in counts.items() if c != sum(1 for s in train if s.group == g)]
    assert len(partial) <= 1


def test_subsample_bounds(make_samples):
    with pytest.raises(DatasetError):
        subsample_train(make_samples(10), 0.0, 0)


def test_labels_matrix(make_samples):
    samples = make_samples(3)
    Y = labels_matrix(samples, ["fluency", "coherence"])
    assert Y.shape == (3, 2)
    assert Y[1, 0] == samples[1].labels["fluency"]
