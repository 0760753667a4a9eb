import json

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from hdeval.backend import (
    BackendConfig,
    MockBackend,
    RemoteBackend,
    Request,
    cache_key,
    decompose,
    make_backend,
    parse_decomposition,
    parse_score,
    score,
)
from hdeval.criteria import ROOT_ID, attach_children, new_tree
from hdeval.errors import DecompositionParseError, ReplayMissError, TransportError, ValidationError

ENGAGING_KIDS = [
    ["Content richness", "Offers substance rather than filler."],
    ["Emotional engagement", "Carries appropriate feeling."],
    ["Feedback", "Reacts to the partner's input."],
    ["User involvement", "Draws the partner into the exchange."],
]


@pytest.mark.parametrize("raw,expected", [
    ("Score (1-5): 4\nReasoning: clear and tidy.", 4.0),
    ("Score (1-5): 2", 2.0),
    ("I'd rate this 3 out of 5", 3.0),
    ("4.5 - strong coherence", 4.5),
    ("Score (1-5): 7", 5.0),
    ("score (1 - 5):0", 1.0),
    ("In 2023 this got a 4", 4.0),
])
def test_parse_score(raw, expected):
    assert parse_score(raw) == expected


@pytest.mark.parametrize("raw", ["excellent", "N/A", "", "10 out of 10"])
def test_parse_score_failure(raw):
    assert parse_score(raw) is None


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_parse_score_always_in_range(raw):
    v = parse_score(raw)
    assert v is None or 1.0 <= v <= 5.0
    v = parse_score("Score (1-5): " + raw)
    assert v is None or 1.0 <= v <= 5.0


def test_parse_decomposition_variants():
    raw = (
        "Here are the critics:\n"
        "1. Grammar and syntax: Well formed sentences.\n"
        "- **Spelling**: No typos.\n"
        "### Diversity: Varied words.\n"
        "grammar and syntax: duplicate, ignored\n"
        "free text without a colon\n"
    )
    assert parse_decomposition(raw) == [
        ("Grammar and syntax", "Well formed sentences."),
        ("Spelling", "No typos."),
        ("Diversity", "Varied words."),
    ]
    assert len(parse_decomposition(raw, limit=2)) == 2


def test_parse_decomposition_error_keeps_raw():
    with pytest.raises(DecompositionParseError) as e:
        parse_decomposition("nothing useful here")
    assert e.value.raw == "nothing useful here"


@pytest.fixture
def dlg_tree(dialogue_manifest):
    t = new_tree(dialogue_manifest.task_description, 3, 4)
    return attach_children(t, ROOT_ID, list(dialogue_manifest.aspects.items()))


def test_decompose_with_fixture(dlg_tree):
    cfg = BackendConfig(kind="mock", fixtures={"decompositions": {"Engagingness": ENGAGING_KIDS}})
    parent = dlg_tree.find("Engagingness", layer=1)[0]
    assert decompose(cfg, dlg_tree, parent.id, 4) == [tuple(k) for k in ENGAGING_KIDS]


def test_decompose_unparseable(dlg_tree):
    cfg = BackendConfig(kind="mock", fixtures={"decompositions": {"Naturalness": "I cannot help with that"}})
    with pytest.raises(DecompositionParseError):
        decompose(cfg, dlg_tree, "1", 4)


def test_decompose_beyond_max_children(dlg_tree):
    with pytest.raises(ValidationError):
        decompose(BackendConfig(kind="mock"), dlg_tree, "1", 5)


def test_replay_miss_names_key(dlg_tree, tmp_path):
    cfg = BackendConfig(kind="replay", cache_dir=str(tmp_path))
    with pytest.raises(ReplayMissError) as e:
        decompose(cfg, dlg_tree, "1", 4)
    assert len(e.value.key) == 64 and e.value.key in str(e.value)


def test_score_direct_fallback_and_imputation(dlg_tree, dialogue_sample):
    node = dlg_tree.get("2")
    sid = dialogue_sample.sample_id

    def run(reply):
        fixtures = {"scores": {sid: {node.name: reply}}}
        return score(BackendConfig(kind="mock", max_retries=2, fixtures=fixtures), dialogue_sample, node, dlg_tree,
                     "conversation")

    v = run("Score (1-5): 4\nReasoning: fine")
    assert (v.value, v.imputed) == (4.0, False)
    assert run("I'd rate this 3 out of 5").value == 3.0
    v = run(["N/A", "N/A", "N/A"])
    assert (v.value, v.imputed) == (3.0, True)
    v = run(["N/A", "Score (1-5): 5"])
    assert (v.value, v.imputed, v.retries_used) == (5.0, False, 1)


def test_mock_is_pure(dlg_tree, dialogue_sample):
    cfg = BackendConfig(kind="mock", seed=3)
    a = [score(cfg, dialogue_sample, dlg_tree.get(i), dlg_tree, "conversation").value for i in "1234"]
    b = [score(cfg, dialogue_sample, dlg_tree.get(i), dlg_tree, "conversation").value for i in "1234"]
    assert a == b and all(1 <= v <= 5 for v in a)


def test_cache_then_replay(dlg_tree, dialogue_sample, tmp_path):
    mock = BackendConfig(kind="mock", cache_dir=str(tmp_path), seed=1)
    first = score(mock, dialogue_sample, dlg_tree.get("3"), dlg_tree, "conversation")
    files = list(tmp_path.glob("*.json"))
    assert len(files) == 1
    record = json.loads(files[0].read_text())
    assert set(record) == {"key", "prompt", "reply", "timestamp"}
    replay = BackendConfig(kind="replay", cache_dir=str(tmp_path), seed=1)
    assert score(replay, dialogue_sample, dlg_tree.get("3"), dlg_tree, "conversation").value == first.value


def test_cache_key_depends_on_sampling_params():
    a = BackendConfig(kind="mock")
    assert cache_key(a, "p") == cache_key(BackendConfig(kind="mock", seed=9), "p")
    assert cache_key(a, "p") != cache_key(BackendConfig(kind="mock", temperature=0.7), "p")
    assert cache_key(a, "p") != cache_key(BackendConfig(kind="mock", model_name="other"), "p")
    assert cache_key(a, "p") != cache_key(a, "p", attempt=1)


def test_config_validation():
    with pytest.raises(ValidationError):
        BackendConfig(kind="carrier-pigeon")
    with pytest.raises(ValidationError):
        BackendConfig(kind="remote")
    with pytest.raises(ValidationError):
        BackendConfig(kind="replay")
    assert isinstance(make_backend(BackendConfig()), MockBackend)


def _remote(handler, **kw):
    cfg = BackendConfig(kind="remote", endpoint="http://llm.test/v1/chat/completions", model_name="m",
                        backoff_base=0.0, **kw)
    return RemoteBackend(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))


def test_remote_request_shape_and_auth(monkeypatch):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "Score (1-5): 5"}}]})

    monkeypatch.setenv("HDEVAL_API_KEY", "sekret")
    be = _remote(handler, temperature=0.0, max_tokens=16)
    assert be.complete("hello", Request(kind="score")) == "Score (1-5): 5"
    assert seen["body"]["messages"] == [{"role": "user", "content": "hello"}]
    assert seen["body"]["max_tokens"] == 16 and seen["body"]["model"] == "m"
    assert seen["auth"] == "Bearer sekret"


def test_remote_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    assert _remote(handler, max_retries=2).complete("p", Request(kind="score")) == "ok"
    assert len(calls) == 3


def test_remote_gives_up():
    def handler(request):
        raise httpx.ConnectError("down")

    with pytest.raises(TransportError):
        _remote(handler, max_retries=1).complete("p", Request(kind="score"))


def test_remote_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(TransportError):
        _remote(handler, max_retries=3).complete("p", Request(kind="score"))
    assert len(calls) == 1


def test_remote_uses_cache(tmp_path):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Score (1-5): 2"}}]})

    be = _remote(handler, cache_dir=str(tmp_path))
    be.complete("same prompt", Request(kind="score"))
    be.complete("same prompt", Request(kind="score"))
    assert len(calls) == 1
