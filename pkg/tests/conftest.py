import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hdeval.criteria import build_tree  # noqa: E402
from hdeval.datasets import DatasetManifest, EvalSample  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def _triples(nodes):
    return [(n["name"], n["definition"], _triples(n.get("children", []))) for n in nodes]


@pytest.fixture(scope="session")
def dialogue_data():
    return json.loads((FIXTURES / "dialogue_tree.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def dialogue_tree(dialogue_data):
    return build_tree(dialogue_data["task"], _triples(dialogue_data["criteria"]), max_layers=3, max_children=4)


@pytest.fixture(scope="session")
def dialogue_manifest(dialogue_data):
    return DatasetManifest(
        name="dialogue",
        task_description=dialogue_data["task"],
        task_background=dialogue_data["background"],
        aspects={n["name"]: n["definition"] for n in dialogue_data["criteria"]},
        template_id="conversation",
    )


@pytest.fixture(scope="session")
def dialogue_sample():
    return EvalSample(
        sample_id="t001",
        group_id="d01",
        context="A: Have you been to the planetarium?\nB: Not yet, is it good?",
        fact="The planetarium opened in 1930.",
        candidate="It's great, it has been around since 1930 and the dome shows are stunning.",
        labels={"Naturalness": 3.0, "Coherence": 3.0, "Engagingness": 2.5, "Groundedness": 1.0},
    )


@pytest.fixture
def small_manifest():
    return DatasetManifest(
        name="toy",
        task_description="news summaries",
        task_background="Summaries of news articles.",
        aspects={"coherence": "Overall structure.", "fluency": "Sentence quality."},
        template_id="summarization",
    )


@pytest.fixture
def make_samples():
    def make(n, per_group=2, aspects=("coherence", "fluency")):
        return [
            EvalSample(
                sample_id=f"x{i:03d}",
                group_id=f"g{i // per_group:03d}",
                context=f"Article {i // per_group}.",
                candidate=f"Summary {i}.",
                labels={a: float(1 + (i * (k + 2)) % 5) for k, a in enumerate(aspects)},
            )
            for i in range(n)
        ]

    return make


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
