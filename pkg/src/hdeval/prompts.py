"""Prompt templates for criteria decomposition and hierarchy-aware scoring."""

from __future__ import annotations

from .criteria import Criterion, CriteriaTree, lineage
from .datasets import TEMPLATE_IDS, EvalSample
from .errors import ValidationError

SCORE_CUE = "Score (1-5):"

DECOMPOSITION_TEMPLATE = """\
I would like to perform automatic evaluation on quality of {task}.

{background}

I would like to evaluate {criteria}.

Please give me around {count} fine-grained evaluation critics to evaluate them. \
I want to obtain a final comprehensive evaluation based on an overall aggregation on fine-grained metrics. \
With the fine-grained metrics, I can better dispatch the evaluation task to different workers \
and make a better overall efficiency and accuracy.

List each critic on its own line in the form "Name: definition".
"""

_CRITERION_BLOCK = """\
Specifically, to evaluate {parent}, we would like you to score the given response on the following metric:

{child} : {definition}

Please return your score on the above metric in the scale of 1 to 5, with 1 being the lowest.

## Example

{payload}

## Evaluation

Now, please evaluate the {parent} of the provided response. (on a scale of 1-5, with 1 being the lowest).
Please carefully read the {reading}, and evaluate the sentence using the metric {child}.
Please first return your score, and then provide your reasoning for the score.

""" + SCORE_CUE

_INTROS = {
    "conversation": (
        "You will be given the conversation history between two individuals, its corresponding fact, "
        "and one potential response for the next turn in the conversation.\n\n"
        "Please evaluate the {parent} of the given response to the conversation."
    ),
    "summarization": "We would like to score the following summary of a news article on its {parent}.",
    "data_to_text": (
        "We would like to evaluate the {parent} of data-to-text, a natural language sentence "
        "generated according to a structured data expression."
    ),
}

_READING = {
    "conversation": "conversation history, corresponding fact, generated response",
    "summarization": "news article and the generated summary",
    "data_to_text": "data expression and the generated text",
}


def render_decomposition_prompt(
    task: str,
    task_background: str,
    parent: Criterion | str,
    desired_children: int,
) -> str:
    if desired_children < 1:
        raise ValidationError("desired_children must be >= 1")
    if isinstance(parent, Criterion):
        criteria = parent.name if parent.layer == 0 else f"{parent.name} ({parent.definition.rstrip('.')})"
    else:
        criteria = parent
    background = task_background.strip() or task
    return DECOMPOSITION_TEMPLATE.format(
        task=task, background=background, criteria=criteria, count=desired_children
    )


def render_payload(sample: EvalSample, template_id: str) -> str:
    if template_id == "conversation":
        parts = [f"Conversation History:\n{sample.context}"]
        if sample.fact:
            parts.append(f"Corresponding Fact:\n{sample.fact}")
        parts.append(f"Response:\n{sample.candidate}")
    elif template_id == "summarization":
        parts = [f"Source Article:\n{sample.context}", f"Summary:\n{sample.candidate}"]
    elif template_id == "data_to_text":
        parts = [f"Data Expression:\n{sample.context}", f"Generated Text:\n{sample.candidate}"]
    else:
        raise ValidationError(f"unknown template_id {template_id!r}; expected one of {TEMPLATE_IDS}")
    return "\n\n".join(parts)


def render_evaluation_prompt(
    sample: EvalSample,
    criterion: Criterion,
    tree: CriteriaTree,
    template_id: str,
) -> str:
    if criterion.layer < 1:
        raise ValidationError("the root task cannot be scored as a criterion")
    if template_id not in _INTROS:
        raise ValidationError(f"unknown template_id {template_id!r}; expected one of {TEMPLATE_IDS}")
    path = lineage(tree, criterion.id)
    parent = path[-2].name
    intro = _INTROS[template_id].format(parent=parent)
    body = _CRITERION_BLOCK.format(
        parent=parent,
        child=criterion.name,
        definition=criterion.definition,
        payload=render_payload(sample, template_id),
        reading=_READING[template_id],
    )
    return f"## Instructions\n\n{intro}\n\n{body}"
