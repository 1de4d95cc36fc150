"""Scripted LLM used across pipeline, CLI and acceptance tests."""
from __future__ import annotations

import re

from expcot.cot import ExpressionLabel

DESCRIPTION = (
    "Round {rnd} analysis for {sid}: the left eye closes slightly with low intensity, "
    "suggesting {word} feelings."
)

COT_TEXT = (
    "Key Observations: Left eye close at low intensity hints at relaxation or mild {word} feelings.\n"
    "Overall Emotional Interpretation: The combined movements point mostly toward {word} emotion "
    "with little tension elsewhere.\n"
    "Conclusion: The final expression is {label}."
)


def cot_text(label: ExpressionLabel) -> str:
    return COT_TEXT.format(word=label.value.lower(), label=label.value.lower())


class PlannedLLM:
    """Deterministic responder keyed by (sample_id, stage, round).

    ``plan[sid] = (gt_label, incorrect_rounds)``: the verifier says Incorrect
    for the first ``incorrect_rounds`` rounds and Correct afterwards. Samples
    in ``bad_refine`` get a refinement containing an AU index every time.
    """

    def __init__(self, plan: dict, bad_refine: set | None = None):
        self.plan = plan
        self.bad_refine = bad_refine or set()

    def __call__(self, ctx, messages):
        label, fails = self.plan[ctx.sample_id]
        if ctx.stage in ("au2des", "feedback"):
            return DESCRIPTION.format(rnd=ctx.round, sid=ctx.sample_id, word=label.value.lower())
        if ctx.stage == "des2exp":
            return label.value
        if ctx.stage == "verify":
            return "Incorrect" if ctx.round <= fails else "Correct"
        if ctx.stage == "refine":
            text = cot_text(label)
            if ctx.sample_id in self.bad_refine:
                text = text.replace("Left eye close", "AU 1")
            return text
        raise AssertionError(f"unexpected stage {ctx.stage}")


FEEDBACK_RE = re.compile(r"^The (just|generated) expression and analysis")
