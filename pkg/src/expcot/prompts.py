"""Instruction templates for the five LLM stages and parsers for their replies.

Templates use ``string.Template`` slots (``${name}``) because the bodies
contain literal braces. A directory of ``<stage>.txt`` files can override any
of the embedded defaults, provided it keeps the same slot names.
"""
from __future__ import annotations

import enum
import re
from pathlib import Path
from string import Template

from .au import AuObservation, format_density
from .cot import ExpressionLabel, LabelError, LabelProfile, get_profile, normalize_label

AU2DES = "au2des"
DES2EXP = "des2exp"
VERIFY = "verify"
FEEDBACK_PLAIN = "feedback_plain"
FEEDBACK_WITH_LABEL = "feedback_with_label"
REFINE = "refine"

FEEDBACK_PLAIN_TEXT = (
    "The just expression and analysis are incorrect. "
    "A revised response is requested based on the observations and analysis."
)
FEEDBACK_WITH_LABEL_TEXT = (
    "The generated expression and analysis remain incorrect. "
    "The correct expression is ${emotion}. "
    "Please provide a revised analysis that aligns with this expression."
)

DEFAULT_TEMPLATES = {
    AU2DES: (
        "Provided step-by-step analysis of the face based on the specified Facial Action Units. "
        "The positive AUs are ${positive_aus}, and other AUs' density are 0."
    ),
    DES2EXP: (
        "Based on the description, just give me the expression result without other words. "
        "The result should only be one of the following: 'Surprise', 'Fear', 'Disgust', "
        "'Happiness', 'Sadness', 'Anger', 'Neutral' and 'Contempt'.\n"
        "Description: ${description}"
    ),
    VERIFY: (
        "${context}"
        "Determine whether the description contains AU ${positive_aus}, and the relevant degree "
        "corresponds to AU density. Also check if the generated expression label matches "
        "${gt_label}.\n"
        "Just give me the result 'Correct' or 'Incorrect', without any other words."
    ),
    FEEDBACK_PLAIN: FEEDBACK_PLAIN_TEXT,
    FEEDBACK_WITH_LABEL: FEEDBACK_WITH_LABEL_TEXT,
    REFINE: (
        "Enhance the expression description to make it more reasonable, presenting a logical flow of thought.\n"
        "Avoid the use of personal pronouns.\n"
        "New analysis should contain 3 parts: key observations, overall emotional interpretation, and conclusion.\n"
        "The word count does not exceed 130.\n"
        "Ensure that no AU indices (e.g., 'AU 1', 'AU 47') are included in the description.\n"
        "Begin the three parts with the headers \"Key Observations:\", "
        "\"Overall Emotional Interpretation:\" and \"Conclusion:\", in that order, "
        "and name the final expression in the conclusion.\n"
        "Original description: ${previous_analysis}."
    ),
}

STAGES = tuple(DEFAULT_TEMPLATES)


class TemplateError(ValueError):
    pass


def _slots(body: str) -> set[str]:
    return {m.group("named") or m.group("braced") for m in Template.pattern.finditer(body)
            if m.group("named") or m.group("braced")}


class PromptKit:
    """Holds one template per stage and renders them."""

    def __init__(self, templates: dict[str, str] | None = None):
        bodies = dict(DEFAULT_TEMPLATES)
        for stage, body in (templates or {}).items():
            if stage not in DEFAULT_TEMPLATES:
                raise TemplateError(f"unknown template stage {stage!r}")
            if _slots(body) != _slots(DEFAULT_TEMPLATES[stage]):
                raise TemplateError(
                    f"template {stage!r} must use slots {sorted(_slots(DEFAULT_TEMPLATES[stage]))}, "
                    f"found {sorted(_slots(body))}"
                )
            if not body.strip():
                raise TemplateError(f"template {stage!r} is empty")
            bodies[stage] = body
        self.templates = {stage: Template(body) for stage, body in bodies.items()}

    @classmethod
    def from_dir(cls, directory: str | Path) -> "PromptKit":
        directory = Path(directory)
        overrides = {}
        for stage in STAGES:
            path = directory / f"{stage}.txt"
            if path.exists():
                overrides[stage] = path.read_text(encoding="utf-8").rstrip("\n")
        return cls(overrides)

    def _render(self, stage: str, **slots) -> str:
        try:
            return self.templates[stage].substitute(**slots)
        except KeyError as e:
            raise TemplateError(f"template {stage!r} has no filler for slot {e}") from None

    def render_au2des(self, obs: AuObservation) -> str:
        return self._render(AU2DES, positive_aus=au_dict_quoted(obs))

    def render_des2exp(self, description: str) -> str:
        if not description.strip():
            raise TemplateError("description must be non-empty")
        return self._render(DES2EXP, description=description)

    def render_verify(
        self,
        obs: AuObservation,
        gt_label: ExpressionLabel | str,
        description: str | None = None,
        predicted_label: str | None = None,
    ) -> str:
        """Verification instruction; description and predicted label are prepended when given."""
        context = ""
        if description is not None:
            context += f"Description: {description}\n"
        if predicted_label is not None:
            context += f"Generated expression label: {predicted_label}\n"
        if context:
            context += "\n"
        return self._render(
            VERIFY,
            context=context,
            positive_aus=au_dict_plain(obs),
            gt_label=str(normalize_label(gt_label)),
        )

    def render_feedback(self, with_label: bool, gt_label: ExpressionLabel | str | None = None) -> str:
        if not with_label:
            return self._render(FEEDBACK_PLAIN)
        if gt_label is None:
            raise TemplateError("label-injecting feedback needs a ground-truth label")
        return self._render(FEEDBACK_WITH_LABEL, emotion=str(normalize_label(gt_label)))

    def render_refine(self, previous_analysis: str) -> str:
        if not previous_analysis.strip():
            raise TemplateError("previous analysis must be non-empty")
        return self._render(REFINE, previous_analysis=previous_analysis)


def au_dict_quoted(obs: AuObservation) -> str:
    """``{'left eye close': 0.23, ...}`` as used in the description prompt."""
    return "{" + ", ".join(f"'{name.lower()}': {format_density(d)}" for name, d in obs.positive) + "}"


def au_dict_plain(obs: AuObservation) -> str:
    """``{left eye close: 0.23, ...}`` as used in the verification prompt."""
    return "{" + ", ".join(f"{name.lower()}: {format_density(d)}" for name, d in obs.positive) + "}"


_DEFAULT_KIT = PromptKit()


def default_kit() -> PromptKit:
    return _DEFAULT_KIT


def render_au2des(obs: AuObservation) -> str:
    return _DEFAULT_KIT.render_au2des(obs)


def render_des2exp(description: str) -> str:
    return _DEFAULT_KIT.render_des2exp(description)


def render_verify(obs, gt_label, description=None, predicted_label=None) -> str:
    return _DEFAULT_KIT.render_verify(obs, gt_label, description, predicted_label)


def render_feedback(with_label: bool, gt_label=None) -> str:
    return _DEFAULT_KIT.render_feedback(with_label, gt_label)


def render_refine(previous_analysis: str) -> str:
    return _DEFAULT_KIT.render_refine(previous_analysis)


class Verdict(str, enum.Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    UNPARSEABLE = "Unparseable"

    def __str__(self) -> str:
        return self.value


_CORRECT_RE = re.compile(r"\bcorrect\b", re.IGNORECASE)
_INCORRECT_RE = re.compile(r"\bincorrect\b", re.IGNORECASE)


def parse_verdict(response: str) -> Verdict:
    text = response.strip().lower()
    if text == "correct":
        return Verdict.CORRECT
    if text == "incorrect":
        return Verdict.INCORRECT
    has_correct = bool(_CORRECT_RE.search(response))
    has_incorrect = bool(_INCORRECT_RE.search(response))
    if has_correct == has_incorrect:
        return Verdict.UNPARSEABLE
    return Verdict.CORRECT if has_correct else Verdict.INCORRECT


_STRIP_CHARS = " \t\r\n.,;:!?\"'`*()[]{}"


def parse_label(response: str, profile: str | LabelProfile = "affectnet8") -> ExpressionLabel:
    profile = get_profile(profile)
    try:
        label = normalize_label(response.strip(_STRIP_CHARS))
    except LabelError:
        raise LabelError(f"unrecognized expression label in {response!r}", raw=response) from None
    if label not in profile:
        raise LabelError(f"label {label.value!r} is not in profile {profile.name!r}", raw=response)
    return label
