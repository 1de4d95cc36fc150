"""Expression labels, dataset label profiles and the three-part CoT record."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable

from .au import AU_INDEX_PATTERN

MAX_WORDS = 130

HEADERS = ("Key Observations:", "Overall Emotional Interpretation:", "Conclusion:")


class ExpressionLabel(str, enum.Enum):
    SURPRISE = "Surprise"
    FEAR = "Fear"
    DISGUST = "Disgust"
    HAPPINESS = "Happiness"
    SADNESS = "Sadness"
    ANGER = "Anger"
    NEUTRAL = "Neutral"
    CONTEMPT = "Contempt"

    def __str__(self) -> str:
        return self.value


class LabelError(ValueError):
    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class CotParseError(ValueError):
    pass


@dataclass(frozen=True)
class LabelProfile:
    name: str
    allowed: tuple[ExpressionLabel, ...]

    def __contains__(self, label) -> bool:
        return label in self.allowed


_SEVEN = tuple(l for l in ExpressionLabel if l is not ExpressionLabel.CONTEMPT)

PROFILES = {
    "rafdb": LabelProfile("rafdb", _SEVEN),
    "affectnet7": LabelProfile("affectnet7", _SEVEN),
    "affectnet8": LabelProfile("affectnet8", tuple(ExpressionLabel)),
}

# manifest dataset names -> profile
_DATASET_ALIASES = {
    "rafdb": "rafdb",
    "raf-db": "rafdb",
    "raf_db": "rafdb",
    "affectnet": "affectnet8",
    "affectnet8": "affectnet8",
    "affectnet-8": "affectnet8",
    "affectnet7": "affectnet7",
    "affectnet-7": "affectnet7",
}


def get_profile(name: str | LabelProfile) -> LabelProfile:
    if isinstance(name, LabelProfile):
        return name
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown label profile {name!r}; expected one of {sorted(PROFILES)}") from None


def profile_for_dataset(dataset: str, default: str | LabelProfile = "affectnet8") -> LabelProfile:
    key = _DATASET_ALIASES.get(dataset.strip().lower())
    return get_profile(key) if key else get_profile(default)


# Numeric class ids as distributed with each dataset.
_E = ExpressionLabel
CLASS_IDS = {
    "rafdb": {1: _E.SURPRISE, 2: _E.FEAR, 3: _E.DISGUST, 4: _E.HAPPINESS, 5: _E.SADNESS, 6: _E.ANGER, 7: _E.NEUTRAL},
    "affectnet8": {0: _E.NEUTRAL, 1: _E.HAPPINESS, 2: _E.SADNESS, 3: _E.SURPRISE, 4: _E.FEAR, 5: _E.DISGUST,
                   6: _E.ANGER, 7: _E.CONTEMPT},
    "affectnet7": {0: _E.NEUTRAL, 1: _E.HAPPINESS, 2: _E.SADNESS, 3: _E.SURPRISE, 4: _E.FEAR, 5: _E.DISGUST,
                   6: _E.ANGER},
}


def label_from_class_id(class_id: int, profile: str | LabelProfile) -> ExpressionLabel:
    """Convert a dataset's numeric class id into its expression name."""
    profile = get_profile(profile)
    try:
        return CLASS_IDS[profile.name][int(class_id)]
    except (KeyError, ValueError):
        raise LabelError(f"class id {class_id!r} is not defined for profile {profile.name!r}",
                         raw=str(class_id)) from None


@lru_cache(maxsize=None)
def synonym_table() -> dict[str, ExpressionLabel]:
    raw = json.loads(resources.files("expcot.data").joinpath("label_synonyms.json").read_text("utf-8"))
    return {k.lower(): ExpressionLabel(v) for k, v in raw.items()}


def normalize_label(raw: str | ExpressionLabel) -> ExpressionLabel:
    """Map free text such as ``"SAD"`` or ``"sadness"`` to a canonical label."""
    if isinstance(raw, ExpressionLabel):
        return raw
    key = str(raw).strip().lower()
    try:
        return synonym_table()[key]
    except KeyError:
        raise LabelError(f"unrecognized expression label {raw!r}", raw=str(raw)) from None


def _label_regex(profile: LabelProfile) -> re.Pattern:
    words = [w for w, lab in synonym_table().items() if lab in profile]
    # longest first so "surprised" wins over "surprise" at one position
    words.sort(key=len, reverse=True)
    return re.compile(r"\b(" + "|".join(map(re.escape, words)) + r")\b", re.IGNORECASE)


def find_first_label(text: str, profile: LabelProfile) -> ExpressionLabel | None:
    m = _label_regex(profile).search(text)
    return synonym_table()[m.group(1).lower()] if m else None


def count_words(*texts: str) -> int:
    return sum(len(t.split()) for t in texts)


@dataclass(frozen=True)
class CotRecord:
    key_observations: str
    overall_interpretation: str
    conclusion: str
    label: ExpressionLabel
    word_count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "label", normalize_label(self.label))
        object.__setattr__(
            self,
            "word_count",
            count_words(self.key_observations, self.overall_interpretation, self.conclusion),
        )

    @property
    def sections(self) -> tuple[str, str, str]:
        return (self.key_observations, self.overall_interpretation, self.conclusion)

    def to_text(self) -> str:
        """Canonical flat form with the three literal headers."""
        return "\n".join(f"{h} {body}" for h, body in zip(HEADERS, self.sections))

    def to_dict(self) -> dict:
        return {
            "key_observations": self.key_observations,
            "overall_interpretation": self.overall_interpretation,
            "conclusion": self.conclusion,
            "label": self.label.value,
            "word_count": self.word_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CotRecord":
        rec = cls(d["key_observations"], d["overall_interpretation"], d["conclusion"], d["label"])
        if "word_count" in d and d["word_count"] != rec.word_count:
            raise CotParseError(f"stored word_count {d['word_count']} != actual {rec.word_count}")
        return rec


_HEADER_RES = [
    re.compile(r"^[ \t#*_>-]*" + re.escape(h[:-1]).replace(r"\ ", r"\s+") + r"[ \t*_]*:[ \t*_]*", re.IGNORECASE | re.MULTILINE)
    for h in HEADERS
]


def parse_cot(text: str, profile: str | LabelProfile = "affectnet8") -> CotRecord:
    """Split model output on the three headers, in order, and read the label.

    The label is the earliest-positioned recognised label word in the
    conclusion (synonyms included).
    """
    profile = get_profile(profile)
    spans = []
    pos = 0
    for header, rx in zip(HEADERS, _HEADER_RES):
        m = rx.search(text, pos)
        if m is None:
            raise CotParseError(f"missing section header {header!r}")
        spans.append(m)
        pos = m.end()
    bodies = []
    for i, m in enumerate(spans):
        end = spans[i + 1].start() if i + 1 < len(spans) else len(text)
        bodies.append(text[m.end():end].strip())
    label = find_first_label(bodies[2], profile)
    if label is None:
        raise CotParseError(f"no {profile.name} label found in conclusion {bodies[2]!r}")
    return CotRecord(bodies[0], bodies[1], bodies[2], label)


class Violation(str, enum.Enum):
    SECTION_EMPTY = "section-empty"
    OVER_LENGTH = "over-length"
    AU_INDEX_PRESENT = "au-index-present"
    LABEL_OUT_OF_PROFILE = "label-out-of-profile"

    def __str__(self) -> str:
        return self.value


def validate_cot(rec: CotRecord, profile: str | LabelProfile = "affectnet8") -> list[Violation]:
    profile = get_profile(profile)
    found = []
    if any(not s.strip() for s in rec.sections):
        found.append(Violation.SECTION_EMPTY)
    if count_words(*rec.sections) > MAX_WORDS:
        found.append(Violation.OVER_LENGTH)
    if any(AU_INDEX_PATTERN.search(s) for s in rec.sections):
        found.append(Violation.AU_INDEX_PRESENT)
    if rec.label not in profile:
        found.append(Violation.LABEL_OUT_OF_PROFILE)
    return found


def as_labels(values: Iterable) -> list[ExpressionLabel]:
    return [normalize_label(v) for v in values]
