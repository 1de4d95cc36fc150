"""Instruction-tuning conversations built from accepted generation outcomes.

Every accepted sample becomes one conversation, either a single-round FER
exchange (question -> expression name) or a two-round CoT exchange (CoT
instruction -> three-part analysis, then the FER question -> expression
name). The FER share is drawn per sample from a seeded generator.
"""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .cot import CotParseError, parse_cot, profile_for_dataset, validate_cot
from .pipeline import SampleOutcome

IMAGE_TOKEN = "<image>"
FER = "FER"
COT = "CoT"

FER_QUESTION = "What is the facial expression of this face? Answer with the expression name only."
COT_INSTRUCTION = (
    "Analyze the facial expression of this face step by step. "
    "Give the key observations, the overall emotional interpretation, and a conclusion."
)


@dataclass(frozen=True)
class MixPolicy:
    fer_fraction: float = 0.75
    seed: int = 17

    def __post_init__(self):
        if not 0.0 <= self.fer_fraction <= 1.0:
            raise ValueError(f"fer_fraction must be in [0, 1], got {self.fer_fraction}")


@dataclass(frozen=True)
class ConversationRecord:
    sample_id: str
    image_ref: str
    turns: tuple[dict, ...]
    task: str
    label: str
    dataset: str

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "task": self.task,
            "label": self.label,
            "dataset": self.dataset,
            "turns": [dict(t) for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConversationRecord":
        return cls(d["sample_id"], d["image"], tuple(d["turns"]), d["task"], d["label"], d["dataset"])


def _turn(role: str, content: str) -> dict:
    return {"role": role, "content": content}


def build_conversation(outcome: SampleOutcome, task: str, system_prompt: str | None = None) -> ConversationRecord:
    label = outcome.final_cot.label.value
    turns = [_turn("system", system_prompt)] if system_prompt else []
    if task == FER:
        turns += [_turn("user", f"{IMAGE_TOKEN}\n{FER_QUESTION}"), _turn("assistant", label)]
    else:
        turns += [
            _turn("user", f"{IMAGE_TOKEN}\n{COT_INSTRUCTION}"),
            _turn("assistant", outcome.final_cot.to_text()),
            _turn("user", FER_QUESTION),
            _turn("assistant", label),
        ]
    return ConversationRecord(
        outcome.sample_id, outcome.image_ref or outcome.sample_id, tuple(turns), task, label, outcome.dataset
    )


def emit(outcomes: Sequence[SampleOutcome], mix: MixPolicy = MixPolicy(),
         system_prompt: str | None = None) -> list[ConversationRecord]:
    """Turn accepted outcomes into conversations, keeping input order."""
    for o in outcomes:
        if not o.accepted or o.final_cot is None:
            raise ValueError(f"outcome {o.sample_id!r} is not Accepted; filter failed samples before emitting")
        problems = validate_cot(o.final_cot, profile_for_dataset(o.dataset))
        if problems:
            raise ValueError(f"outcome {o.sample_id!r} carries an invalid CoT: {[p.value for p in problems]}")
    rng = random.Random(mix.seed)
    return [
        build_conversation(o, FER if rng.random() < mix.fer_fraction else COT, system_prompt)
        for o in outcomes
    ]


def write_jsonl(path: str | Path, records: Iterable[ConversationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[ConversationRecord]:
    with open(path, encoding="utf-8") as f:
        return [ConversationRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def _cot_answer(record: ConversationRecord) -> str | None:
    if record.task != COT:
        return None
    answers = [t["content"] for t in record.turns if t["role"] == "assistant"]
    return answers[0] if answers else None


def dataset_stats(records: Sequence[ConversationRecord], bin_width: int = 10) -> dict:
    """Counts per task, label and source dataset plus a CoT word-count histogram."""
    hist: Counter = Counter()
    unparsed = 0
    for r in records:
        text = _cot_answer(r)
        if text is None:
            continue
        try:
            wc = parse_cot(text).word_count
        except CotParseError:
            unparsed += 1
            continue
        lo = (wc // bin_width) * bin_width
        hist[f"{lo}-{lo + bin_width - 1}"] += 1
    return {
        "total": len(records),
        "per_task": dict(sorted(Counter(r.task for r in records).items())),
        "per_label": dict(sorted(Counter(r.label for r in records).items())),
        "per_dataset": dict(sorted(Counter(r.dataset for r in records).items())),
        "cot_word_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0].split("-")[0]))),
        "cot_unparsed": unparsed,
    }
