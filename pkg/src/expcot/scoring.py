"""CoT quality scoring.

Each predicted CoT is compared with a reference CoT per section: the two
descriptive sections are rated 0-5 by an LLM judge, the conclusion gets 5 or
0 from a local label comparison, and the three are summed and divided by 15.
A plain BLEU implementation is included as the surface-metric baseline.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .cot import CotRecord, ExpressionLabel, normalize_label
from .gateway import CallContext, DialogueMemory, Gateway, GatewayError, GenerationConfig

MAX_COMPONENT = 5
MAX_TOTAL = 15


class ScoringError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComponentScores:
    key_obs: int
    overall: int
    conclusion: int

    def __post_init__(self):
        for name in ("key_obs", "overall"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= MAX_COMPONENT:
                raise ValueError(f"{name} must be an integer in [0, 5], got {v!r}")
        if self.conclusion not in (0, MAX_COMPONENT) or isinstance(self.conclusion, bool):
            raise ValueError(f"conclusion must be 0 or 5, got {self.conclusion!r}")

    def to_dict(self) -> dict:
        return {"key_obs": self.key_obs, "overall": self.overall, "conclusion": self.conclusion}


@dataclass(frozen=True)
class ComponentMeans:
    """Per-component averages over a sample set (conclusion need not be 0/5 here)."""

    key_obs: float
    overall: float
    conclusion: float

    def __post_init__(self):
        for name in ("key_obs", "overall", "conclusion"):
            v = getattr(self, name)
            if not 0.0 <= v <= MAX_COMPONENT:
                raise ValueError(f"{name} mean must be in [0, 5], got {v!r}")

    @classmethod
    def of(cls, scores: Sequence[ComponentScores]) -> "ComponentMeans":
        if not scores:
            raise ValueError("no scores to average")
        n = len(scores)
        return cls(
            sum(s.key_obs for s in scores) / n,
            sum(s.overall for s in scores) / n,
            sum(s.conclusion for s in scores) / n,
        )


def aggregate(c: ComponentScores | ComponentMeans) -> float:
    """Sum of the three components over 15, in [0, 1]."""
    return (c.key_obs + c.overall + c.conclusion) / MAX_TOTAL


def format_score(value: float) -> str:
    return f"{value:.2f}"


def conclusion_score(pred: CotRecord | ExpressionLabel | str, gt: CotRecord | ExpressionLabel | str) -> int:
    p = pred.label if isinstance(pred, CotRecord) else normalize_label(pred)
    g = gt.label if isinstance(gt, CotRecord) else normalize_label(gt)
    return MAX_COMPONENT if p == g else 0


# ---------------------------------------------------------------- LLM judge

KEY_OBS_RUBRIC = (
    "Assess how similar the generated key observations are to the reference key observations "
    "by comparing the Action Unit names and their corresponding intensities. "
    "Give a score between 0 and 5, where 5 means the highest level of agreement."
)
OVERALL_RUBRIC = (
    "Assess how similar the generated overall emotional interpretation is to the reference one "
    "by comparing the Action Unit combinations and their associated expressions "
    "(for example, raised eyelids together with raised eyebrows indicating strong surprise). "
    "Give a score between 0 and 5, where 5 means the highest level of agreement."
)
JUDGE_TEMPLATE = (
    "{rubric}\n\n"
    "Generated {section}:\n<<<\n{pred}\n>>>\n\n"
    "Reference {section}:\n<<<\n{gt}\n>>>\n\n"
    "Reply with a single integer 0-5, nothing else."
)
REASK = "Reply with a single integer from 0 to 5 and nothing else."

_INT_RE = re.compile(r"^\s*(-?\d+)\s*\.?\s*$")


def parse_score(text: str) -> int | None:
    """Strict integer parse; ``None`` for anything that is not an integer in [0, 5]."""
    m = _INT_RE.match(text)
    if not m:
        return None
    value = int(m.group(1))
    return value if 0 <= value <= MAX_COMPONENT else None


def render_judge(rubric: str, section: str, pred: str, gt: str) -> str:
    return JUDGE_TEMPLATE.format(rubric=rubric, section=section, pred=pred, gt=gt)


class CotJudge:
    def __init__(self, gateway: Gateway, gen_config: GenerationConfig | None = None):
        self.gateway = gateway
        self.gen_config = (gen_config or GenerationConfig(temperature=0.0)).for_stage("judge")

    def _ask(self, sample_id: str, stage: str, prompt: str) -> int:
        memory = DialogueMemory(sample_id)
        memory.add_user(prompt)
        for attempt in (1, 2):
            reply = self.gateway.complete(memory, self.gen_config, stage, attempt)
            memory.append(reply)
            score = parse_score(reply.content)
            if score is not None:
                return score
            if attempt == 1:
                memory.add_user(REASK)
        raise ScoringError(f"judge reply for {sample_id}/{stage} is not an integer in [0, 5]: {reply.content!r}")

    def judge_components(self, pred: CotRecord, gt: CotRecord, sample_id: str = "sample") -> ComponentScores:
        key_obs = self._ask(sample_id, "judge_key_obs",
                            render_judge(KEY_OBS_RUBRIC, "key observations", pred.key_observations, gt.key_observations))
        overall = self._ask(sample_id, "judge_overall",
                            render_judge(OVERALL_RUBRIC, "overall emotional interpretation",
                                         pred.overall_interpretation, gt.overall_interpretation))
        return ComponentScores(key_obs, overall, conclusion_score(pred, gt))


_BLOCK_RE = re.compile(r"Generated [^\n]*:\n<<<\n(.*?)\n>>>.*?Reference [^\n]*:\n<<<\n(.*?)\n>>>", re.DOTALL)


def lexical_judge_responder(ctx: CallContext, messages: list) -> str:
    """Offline stand-in for a judge: rounds 5x the word-set F1 of the two texts.

    Identical texts score 5; texts with no shared words score 0.
    """
    m = _BLOCK_RE.search(messages[0]["content"])
    if m is None:
        return "0"
    a, b = set(_tokens(m.group(1))), set(_tokens(m.group(2)))
    if not a or not b:
        return "5" if a == b else "0"
    common = len(a & b)
    f1 = 2 * common / (len(a) + len(b))
    return str(int(math.floor(5 * f1 + 0.5)))


# ---------------------------------------------------------------- reports

@dataclass
class ScoreReport:
    per_sample: dict[str, ComponentScores] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def means(self) -> ComponentMeans | None:
        return ComponentMeans.of(list(self.per_sample.values())) if self.per_sample else None

    def to_dict(self) -> dict:
        means = self.means
        return {
            "n_scored": len(self.per_sample),
            "n_failed": len(self.failures),
            "per_sample": {
                sid: {**s.to_dict(), "score": aggregate(s)} for sid, s in self.per_sample.items()
            },
            "means": None if means is None else {
                "KeyO": means.key_obs,
                "Over": means.overall,
                "Conc": means.conclusion,
                "ALL": aggregate(means),
            },
            "failures": dict(self.failures),
        }


def score_pairs(
    pairs: Sequence[tuple[str, CotRecord, CotRecord]],
    judge: CotJudge,
    parallelism: int = 1,
) -> ScoreReport:
    """Score ``(sample_id, pred, gt)`` triples; judge failures are recorded, not raised."""

    def one(item):
        sid, pred, gt = item
        try:
            return sid, judge.judge_components(pred, gt, sid), None
        except (ScoringError, GatewayError) as e:
            return sid, None, str(e)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    report = ScoreReport()
    for sid, scores, err in results:
        if scores is not None:
            report.per_sample[sid] = scores
        else:
            report.failures[sid] = err
    return report


# ---------------------------------------------------------------- accuracy

def accuracy(preds: Sequence, gts: Sequence) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} labels")
    if not preds:
        raise ValueError("accuracy of an empty list is undefined")
    hits = sum(normalize_label(p) == normalize_label(g) for p, g in zip(preds, gts))
    return hits / len(preds)


# ---------------------------------------------------------------- BLEU

BLEU_EPSILON = 1e-9


def _tokens(text: str) -> list[str]:
    """Lowercase and drop punctuation before splitting into words."""
    return re.findall(r"[a-z0-9]+(?:'[a-z0-9]+)*", text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4, epsilon: float = BLEU_EPSILON) -> float:
    """Sentence BLEU with uniform weights, clipped n-gram precision and brevity penalty.

    A zero clipped count is replaced by ``epsilon``. Orders longer than the
    candidate are dropped and the weights renormalised, so ``bleu(x, x) == 1``
    for any non-empty sentence.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 1.0 if cand == ref else 0.0
    orders = range(1, min(max_n, len(cand)) + 1)
    log_sum = 0.0
    for n in orders:
        c_counts = _ngrams(cand, n)
        r_counts = _ngrams(ref, n)
        clipped = sum(min(c, r_counts[g]) for g, c in c_counts.items())
        total = sum(c_counts.values())
        log_sum += math.log((clipped or epsilon) / total)
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum / len(orders))

