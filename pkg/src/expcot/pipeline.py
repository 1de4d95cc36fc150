"""Per-sample generation engine and the batch driver.

One sample goes through: AU lookup, description generation, label
extraction, an isolated verification call, feedback rounds (plain, then
label-injecting once the round threshold is reached) and finally format
refinement of the accepted description into a three-part CoT.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx

from .au import AuError, AuNameTable, AuVector, N_AUS, default_name_table, partition
from .cot import (
    CotParseError,
    CotRecord,
    ExpressionLabel,
    LabelError,
    LabelProfile,
    get_profile,
    label_from_class_id,
    normalize_label,
    parse_cot,
    profile_for_dataset,
    validate_cot,
)
from .gateway import DialogueMemory, Gateway, GenerationConfig
from .prompts import PromptKit, Verdict, default_kit, parse_label, parse_verdict

logger = logging.getLogger(__name__)

ACCEPTED = "Accepted"
FAILED = "Failed"

REFINE_ATTEMPTS = 2


class AuBackendError(RuntimeError):
    pass


class AuBackend(Protocol):
    def get(self, sample_id: str, ref: str | None = None) -> AuVector: ...


class StubAuBackend:
    """Explicit vectors by id, otherwise a sparse vector seeded from the id."""

    def __init__(self, vectors: dict[str, AuVector] | None = None, density_scale: float = 1.0):
        self.vectors = dict(vectors or {})
        self.density_scale = density_scale

    def get(self, sample_id, ref=None):
        key = ref or sample_id
        if key in self.vectors:
            return self.vectors[key]
        seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
        rng = random.Random(seed)
        values = [round(rng.random() * self.density_scale, 2) if rng.random() < 0.3 else 0.0
                  for _ in range(N_AUS)]
        return AuVector(tuple(values))


class PrecomputedAuBackend:
    """JSON-lines file of ``{"id": ..., "au": [24 floats]}`` records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.vectors: dict[str, AuVector] = {}
        with self.path.open(encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    self.vectors[str(rec["id"])] = AuVector(tuple(rec["au"]))
                except (KeyError, AuError) as e:
                    raise AuBackendError(f"{self.path}:{lineno}: {e}") from e

    def get(self, sample_id, ref=None):
        key = ref or sample_id
        try:
            return self.vectors[key]
        except KeyError:
            raise AuBackendError(f"no AU vector for {key!r} in {self.path}") from None


class InferenceServiceAuBackend:
    """POSTs ``{"sample_id", "au_ref"}`` and expects ``{"au": [24 floats]}`` back."""

    def __init__(self, url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.url = url
        self.timeout = timeout
        self.client = client or httpx.Client()

    def get(self, sample_id, ref=None):
        try:
            resp = self.client.post(self.url, json={"sample_id": sample_id, "au_ref": ref}, timeout=self.timeout)
            resp.raise_for_status()
            return AuVector(tuple(resp.json()["au"]))
        except (httpx.HTTPError, KeyError, ValueError) as e:
            raise AuBackendError(f"AU service failed for {sample_id!r}: {e}") from e


@dataclass(frozen=True)
class SampleInput:
    sample_id: str
    gt_label: ExpressionLabel
    dataset: str = "unknown"
    au: AuVector | None = None
    au_ref: str | None = None
    image_ref: str | None = None

    def __post_init__(self):
        # with neither au nor au_ref the AU backend is queried by sample_id
        object.__setattr__(self, "gt_label", normalize_label(self.gt_label))


@dataclass(frozen=True)
class PipelinePolicy:
    label_injection_threshold: int = 3
    max_rounds: int = 6
    parallelism: int = 1

    def __post_init__(self):
        t, m = self.label_injection_threshold, self.max_rounds
        if not 1 <= t <= m <= 10:
            raise ValueError(f"need 1 <= threshold ({t}) <= max_rounds ({m}) <= 10")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


@dataclass
class SampleOutcome:
    sample_id: str
    status: str
    rounds_used: int
    label_injected: bool
    verdicts: list[str]
    final_cot: CotRecord | None
    transcript_ref: str
    gt_label: str = ""
    dataset: str = ""
    image_ref: str | None = None
    refine_attempts: int = 0
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "status": self.status,
            "rounds_used": self.rounds_used,
            "label_injected": self.label_injected,
            "verdicts": list(self.verdicts),
            "final_cot": self.final_cot.to_dict() if self.final_cot else None,
            "transcript_ref": self.transcript_ref,
            "gt_label": self.gt_label,
            "dataset": self.dataset,
            "image_ref": self.image_ref,
            "refine_attempts": self.refine_attempts,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleOutcome":
        d = dict(d)
        cot = d.pop("final_cot", None)
        return cls(final_cot=CotRecord.from_dict(cot) if cot else None, **d)


def write_outcomes(path: str | Path, outcomes: Iterable[SampleOutcome]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for o in outcomes:
            f.write(json.dumps(o.to_dict(), ensure_ascii=False) + "\n")


def read_outcomes(path: str | Path) -> list[SampleOutcome]:
    with open(path, encoding="utf-8") as f:
        return [SampleOutcome.from_dict(json.loads(line)) for line in f if line.strip()]


@dataclass
class BatchReport:
    outcomes: list[SampleOutcome] = field(default_factory=list)
    dataset_counts: dict[str, int] = field(default_factory=dict)
    dry_run: bool = False

    @property
    def accepted(self) -> int:
        return sum(o.accepted for o in self.outcomes)

    @property
    def failed(self) -> int:
        return sum(not o.accepted for o in self.outcomes)

    @property
    def label_injected(self) -> int:
        return sum(o.label_injected for o in self.outcomes)

    @property
    def mean_rounds(self) -> float:
        return sum(o.rounds_used for o in self.outcomes) / len(self.outcomes) if self.outcomes else 0.0

    def summary(self) -> dict:
        return {
            "dry_run": self.dry_run,
            "samples": sum(self.dataset_counts.values()),
            "accepted": self.accepted,
            "failed": self.failed,
            "label_injected": self.label_injected,
            "mean_rounds": self.mean_rounds,
            "dataset_counts": dict(self.dataset_counts),
            "failures": {o.sample_id: o.reason for o in self.outcomes if not o.accepted},
        }


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestIssue:
    line: int
    sample_id: str | None
    field: str
    message: str

    def __str__(self) -> str:
        who = self.sample_id if self.sample_id is not None else "<unknown>"
        return f"line {self.line}: sample {who}: field '{self.field}': {self.message}"


class ManifestError(ValueError):
    def __init__(self, issues: Sequence[ManifestIssue]):
        self.issues = list(issues)
        head = "; ".join(str(i) for i in self.issues[:5])
        more = f" (+{len(self.issues) - 5} more)" if len(self.issues) > 5 else ""
        super().__init__(f"{len(self.issues)} manifest issue(s): {head}{more}")


def _parse_manifest_record(rec: dict, lineno: int, default_profile) -> tuple[SampleInput | None, list[ManifestIssue]]:
    issues = []
    sid = rec.get("sample_id")

    def bad(fld, msg):
        issues.append(ManifestIssue(lineno, sid, fld, msg))

    if not isinstance(sid, str) or not sid:
        bad("sample_id", "must be a non-empty string")
    dataset = rec.get("dataset", "unknown")
    if not isinstance(dataset, str) or not dataset:
        bad("dataset", "must be a non-empty string")
        dataset = "unknown"
    profile = profile_for_dataset(dataset, default_profile)
    label = None
    raw_label = rec.get("gt_label")
    try:
        if isinstance(raw_label, int) and not isinstance(raw_label, bool):
            label = label_from_class_id(raw_label, profile)
        elif isinstance(raw_label, str):
            label = normalize_label(raw_label)
        else:
            bad("gt_label", f"missing or invalid label {raw_label!r}")
    except LabelError as e:
        bad("gt_label", str(e))
    if label is not None and label not in profile:
        bad("gt_label", f"{label.value} is not in profile {profile.name}")
    au = None
    au_ref = rec.get("au_ref")
    if "au" in rec:
        raw = rec["au"]
        if not isinstance(raw, list) or len(raw) != N_AUS:
            bad("au", f"must be a list of {N_AUS} numbers")
        else:
            for i, d in enumerate(raw):
                if isinstance(d, bool) or not isinstance(d, (int, float)) or not 0.0 <= d <= 1.0:
                    bad(f"au[{i}]", f"density {d!r} outside [0, 1]")
            if not issues:
                au = AuVector(tuple(raw))
    elif au_ref is not None and (not isinstance(au_ref, str) or not au_ref):
        bad("au_ref", "must be a non-empty string")
    elif au_ref is None:
        bad("au", "either 'au' or 'au_ref' is required")
    if issues:
        return None, issues
    return SampleInput(sid, label, dataset, au, au_ref, rec.get("image")), []


def parse_manifest(lines: Iterable[str], default_profile: str | LabelProfile = "affectnet8"
                   ) -> tuple[list[SampleInput], list[ManifestIssue]]:
    """Parse JSON-lines manifest text, collecting every issue instead of stopping at the first."""
    samples, issues, seen = [], [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            issues.append(ManifestIssue(lineno, None, "<json>", str(e)))
            continue
        if not isinstance(rec, dict):
            issues.append(ManifestIssue(lineno, None, "<json>", "record must be an object"))
            continue
        sample, errs = _parse_manifest_record(rec, lineno, default_profile)
        issues.extend(errs)
        if sample is None:
            continue
        if sample.sample_id in seen:
            issues.append(ManifestIssue(lineno, sample.sample_id, "sample_id", "duplicate id"))
            continue
        seen.add(sample.sample_id)
        samples.append(sample)
    return samples, issues


def load_manifest(path: str | Path, default_profile: str | LabelProfile = "affectnet8") -> list[SampleInput]:
    with open(path, encoding="utf-8") as f:
        samples, issues = parse_manifest(f, default_profile)
    if issues:
        raise ManifestError(issues)
    if not samples:
        raise ManifestError([ManifestIssue(0, None, "<file>", "manifest is empty")])
    return samples


def dataset_counts(samples: Iterable[SampleInput]) -> dict[str, int]:
    return dict(sorted(Counter(s.dataset for s in samples).items()))


# ---------------------------------------------------------------- engine

class ExpCotPipeline:
    def __init__(
        self,
        gateway: Gateway,
        au_backend: AuBackend | None = None,
        policy: PipelinePolicy | None = None,
        gen_config: GenerationConfig | None = None,
        prompts: PromptKit | None = None,
        name_table: AuNameTable | None = None,
        default_profile: str | LabelProfile = "affectnet8",
        transcript_name: str = "transcripts.jsonl",
    ):
        self.gateway = gateway
        self.au_backend = au_backend or StubAuBackend()
        self.policy = policy or PipelinePolicy()
        self.gen_config = gen_config or GenerationConfig()
        self.prompts = prompts or default_kit()
        self.name_table = (name_table or default_name_table()).check_total()
        self.default_profile = get_profile(default_profile)
        self.transcript_name = transcript_name

    def _call(self, memory: DialogueMemory, stage: str, rnd: int) -> str:
        reply = self.gateway.complete(memory, self.gen_config.for_stage(stage), stage, rnd)
        memory.append(reply)
        return reply.content

    def run_sample(self, sample: SampleInput, policy: PipelinePolicy | None = None) -> SampleOutcome:
        policy = policy or self.policy
        outcome = SampleOutcome(
            sample_id=sample.sample_id,
            status=FAILED,
            rounds_used=0,
            label_injected=False,
            verdicts=[],
            final_cot=None,
            transcript_ref=f"{self.transcript_name}#{sample.sample_id}",
            gt_label=sample.gt_label.value,
            dataset=sample.dataset,
            image_ref=sample.image_ref or sample.au_ref or sample.sample_id,
        )
        try:
            self._run(sample, policy, outcome)
        except Exception as e:  # per-sample failures never abort a batch
            logger.warning("sample %s failed: %s", sample.sample_id, e)
            outcome.status = FAILED
            outcome.final_cot = None
            outcome.reason = f"{type(e).__name__}: {e}"
        return outcome

    def _run(self, sample: SampleInput, policy: PipelinePolicy, outcome: SampleOutcome) -> None:
        sid, gt = sample.sample_id, sample.gt_label
        profile = profile_for_dataset(sample.dataset, self.default_profile)
        vector = sample.au if sample.au is not None else self.au_backend.get(sid, sample.au_ref)
        obs = partition(vector, self.name_table)

        memory = DialogueMemory(sid)
        memory.add_user(self.prompts.render_au2des(obs))
        accepted_description = None
        for rnd in range(1, policy.max_rounds + 1):
            outcome.rounds_used = rnd
            description = self._call(memory, "au2des" if rnd == 1 else "feedback", rnd)
            memory.add_user(self.prompts.render_des2exp(description))
            raw_label = self._call(memory, "des2exp", rnd)
            try:
                predicted = parse_label(raw_label, profile)
            except LabelError:
                logger.info("sample %s round %d: unparseable label %r", sid, rnd, raw_label)
                predicted = None

            verify_memory = DialogueMemory(sid)
            verify_memory.add_user(self.prompts.render_verify(obs, gt, description, raw_label.strip()))
            verdict = parse_verdict(self._call(verify_memory, "verify", rnd))
            if verdict is Verdict.UNPARSEABLE:
                logger.info("sample %s round %d: unparseable verdict, treated as Incorrect", sid, rnd)
            outcome.verdicts.append(verdict.value)

            if verdict is Verdict.CORRECT and predicted == gt:
                accepted_description = description
                break
            if rnd == policy.max_rounds:
                break
            with_label = rnd >= policy.label_injection_threshold
            outcome.label_injected = outcome.label_injected or with_label
            memory.add_user(self.prompts.render_feedback(with_label, gt))

        if accepted_description is None:
            outcome.reason = f"no verified description after {outcome.rounds_used} rounds"
            return

        self._refine(sid, gt, profile, accepted_description, outcome)

    def _refine(self, sid, gt, profile, description, outcome: SampleOutcome) -> None:
        base = DialogueMemory(sid)
        base.add_user(self.prompts.render_refine(description))
        problems: list[str] = []
        for attempt in range(1, REFINE_ATTEMPTS + 1):
            outcome.refine_attempts = attempt
            text = self._call(base.fork(), "refine", attempt)
            try:
                cot = parse_cot(text, profile)
            except CotParseError as e:
                problems = [str(e)]
                continue
            problems = [v.value for v in validate_cot(cot, profile)]
            if cot.label != gt:
                problems.append(f"refined label {cot.label.value} != {gt.value}")
            if not problems:
                outcome.status = ACCEPTED
                outcome.final_cot = cot
                return
        outcome.reason = "refinement failed: " + "; ".join(problems)

    def run_batch(self, samples: Sequence[SampleInput], policy: PipelinePolicy | None = None) -> BatchReport:
        policy = policy or self.policy
        if not samples:
            raise ValueError("manifest is empty")
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            dupes = sorted(i for i, c in Counter(ids).items() if c > 1)
            raise ValueError(f"duplicate sample ids: {dupes[:10]}")
        if policy.parallelism == 1:
            results = [self.run_sample(s, policy) for s in samples]
        else:
            with ThreadPoolExecutor(max_workers=policy.parallelism) as pool:
                results = list(pool.map(lambda s: self.run_sample(s, policy), samples))
        report = BatchReport(results, dataset_counts(samples))
        logger.info("batch done: %d accepted, %d failed", report.accepted, report.failed)
        return report


def dry_run(samples: Sequence[SampleInput]) -> BatchReport:
    """Validate-only pass: no AU lookups, no LLM calls."""
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    return BatchReport([], dataset_counts(samples), dry_run=True)
