"""Command-line entry point.

Exit codes: 0 success, 1 fatal configuration or input error, 2 the run
completed but some samples failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .au import AuError
from .config import ConfigError, RunConfig, load_config, validate_config
from .cot import CotParseError, CotRecord, LabelError, profile_for_dataset, validate_cot
from .dataset import MixPolicy, dataset_stats, emit, read_jsonl, write_jsonl
from .gateway import TranscriptLog
from .pipeline import (
    BatchReport,
    ExpCotPipeline,
    ManifestError,
    PipelinePolicy,
    dataset_counts,
    dry_run,
    load_manifest,
    read_outcomes,
    write_outcomes,
)
from .prompts import TemplateError
from .scoring import CotJudge, accuracy, format_score, score_pairs

logger = logging.getLogger("expcot")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class JsonLogFormatter(logging.Formatter):
    def format(self, record):
        payload = {
            "time": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def _setup_logging(level: str, as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _snapshot(out_dir: Path, command: str, cfg: RunConfig, args: argparse.Namespace) -> None:
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out_dir / f"{command}.config.json", {"command": command, "args": argv, "config": cfg.snapshot()})


def _policy(cfg: RunConfig, args) -> PipelinePolicy:
    p = cfg.policy
    try:
        return PipelinePolicy(
            label_injection_threshold=args.threshold or p.label_injection_threshold,
            max_rounds=args.max_rounds or p.max_rounds,
            parallelism=args.parallelism or p.parallelism,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_generate(args, cfg: RunConfig) -> int:
    policy = _policy(cfg, args)
    if not args.dry_run:
        validate_config(cfg, need_llm=True)
    samples = load_manifest(args.manifest, cfg.profile)
    out = Path(args.out or cfg.output_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "generate", cfg, args)
    transcript = TranscriptLog(out / "transcripts.jsonl")

    if args.dry_run:
        report = dry_run(samples)
        _write_json(out / "report.json", report.summary())
        print(json.dumps(report.summary()["dataset_counts"]))
        return EXIT_OK

    pipeline = ExpCotPipeline(
        gateway=cfg.build_gateway(transcript),
        au_backend=cfg.build_au_backend(),
        policy=policy,
        gen_config=cfg.generation_config(),
        prompts=cfg.prompt_kit(),
        name_table=cfg.name_table(),
        default_profile=cfg.profile,
        transcript_name=transcript.path.name,
    )
    outcomes_path = out / "outcomes.jsonl"
    done = {}
    if args.resume and outcomes_path.exists():
        done = {o.sample_id: o for o in read_outcomes(outcomes_path)}
        logger.info("resuming: %d samples already done", len(done))
    todo = [s for s in samples if s.sample_id not in done]
    report = pipeline.run_batch(todo, policy) if todo else None
    fresh = {o.sample_id: o for o in (report.outcomes if report else [])}
    outcomes = [done.get(s.sample_id) or fresh[s.sample_id] for s in samples]
    write_outcomes(outcomes_path, outcomes)

    full = BatchReport(outcomes, dataset_counts(samples))
    summary = full.summary()
    _write_json(out / "report.json", summary)
    print(json.dumps({k: summary[k] for k in ("accepted", "failed", "label_injected", "mean_rounds")}))
    return EXIT_PARTIAL if full.failed else EXIT_OK


def _load_cots(path: str) -> list[tuple[str | None, CotRecord | None]]:
    """Read CotRecord JSON lines, or outcome lines carrying ``final_cot``."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            d = json.loads(line)
            sid = d.get("sample_id")
            if "final_cot" in d:
                d = d["final_cot"]
            try:
                rows.append((sid, CotRecord.from_dict(d) if d else None))
            except (KeyError, LabelError, CotParseError) as e:
                raise ConfigError(f"{path}:{lineno}: invalid CoT record: {e}") from None
    return rows


def cmd_score(args, cfg: RunConfig) -> int:
    preds, gts = _load_cots(args.pred), _load_cots(args.gt)
    if all(sid for sid, _ in preds + gts):
        gt_by_id = dict(gts)
        pairs = [(sid, p, gt_by_id.get(sid)) for sid, p in preds]
    else:
        if len(preds) != len(gts):
            raise ConfigError(f"{len(preds)} predictions vs {len(gts)} references and no sample ids to pair them")
        pairs = [(sid or f"line{i + 1}", p, g[1]) for i, ((sid, p), g) in enumerate(zip(preds, gts))]
    missing = [sid for sid, p, g in pairs if p is None or g is None]
    pairs = [(sid, p, g) for sid, p, g in pairs if p is not None and g is not None]
    if not pairs:
        raise ConfigError("no scorable prediction/reference pairs")

    if args.judge == "mock":
        cfg.gateway.backend, cfg.gateway.mock_script = "mock", None
    elif args.judge.startswith("mock:"):
        cfg.gateway.backend, cfg.gateway.mock_script = "mock", args.judge[5:]
    elif args.judge == "http":
        cfg.gateway.backend = "http"
        validate_config(cfg, need_llm=True)
    else:
        raise ConfigError(f"unknown judge backend {args.judge!r}; use mock, mock:<script.json> or http")
    validate_config(cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _snapshot(out.parent, "score", cfg, args)
    transcript = TranscriptLog(out.parent / "judge_transcripts.jsonl")
    judge = CotJudge(cfg.build_gateway(transcript, judge=True), cfg.generation_config())
    report = score_pairs(pairs, judge, parallelism=args.parallelism or cfg.policy.parallelism)
    result = report.to_dict()
    result["label_accuracy"] = accuracy([p.label for _, p, _ in pairs], [g.label for _, _, g in pairs])
    result["unpaired"] = missing
    _write_json(out, result)
    if result["means"]:
        m = result["means"]
        print(f"KeyO {m['KeyO']:.2f}  Over {m['Over']:.2f}  Conc {m['Conc']:.2f}  ALL {format_score(m['ALL'])}")
    return EXIT_PARTIAL if report.failures or missing else EXIT_OK


def cmd_emit(args, cfg: RunConfig) -> int:
    outcomes = read_outcomes(args.outcomes)
    accepted = [o for o in outcomes if o.accepted]
    try:
        mix = MixPolicy(args.mix, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    records = emit(accepted, mix, system_prompt=args.system_prompt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _snapshot(out.parent, "emit-dataset", cfg, args)
    write_jsonl(out, records)
    logger.info("emitted %d conversations (%d failed outcomes skipped)", len(records), len(outcomes) - len(accepted))
    print(json.dumps(dataset_stats(records)["per_task"]))
    return EXIT_OK


def cmd_validate(args, cfg: RunConfig) -> int:
    if not args.manifest and not args.outcomes:
        raise ConfigError("validate needs --manifest and/or --outcomes")
    problems = 0
    summary = {}
    if args.manifest:
        try:
            samples = load_manifest(args.manifest, cfg.profile)
            summary["dataset_counts"] = dry_run(samples).dataset_counts
        except ManifestError as e:
            for issue in e.issues:
                print(f"{args.manifest}: {issue}", file=sys.stderr)
            problems += len(e.issues)
    if args.outcomes:
        bad = 0
        for o in read_outcomes(args.outcomes):
            if o.accepted:
                found = validate_cot(o.final_cot, profile_for_dataset(o.dataset, cfg.profile))
                if found:
                    bad += 1
                    print(f"{args.outcomes}: sample {o.sample_id}: field 'final_cot': "
                          f"{', '.join(v.value for v in found)}", file=sys.stderr)
        summary["invalid_cots"] = bad
        problems += bad
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _snapshot(out, "validate", cfg, args)
        _write_json(out / "validate.json", {**summary, "problems": problems})
    print(json.dumps({**summary, "problems": problems}))
    return EXIT_FATAL if problems else EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    stats = dataset_stats(read_jsonl(args.input))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _snapshot(out.parent, "stats", cfg, args)
        _write_json(out, stats)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expcot", description="Verified facial-expression CoT data engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--log-json", action="store_true", help="line-delimited JSON logs on stderr")
    common.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="run the CoT generation engine over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="validate the manifest only; no LLM calls")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--threshold", type=int, help="feedback rounds before the true label is injected")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--resume", action="store_true", help="skip samples already in <out>/outcomes.jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", parents=[common], help="score predicted CoTs against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--judge", default="mock", help="mock | mock:<script.json> | http")
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("emit-dataset", parents=[common], help="build instruction-tuning conversations")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--mix", type=float, default=0.75, help="fraction of FER-only conversations")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--system-prompt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("validate", parents=[common], help="check a manifest and/or outcome file")
    p.add_argument("--manifest")
    p.add_argument("--outcomes")
    p.add_argument("--out", help="directory for a validation report")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", parents=[common], help="summarise a conversation dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _setup_logging(args.log_level or cfg.log_level, args.log_json)
        return args.func(args, cfg)
    except ManifestError as e:
        for issue in e.issues:
            print(f"error: {issue}", file=sys.stderr)
        return EXIT_FATAL
    except (ConfigError, TemplateError, AuError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
