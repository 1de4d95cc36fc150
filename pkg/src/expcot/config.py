"""Run configuration: a single YAML document, secrets via ``${ENV_VAR}``."""
from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .au import AuNameTable, default_name_table
from .cot import PROFILES
from .gateway import (
    Gateway,
    GenerationConfig,
    HttpChatBackend,
    ScriptedBackend,
    TokenBucket,
    TranscriptLog,
)
from .pipeline import (
    InferenceServiceAuBackend,
    PipelinePolicy,
    PrecomputedAuBackend,
    StubAuBackend,
)
from .prompts import PromptKit, default_kit
from .scoring import lexical_judge_responder


class ConfigError(ValueError):
    pass


_ENV_RE = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")


@dataclass
class GatewaySettings:
    backend: str = "http"
    endpoint: str | None = None
    model: str | None = None
    api_key: str | None = None
    mock_script: str | None = None
    mock_replay: str | None = None
    rate_per_second: float | None = None
    max_output_tokens: int = 1024
    retry_limit: int = 3
    timeout: float = 60.0


@dataclass
class AuBackendSettings:
    kind: str = "stub"
    path: str | None = None
    url: str | None = None


@dataclass
class RunConfig:
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    au_backend: AuBackendSettings = field(default_factory=AuBackendSettings)
    policy: PipelinePolicy = field(default_factory=PipelinePolicy)
    profile: str = "affectnet8"
    templates_dir: str | None = None
    au_names: str | None = None
    output_dir: str | None = None
    log_level: str = "INFO"

    def snapshot(self) -> dict:
        """Resolved values with the API key redacted."""
        d = asdict(self)
        if d["gateway"].get("api_key"):
            d["gateway"]["api_key"] = "<redacted>"
        return d

    def generation_config(self) -> GenerationConfig:
        g = self.gateway
        return GenerationConfig(max_output_tokens=g.max_output_tokens, retry_limit=g.retry_limit, timeout=g.timeout)

    def prompt_kit(self) -> PromptKit:
        return PromptKit.from_dir(self.templates_dir) if self.templates_dir else default_kit()

    def name_table(self) -> AuNameTable:
        return AuNameTable.from_file(self.au_names) if self.au_names else default_name_table()

    def build_au_backend(self):
        a = self.au_backend
        if a.kind == "stub":
            return StubAuBackend()
        if a.kind == "precomputed-file":
            return PrecomputedAuBackend(a.path)
        return InferenceServiceAuBackend(a.url, timeout=self.gateway.timeout)

    def build_gateway(self, transcript: TranscriptLog, judge: bool = False) -> Gateway:
        g = self.gateway
        responder = lexical_judge_responder if judge else None
        if g.backend == "mock":
            if g.mock_replay:
                backend = ScriptedBackend.from_transcript(g.mock_replay)
            elif g.mock_script:
                backend = ScriptedBackend.from_json(g.mock_script, responder)
            else:
                backend = ScriptedBackend({}, responder)
        else:
            backend = HttpChatBackend(g.endpoint, g.model, g.api_key)
        limiter = TokenBucket(g.rate_per_second) if g.rate_per_second else None
        return Gateway(backend, transcript, limiter)


def _interpolate_secret(value):
    if not isinstance(value, str):
        return value
    m = _ENV_RE.match(value.strip())
    if not m:
        return value
    if m.group(1) not in os.environ:
        raise ConfigError(f"environment variable {m.group(1)} is not set")
    return os.environ[m.group(1)]


def _section(raw: dict, name: str, cls):
    data = raw.get(name) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from None


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    path = Path(p)
    return str(path if path.is_absolute() else base / path)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read and validate a YAML config. Relative paths resolve against the file's directory."""
    if path is None:
        cfg = RunConfig()
        validate_config(cfg)
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {"gateway", "au_backend", "policy", "profile", "templates_dir", "au_names", "output_dir", "log_level"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = path.parent
    gateway = _section(raw, "gateway", GatewaySettings)
    # secrets are the only values read from the environment
    gateway.api_key = _interpolate_secret(gateway.api_key)
    gateway.mock_script = _resolve(base, gateway.mock_script)
    gateway.mock_replay = _resolve(base, gateway.mock_replay)
    au = _section(raw, "au_backend", AuBackendSettings)
    au.path = _resolve(base, au.path)
    cfg = RunConfig(
        gateway=gateway,
        au_backend=au,
        policy=_section(raw, "policy", PipelinePolicy),
        profile=raw.get("profile", "affectnet8"),
        templates_dir=_resolve(base, raw.get("templates_dir")),
        au_names=_resolve(base, raw.get("au_names")),
        output_dir=_resolve(base, raw.get("output_dir")),
        log_level=str(raw.get("log_level", "INFO")).upper(),
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig, need_llm: bool = False) -> None:
    if cfg.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {cfg.profile!r}")
    for label, p in (("templates_dir", cfg.templates_dir), ("au_names", cfg.au_names),
                     ("gateway.mock_script", cfg.gateway.mock_script),
                     ("gateway.mock_replay", cfg.gateway.mock_replay)):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{label} path {p} does not exist")
    g = cfg.gateway
    if g.backend not in ("http", "mock"):
        raise ConfigError(f"gateway.backend must be 'http' or 'mock', got {g.backend!r}")
    a = cfg.au_backend
    if a.kind not in ("stub", "precomputed-file", "inference-service"):
        raise ConfigError(f"au_backend.kind {a.kind!r} is not supported")
    if a.kind == "precomputed-file" and (a.path is None or not Path(a.path).exists()):
        raise ConfigError(f"au_backend.path {a.path} does not exist")
    if a.kind == "inference-service" and not a.url:
        raise ConfigError("au_backend.url is required for the inference-service backend")
    if need_llm and g.backend == "http" and not (g.endpoint and g.model):
        raise ConfigError("gateway.endpoint and gateway.model are required for the http backend")
    try:
        GenerationConfig(max_output_tokens=g.max_output_tokens, retry_limit=g.retry_limit, timeout=g.timeout)
    except ValueError as e:
        raise ConfigError(str(e)) from None
