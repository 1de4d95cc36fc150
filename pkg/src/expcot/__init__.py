"""Verified chain-of-thought data engine for facial expression recognition."""

__version__ = "0.1.0"

from .au import AuNameTable, AuObservation, AuVector, default_name_table, format_density, index_to_name, partition
from .cot import CotRecord, ExpressionLabel, LabelProfile, get_profile, normalize_label, parse_cot, validate_cot
from .gateway import ChatMessage, DialogueMemory, Gateway, GenerationConfig, HttpChatBackend, ScriptedBackend
from .pipeline import ExpCotPipeline, PipelinePolicy, SampleInput, SampleOutcome
from .scoring import ComponentScores, CotJudge, accuracy, aggregate, bleu
from .dataset import MixPolicy, emit, dataset_stats
from .estimators import AuPartitioner, ExpCotEngine, ExpCotScorer

__all__ = [
    "AuNameTable", "AuObservation", "AuVector", "default_name_table", "format_density", "index_to_name",
    "partition", "CotRecord", "ExpressionLabel", "LabelProfile", "get_profile", "normalize_label",
    "parse_cot", "validate_cot", "ChatMessage", "DialogueMemory", "Gateway", "GenerationConfig",
    "HttpChatBackend", "ScriptedBackend", "ExpCotPipeline", "PipelinePolicy", "SampleInput",
    "SampleOutcome", "ComponentScores", "CotJudge", "accuracy", "aggregate", "bleu", "MixPolicy",
    "emit", "dataset_stats", "AuPartitioner", "ExpCotEngine", "ExpCotScorer",
]
