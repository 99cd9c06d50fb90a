"""Transformer language model with a dynamic entity memory, plus entity-centric story metrics."""
from .corpus import (
    AnnotatedNarrative,
    EntityPrompt,
    SyntheticCorpusSpec,
    Vocab,
    build_entity_prompt,
    load_jsonl,
    save_jsonl,
    synth_generate,
)
from .generate import GenerateConfig, generate_for_prompts, generate_story, nucleus_distribution
from .metrics import EntityMentionIndex, consistency_U, consistency_V, lm_uncertainty, match_gold, story_metrics
from .model import EntityMemoryState, MnemeLM, ModelConfig, RecurrenceCache, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate_nll, make_example, narrative_pass, train_loop

__all__ = [
    "AnnotatedNarrative",
    "EntityMemoryState",
    "EntityMentionIndex",
    "EntityPrompt",
    "GenerateConfig",
    "MnemeLM",
    "ModelConfig",
    "RecurrenceCache",
    "SyntheticCorpusSpec",
    "TrainConfig",
    "Vocab",
    "build_entity_prompt",
    "consistency_U",
    "consistency_V",
    "evaluate_nll",
    "generate_for_prompts",
    "generate_story",
    "lm_uncertainty",
    "load_checkpoint",
    "load_jsonl",
    "make_example",
    "match_gold",
    "narrative_pass",
    "nucleus_distribution",
    "save_checkpoint",
    "save_jsonl",
    "story_metrics",
    "synth_generate",
    "train_loop",
]
__version__ = "0.1.0"
