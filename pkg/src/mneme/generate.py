"""Nucleus sampling and prompt-conditioned story generation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .corpus import EOS_ID, EntityPrompt, Vocab
from .errors import InputError
from .model import MnemeLM

#: slack on the cumulative-mass comparison so that e.g. 0.5 + 0.3 counts as reaching 0.8
CUMSUM_SLACK = 1e-12


@dataclass
class GenerateConfig:
    nucleus_p: float = 0.8
    temperature: float = 1.0
    max_tokens: int = 1000
    samples_per_prompt: int = 5
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not 0.0 < self.nucleus_p <= 1.0:
            raise InputError("nucleus_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise InputError("temperature must be positive (use greedy=True for the zero limit)")
        if self.max_tokens < 0 or self.samples_per_prompt < 1:
            raise InputError("max_tokens must be >= 0 and samples_per_prompt >= 1")


def nucleus_distribution(probs, p: float) -> np.ndarray:
    """Zero out everything outside the smallest top set with mass >= p and renormalise.

    Candidates are ranked by probability, ties going to the lower token id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p - CUMSUM_SLACK, side="left")) + 1
    k = min(k, len(probs))
    keep = order[:k]
    out = np.zeros_like(probs)
    out[keep] = probs[keep] / probs[keep].sum()
    return out


def nucleus_sample(logits, p: float, temperature: float, rng: np.random.Generator) -> int:
    z = np.asarray(logits, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    dist = nucleus_distribution(e / e.sum(), p)
    return int(rng.choice(len(dist), p=dist))


def sample_rng(seed: int, prompt_index: int, sample_index: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by (seed, prompt, sample)."""
    ss = np.random.SeedSequence([seed, prompt_index, sample_index])
    return np.random.Generator(np.random.Philox(ss))


def generate_story(
    model: MnemeLM,
    prompt_ids: Sequence[int],
    groups: Sequence[tuple[int, int]],
    config: GenerateConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Sample a continuation of the rendered entity prompt.

    Tokens of the current chunk are re-run against the cache of earlier
    chunks at every step, so each committed chunk goes through exactly the
    same computation as in training; the cache and (dynamic) memory advance
    once per ``chunk_size`` generated tokens.
    """
    c = model.config
    if len(prompt_ids) > c.seq_len + c.cache_size:
        raise InputError("prompt does not fit the context budget")
    out: list[int] = []
    with tt.no_grad():
        prompt = model.prompt_pass(prompt_ids)
        cache = prompt.cache
        memory = model.memory_from_hidden(prompt.final_hidden, groups) if c.has_memory else None
        logits = prompt.logits.data[-1]
        chunk: list[int] = []
        while len(out) < config.max_tokens:
            if config.greedy:
                tok = int(np.argmax(logits))
            else:
                tok = nucleus_sample(logits, config.nucleus_p, config.temperature, rng)
            out.append(tok)
            if tok == EOS_ID or len(out) >= config.max_tokens:
                break
            chunk.append(tok)
            step = model.forward_chunk(chunk, cache, memory)
            logits = step.logits.data[-1]
            if len(chunk) == c.chunk_size:
                cache = step.cache
                if c.variant == "dynamic":
                    memory = model.update_memory(memory, step.final_hidden, step.cross_weights[-1])
                chunk = []
    return out


def generate_for_prompts(
    model: MnemeLM,
    prompts: Sequence[tuple[str, EntityPrompt]],
    vocab: Vocab,
    config: GenerateConfig,
) -> list[dict]:
    """``samples_per_prompt`` stories per prompt, as JSONL-ready records."""
    records = []
    for pi, (prompt_id, prompt) in enumerate(prompts):
        ids = vocab.encode(prompt.render())
        for si in range(config.samples_per_prompt):
            toks = generate_story(model, ids, prompt.groups(), config, sample_rng(config.seed, pi, si))
            body = toks[:-1] if toks and toks[-1] == EOS_ID else toks
            records.append(
                {"prompt_id": prompt_id, "sample_index": si, "token_ids": toks, "text": " ".join(vocab.decode(body))}
            )
    return records


def write_generations(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n")


def read_generations(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
