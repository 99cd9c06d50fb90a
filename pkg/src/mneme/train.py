"""Training objective, entity supervision targets and the chunked training loop."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .corpus import (
    EOS_ID,
    AnnotatedNarrative,
    Vocab,
    build_entity_prompt,
    entity_target_support,
    shares,
)
from .errors import InputError
from .model import EntityMemoryState, MnemeLM
from .tensor import Tensor

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lam: float = 1.0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 1
    seed: int = 0
    ablate_memory_init: bool = False
    ablate_entity_supervision: bool = False
    gradient_clip_norm: float | None = 1.0
    warmup_steps: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.lam < 0:
            raise InputError("lambda must be >= 0")
        if self.steps <= 0 or self.batch_size <= 0:
            raise InputError("steps and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError("optimizer must be 'sgd' or 'adam'")
        if self.schedule not in ("constant", "cosine"):
            raise InputError("schedule must be 'constant' or 'cosine'")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablate_entity_supervision else self.lam

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


# -- entity targets -------------------------------------------------------------
@dataclass
class EntityTargets:
    """Per-token support of the sparse target distribution over Z slots."""

    support: list[tuple[int, ...]]
    num_slots: int

    def __len__(self) -> int:
        return len(self.support)

    def distribution(self, i: int) -> dict[int, Fraction]:
        return shares(self.support[i])

    def dense(self) -> np.ndarray:
        q = np.zeros((len(self.support), self.num_slots))
        for i, sup in enumerate(self.support):
            q[i, list(sup)] = 1.0 / len(sup)
        return q


def build_entity_targets(narrative: AnnotatedNarrative, num_slots: int) -> EntityTargets:
    """Each token gets equal shares over the entities mentioned in its
    sentence; tokens of mention-free sentences target the last slot."""
    return EntityTargets(entity_target_support(narrative, num_slots), num_slots)


@dataclass
class Example:
    story_id: str
    prompt_ids: list[int]
    groups: list[tuple[int, int]]
    ids: list[int]
    targets: EntityTargets
    narrative: AnnotatedNarrative

    @property
    def num_entities(self) -> int:
        return len(self.groups)


def make_example(narrative: AnnotatedNarrative, vocab: Vocab) -> Example:
    prompt = build_entity_prompt(narrative)
    Z = len(prompt.entities) + 1
    return Example(
        story_id=narrative.story_id,
        prompt_ids=vocab.encode(prompt.render()),
        groups=prompt.groups(),
        ids=vocab.encode(narrative.tokens),
        targets=build_entity_targets(narrative, Z),
        narrative=narrative,
    )


# -- losses -------------------------------------------------------------------------
def regularization_loss(cross_weights: Sequence[Tensor], targets: EntityTargets | np.ndarray) -> Tensor:
    """Mean over tokens, layers and heads of KL(q_i || a_itl).

    ``cross_weights`` holds one ``[H, T, Z]`` tensor per layer.  Attention is
    floored at ``KL_FLOOR`` inside the log.
    """
    q = targets.dense() if isinstance(targets, EntityTargets) else np.asarray(targets, dtype=float)
    n_layers = len(cross_weights)
    H, T, Z = cross_weights[0].shape
    if q.shape != (T, Z):
        raise InputError(f"targets {q.shape} do not match attention [{H}, {T}, {Z}]")
    qe = Tensor(np.broadcast_to(q, (H, T, Z)))
    cross = None
    for a in cross_weights:
        term = tt.sum(tt.log(tt.clamp_min(a, KL_FLOOR)) * qe)
        cross = term if cross is None else cross + term
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_part = float(np.where(q > 0, q * np.log(q), 0.0).sum())
    kl_sum = tt.add_scalar(tt.neg(cross), n_layers * H * entropy_part)
    return tt.scale(kl_sum, 1.0 / (T * n_layers * H))


def total_loss(
    logits: Tensor,
    targets_tokens,
    cross_weights: Sequence[Tensor] | None,
    entity_targets: EntityTargets | np.ndarray | None,
    lam: float,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """``NLL + lam * KL``; returns ``(total, nll, kl)``.

    With ``lam == 0`` or no cross-attention the total is the NLL itself.
    """
    nll = tt.cross_entropy_nll(logits, targets_tokens)
    kl = None
    if cross_weights is not None and entity_targets is not None:
        kl = regularization_loss(cross_weights, entity_targets)
    if kl is None or lam == 0:
        return nll, nll, kl
    return nll + tt.scale(kl, lam), nll, kl


# -- narrative pass -----------------------------------------------------------------
@dataclass
class NarrativePass:
    logits: Tensor  # [T + 1, V]: row i predicts narrative token i, last row predicts EOS
    targets: np.ndarray
    cross_weights: list[Tensor] | None  # per layer, [H, T, Z], one row per narrative token
    memories: list[EntityMemoryState]


def narrative_pass(
    model: MnemeLM,
    example: Example,
    *,
    cache_size: int | None = None,
    rng: np.random.Generator | None = None,
    random_memory: bool = False,
) -> NarrativePass:
    """Teacher-forced pass: prompt, memory initialisation, then the narrative
    chunk by chunk with a memory update after each chunk (dynamic variant)."""
    c = model.config
    ids = list(example.ids)
    if not ids:
        raise InputError(f"{example.story_id}: empty narrative")
    if max(ids + example.prompt_ids) >= c.vocab_size:
        raise InputError(f"{example.story_id}: token id outside the model vocabulary")
    cache = model.empty_cache(cache_size)
    prompt = model.prompt_pass(example.prompt_ids, cache)
    cache = prompt.cache
    memory = None
    memories = []
    if c.has_memory:
        if random_memory:
            memory = model.random_memory(example.num_entities, rng or np.random.default_rng(0))
        else:
            memory = model.memory_from_hidden(prompt.final_hidden, example.groups)
        memories.append(memory)
    rows = [prompt.logits[-1:]]
    weights: list[list[Tensor]] = [[] for _ in range(c.num_layers)]
    for s in range(0, len(ids), c.chunk_size):
        out = model.forward_chunk(ids[s:s + c.chunk_size], cache, memory)
        cache = out.cache
        rows.append(out.logits)
        if out.cross_weights is not None:
            for l, a in enumerate(out.cross_weights):
                weights[l].append(a)
            if c.variant == "dynamic":
                memory = model.update_memory(memory, out.final_hidden, out.cross_weights[-1])
                memories.append(memory)
    cross = [tt.concat(w, axis=1) if len(w) > 1 else w[0] for w in weights] if c.has_memory else None
    return NarrativePass(
        logits=tt.concat(rows, axis=0),
        targets=np.asarray(ids + [EOS_ID], dtype=np.int64),
        cross_weights=cross,
        memories=memories,
    )


def narrative_loss(
    model: MnemeLM,
    example: Example,
    lam: float,
    *,
    rng: np.random.Generator | None = None,
    random_memory: bool = False,
    cache_size: int | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    run = narrative_pass(model, example, rng=rng, random_memory=random_memory, cache_size=cache_size)
    return total_loss(run.logits, run.targets, run.cross_weights, example.targets, lam)


def token_nll(model: MnemeLM, example: Example, cache_size: int | None = None) -> np.ndarray:
    """Teacher-forced NLL of every narrative token (EOS excluded)."""
    with tt.no_grad():
        run = narrative_pass(model, example, cache_size=cache_size)
    return tt.token_nll(run.logits.data[:-1], run.targets[:-1])


def evaluate_nll(model: MnemeLM, examples: Sequence[Example], cache_size: int | None = None) -> float:
    """Token-weighted mean NLL over narrative tokens."""
    vals = np.concatenate([token_nll(model, ex, cache_size) for ex in examples])
    return float(vals.mean())


# -- optimisation ---------------------------------------------------------------------
class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.vdot(g, g) for g in grads]))) if grads else 0.0
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


@dataclass
class TraceRow:
    step: int
    nll: float
    kl: float
    total: float


@dataclass
class TrainResult:
    model: MnemeLM
    trace: list[TraceRow]


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Linear warm-up, then constant or cosine decay to zero at ``config.steps``."""
    lr = config.learning_rate
    if config.warmup_steps:
        lr *= min(1.0, step / config.warmup_steps)
    if config.schedule == "cosine":
        done = max(0, step - config.warmup_steps) / max(1, config.steps - config.warmup_steps)
        lr *= 0.5 * (1.0 + np.cos(np.pi * min(1.0, done)))
    return lr


def train_loop(
    model: MnemeLM,
    corpus: Sequence[Example],
    config: TrainConfig,
    callback: Callable[[int, MnemeLM], None] | None = None,
) -> TrainResult:
    """Train in place.  Each optimiser step averages ``batch_size`` narratives
    drawn from a seeded permutation of the corpus.  A truthy return from
    ``callback(step, model)`` stops training after that step."""
    if not corpus:
        raise InputError("empty training corpus")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    else:
        opt = SGD(params, config.learning_rate)
    lam = config.effective_lambda
    order: list[int] = []
    trace: list[TraceRow] = []
    for step in range(1, config.steps + 1):
        model.zero_grad()
        nll_sum = kl_sum = tot_sum = 0.0
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(corpus)))
            ex = corpus[order.pop()]
            total, nll, kl = narrative_loss(model, ex, lam, rng=rng, random_memory=config.ablate_memory_init)
            tt.scale(total, 1.0 / config.batch_size).backward()
            nll_sum += nll.item()
            kl_sum += kl.item() if kl is not None else 0.0
            tot_sum += total.item()
        if config.gradient_clip_norm:
            clip_grad_norm(params, config.gradient_clip_norm)
        lr = learning_rate_at(config, step)
        opt.step(lr)
        b = config.batch_size
        trace.append(TraceRow(step, nll_sum / b, kl_sum / b, tot_sum / b))
        if callback is not None and callback(step, model):
            break
    return TrainResult(model, trace)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "nll", "kl", "total"])
        for r in trace:
            w.writerow([r.step, repr(r.nll), repr(r.kl), repr(r.total)])


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))
