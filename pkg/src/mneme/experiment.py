"""Desk-scale experiments: attention supervision check and the limited-context sweep."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .corpus import SyntheticCorpusSpec, Vocab, synth_generate
from .errors import InputError
from .model import VARIANTS, MnemeLM, ModelConfig
from .train import Example, TrainConfig, evaluate_nll, make_example, narrative_pass, token_nll, train_loop


# -- attention on the gold slot --------------------------------------------------------
@dataclass
class GoldMass:
    mass: float  # mean weight on the gold slot over tokens, layers, heads
    baseline: float  # mean 1/Z over the same tokens
    per_layer: list[float]
    tokens: int
    null_mass: float | None = None  # weight on the non-entity slot over mention-free sentences
    null_baseline: float | None = None

    @property
    def ratio(self) -> float:
        return self.mass / self.baseline


def gold_attention_mass(model: MnemeLM, examples: Sequence[Example]) -> GoldMass:
    """Cross-attention weight on the mentioned slot, over tokens of sentences
    that mention exactly one entity."""
    if not model.config.has_memory:
        raise InputError("gold attention mass needs a memory variant")
    per_layer = np.zeros(model.config.num_layers)
    baseline = null = null_base = 0.0
    n = n_null = 0
    for ex in examples:
        with tt.no_grad():
            run = narrative_pass(model, ex)
        A = np.stack([a.data for a in run.cross_weights])  # L, H, T, Z
        Z = ex.targets.num_slots
        for i, support in enumerate(ex.targets.support):
            if support == (Z - 1,):
                null += A[:, :, i, Z - 1].mean()
                null_base += 1.0 / Z
                n_null += 1
            elif len(support) == 1:
                per_layer += A[:, :, i, support[0]].mean(axis=1)
                baseline += 1.0 / Z
                n += 1
    if n == 0:
        raise InputError("no single-entity sentences to score")
    per_layer /= n
    return GoldMass(
        float(per_layer.mean()), baseline / n, per_layer.tolist(), n,
        float(null / n_null) if n_null else None, null_base / n_null if n_null else None,
    )


# -- shipped experiment set-ups -------------------------------------------------------------
@dataclass
class DeskSetup:
    corpus: SyntheticCorpusSpec
    model: ModelConfig  # vocab_size is filled in from the corpus
    train: TrainConfig
    validation: int  # held-out stories taken from the end of the corpus

    def data(self) -> tuple[Vocab, list[Example], list[Example]]:
        corpus, _ = synth_generate(self.corpus)
        vocab = Vocab.from_corpus(corpus)
        examples = [make_example(s, vocab) for s in corpus]
        cut = len(examples) - self.validation
        return vocab, examples[:cut], examples[cut:]

    def model_for(self, vocab: Vocab, variant: str | None = None, seed: int = 0) -> MnemeLM:
        cfg = replace(self.model, vocab_size=len(vocab), variant=variant or self.model.variant)
        return MnemeLM(cfg, seed=seed)


def supervision_setup() -> DeskSetup:
    """Two-layer d=64 dynamic model on 200 training stories.

    Stories hold 5 to 6 entities and single-entity sentences of 8 tokens, so
    that names make up a quarter of every entity sentence.
    """
    return DeskSetup(
        corpus=SyntheticCorpusSpec(
            num_stories=240,
            entities_per_story=(5, 6),
            sections=6,
            sentences_per_section=3,
            sentence_length=8,
            mention_density=0.6,
            pair_prob=0.0,
            empty_prob=0.2,
            shared_attribute_prob=0.0,
            attributes_per_entity=2,
            seed=11,
        ),
        model=ModelConfig(
            variant="dynamic", hidden_dim=64, num_layers=2, self_heads=4, cross_heads=4,
            chunk_size=32, cache_size=128,
        ),
        train=TrainConfig(lam=1.0, learning_rate=5e-3, steps=2500, warmup_steps=100, schedule="cosine", seed=0),
        validation=40,
    )


@dataclass
class SupervisionResult:
    nll_start: float
    nll_end: float
    gold_start: GoldMass
    gold: GoldMass
    seconds: float

    @property
    def nll_reduction(self) -> float:
        return 1.0 - self.nll_end / self.nll_start


def run_supervision(setup: DeskSetup | None = None, seed: int = 0) -> SupervisionResult:
    import time

    setup = setup or supervision_setup()
    t0 = time.perf_counter()
    vocab, train, val = setup.data()
    model = setup.model_for(vocab, seed=seed)
    start, gold_start = evaluate_nll(model, val), gold_attention_mass(model, val)
    train_loop(model, train, setup.train)
    return SupervisionResult(
        start, evaluate_nll(model, val), gold_start, gold_attention_mass(model, val), time.perf_counter() - t0
    )


# -- limited-context sweep ---------------------------------------------------------------------
@dataclass
class ExperimentPlan:
    variants: list[str] = field(default_factory=lambda: ["vanilla", "dynamic"])
    cache_sizes: list[int] = field(default_factory=lambda: [500, 100, 50, 10])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sections: int = 10
    out_dir: str | None = None

    def __post_init__(self):
        if not self.variants or not self.cache_sizes or not self.seeds:
            raise InputError("plan needs non-empty variants, cache sizes and seeds")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise InputError(f"unknown variants {sorted(bad)}")
        if min(self.cache_sizes) < 0 or self.sections < 1:
            raise InputError("cache sizes must be >= 0 and sections >= 1")

    @property
    def baseline(self) -> int:
        return max(self.cache_sizes)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(str(exc)) from None


@dataclass
class TokenDump:
    """Per-token NLL of one story at one cache size."""

    story_id: str
    variant: str
    seed: int
    cache_size: int
    nll: list[float]
    in_mention: list[bool]

    def to_record(self) -> dict:
        return asdict(self)


def mention_mask(example: Example) -> np.ndarray:
    mask = np.zeros(len(example.ids), dtype=bool)
    for _, s, e in example.narrative.mentions:
        mask[s:e] = True
    return mask


def section_entity_nll(dumps: Sequence[TokenDump], sections: int) -> list[float | None]:
    """Mention-token NLL per section, pooled over stories (token weighted)."""
    total = np.zeros(sections)
    count = np.zeros(sections)
    for d in dumps:
        nll = np.asarray(d.nll)
        mask = np.asarray(d.in_mention, dtype=bool)
        size = max(1, math.ceil(len(nll) / sections))
        sec = np.minimum(np.arange(len(nll)) // size, sections - 1)
        np.add.at(total, sec[mask], nll[mask])
        np.add.at(count, sec[mask], 1)
    return [float(t / c) if c else None for t, c in zip(total, count)]


def overall_entity_nll(dumps: Sequence[TokenDump]) -> float | None:
    vals = [v for d in dumps for v, m in zip(d.nll, d.in_mention) if m]
    return float(np.mean(vals)) if vals else None


def percent_degradation(value: float | None, base: float | None) -> float | None:
    if value is None or base is None or base == 0:
        return None
    return 100.0 * (value - base) / base


def sweep_dumps(model: MnemeLM, examples: Sequence[Example], cache_sizes: Sequence[int], seed: int = 0) -> list[TokenDump]:
    out = []
    for m in dict.fromkeys(cache_sizes):
        for ex in examples:
            nll = token_nll(model, ex, cache_size=m)
            out.append(TokenDump(ex.story_id, model.config.variant, seed, int(m), nll.tolist(), mention_mask(ex).tolist()))
    return out


@dataclass
class DegradationTables:
    """``nll[variant][seed][cache]`` holds per-section mention NLL; ``overall``
    the pooled mention NLL.  Degradation is relative to the sweep maximum."""

    plan: ExperimentPlan
    nll: dict
    overall: dict

    def degradation(self, variant: str, seed: int, cache: int) -> list[float | None]:
        base = self.nll[variant][seed][self.plan.baseline]
        return [percent_degradation(v, b) for v, b in zip(self.nll[variant][seed][cache], base)]

    def overall_degradation(self, variant: str, seed: int, cache: int) -> float | None:
        o = self.overall[variant][seed]
        return percent_degradation(o[cache], o[self.plan.baseline])

    def mean_overall_degradation(self, variant: str, cache: int | None = None) -> float:
        cache = min(self.plan.cache_sizes) if cache is None else cache
        vals = [self.overall_degradation(variant, s, cache) for s in self.plan.seeds]
        return float(np.mean([v for v in vals if v is not None]))

    def rows(self) -> list[dict]:
        out = []
        for v in self.plan.variants:
            for s in self.plan.seeds:
                for m in self.plan.cache_sizes:
                    deg = self.degradation(v, s, m)
                    for k, (nll, d) in enumerate(zip(self.nll[v][s][m], deg)):
                        out.append({"variant": v, "seed": s, "cache_size": m, "section": k, "nll_entity": nll, "degradation_pct": d})
        return out


def tables_from_dumps(plan: ExperimentPlan, dumps: Sequence[TokenDump]) -> DegradationTables:
    nll: dict = {}
    overall: dict = {}
    for v in plan.variants:
        nll[v], overall[v] = {}, {}
        for s in plan.seeds:
            nll[v][s], overall[v][s] = {}, {}
            for m in plan.cache_sizes:
                sel = [d for d in dumps if d.variant == v and d.seed == s and d.cache_size == m]
                if not sel:
                    raise InputError(f"no dumps for variant={v} seed={s} cache={m}")
                nll[v][s][m] = section_entity_nll(sel, plan.sections)
                overall[v][s][m] = overall_entity_nll(sel)
    return DegradationTables(plan, nll, overall)


def run_degradation(
    plan: ExperimentPlan,
    models: dict[tuple[str, int], MnemeLM],
    examples: Sequence[Example],
) -> tuple[DegradationTables, list[TokenDump]]:
    """Evaluate ``models[(variant, seed)]`` at every cache size.  Sweep points
    run in up to ``MNEME_THREADS`` worker processes."""
    jobs = [(models[(v, s)], s) for v in plan.variants for s in plan.seeds]
    workers = max(1, int(os.environ.get("MNEME_THREADS", "1")))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            parts = list(pool.map(_sweep_job, [(m, list(examples), plan.cache_sizes, s) for m, s in jobs]))
    else:
        parts = [sweep_dumps(m, examples, plan.cache_sizes, s) for m, s in jobs]
    dumps = [d for part in parts for d in part]
    return tables_from_dumps(plan, dumps), dumps


def _sweep_job(args):
    return sweep_dumps(*args)


def write_degradation(tables: DegradationTables, dumps: Sequence[TokenDump], out_dir, chart: bool = True) -> list[Path]:
    """Section table CSV, overall summary CSV, per-token JSONL, optional SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = tables.plan
    written = [out / "sections.csv", out / "summary.csv", out / "tokens.jsonl"]
    with open(written[0], "w", newline="") as fh:
        w = csv.DictWriter(fh, ["variant", "seed", "cache_size", "section", "nll_entity", "degradation_pct"], lineterminator="\n")
        w.writeheader()
        w.writerows(tables.rows())
    with open(written[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "cache_size", "nll_entity", "degradation_pct"])
        for v in plan.variants:
            for s in plan.seeds:
                for m in plan.cache_sizes:
                    w.writerow([v, s, m, tables.overall[v][s][m], tables.overall_degradation(v, s, m)])
    with open(written[2], "w", encoding="utf-8", newline="\n") as fh:
        for d in dumps:
            fh.write(json.dumps(d.to_record(), separators=(",", ":")) + "\n")
    if chart:
        svg = _chart(tables, out / "degradation.svg")
        if svg is not None:
            written.append(svg)
    return written


def read_dumps(path) -> list[TokenDump]:
    with open(path, encoding="utf-8") as fh:
        return [TokenDump(**json.loads(line)) for line in fh if line.strip()]


def _chart(tables: DegradationTables, path: Path) -> Path | None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    plan = tables.plan
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(plan.sections)
    for v in plan.variants:
        for m in plan.cache_sizes:
            if m == plan.baseline:
                continue
            curves = np.array([[np.nan if d is None else d for d in tables.degradation(v, s, m)] for s in plan.seeds])
            ax.plot(xs, np.nanmean(curves, axis=0), marker="o", label=f"{v} m={m}")
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xlabel("section")
    ax.set_ylabel(f"% NLL change vs m={plan.baseline}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def limited_context_setup() -> DeskSetup:
    """Small matched models on stories whose entity names appear in the prompt
    and recur throughout, so late mentions need either a long cache or memory."""
    return DeskSetup(
        corpus=SyntheticCorpusSpec(
            num_stories=180,
            entities_per_story=(3, 4),
            sections=6,
            sentences_per_section=2,
            sentence_length=8,
            mention_density=0.6,
            pair_prob=0.0,
            empty_prob=0.2,
            shared_attribute_prob=0.0,
            attributes_per_entity=2,
            seed=5,
        ),
        model=ModelConfig(
            variant="dynamic", hidden_dim=32, num_layers=2, self_heads=2, cross_heads=2,
            chunk_size=16, cache_size=256,
        ),
        train=TrainConfig(lam=1.0, learning_rate=5e-3, steps=3000, warmup_steps=100, schedule="cosine", seed=0),
        validation=30,
    )


def limited_context_plan(out_dir: str | None = None) -> ExperimentPlan:
    return ExperimentPlan(variants=["vanilla", "dynamic"], cache_sizes=[256, 32, 8], seeds=[0, 1, 2], sections=6, out_dir=out_dir)


def train_sweep_models(setup: DeskSetup, plan: ExperimentPlan) -> tuple[dict[tuple[str, int], MnemeLM], list[Example]]:
    """Train one model per (variant, seed) on the shared corpus; return them
    with the validation stories."""
    vocab, train, val = setup.data()
    models = {}
    for v in plan.variants:
        for s in plan.seeds:
            model = setup.model_for(vocab, variant=v, seed=s)
            train_loop(model, train, replace(setup.train, seed=s))
            models[(v, s)] = model
    return models, val
