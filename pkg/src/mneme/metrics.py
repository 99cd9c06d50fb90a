"""Entity coherence, consistency, prompt control and LM uncertainty metrics.

Undefined values (no protagonists, no attributes, empty sections) are
reported as ``None`` and skipped by corpus means.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import ATTRIBUTE_TAGS, SPECIALS, AnnotatedNarrative, EntityPrompt
from .train import token_nll

DEFAULT_SECTIONS = 10
DEFAULT_PROTAGONISTS = 3

STOPWORDS = frozenset(
    """a an the this that these those some any
    i me my mine we us our ours you your yours he him his she her hers it its they them their theirs
    who whom whose which what
    of in on at by for with from to into onto over under about above below between through during
    before after near across against among around behind beside beyond inside outside toward upon within without
    and or but nor so yet as than
    mr mrs ms dr""".split()
)


@dataclass(frozen=True)
class Mention:
    entity: int
    start: int
    end: int
    sentence: int
    section: int


@dataclass
class EntityMentionIndex:
    num_tokens: int
    sections: int
    mentions: dict[int, list[Mention]] = field(default_factory=dict)

    @property
    def section_size(self) -> int:
        return max(1, math.ceil(self.num_tokens / self.sections))

    def section_of(self, token: int) -> int:
        return token // self.section_size

    @classmethod
    def from_narrative(cls, narrative: AnnotatedNarrative, sections: int = DEFAULT_SECTIONS) -> "EntityMentionIndex":
        index = cls(len(narrative.tokens), sections)
        for eid, s, e in sorted(narrative.mentions, key=lambda m: (m[1], m[2], m[0])):
            m = Mention(eid, s, e, narrative.sentence_of(s), index.section_of(s))
            index.mentions.setdefault(eid, []).append(m)
        return index

    @property
    def total_mentions(self) -> int:
        return sum(len(v) for v in self.mentions.values())


def protagonists(index: EntityMentionIndex, top_k: int = DEFAULT_PROTAGONISTS) -> list[int]:
    """Most-mentioned entities; ties go to the earliest first mention."""
    ranked = sorted(index.mentions, key=lambda e: (-len(index.mentions[e]), index.mentions[e][0].start))
    return ranked[:top_k]


def coherence_max_span(index: EntityMentionIndex, top_k: int = DEFAULT_PROTAGONISTS) -> float | None:
    """Mean over protagonists of (last mention section - first mention section)."""
    prot = protagonists(index, top_k)
    if not prot:
        return None
    spans = []
    for e in prot:
        secs = [m.section for m in index.mentions[e]]
        spans.append(max(secs) - min(secs))
    return float(np.mean(spans))


def coherence_avg_sections(index: EntityMentionIndex, top_k: int = DEFAULT_PROTAGONISTS) -> float | None:
    """Mean over protagonists of the number of distinct sections they occur in."""
    prot = protagonists(index, top_k)
    if not prot:
        return None
    return float(np.mean([len({m.section for m in index.mentions[e]}) for e in prot]))


def sentence_attributes(narrative: AnnotatedNarrative) -> list[set[str]]:
    """Lower-cased verbs and adjectives of every sentence."""
    out = []
    for s, e in narrative.sentence_spans():
        out.append({narrative.tokens[t].lower() for t in range(s, e) if narrative.pos_tags[t] in ATTRIBUTE_TAGS})
    return out


def consistency_V(
    narrative: AnnotatedNarrative, index: EntityMentionIndex | None = None
) -> tuple[dict[int, float | None], float | None]:
    """Percentage of each entity's attributes that never occur in a sentence
    without it; returns ``(per_entity, story_mean)``."""
    attrs = sentence_attributes(narrative)
    present: dict[int, set[int]] = {}
    for eid, s, _ in narrative.mentions:
        present.setdefault(eid, set()).add(narrative.sentence_of(s))
    per: dict[int, float | None] = {}
    for eid in sorted(present):
        own, others = set(), set()
        for j, a in enumerate(attrs):
            (own if j in present[eid] else others).update(a)
        per[eid] = 100.0 * len(own - others) / len(own) if own else None
    defined = [v for v in per.values() if v is not None]
    return per, (float(np.mean(defined)) if defined else None)


def consistency_U(C: float | None, V_list: Iterable[float | None], L: int, Z: int) -> float | None:
    """``U = C / (L Z) * sum(V_i)`` with Z the number of entities."""
    if C is None or Z == 0:
        return None
    return C / (L * Z) * float(np.sum([v for v in V_list if v is not None]))


def _tokens(s: str | Sequence[str]) -> list[str]:
    words = s.split() if isinstance(s, str) else list(s)
    return [w.lower() for w in words]


def _contains(hay: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return n > 0 and any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


def match_gold(generated: str | Sequence[str], gold: EntityPrompt | Sequence[Sequence[str]]) -> tuple[int, int]:
    """Count gold entities found with their full surface form (exact) and
    with at least one content word (subset), case-insensitively.

    ``generated`` is either a text or a list of generated entity strings.
    """
    gold_entities = gold.entities if isinstance(gold, EntityPrompt) else gold
    texts = [generated] if isinstance(generated, str) else list(generated)
    hays = [_tokens(t) for t in texts]
    words = set().union(*hays) if hays else set()
    specials = set(SPECIALS)
    exact = subset = 0
    for ent in gold_entities:
        toks = _tokens(ent)
        full = any(_contains(h, toks) for h in hays)
        content = [t for t in toks if t not in STOPWORDS and t not in specials]
        partial = any(t in words for t in content) if content else full
        exact += full
        subset += partial
    return exact, subset


def entity_usage_stats(index: EntityMentionIndex) -> tuple[int, float | None]:
    unique = len(index.mentions)
    return unique, (index.total_mentions / unique if unique else None)


def lm_uncertainty(
    model,
    example,
    index: EntityMentionIndex | None = None,
    sections: int = DEFAULT_SECTIONS,
    cache_size: int | None = None,
    per_token: np.ndarray | None = None,
) -> dict:
    """Perplexity and mention/non-mention NLL from a teacher-forced pass.

    ``per_token`` may carry precomputed per-token NLLs; otherwise the model
    is run on ``example``.
    """
    narrative = example.narrative
    if per_token is None:
        per_token = token_nll(model, example, cache_size)
    index = index or EntityMentionIndex.from_narrative(narrative, sections)
    T = len(per_token)
    in_mention = np.zeros(T, dtype=bool)
    for eid, s, e in narrative.mentions:
        in_mention[s:e] = True
    size = max(1, math.ceil(T / sections))
    sec = np.arange(T) // size
    per_section = []
    for k in range(sections):
        sel = in_mention & (sec == k)
        per_section.append(float(per_token[sel].mean()) if sel.any() else None)
    return {
        "perplexity": float(np.exp(per_token.mean())),
        "nll": float(per_token.mean()),
        "nll_entity": float(per_token[in_mention].mean()) if in_mention.any() else None,
        "nll_rest": float(per_token[~in_mention].mean()) if (~in_mention).any() else None,
        "nll_entity_per_section": per_section,
    }


# -- reports ------------------------------------------------------------------------
REPORT_FIELDS = (
    "story_id",
    "C",
    "C_bar",
    "V",
    "U",
    "exact_match",
    "subset_match",
    "exact_match_frac",
    "subset_match_frac",
    "unique_entities",
    "mentions_per_entity",
    "perplexity",
    "nll_entity",
    "nll_rest",
)


def story_metrics(
    narrative: AnnotatedNarrative,
    gold: EntityPrompt | None = None,
    sections: int = DEFAULT_SECTIONS,
    top_k: int = DEFAULT_PROTAGONISTS,
    generated_text: str | None = None,
) -> dict:
    index = EntityMentionIndex.from_narrative(narrative, sections)
    C = coherence_max_span(index, top_k)
    V_per, V = consistency_V(narrative, index)
    unique, per_entity = entity_usage_stats(index)
    row = {
        "story_id": narrative.story_id,
        "C": C,
        "C_bar": coherence_avg_sections(index, top_k),
        "V": V,
        "V_per_entity": {str(k): v for k, v in V_per.items()},
        "U": consistency_U(C, V_per.values(), sections, len(V_per)),
        "unique_entities": unique,
        "mentions_per_entity": per_entity,
    }
    if gold is not None:
        text = generated_text if generated_text is not None else " ".join(narrative.tokens)
        exact, subset = match_gold(text, gold)
        n = len(gold.entities)
        row.update(
            exact_match=exact,
            subset_match=subset,
            exact_match_frac=exact / n if n else None,
            subset_match_frac=subset / n if n else None,
        )
    return row


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: Sequence[dict]) -> dict:
    out = {"num_stories": len(rows)}
    for key in REPORT_FIELDS[1:]:
        if any(key in r for r in rows):
            out[key] = _mean(r.get(key) for r in rows)
    sections = [r["nll_entity_per_section"] for r in rows if r.get("nll_entity_per_section")]
    if sections:
        out["nll_entity_per_section"] = [_mean(col) for col in zip(*sections)]
    return out


def write_report_json(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"stories": list(rows), "aggregate": aggregate(rows)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in list(rows) + [dict(aggregate(rows), story_id="aggregate")]:
            w.writerow(["" if r.get(k) is None else r.get(k) for k in REPORT_FIELDS])


def write_section_csv(curves: dict[str, Sequence[float | None]], path) -> None:
    """One row per (series, section): ``series,section,nll``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "section", "nll"])
        for name, values in curves.items():
            for k, v in enumerate(values):
                w.writerow([name, k, "" if v is None else repr(v)])


# -- annotation of generated text -----------------------------------------------------
def pos_lexicon(corpus: Iterable[AnnotatedNarrative]) -> dict[str, str]:
    """Most frequent tag per surface form (ties: alphabetical)."""
    counts: dict[str, dict[str, int]] = {}
    for story in corpus:
        for tok, tag in zip(story.tokens, story.pos_tags):
            counts.setdefault(tok, {}).setdefault(tag, 0)
            counts[tok][tag] += 1
    return {tok: min(c, key=lambda t: (-c[t], t)) for tok, c in counts.items()}


def annotate_generated(
    story_id: str, tokens: Sequence[str], gold: EntityPrompt, lexicon: dict[str, str]
) -> AnnotatedNarrative:
    """Heuristic annotation of a generated story against its gold prompt.

    Sentences end at ``.``; a mention is a full gold surface form, or the
    first word of a gold entity when no other gold entity shares it.  Tags
    come from ``lexicon`` (``OTHER`` when unknown).
    """
    tokens = list(tokens)
    bounds = [0] + [i + 1 for i, t in enumerate(tokens[:-1]) if t == "."]
    if not tokens:
        bounds = []
    ends = set(b - 1 for b in bounds[1:])
    firsts: dict[str, list[int]] = {}
    for eid, ent in enumerate(gold.entities):
        firsts.setdefault(ent[0], []).append(eid)
    by_len = sorted(enumerate(gold.entities), key=lambda x: -len(x[1]))
    mentions, i = [], 0
    while i < len(tokens):
        hit = None
        for eid, ent in by_len:
            n = len(ent)
            span = tokens[i:i + n]
            if span == list(ent) and not any(j in ends for j in range(i, i + n - 1)):
                hit = (eid, i, i + n)
                break
        if hit is None and len(firsts.get(tokens[i], [])) == 1:
            hit = (firsts[tokens[i]][0], i, i + 1)
        if hit:
            mentions.append(hit)
            i = hit[2]
        else:
            i += 1
    # renumber by first appearance so ids are dense
    order: dict[int, int] = {}
    for eid, _, _ in mentions:
        order.setdefault(eid, len(order))
    mentions = [(order[e], s, t) for e, s, t in mentions]
    tags = [lexicon.get(t, "OTHER") for t in tokens]
    return AnnotatedNarrative(story_id, tokens, bounds, mentions, tags)
