"""Annotated narratives, vocabulary, entity prompts, JSONL I/O and a
template-based synthetic corpus generator with known metric values."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError, SpecError

PAD, UNK, BOS, EOS, SEP, EOP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<eop>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP, EOP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID, EOP_ID = range(len(SPECIALS))

ATTRIBUTE_TAGS = frozenset({"VERB", "ADJ"})


@dataclass
class AnnotatedNarrative:
    """A tokenised story.

    ``sentence_bounds`` holds the start offset of every sentence (the first is
    0); ``mentions`` are ``(entity_id, start, end)`` with ``end`` exclusive.
    """

    story_id: str
    tokens: list[str]
    sentence_bounds: list[int]
    mentions: list[tuple[int, int, int]]
    pos_tags: list[str]

    def __post_init__(self):
        self.mentions = [tuple(int(v) for v in m) for m in self.mentions]

    def validate(self) -> None:
        T = len(self.tokens)
        if len(self.pos_tags) != T:
            raise InputError(f"{self.story_id}: pos_tags has {len(self.pos_tags)} entries for {T} tokens")
        b = self.sentence_bounds
        if T and (not b or b[0] != 0):
            raise InputError(f"{self.story_id}: sentence_bounds must start at 0")
        if any(x >= y for x, y in zip(b, b[1:])) or (b and b[-1] >= max(T, 1)):
            raise InputError(f"{self.story_id}: sentence_bounds must be strictly increasing offsets < {T}")
        ids = set()
        for k, (eid, s, e) in enumerate(self.mentions):
            if eid < 0 or not 0 <= s < e <= T:
                raise InputError(f"{self.story_id}: mentions[{k}] out of bounds")
            if self.sentence_of(s) != self.sentence_of(e - 1):
                raise InputError(f"{self.story_id}: mentions[{k}] crosses a sentence boundary")
            ids.add(eid)
        if ids != set(range(len(ids))):
            raise InputError(f"{self.story_id}: entity ids must be dense 0..n-1, got {sorted(ids)}")

    @property
    def num_entities(self) -> int:
        return 1 + max((m[0] for m in self.mentions), default=-1)

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_bounds)

    def sentence_of(self, token: int) -> int:
        return int(np.searchsorted(self.sentence_bounds, token, side="right")) - 1

    def sentence_spans(self) -> list[tuple[int, int]]:
        b = list(self.sentence_bounds) + [len(self.tokens)]
        return list(zip(b[:-1], b[1:]))

    def to_record(self) -> dict:
        return {
            "story_id": self.story_id,
            "tokens": list(self.tokens),
            "sentence_bounds": list(self.sentence_bounds),
            "mentions": [list(m) for m in self.mentions],
            "pos_tags": list(self.pos_tags),
        }


# -- vocabulary -------------------------------------------------------------------
class Vocab:
    """Word-level vocabulary; specials occupy ids 0-5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_corpus(cls, corpus: Iterable[AnnotatedNarrative]) -> "Vocab":
        seen = set()
        for story in corpus:
            seen.update(story.tokens)
        return cls(sorted(seen - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def words(self) -> list[str]:
        """Non-special tokens in id order."""
        return self.itos[len(SPECIALS):]

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.itos[len(SPECIALS):]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def tokenize(text: str | AnnotatedNarrative, vocab: Vocab) -> list[int]:
    """Whitespace tokenisation with ``<unk>`` fallback."""
    tokens = text.tokens if isinstance(text, AnnotatedNarrative) else text.split()
    return vocab.encode(tokens)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.decode(ids))


# -- entity prompts -----------------------------------------------------------------
@dataclass
class EntityPrompt:
    """Canonical surface forms of the story's entities, ordered by entity id."""

    entities: list[list[str]]

    def render(self) -> list[str]:
        out: list[str] = []
        for k, ent in enumerate(self.entities):
            if k:
                out.append(SEP)
            out.extend(ent)
        out.append(EOP)
        return out

    def groups(self) -> list[tuple[int, int]]:
        """Token ranges of each entity inside :meth:`render`."""
        spans, pos = [], 0
        for ent in self.entities:
            spans.append((pos, pos + len(ent)))
            pos += len(ent) + 1
        return spans

    @classmethod
    def from_rendered(cls, tokens: Sequence[str]) -> "EntityPrompt":
        tokens = list(tokens)
        if not tokens or tokens[-1] != EOP:
            raise InputError("rendered prompt must end with the end-of-prompt marker")
        body = tokens[:-1]
        if not body:
            return cls([])
        ents, cur = [], []
        for t in body:
            if t == SEP:
                ents.append(cur)
                cur = []
            else:
                cur.append(t)
        ents.append(cur)
        if any(not e for e in ents):
            raise InputError("empty entity in rendered prompt")
        return cls(ents)

    def strings(self) -> list[str]:
        return [" ".join(e) for e in self.entities]


def build_entity_prompt(narrative: AnnotatedNarrative) -> EntityPrompt:
    """First mention of every entity, in entity-id order."""
    first: dict[int, tuple[int, int]] = {}
    for eid, s, e in sorted(narrative.mentions, key=lambda m: (m[1], m[2])):
        first.setdefault(eid, (s, e))
    return EntityPrompt([list(narrative.tokens[s:e]) for _, (s, e) in sorted(first.items())])


# -- JSONL --------------------------------------------------------------------------
class CorpusParseError(FormatError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = ", ".join(str(n) for n, _ in problems)
        detail = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        super().__init__(f"malformed corpus records on lines {lines}: {detail}")


def _parse_record(rec, lineno: int) -> AnnotatedNarrative:
    if not isinstance(rec, dict):
        raise InputError("record is not an object")
    sid = rec.get("story_id", f"<line {lineno}>")

    def need(key, check, what):
        if key not in rec:
            raise InputError(f"{sid}: missing field {key}")
        val = rec[key]
        if not check(val):
            raise InputError(f"{sid}: field {key} must be {what}")
        return val

    def is_list_of(kind):
        return lambda v: isinstance(v, list) and all(isinstance(x, kind) and not isinstance(x, bool) for x in v)

    need("story_id", lambda v: isinstance(v, str), "a string")
    tokens = need("tokens", is_list_of(str), "a list of strings")
    bounds = need("sentence_bounds", is_list_of(int), "a list of integers")
    mentions = need("mentions", lambda v: isinstance(v, list), "a list")
    for k, m in enumerate(mentions):
        if not (isinstance(m, list) and len(m) == 3 and all(isinstance(x, int) and not isinstance(x, bool) for x in m)):
            raise InputError(f"{sid}: field mentions[{k}] must be [entity_id, start, end]")
    tags = need("pos_tags", is_list_of(str), "a list of strings")
    extra = set(rec) - {"story_id", "tokens", "sentence_bounds", "mentions", "pos_tags"}
    if extra:
        raise InputError(f"{sid}: unknown fields {sorted(extra)}")
    story = AnnotatedNarrative(sid, tokens, bounds, mentions, tags)
    story.validate()
    return story


def parse_jsonl_lines(lines: Iterable[str]) -> list[AnnotatedNarrative]:
    corpus, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            corpus.append(_parse_record(json.loads(line), lineno))
        except (json.JSONDecodeError, InputError) as exc:
            problems.append((lineno, str(exc)))
    if problems:
        raise CorpusParseError(problems)
    return corpus


def load_jsonl(path) -> list[AnnotatedNarrative]:
    with open(path, encoding="utf-8") as fh:
        return parse_jsonl_lines(fh)


def dumps_record(story: AnnotatedNarrative) -> str:
    return json.dumps(story.to_record(), ensure_ascii=False, separators=(",", ":"))


def save_jsonl(corpus: Iterable[AnnotatedNarrative], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for story in corpus:
            fh.write(dumps_record(story) + "\n")


# -- synthetic corpora ----------------------------------------------------------------
FIRST_NAMES = (
    "Todd Jenny Sarah Marcus Elena Hugo Priya Omar Lena Victor Nadia Felix Greta Ivan Mira Caleb Tess "
    "Ruben Ada Simon Nora Emil Zara Jonah Ingrid Milo Leah Bruno Clara Dmitri Fiona Gideon Hazel Isaac "
    "Juno Kofi Lucia Magnus Nell Oscar Petra Quinn Rosa Silas Thea Ulric Vera Wade Xenia Yusuf"
).split()
LAST_NAMES = (
    "King Harper Stone Moreau Quill Barrow Finch Hale Ibsen Jarvis Keane Lomax Mercer Nash Orwell Pike "
    "Quarry Rowe Sterling Thorne Underwood Vance Wilde Yates Zeller Ashby Blythe Crane Dorsey Ellery "
    "Fairfax Gage Holt Irving Janssen Kestrel Lark Marlow Nyberg Oakes"
).split()
VERBS = (
    "runs sings waits hides builds paints reads climbs writes fights guards steals bakes sails rides "
    "studies mends hunts carves trades digs weaves prays argues laughs wanders shouts gathers plants "
    "repairs follows watches burns sketches counts drinks smiles listens whistles"
).split()
ADJECTIVES = (
    "red quiet brave angry gentle bitter golden hollow clever ancient broken silent tired wild "
    "lonely proud humble strange fragile curious restless stubborn hidden bright dusty narrow crooked "
    "cold warm heavy swift pale loyal fierce calm weary eager grim"
).split()
NOUNS = "house river road tower garden market bridge forest harbor field castle cellar mill chapel valley".split()
FILLERS = "again today there slowly soon later indeed too".split()


@dataclass
class SyntheticCorpusSpec:
    """Parameters of :func:`synth_generate`.

    Every sentence has exactly ``sentence_length`` tokens and every section
    ``sentences_per_section`` sentences, so the section of each mention is
    fixed by construction.  ``span_range`` bounds the last-minus-first section
    of each entity; ``forced_spans[i]`` pins the span of the i-th planned
    entity.  With ``shared_attribute_prob == 0`` and ``pair_prob == 0``
    attribute pools never mix and every entity has V = 100.
    """

    num_stories: int = 20
    entities_per_story: tuple[int, int] = (2, 5)
    sections: int = 10
    sentences_per_section: int = 3
    sentence_length: int = 12
    span_range: tuple[int, int] | None = None
    forced_spans: list[int] | None = None
    mention_density: float = 0.5
    pair_prob: float = 0.2
    empty_prob: float = 0.3
    shared_attribute_prob: float = 0.3
    attributes_per_entity: int = 3
    short_mention_prob: float = 0.0
    protagonists: int = 3
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.entities_per_story
        L = self.sections
        if self.num_stories < 1 or not 1 <= lo <= hi:
            raise SpecError("need num_stories >= 1 and 1 <= min entities <= max entities")
        if hi > min(len(FIRST_NAMES), len(LAST_NAMES)):
            raise SpecError("not enough distinct names for that many entities")
        if L < 1 or self.sentences_per_section < 1:
            raise SpecError("sections and sentences_per_section must be positive")
        if hi > 2 * self.sentences_per_section:
            raise SpecError(f"{hi} entities may share a section that holds at most {2 * self.sentences_per_section}")
        span_lo, span_hi = self.span_range if self.span_range is not None else (0, L - 1)
        if not 0 <= span_lo <= span_hi:
            raise SpecError(f"bad span_range {self.span_range}")
        if span_hi > L - 1 or any(s > L - 1 or s < 0 for s in self.forced_spans or []):
            raise SpecError(f"infeasible span profile: spans must lie in [0, {L - 1}]")
        if self.sentence_length < self.min_sentence_length:
            raise SpecError(f"sentence_length must be >= {self.min_sentence_length}")
        if 2 * self.attributes_per_entity * hi > min(len(VERBS), len(ADJECTIVES)) - 4:
            raise SpecError("attribute pools too large for the lexicon")
        for name in ("mention_density", "pair_prob", "empty_prob", "shared_attribute_prob", "short_mention_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must be a probability")

    @property
    def min_sentence_length(self) -> int:
        # "A B verb the adj noun ." and the short pair form "A B and C D verb ."
        return 7

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusSpec":
        d = dict(d)
        for key in ("entities_per_story", "span_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


@dataclass
class _Sentence:
    entities: list[int]
    attributes: set[str] = field(default_factory=set)


def _plan_story(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> list[_Sentence]:
    L, S = spec.sections, spec.sentences_per_section
    n_ent = int(rng.integers(spec.entities_per_story[0], spec.entities_per_story[1] + 1))
    span_lo, span_hi = spec.span_range if spec.span_range is not None else (0, L - 1)
    section_sets = []
    for i in range(n_ent):
        if spec.forced_spans is not None and i < len(spec.forced_spans):
            span = spec.forced_spans[i]
        else:
            span = int(rng.integers(span_lo, span_hi + 1))
        first = int(rng.integers(0, L - span))
        secs = {first, first + span}
        secs.update(k for k in range(first + 1, first + span) if rng.random() < spec.mention_density)
        section_sets.append(secs)
    plan: list[_Sentence] = []
    for k in range(L):
        required = [i for i in range(n_ent) if k in section_sets[i]]
        rng.shuffle(required)
        if len(required) > 2 * S:
            raise SpecError(f"section {k} needs {len(required)} entities but holds at most {2 * S}")
        slots: list[list[int]] = [[] for _ in range(S)]
        n_pairs = max(0, len(required) - S)
        queue = list(required)
        order = list(rng.permutation(S))
        for j in order:
            if not queue:
                break
            slots[j].append(queue.pop())
            if queue and (n_pairs > 0 or rng.random() < spec.pair_prob):
                slots[j].append(queue.pop())
                n_pairs -= 1
        for j in range(S):
            if not slots[j] and required and rng.random() >= spec.empty_prob:
                slots[j].append(int(rng.choice(required)))
        plan.extend(_Sentence(s) for s in slots)
    return plan


def _relabel(plan: list[_Sentence]) -> list[_Sentence]:
    order: dict[int, int] = {}
    for sent in plan:
        for e in sent.entities:
            order.setdefault(e, len(order))
    return [_Sentence([order[e] for e in s.entities]) for s in plan]


def _ground_truth(plan: list[_Sentence], spec: SyntheticCorpusSpec, n_ent: int) -> dict:
    """Metric values implied by the plan (section of sentence n is n // S)."""
    S, L = spec.sentences_per_section, spec.sections
    counts = [0] * n_ent
    sections: list[list[int]] = [[] for _ in range(n_ent)]
    for n, sent in enumerate(plan):
        for e in sent.entities:
            counts[e] += 1
            sections[e].append(n // S)
    # ids already follow first appearance, so ties break by id
    protagonists = sorted(range(n_ent), key=lambda e: (-counts[e], e))[: spec.protagonists]
    if protagonists:
        C = float(np.mean([max(sections[e]) - min(sections[e]) for e in protagonists]))
        C_bar = float(np.mean([len(set(sections[e])) for e in protagonists]))
    else:
        C = C_bar = None
    V_per = []
    for e in range(n_ent):
        own, others = set(), set()
        for sent in plan:
            (own if e in sent.entities else others).update(sent.attributes)
        V_per.append(100.0 * len(own - others) / len(own) if own else None)
    defined = [v for v in V_per if v is not None]
    V = float(np.mean(defined)) if defined else None
    U = C / (L * n_ent) * float(np.sum(defined)) if (C is not None and n_ent) else None
    total = int(np.sum(counts))
    return {
        "C": C,
        "C_bar": C_bar,
        "V": V,
        "V_per_entity": V_per,
        "U": U,
        "exact": n_ent,
        "subset": n_ent,
        "unique_entities": n_ent,
        "mentions_per_entity": total / n_ent if n_ent else None,
        "num_mentions": total,
    }


def _realize(plan, spec, rng, names, pools, neutral, shared, sid) -> AnnotatedNarrative:
    tokens: list[str] = []
    tags: list[str] = []
    bounds: list[int] = []
    mentions: list[tuple[int, int, int]] = []
    introduced: set[int] = set()

    def attr(pool_kind: int, owner: int | None):
        if owner is None:
            src = neutral[pool_kind]
        elif rng.random() < spec.shared_attribute_prob:
            src = shared[pool_kind]
        else:
            src = pools[owner][pool_kind]
        return str(rng.choice(src))

    def mention(e):
        first, last = names[e]
        if e in introduced and rng.random() < spec.short_mention_prob:
            words = [first]
        else:
            words = [first, last]
        introduced.add(e)
        mentions.append((e, len(tokens) + len(body), len(tokens) + len(body) + len(words)))
        body.extend((w, "PROPN") for w in words)

    for sent in plan:
        bounds.append(len(tokens))
        body: list[tuple[str, str]] = []
        ents = sent.entities
        if not ents:
            adj, verb = attr(1, None), attr(0, None)
            body += [("the", "DET"), (adj, "ADJ"), (str(rng.choice(NOUNS)), "NOUN"), (verb, "VERB")]
        else:
            mention(ents[0])
            if len(ents) == 2:
                body.append(("and", "CCONJ"))
                mention(ents[1])
            verb = attr(0, ents[0])
            adj = attr(1, ents[-1])
            if len(body) + 5 <= spec.sentence_length:
                body += [(verb, "VERB"), ("the", "DET"), (adj, "ADJ"), (str(rng.choice(NOUNS)), "NOUN")]
            else:
                body.append((verb, "VERB"))  # pair too long for the full form
                adj = None
        sent.attributes = {verb.lower()} | ({adj.lower()} if adj else set())
        while len(body) < spec.sentence_length - 1:
            body.append((str(rng.choice(FILLERS)), "ADV"))
        body.append((".", "PUNCT"))
        tokens.extend(w for w, _ in body)
        tags.extend(t for _, t in body)
    story = AnnotatedNarrative(sid, tokens, bounds, mentions, tags)
    story.validate()
    return story


def synth_generate(spec: SyntheticCorpusSpec) -> tuple[list[AnnotatedNarrative], list[dict]]:
    """Generate stories plus the metric values they were built to have.

    Entity sections and sentence attributes are planned before any text is
    realised; the returned ground truth is computed from that plan.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    corpus, truth = [], []
    k = spec.attributes_per_entity
    for n in range(spec.num_stories):
        plan = _relabel(_plan_story(spec, rng))
        n_ent = 1 + max((e for s in plan for e in s.entities), default=-1)
        firsts = rng.choice(FIRST_NAMES, size=n_ent, replace=False)
        lasts = rng.choice(LAST_NAMES, size=n_ent, replace=True)
        names = [(str(f), str(l)) for f, l in zip(firsts, lasts)]
        verbs = list(rng.permutation(VERBS))
        adjs = list(rng.permutation(ADJECTIVES))
        pools = [(verbs[i * k:(i + 1) * k], adjs[i * k:(i + 1) * k]) for i in range(n_ent)]
        rest_v, rest_a = verbs[n_ent * k:], adjs[n_ent * k:]
        neutral = (rest_v[:2], rest_a[:2])
        shared = (rest_v[2:4], rest_a[2:4])
        story = _realize(plan, spec, rng, names, pools, neutral, shared, f"synth-{spec.seed}-{n:05d}")
        corpus.append(story)
        truth.append({"story_id": story.story_id, **_ground_truth(plan, spec, n_ent)})
    return corpus, truth


def entity_target_support(narrative: AnnotatedNarrative, num_slots: int) -> list[tuple[int, ...]]:
    """Per token, the slots its sentence's mentions point at (or the non-entity slot)."""
    if narrative.num_entities > num_slots - 1:
        raise InputError(f"{narrative.story_id}: entity id >= {num_slots - 1} has no memory slot")
    per_sentence: list[set[int]] = [set() for _ in range(narrative.num_sentences)]
    for eid, s, _ in narrative.mentions:
        if eid >= num_slots - 1:
            raise InputError(f"{narrative.story_id}: entity id {eid} >= Z-1={num_slots - 1}")
        per_sentence[narrative.sentence_of(s)].add(eid)
    out = []
    for j, (s, e) in enumerate(narrative.sentence_spans()):
        support = tuple(sorted(per_sentence[j])) or (num_slots - 1,)
        out.extend([support] * (e - s))
    return out


def shares(support: Sequence[int]) -> dict[int, Fraction]:
    return {z: Fraction(1, len(support)) for z in support}
