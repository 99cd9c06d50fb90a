from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mneme.generate as gen
from mneme.corpus import EOS_ID, SyntheticCorpusSpec, Vocab, build_entity_prompt, synth_generate
from mneme.errors import InputError
from mneme.generate import (
    GenerateConfig,
    generate_for_prompts,
    generate_story,
    nucleus_distribution,
    read_generations,
    sample_rng,
    write_generations,
)
from mneme.model import MnemeLM, ModelConfig
from mneme.train import make_example, narrative_pass


def test_nucleus_hand_case():
    out = nucleus_distribution([0.5, 0.3, 0.15, 0.05], 0.8)
    np.testing.assert_allclose(out, [0.625, 0.375, 0.0, 0.0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(nucleus_distribution([0.5, 0.3, 0.15, 0.05], 0.81), [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0])


def test_nucleus_ties_prefer_lower_ids():
    np.testing.assert_array_equal(nucleus_distribution([0.25] * 4, 0.5), [0.5, 0.5, 0, 0])
    np.testing.assert_array_equal(nucleus_distribution([0.1, 0.45, 0.45], 0.3), [0, 1, 0])


def test_nucleus_p_one_keeps_everything():
    p = np.array([0.7, 0.2, 0.1])
    np.testing.assert_allclose(nucleus_distribution(p, 1.0), p)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12), st.floats(0.05, 1.0))
def test_nucleus_is_smallest_top_set(weights, p):
    probs = np.array(weights) / sum(weights)
    out = nucleus_distribution(probs, p)
    kept = out > 0
    assert out.sum() == pytest.approx(1.0)
    assert probs[kept].sum() >= p - 1e-9
    # dropping the least likely kept token would fall short of p
    assert probs[kept].sum() - probs[kept].min() < p + 1e-9
    assert probs[kept].min() >= probs[~kept].max(initial=0.0)


def test_config_validation():
    for bad in (dict(nucleus_p=0.0), dict(nucleus_p=1.5), dict(temperature=0.0), dict(max_tokens=-1), dict(samples_per_prompt=0)):
        with pytest.raises(InputError):
            GenerateConfig(**bad)


def setup(variant="dynamic", chunk=4):
    corpus, _ = synth_generate(SyntheticCorpusSpec(num_stories=3, entities_per_story=(2, 3), sections=2,
                                                   sentences_per_section=2, sentence_length=8, pair_prob=0.0, seed=6))
    vocab = Vocab.from_corpus(corpus)
    model = MnemeLM(ModelConfig(variant=variant, vocab_size=len(vocab), hidden_dim=16, num_layers=2, self_heads=2,
                                cross_heads=2, chunk_size=chunk, cache_size=8, init_std=0.3), seed=1)
    return corpus, vocab, model


@pytest.mark.parametrize("variant", ["vanilla", "static", "dynamic"])
def test_generation_logits_match_teacher_forcing(variant, monkeypatch):
    corpus, vocab, model = setup(variant)
    ex = make_example(corpus[0], vocab)
    seen = []
    real = gen.nucleus_sample

    def spy(logits, p, temperature, rng):
        seen.append(np.array(logits))
        return real(logits, p, temperature, rng)

    monkeypatch.setattr(gen, "nucleus_sample", spy)
    cfg = GenerateConfig(max_tokens=19, nucleus_p=0.9)
    toks = generate_story(model, ex.prompt_ids, ex.groups, cfg, sample_rng(0, 0, 0))
    body = toks[:-1] if toks[-1] == EOS_ID else toks
    ref = narrative_pass(model, replace(ex, ids=body)).logits.data
    assert len(seen) == len(toks)
    for i, row in enumerate(seen):
        np.testing.assert_allclose(row, ref[i], rtol=0, atol=1e-10)


def test_generation_is_deterministic_per_stream(tmp_path):
    corpus, vocab, model = setup()
    prompts = [(s.story_id, build_entity_prompt(s)) for s in corpus]
    cfg = GenerateConfig(max_tokens=12, samples_per_prompt=2, seed=3)
    a = generate_for_prompts(model, prompts, vocab, cfg)
    b = generate_for_prompts(model, prompts, vocab, cfg)
    assert a == b and len(a) == 6
    # each (prompt, sample) stream is independent of the others
    solo = generate_for_prompts(model, prompts[1:2], vocab, cfg)
    assert [r["token_ids"] for r in solo] != [] and solo[0]["prompt_id"] == prompts[1][0]
    assert generate_story(model, vocab.encode(prompts[1][1].render()), prompts[1][1].groups(), cfg,
                          sample_rng(3, 1, 1)) == a[3]["token_ids"]
    write_generations(a, tmp_path / "g.jsonl")
    assert read_generations(tmp_path / "g.jsonl") == a


def test_sample_streams_differ():
    draws = {tuple(sample_rng(0, p, s).integers(0, 1 << 30, 4)) for p in range(3) for s in range(3)}
    assert len(draws) == 9


def test_eos_stops_generation():
    corpus, vocab, model = setup("vanilla")
    model.params["out.w"].data[...] = 0.0
    model.params["out.b"].data[...] = -50.0
    model.params["out.b"].data[EOS_ID] = 50.0
    ex = make_example(corpus[0], vocab)
    toks = generate_story(model, ex.prompt_ids, ex.groups, GenerateConfig(max_tokens=30), sample_rng(0, 0, 0))
    assert toks == [EOS_ID]
    recs = generate_for_prompts(model, [("p", build_entity_prompt(corpus[0]))], vocab, GenerateConfig(samples_per_prompt=1))
    assert recs[0]["text"] == ""


def test_max_tokens_and_greedy():
    corpus, vocab, model = setup()
    ex = make_example(corpus[0], vocab)
    assert generate_story(model, ex.prompt_ids, ex.groups, GenerateConfig(max_tokens=0), sample_rng(0, 0, 0)) == []
    cfg = GenerateConfig(max_tokens=10, greedy=True)
    a = generate_story(model, ex.prompt_ids, ex.groups, cfg, sample_rng(0, 0, 0))
    b = generate_story(model, ex.prompt_ids, ex.groups, cfg, sample_rng(9, 9, 9))
    assert a == b and len(a) <= 10
