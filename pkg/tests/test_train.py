import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mneme import tensor as tt
from mneme.corpus import AnnotatedNarrative, SyntheticCorpusSpec, Vocab, synth_generate
from mneme.errors import InputError
from mneme.gradcheck import directional_check
from mneme.model import MnemeLM, ModelConfig, load_checkpoint, save_checkpoint
from mneme.tensor import Tensor
from mneme.train import (
    TrainConfig,
    build_entity_targets,
    learning_rate_at,
    make_example,
    narrative_loss,
    narrative_pass,
    regularization_loss,
    total_loss,
    train_loop,
)


def story():
    # "Ann Lee ran . the dog sat . Bo and Ann met ."
    tokens = ["Ann", "Lee", "ran", ".", "the", "dog", "sat", ".", "Bo", "and", "Ann", "met", "."]
    return AnnotatedNarrative(
        story_id="s",
        tokens=tokens,
        sentence_bounds=[0, 4, 8],
        mentions=[(0, 0, 2), (1, 8, 9), (0, 10, 11)],
        pos_tags=["PROPN", "PROPN", "VERB", "PUNCT", "DET", "NOUN", "VERB", "PUNCT", "PROPN", "CCONJ", "PROPN", "VERB", "PUNCT"],
    )


def small_corpus(n=6, seed=3):
    spec = SyntheticCorpusSpec(num_stories=n, entities_per_story=(2, 3), sections=3, sentences_per_section=2,
                               sentence_length=8, pair_prob=0.0, seed=seed)
    corpus, _ = synth_generate(spec)
    vocab = Vocab.from_corpus(corpus)
    return vocab, [make_example(s, vocab) for s in corpus]


def small_model(vocab, variant="dynamic", seed=0, **kw):
    cfg = dict(variant=variant, vocab_size=len(vocab), hidden_dim=16, num_layers=2, self_heads=2, cross_heads=2,
               chunk_size=8, cache_size=16)
    cfg.update(kw)
    return MnemeLM(ModelConfig(**cfg), seed=seed)


# -- targets --------------------------------------------------------------------------------
def test_entity_targets():
    t = build_entity_targets(story(), 3)
    for i in range(4):
        assert t.distribution(i) == {0: Fraction(1)}
    for i in range(4, 8):
        assert t.distribution(i) == {2: Fraction(1)}
    for i in range(8, 13):
        assert t.distribution(i) == {0: Fraction(1, 2), 1: Fraction(1, 2)}
    np.testing.assert_array_equal(t.dense()[9], [0.5, 0.5, 0.0])


def test_three_way_shares_are_exact():
    s = story()
    s = AnnotatedNarrative(s.story_id, s.tokens, s.sentence_bounds, s.mentions + [(2, 5, 6)], s.pos_tags)
    t = build_entity_targets(s, 4)
    assert t.distribution(12) == {0: Fraction(1, 2), 1: Fraction(1, 2)}
    assert sum(t.distribution(5).values()) == 1


def test_entity_targets_need_a_slot_per_entity():
    with pytest.raises(InputError):
        build_entity_targets(story(), 2)


def test_targets_sum_to_one_on_synthetic_stories():
    _, examples = small_corpus()
    for ex in examples:
        for i in range(len(ex.targets)):
            assert sum(ex.targets.distribution(i).values()) == 1


# -- regulariser ------------------------------------------------------------------------------
def test_kl_zero_when_attention_matches():
    q = build_entity_targets(story(), 3)
    a = [Tensor(np.broadcast_to(q.dense(), (2, 13, 3)).copy()) for _ in range(2)]
    assert regularization_loss(a, q).item() == 0.0


def test_kl_uniform_is_log_z():
    q = np.eye(5)[[0, 3, 4, 1]]
    a = [Tensor(np.full((3, 4, 5), 0.2))]
    assert regularization_loss(a, q).item() == pytest.approx(math.log(5), abs=1e-15)


def test_kl_matches_hand_sum():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(3), size=(2, 2))  # H=2, T=2, Z=3
    q = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
    hand = 0.0
    for t in range(2):
        for i in range(2):
            for z in range(3):
                if q[i, z] > 0:
                    hand += q[i, z] * (math.log(q[i, z]) - math.log(a[t, i, z]))
    hand /= 2 * 2
    assert abs(regularization_loss([Tensor(a)], q).item() - hand) < 1e-12


def test_kl_floor_keeps_it_finite():
    a = np.array([[[1.0, 0.0]]])
    val = regularization_loss([Tensor(a)], np.array([[0.0, 1.0]])).item()
    assert val == pytest.approx(-math.log(1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_kl_nonnegative(L, T, Z, seed):
    rng = np.random.default_rng(seed)
    a = [Tensor(rng.dirichlet(np.ones(Z), size=(2, T))) for _ in range(L)]
    q = np.zeros((T, Z))
    for i in range(T):
        sup = rng.choice(Z, size=rng.integers(1, Z + 1), replace=False)
        q[i, sup] = 1.0 / len(sup)
    assert regularization_loss(a, q).item() >= -1e-15


def test_total_loss_parts():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((4, 6)))
    a = [Tensor(rng.dirichlet(np.ones(3), size=(2, 4)))]
    q = np.eye(3)[[0, 1, 2, 2]]
    total, nll, kl = total_loss(logits, [1, 2, 3, 4], a, q, 0.5)
    assert total.item() == pytest.approx(nll.item() + 0.5 * kl.item(), abs=1e-14)
    total, nll, kl = total_loss(logits, [1, 2, 3, 4], None, None, 0.5)
    assert total is nll and kl is None


def test_mention_free_targets_pull_toward_non_entity_slot():
    vocab, examples = small_corpus(8)
    probe = examples[:3]

    def null_mass(model):
        vals = []
        for ex in probe:
            with tt.no_grad():
                A = np.stack([a.data for a in narrative_pass(model, ex).cross_weights])
            Z = ex.targets.num_slots
            vals += [A[:, :, i, -1].mean() for i, s in enumerate(ex.targets.support) if s == (Z - 1,)]
        return float(np.mean(vals))

    before = null_mass(small_model(vocab))
    after = {}
    for lam in (0.0, 1.0):
        model = small_model(vocab)
        train_loop(model, examples, TrainConfig(lam=lam, learning_rate=3e-3, steps=150))
        after[lam] = null_mass(model)
    assert after[1.0] > before + 0.03
    assert after[1.0] > after[0.0] + 0.03


# -- gradients through the whole model -----------------------------------------------------------
def test_full_model_gradients():
    vocab, examples = small_corpus(2, seed=4)
    ex = examples[0]
    assert ex.targets.num_slots >= 3
    model = small_model(vocab, cache_size=0, detach_memory_values=False, init_std=0.3, num_layers=2)
    params = model.parameters()
    errs = directional_check(lambda: narrative_loss(model, ex, 0.5)[0], params, np.random.default_rng(0), coords=2)
    names = list(model.params)
    bad = {names[k]: e for k, e in errs.items() if e > 1e-4}
    assert not bad


# -- training ----------------------------------------------------------------------------------
def test_train_config_validation_and_aliases():
    with pytest.raises(InputError):
        TrainConfig(lam=-1)
    with pytest.raises(InputError):
        TrainConfig(steps=0)
    with pytest.raises(InputError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(InputError):
        TrainConfig.from_dict({"lambda": 0.5, "momentum": 0.9})
    cfg = TrainConfig.from_dict({"lambda": 0.5, "steps": 3})
    assert cfg.lam == 0.5 and TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig(lam=2.0, ablate_entity_supervision=True).effective_lambda == 0.0


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1.0, steps=110, warmup_steps=10, schedule="cosine")
    assert learning_rate_at(cfg, 5) == pytest.approx(0.5)
    assert learning_rate_at(cfg, 10) == pytest.approx(1.0)
    assert learning_rate_at(cfg, 60) == pytest.approx(0.5)
    assert learning_rate_at(cfg, 110) == pytest.approx(0.0, abs=1e-15)
    assert learning_rate_at(TrainConfig(learning_rate=0.1), 7) == 0.1


def test_empty_corpus():
    vocab, _ = small_corpus(1)
    with pytest.raises(InputError):
        train_loop(small_model(vocab), [], TrainConfig(steps=1))


def test_lambda_zero_is_no_entity_supervision():
    vocab, examples = small_corpus()
    runs = []
    for cfg in (TrainConfig(lam=0.0, steps=6, batch_size=2), TrainConfig(lam=1.0, ablate_entity_supervision=True, steps=6, batch_size=2)):
        model = small_model(vocab)
        trace = train_loop(model, examples, cfg).trace
        runs.append(([(r.nll, r.total) for r in trace], [p.data.tobytes() for p in model.parameters()]))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("variant", ["vanilla", "static", "dynamic"])
def test_same_seed_same_weights(variant, tmp_path):
    vocab, examples = small_corpus()
    out = []
    for k in range(2):
        model = small_model(vocab, variant)
        trace = train_loop(model, examples, TrainConfig(steps=4, seed=5)).trace
        save_checkpoint(model, tmp_path / f"{k}.mneme")
        out.append(([r.total for r in trace], (tmp_path / f"{k}.mneme").read_bytes()))
    assert out[0] == out[1]
    assert load_checkpoint(tmp_path / "0.mneme").params["embed"].data.tobytes() == model.params["embed"].data.tobytes()


def test_memory_init_ablation_uses_random_slots():
    vocab, examples = small_corpus()
    model = small_model(vocab)
    ex = examples[0]
    with tt.no_grad():
        a = narrative_pass(model, ex, random_memory=True, rng=np.random.default_rng(0)).memories[0]
        b = narrative_pass(model, ex).memories[0]
    assert a.keys.shape == b.keys.shape
    assert not np.allclose(a.keys.data, b.keys.data)


def test_sgd_runs_and_reduces_loss():
    vocab, examples = small_corpus(2)
    model = small_model(vocab, "vanilla")
    trace = train_loop(model, examples[:1], TrainConfig(optimizer="sgd", learning_rate=0.5, steps=30)).trace
    assert trace[-1].nll < trace[0].nll


@pytest.mark.slow
def test_single_story_overfit():
    """A 2-layer d=64 model memorises one ~50-token story (< 0.5 nats/token)."""
    spec = SyntheticCorpusSpec(num_stories=1, entities_per_story=(2, 2), sections=3, sentences_per_section=2,
                               sentence_length=8, pair_prob=0.0, seed=2)
    corpus, _ = synth_generate(spec)
    vocab = Vocab.from_corpus(corpus)
    ex = make_example(corpus[0], vocab)
    assert 40 <= len(ex.ids) <= 60
    model = MnemeLM(ModelConfig(variant="dynamic", vocab_size=len(vocab), hidden_dim=64, num_layers=2,
                                self_heads=4, cross_heads=4, chunk_size=16, cache_size=64), seed=0)
    result = train_loop(model, [ex], TrainConfig(lam=1.0, learning_rate=3e-3, steps=2000),
                        callback=lambda step, m: step % 50 == 0 and _nll(m, ex) < 0.5)
    assert _nll(model, ex) < 0.5
    assert len(result.trace) <= 2000


def _nll(model, ex):
    from mneme.train import token_nll

    return float(token_nll(model, ex).mean())
