import numpy as np
import pytest
from conftest import perturbed_params

from cmm.decode import (Decodable, EvalGrid, System, beam_decode, bind, distractor_choice, greedy_decode,
                        greedy_decode_batch, relative_reduction, run_eval_grid, token_error_rate)
from cmm.model import ChoiceVector, ConfigError, make_choice_vector
from cmm.vocab import merge_vocab


def rigged(cfg, params, bias):
    """Parameters whose output ignores the hidden state: logits equal ``bias``."""
    p = params.copy()
    p["out.w"].data[...] = 0.0
    p["out.b"].data[...] = bias
    return p


@pytest.fixture(scope="module")
def params(toy_model):
    return perturbed_params(toy_model, 9)


def test_all_blank_model_outputs_nothing(toy_model, params, toy_corpus):
    b = np.zeros(toy_model.blank_id + 1)
    b[-1] = 50.0
    m = Decodable(toy_model, rigged(toy_model, params, b), ChoiceVector.universal(3))
    u = toy_corpus.splits["test"][0]
    for r in (greedy_decode(m, u.frames), beam_decode(m, u.frames, 4)):
        assert r.tokens == [] and len(r.step_logprobs) == u.T


def test_emission_cap_forces_advance(toy_model, params, toy_corpus):
    b = np.zeros(toy_model.blank_id + 1)
    b[2] = 50.0
    m = Decodable(toy_model, rigged(toy_model, params, b), ChoiceVector.universal(3))
    u = toy_corpus.splits["test"][0]
    for cap in (1, 4):
        g = greedy_decode(m, u.frames, max_emit=cap)
        assert g.tokens == [2] * (cap * u.T)
        # the forced advance contributes no score
        assert len(g.step_logprobs) == cap * u.T
        assert beam_decode(m, u.frames, 3, max_emit=cap).tokens == g.tokens
    with pytest.raises(ConfigError):
        greedy_decode(m, u.frames, max_emit=0)


def test_ties_go_to_the_lowest_id(toy_model, params, toy_corpus):
    u = toy_corpus.splits["test"][0]
    flat = Decodable(toy_model, rigged(toy_model, params, 0.0), ChoiceVector.universal(3))
    assert greedy_decode(flat, u.frames, max_emit=1).tokens == [0] * u.T
    b = np.full(toy_model.blank_id + 1, -10.0)
    b[5] = b[-1] = 3.0
    tie = Decodable(toy_model, rigged(toy_model, params, b), ChoiceVector.universal(3))
    assert greedy_decode(tie, u.frames, max_emit=1).tokens == [5] * u.T
    assert beam_decode(tie, u.frames, 1, max_emit=1).tokens == [5] * u.T


def test_beam_one_is_greedy(toy_model, params, toy_corpus):
    utts = toy_corpus.splits["train"][:100]
    for i, u in enumerate(utts):
        m = bind(toy_model, params, make_choice_vector({u.lang_id, (u.lang_id + i) % 3}, 3), toy_corpus.vocab)
        g, b = greedy_decode(m, u.frames), beam_decode(m, u.frames, 1)
        assert g.tokens == b.tokens
        np.testing.assert_allclose(g.step_logprobs, b.step_logprobs, atol=1e-12)


def test_batched_greedy_matches_single(toy_model, params, toy_corpus):
    utts = toy_corpus.splits["test"][:12]
    models = [bind(toy_model, params, make_choice_vector({u.lang_id}, 3), toy_corpus.vocab) for u in utts]
    batch = greedy_decode_batch(models, [u.frames for u in utts])
    for m, u, r in zip(models, utts, batch):
        assert greedy_decode(m, u.frames).tokens == r.tokens


def test_wider_beam_scores_at_least_greedy(toy_model, params, toy_corpus):
    for u in toy_corpus.splits["test"][:30]:
        m = bind(toy_model, params, make_choice_vector({u.lang_id}, 3), toy_corpus.vocab)
        assert beam_decode(m, u.frames, 4).score >= greedy_decode(m, u.frames).score - 1e-9


def test_mask_soundness(toy_model, params, toy_corpus):
    vocab = toy_corpus.vocab
    unmasked_oov = 0
    for i, u in enumerate(toy_corpus.splits["test"]):
        ch = make_choice_vector({u.lang_id}, 3)
        allowed = merge_vocab(vocab, ch)
        m = bind(toy_model, params, ch, vocab)
        for r in (greedy_decode(m, u.frames), beam_decode(m, u.frames, 3)):
            assert set(r.tokens) <= allowed
        free = bind(toy_model, params, ch, vocab, use_mask=False)
        unmasked_oov += sum(t not in allowed for t in greedy_decode(free, u.frames).tokens)
    assert unmasked_oov > 0  # the mask is doing real work on this model


def test_token_error_rate_examples():
    assert token_error_rate([1, 2], [1, 3]) == 0.5
    assert token_error_rate([], [1, 2, 3, 4]) == 1.0
    assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert token_error_rate([5], []) == 1.0
    assert token_error_rate([2, 1, 3, 4], [1, 2, 3]) == 1.0  # no transposition edit


def test_distractors():
    a = distractor_choice(2, 5, 3, 0, 7)
    assert a == distractor_choice(2, 5, 3, 0, 7)
    assert 2 in a.selected and len(a.selected) == 3
    picks = {distractor_choice(2, 5, 2, 0, i).selected for i in range(60)}
    assert len(picks) == 4


def test_grid(toy_model, params, toy_corpus):
    test = toy_corpus.by_language("test")
    systems = [System("cmm", toy_model, params, 2), System("uni", toy_model, params, 3, lid=False, use_mask=False)]
    g = run_eval_grid(systems, test, toy_corpus.vocab, n_hots=(1, 3), seed=4)
    assert g.to_jsonl() == run_eval_grid(systems, test, toy_corpus.vocab, n_hots=(1, 3), seed=4).to_jsonl()
    assert g.flagged == {("cmm", 3)}
    for s in ("cmm", "uni"):
        for n in (1, 3):
            assert g.average(s, n) == pytest.approx(np.mean([g.ter(s, l, n) for l in range(3)]))
    # the universal system ignores the choice
    assert all(g.ter("uni", l, 1) == g.ter("uni", l, 3) for l in range(3))
    assert g.oov_count("cmm") == 0
    assert "*" in g.to_table()
    with pytest.raises(ConfigError):
        run_eval_grid(systems, test, toy_corpus.vocab, n_hots=(4,))


def test_grid_cells_are_corpus_level():
    from cmm.decode import CellStats
    c = CellStats(edits=3, ref_len=12, utterances=2)
    assert c.ter == 0.25
    assert EvalGrid({("s", 0, 1): c}).average("s", 1) == 0.25


def test_relative_reduction():
    assert relative_reduction(0.2, 0.15) == pytest.approx(0.25)
    assert relative_reduction(0.0, 0.0) == 0.0
