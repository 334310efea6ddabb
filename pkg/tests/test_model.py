import numpy as np
import pytest

from cmm.model import (ChoiceVector, CmmConfig, ConfigError, Utterance, embed_input, encode, forward_all_logits,
                       init_params, joint, make_choice_vector, predict)

SMALL = CmmConfig(n_languages=3, feat_dim=4, model_dim=8, ffn_dim=16, n_layers=2, n_heads=2, vocab_size_total=7,
                  joint_dim=6)


def randomize_specific(params, rng, scale=0.3):
    for n in params.specific_names() + ["input.w_choice"]:
        params[n].data[...] = rng.normal(scale=scale, size=params[n].shape)
    return params


@pytest.fixture
def small(rng):
    return SMALL, randomize_specific(init_params(SMALL, seed=3), rng)


# -- choice vectors ---------------------------------------------------------------


def test_choice_vector_examples():
    c = make_choice_vector({3}, 5)
    assert c.bits == (0, 0, 0, 1, 0)
    np.testing.assert_array_equal(c.weights, [0, 0, 0, 1, 0])
    c = make_choice_vector({0, 3}, 5)
    assert c.bits == (1, 0, 0, 1, 0)
    np.testing.assert_array_equal(c.weights, [0.5, 0, 0, 0.5, 0])
    np.testing.assert_array_equal(make_choice_vector({0, 1, 2}, 3).weights, [1 / 3] * 3)


@pytest.mark.parametrize("sel", [set(), {5}, {-1}])
def test_choice_vector_errors(sel):
    with pytest.raises(ConfigError):
        make_choice_vector(sel, 5)


def test_weights_sum_to_one_exactly():
    for n in range(1, 8):
        for k in range(1, n + 1):
            w = make_choice_vector(range(k), n).weights
            assert w.sum() == pytest.approx(1.0, abs=1e-15)
            assert np.all(w[k:] == 0)


# -- config ------------------------------------------------------------------------


def test_config_defaults_and_checks():
    c = CmmConfig()
    assert c.specific_layers == (0, 3)
    assert c.blank_id == c.vocab_size_total
    with pytest.raises(ConfigError):
        CmmConfig(model_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        CmmConfig(specific_layers=(4,))
    assert CmmConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        CmmConfig.from_dict({"bogus": 1})


def test_param_shapes_and_overhead():
    p = init_params(CmmConfig(), 0)
    spec = p.specific_names()
    assert spec == ["enc.0.specific", "enc.3.specific", "pred.specific"]
    assert {p[n].shape[0] for n in spec} == {5}
    uni, sp = p.count(p.universal_names()), p.count(spec)
    assert (uni, sp) == (241273, 56320)
    assert sp / uni < 0.25
    for n in spec + ["input.w_choice"]:
        assert not p[n].data.any()


# -- embedding and encoder ------------------------------------------------------


def test_embed_input():
    out = embed_input(np.ones((2, 3)), make_choice_vector({1}, 2))
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(out[:, 3:], [[0, 1], [0, 1]])
    np.testing.assert_array_equal(embed_input(np.ones((1, 3)), make_choice_vector({0, 1}, 2))[0, 3:], [1, 1])
    with pytest.raises(ValueError):
        embed_input(np.zeros((0, 3)), make_choice_vector({0}, 2))


def test_single_frame_encode(small):
    cfg, p = small
    h = encode(cfg, p, np.ones((1, cfg.feat_dim)), make_choice_vector({0}, 3))
    assert h.shape == (1, cfg.model_dim) and np.all(np.isfinite(h))


def test_equal_maps_make_two_hot_equal_one_hot(rng):
    cfg = SMALL
    p = init_params(cfg, 1)
    for n in p.specific_names():
        m = rng.normal(scale=0.3, size=p[n].shape[1:])
        p[n].data[...] = m  # every language shares M
    x = rng.normal(size=(5, cfg.feat_dim))
    cfg_noemb = cfg.replace(embed_choice=False)
    one = encode(cfg_noemb, p, x, make_choice_vector({0}, 3))
    two = encode(cfg_noemb, p, x, make_choice_vector({0, 2}, 3))
    np.testing.assert_allclose(one, two, rtol=0, atol=1e-12)


def test_one_hot_uses_exactly_its_map(rng):
    cfg = SMALL.replace(specific_layers=(1,), embed_choice=False)
    p = init_params(cfg, 2)
    x = rng.normal(size=(4, cfg.feat_dim))
    base = encode(cfg, p, x, make_choice_vector({1}, 3))
    p["enc.1.specific"].data[0] = rng.normal(size=(8, 8))  # other languages' maps are irrelevant
    p["enc.1.specific"].data[2] = rng.normal(size=(8, 8))
    np.testing.assert_array_equal(encode(cfg, p, x, make_choice_vector({1}, 3)), base)
    p["enc.1.specific"].data[1] = rng.normal(size=(8, 8))
    assert np.abs(encode(cfg, p, x, make_choice_vector({1}, 3)) - base).max() > 1e-3


def test_causal_prefix_invariance(rng):
    cfg = SMALL.replace(causal=True)
    p = randomize_specific(init_params(cfg, 4), rng)
    x = rng.normal(size=(7, cfg.feat_dim))
    c = make_choice_vector({1}, 3)
    np.testing.assert_allclose(encode(cfg, p, x[:4], c), encode(cfg, p, x, c)[:4], rtol=0, atol=1e-12)
    full = SMALL
    q = randomize_specific(init_params(full, 4), rng)
    assert np.abs(encode(full, q, x[:4], c) - encode(full, q, x, c)[:4]).max() > 1e-6


def _permute(cfg, p, perm):
    """Relabel language i as perm[i]."""
    q = p.copy()
    inv = np.argsort(perm)
    for n in q.specific_names():
        q[n].data[...] = p[n].data[inv]
    q["input.w_choice"].data[...] = p["input.w_choice"].data[inv]
    return q


def test_language_permutation_equivariance(small, rng):
    cfg, p = small
    perm = np.array([2, 0, 1])
    q = _permute(cfg, p, perm)
    frames = rng.normal(size=(5, cfg.feat_dim))
    utt = Utterance(frames, np.array([1, 4]), 0)
    for sel in [{0}, {1, 2}, {0, 1, 2}]:
        a = forward_all_logits(cfg, p, utt, make_choice_vector(sel, 3))
        b = forward_all_logits(cfg, q, utt, make_choice_vector({int(perm[i]) for i in sel}, 3))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# -- prediction network and joint ----------------------------------------------


def test_predict_shapes_and_prefix_causality(small):
    cfg, p = small
    assert predict(cfg, p, []).shape == (1, cfg.model_dim)
    long = predict(cfg, p, [1, 2, 3, 0])
    np.testing.assert_array_equal(predict(cfg, p, [1, 2]), long[:3])
    np.testing.assert_allclose(predict(cfg, p, [5])[0], predict(cfg, p, [])[0], rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        predict(cfg, p, [cfg.vocab_size_total])


def test_joint_zero_specific_matches_universal(rng):
    cfg = SMALL
    p = init_params(cfg, 5)
    he, hd = rng.normal(size=8), rng.normal(size=8)
    ref = joint(cfg, p, he, hd, make_choice_vector({0}, 3))
    for sel in [{1}, {0, 2}, {0, 1, 2}]:
        np.testing.assert_array_equal(joint(cfg, p, he, hd, make_choice_vector(sel, 3)), ref)


def test_joint_one_hot_term(rng):
    cfg = SMALL
    p = init_params(cfg, 6)
    he, hd = rng.normal(size=8), rng.normal(size=8)
    M = rng.normal(size=(8, 6))
    p["pred.specific"].data[2] = M
    got = joint(cfg, p, he, hd, make_choice_vector({2}, 3))
    z = np.tanh(he @ p["joint.U"].data + hd @ p["joint.V"].data + hd @ M + p["joint.b"].data)
    np.testing.assert_allclose(got, z @ p["out.w"].data + p["out.b"].data, rtol=0, atol=1e-13)


def test_joint_tanh_bound(small, rng):
    cfg, p = small
    got = joint(cfg, p, 1e6 * rng.normal(size=8), 1e6 * rng.normal(size=8), make_choice_vector({0}, 3))
    bound = np.abs(p["out.w"].data).sum(axis=0) + np.abs(p["out.b"].data)
    assert np.all(np.abs(got) <= bound + 1e-12)


def test_prediction_ignores_frames(small, rng):
    cfg, p = small
    c = make_choice_vector({0}, 3)
    y = np.array([2, 3])
    a = forward_all_logits(cfg, p, Utterance(rng.normal(size=(3, 4)), y, 0), c)
    assert a.shape == (3, 3, cfg.vocab_size_total + 1)
    np.testing.assert_allclose(np.logaddexp.reduce(a, axis=-1), 0.0, atol=1e-10)
    assert forward_all_logits(cfg, p, Utterance(rng.normal(size=(1, 4)), np.zeros(0, int), 0), c).shape[:2] == (1, 1)


# -- zero-residual identity ------------------------------------------------------


def test_zero_residual_identity(rng):
    cfg = SMALL
    p = init_params(cfg, 7)  # specific maps and choice columns start at zero
    utt = Utterance(rng.normal(size=(5, cfg.feat_dim)), np.array([0, 6, 2]), 1)
    ref = forward_all_logits(cfg, p, utt, ChoiceVector.universal(3))
    for sel in [{0}, {1}, {2}, {0, 1}, {0, 1, 2}]:
        out = forward_all_logits(cfg, p, utt, make_choice_vector(sel, 3))
        assert np.abs(out - ref).max() == 0.0


def test_utterance_validation():
    with pytest.raises(ValueError):
        Utterance(np.zeros((0, 4)), np.zeros(0, int), 0)
