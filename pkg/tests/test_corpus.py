import dataclasses

import numpy as np
import pytest

from cmm.corpus import (CorpusFormatError, CorpusManifest, encode_record, gen_language_specs, generate_corpus,
                        load_corpus_dir, nearest_mean_language, read_corpus, sample_code_switch, sample_utterance,
                        save_corpus_dir, shared_count, write_corpus)
from cmm.model import ConfigError, Utterance


def small_manifest(**kw):
    counts = {"train": [30, 20, 25], "valid": [3, 3, 3], "test": [5, 5, 5]}
    return CorpusManifest.default(n_languages=3, counts=counts, code_switch_pairs=[(1, 0)], code_switch_count=7, **kw)


def test_disjoint_without_overlap():
    specs, total = gen_language_specs(2, 8, overlap=0.0)
    assert not set(specs[0].tokens) & set(specs[1].tokens)
    assert total == 40


def test_adjacent_jaccard_matches_overlap():
    specs, total = gen_language_specs(5, 16, overlap=0.2)
    assert total == 72
    for a, b in zip(specs, specs[1:]):
        sa, sb = set(a.tokens), set(b.tokens)
        assert abs(len(sa & sb) / len(sa | sb) - 0.2) <= 0.05
    assert not set(specs[0].tokens) & set(specs[2].tokens)
    assert shared_count(20, 0.2) == 7


def test_infeasible_partition():
    with pytest.raises(ConfigError):
        gen_language_specs(3, 8, vocab_per_language=10, overlap=0.9)


def test_specs_are_deterministic_and_well_formed():
    a, _ = gen_language_specs(4, 16, seed=11)
    b, _ = gen_language_specs(4, 16, seed=11)
    for x, y in zip(a, b):
        assert x.transition.tobytes() == y.transition.tobytes()
        assert x.emission_means.tobytes() == y.emission_means.tobytes()
        np.testing.assert_allclose(x.transition.sum(axis=1), 1.0, atol=1e-12)
        d = np.linalg.norm(x.emission_means[:, None] - x.emission_means[None], axis=-1)
        assert d[np.triu_indices(len(d), 1)].min() > 2 * x.noise


def test_noise_free_frames_are_means(rng):
    specs, _ = gen_language_specs(2, 6, noise=0.0)
    u = sample_utterance(specs[0], rng)
    idx = [specs[0].index_of(t) for t in u.targets]
    means = specs[0].emission_means[idx]
    # every frame equals the mean of some token of the utterance, in order
    runs = [np.flatnonzero((np.abs(means - f).max(axis=1) == 0))[0] for f in u.frames]
    assert runs == sorted(runs) and set(runs) == set(range(len(idx)))
    assert u.T >= u.U


def test_mean_length_one_gives_single_tokens(rng):
    specs, _ = gen_language_specs(1, 16, mean_length=1.0)
    assert all(sample_utterance(specs[0], rng).U == 1 for _ in range(50))


def test_bigram_frequencies(rng):
    specs, _ = gen_language_specs(1, 4, vocab_per_language=5, mean_length=8.0)
    s = specs[0]
    counts = np.zeros((5, 5))
    for _ in range(10000):
        idx = [s.index_of(t) for t in sample_utterance(s, rng).targets]
        for a, b in zip(idx, idx[1:]):
            counts[a, b] += 1
    emp = counts / counts.sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(emp - s.transition).sum(axis=1)
    assert tv.max() < 0.02


def test_code_switch_rates(rng):
    specs, _ = gen_language_specs(2, 8, overlap=0.0)
    n_foreign = n_total = 0
    for _ in range(10000):
        u, flags = sample_code_switch(specs[1], specs[0], 0.2, rng)
        assert u.lang_id == 1 and u.alt_lang == 0
        assert set(u.targets[flags]) <= set(specs[0].tokens)
        n_foreign += flags.sum()
        n_total += len(flags)
    assert abs(n_foreign / n_total - 0.2) < 0.03
    u, flags = sample_code_switch(specs[1], specs[0], 0.0, rng)
    assert not flags.any() and set(u.targets) <= set(specs[1].tokens)


def test_corpus_is_a_pure_function_of_the_manifest():
    a, b = generate_corpus(small_manifest()), generate_corpus(small_manifest())
    for split in a.splits:
        assert a.splits[split] == b.splits[split]
    c = generate_corpus(small_manifest(seed=1))
    assert c.splits["train"] != a.splits["train"]
    assert [len(x) for x in a.by_language("train")] == [30, 20, 25]
    assert len(a.splits["codeswitch"]) == 7


def test_round_trip_is_bit_exact(tmp_path):
    corpus = generate_corpus(dataclasses.replace(small_manifest(), counts={"train": [400] * 3, "valid": [1] * 3,
                                                                           "test": [1] * 3}))
    utts = corpus.splits["train"][:1000]
    p = tmp_path / "train.cmmc"
    write_corpus(p, corpus.manifest, corpus.vocab, "train", utts)
    manifest, vocab, split, back = read_corpus(p)
    assert manifest == corpus.manifest and vocab == corpus.vocab and split == "train"
    assert len(back) == 1000
    for x, y in zip(utts, back):
        assert x.frames.tobytes() == y.frames.tobytes() and x.targets.tolist() == y.targets.tolist()
        assert (x.lang_id, x.alt_lang) == (y.lang_id, y.alt_lang)
    data = p.read_bytes()
    write_corpus(tmp_path / "again.cmmc", manifest, vocab, split, back)
    assert (tmp_path / "again.cmmc").read_bytes() == data


def test_empty_split(tmp_path):
    m = small_manifest()
    c = generate_corpus(m)
    write_corpus(tmp_path / "e.cmmc", m, c.vocab, "valid", [])
    assert read_corpus(tmp_path / "e.cmmc")[3] == []


def test_truncated_file_names_offset(tmp_path):
    m = small_manifest()
    c = generate_corpus(m)
    p = tmp_path / "t.cmmc"
    write_corpus(p, m, c.vocab, "test", c.splits["test"])
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CorpusFormatError, match=r"record 14.*byte"):
        read_corpus(p)


def test_garbage_header(tmp_path):
    p = tmp_path / "g.cmmc"
    p.write_bytes(b"hello\n")
    with pytest.raises(CorpusFormatError):
        read_corpus(p)


def test_directory_round_trip(tmp_path):
    c = generate_corpus(small_manifest())
    save_corpus_dir(tmp_path / "c", c)
    back = load_corpus_dir(tmp_path / "c")
    for split in c.splits:
        assert back.splits[split] == c.splits[split]


def test_encode_record_layout():
    u = Utterance(np.arange(6.0).reshape(3, 2), np.array([4]), 1)
    rec = encode_record(u)
    assert len(rec) == 4 + 20 + 6 * 8 + 4
    assert rec[:4] == (20 + 48 + 4).to_bytes(4, "little")


def test_separability_at_default_noise():
    m = CorpusManifest.default()
    c = generate_corpus(dataclasses.replace(m, counts={"train": [1] * 5, "valid": [1] * 5, "test": [200] * 5}))
    specs, _ = m.language_specs()
    acc = np.mean([nearest_mean_language(u.frames, specs) == u.lang_id for u in c.splits["test"]])
    assert acc > 0.95


def test_imbalanced_counts():
    m = CorpusManifest.default(n_languages=2, counts={"train": [100, 10], "valid": [1, 1], "test": [1, 1]},
                               code_switch_pairs=[(1, 0)])
    assert [len(x) for x in generate_corpus(m).by_language("train")] == [100, 10]


def test_manifest_validation():
    with pytest.raises(ConfigError):
        CorpusManifest.default(n_languages=2, counts={"train": [1, 0], "valid": [1, 1], "test": [1, 1]})
