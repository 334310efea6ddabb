import numpy as np
import pytest

from cmm.corpus import CorpusManifest, generate_corpus
from cmm.model import CmmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_manifest(**kw) -> CorpusManifest:
    base = dict(n_languages=3, counts={"train": [60] * 3, "valid": [5] * 3, "test": [20] * 3},
                code_switch_pairs=[(1, 0)], code_switch_count=10, feat_dim=8, vocab_per_language=6, mean_length=3.0)
    base.update(kw)
    n = base.pop("n_languages")
    return CorpusManifest.default(n_languages=n, **base)


def toy_config(corpus, **kw) -> CmmConfig:
    base = dict(n_languages=corpus.manifest.n_languages, feat_dim=corpus.manifest.feat_dim, model_dim=16, ffn_dim=32,
                n_layers=2, n_heads=2, vocab_size_total=corpus.vocab.total_size, joint_dim=16)
    base.update(kw)
    return CmmConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus(toy_manifest())


@pytest.fixture(scope="session")
def toy_model(toy_corpus):
    return toy_config(toy_corpus)


def perturbed_params(cfg: CmmConfig, seed: int = 0, scale: float = 0.3):
    """Initial parameters with non-zero language-specific maps and choice columns."""
    from cmm.model import init_params, is_choice_columns, is_specific

    params = init_params(cfg, seed)
    r = np.random.default_rng(seed + 1000)
    for n, p in params.items():
        if is_specific(n) or is_choice_columns(n):
            p.data[...] = r.normal(scale=scale, size=p.shape)
    return params


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "LINES", None):
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
