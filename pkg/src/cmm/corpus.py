"""Deterministic synthetic multilingual corpus and its on-disk format.

Each language owns a window of token ids and a token-bigram chain. Tokens are
rendered as 2-4 noisy feature frames around an emission mean. Emission means
are built from a shared phone inventory: the token with id ``t`` sounds like
phone ``t % size`` plus a small per-language accent vector, so tokens of
different languages are near-homophones and the acoustics alone only weakly
identify the language.

File format (one file per split), all integers little-endian::

    CMM-CORPUS 1\\n
    key=value\\n            (manifest, vocabularies, split name, record count)
    ...
    END\\n
    record*:  uint32 payload_length, then payload =
              int32 lang_id, int32 alt_lang, uint32 T, uint32 U, uint32 F,
              float64[T*F] frames (row-major), int32[U] targets
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import ConfigError, Utterance
from .vocab import VocabularyTable

MAGIC = "CMM-CORPUS 1"
SPLITS = ("train", "valid", "test")


class CorpusFormatError(ValueError):
    """Malformed corpus file."""


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: int
    tokens: np.ndarray  # (n,) sorted token ids
    initial: np.ndarray  # (n,) start distribution
    transition: np.ndarray  # (n, n) row-stochastic bigram table over `tokens`
    emission_means: np.ndarray  # (n, F) aligned with `tokens`
    noise: float
    mean_length: float

    def index_of(self, token: int) -> int:
        return int(np.searchsorted(self.tokens, token))


def shared_count(size: int, overlap: float) -> int:
    """Tokens shared by adjacent languages so that their Jaccard index is ``overlap``."""
    return int(round(2 * size * overlap / (1 + overlap)))


def gen_language_specs(n_languages: int, feat_dim: int, vocab_per_language: int = 20, overlap: float = 0.0,
                       seed: int = 0, noise: float = 0.5, accent: float = 0.55, mean_length: float = 6.0,
                       concentration: float = 0.5) -> tuple[list[LanguageSpec], int]:
    """Language specs and the total vocabulary size."""
    if n_languages < 1 or vocab_per_language < 2:
        raise ConfigError("need at least one language and two tokens per language")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {overlap}")
    shared = shared_count(vocab_per_language, overlap)
    stride = vocab_per_language - shared
    if stride < 1 or (n_languages > 2 and 2 * stride < vocab_per_language):
        raise ConfigError("overlap too large: non-adjacent languages would share tokens")
    total = stride * (n_languages - 1) + vocab_per_language
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    for _ in range(100):
        phones = rng.normal(size=(vocab_per_language, feat_dim))
        dist = np.linalg.norm(phones[:, None] - phones[None], axis=-1)
        if dist[np.triu_indices(vocab_per_language, 1)].min() > 2 * noise + 2 * accent:
            break
    else:
        raise ConfigError("could not place distinct emission means; lower the noise")
    specs = []
    for i in range(n_languages):
        tokens = np.arange(i * stride, i * stride + vocab_per_language)
        a = rng.normal(size=feat_dim)
        a *= accent / np.linalg.norm(a)
        trans = rng.dirichlet(np.full(vocab_per_language, concentration), size=vocab_per_language)
        specs.append(LanguageSpec(
            lang_id=i,
            tokens=tokens,
            initial=np.full(vocab_per_language, 1.0 / vocab_per_language),
            transition=trans,
            emission_means=phones[tokens % vocab_per_language] + a,
            noise=noise,
            mean_length=mean_length,
        ))
    return specs, total


def _length(spec: LanguageSpec, rng: np.random.Generator) -> int:
    return 1 + int(rng.poisson(max(spec.mean_length - 1.0, 0.0)))


def _render(means: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    reps = rng.integers(2, 5, size=len(means))
    frames = np.repeat(means, reps, axis=0)
    if noise > 0:
        frames = frames + noise * rng.normal(size=frames.shape)
    return frames


def _chain(spec: LanguageSpec, prev: int | None, rng: np.random.Generator) -> int:
    p = spec.initial if prev is None else spec.transition[prev]
    return int(rng.choice(len(p), p=p))


def sample_utterance(spec: LanguageSpec, rng: np.random.Generator) -> Utterance:
    U = _length(spec, rng)
    idx = []
    prev = None
    for _ in range(U):
        prev = _chain(spec, prev, rng)
        idx.append(prev)
    idx = np.array(idx)
    frames = _render(spec.emission_means[idx], spec.noise, rng)
    return Utterance(frames, spec.tokens[idx], spec.lang_id)


def sample_code_switch(spec_a: LanguageSpec, spec_b: LanguageSpec, switch_rate: float,
                       rng: np.random.Generator) -> tuple[Utterance, np.ndarray]:
    """Mostly-``a`` utterance with a ``switch_rate`` share of ``b`` tokens.

    Returns the utterance (labelled with language a) and a boolean array
    flagging the foreign positions.
    """
    if not 0.0 <= switch_rate <= 0.5:
        raise ConfigError(f"switch_rate must lie in [0, 0.5], got {switch_rate}")
    U = _length(spec_a, rng)
    foreign = rng.random(U) < switch_rate
    prev_a = prev_b = None
    tokens, means = [], []
    for is_b in foreign:
        if is_b:
            prev_b = _chain(spec_b, prev_b, rng)
            tokens.append(spec_b.tokens[prev_b])
            means.append(spec_b.emission_means[prev_b])
        else:
            prev_a = _chain(spec_a, prev_a, rng)
            tokens.append(spec_a.tokens[prev_a])
            means.append(spec_a.emission_means[prev_a])
    frames = _render(np.array(means), spec_a.noise, rng)
    return Utterance(frames, np.array(tokens), spec_a.lang_id, alt_lang=spec_b.lang_id), foreign


# ---------------------------------------------------------------------------
# manifest and corpus
# ---------------------------------------------------------------------------


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",")] if s else []


def _counts(s: str, n: int) -> list[int]:
    """Per-language counts; a single number applies to every language."""
    c = _ints(s)
    return c * n if len(c) == 1 else c


@dataclass
class CorpusManifest:
    n_languages: int = 5
    counts: dict[str, list[int]] = field(default_factory=lambda: {"train": [2000] * 5, "valid": [100] * 5, "test": [200] * 5})
    seed: int = 0
    overlap: float = 0.2
    code_switch: float = 0.2
    code_switch_pairs: list[tuple[int, int]] = field(default_factory=lambda: [(1, 0), (2, 0)])
    code_switch_count: int = 200
    feat_dim: int = 16
    vocab_per_language: int = 20
    noise: float = 0.5
    accent: float = 0.55
    mean_length: float = 6.0
    concentration: float = 0.5

    def __post_init__(self):
        for split in SPLITS:
            c = self.counts.get(split)
            if c is None or len(c) != self.n_languages or min(c) <= 0:
                raise ConfigError(f"counts for split {split!r} must be {self.n_languages} positive integers")
        for a, b in self.code_switch_pairs:
            if a == b or not (0 <= a < self.n_languages and 0 <= b < self.n_languages):
                raise ConfigError(f"bad code-switch pair ({a}, {b})")

    @classmethod
    def default(cls, n_languages: int = 5, **kw) -> "CorpusManifest":
        counts = kw.pop("counts", None) or {"train": [2000] * n_languages, "valid": [100] * n_languages,
                                            "test": [200] * n_languages}
        return cls(n_languages=n_languages, counts=counts, **kw)

    def to_lines(self) -> list[str]:
        out = [
            f"n_languages={self.n_languages}",
            *(f"counts.{s}={','.join(map(str, self.counts[s]))}" for s in SPLITS),
            f"seed={self.seed}",
            f"overlap={self.overlap!r}",
            f"code_switch={self.code_switch!r}",
            "code_switch_pairs=" + ",".join(f"{a}:{b}" for a, b in self.code_switch_pairs),
            f"code_switch_count={self.code_switch_count}",
            f"feat_dim={self.feat_dim}",
            f"vocab_per_language={self.vocab_per_language}",
            f"noise={self.noise!r}",
            f"accent={self.accent!r}",
            f"mean_length={self.mean_length!r}",
            f"concentration={self.concentration!r}",
        ]
        return out

    @classmethod
    def from_items(cls, kv: dict[str, str]) -> "CorpusManifest":
        try:
            pairs = [tuple(int(x) for x in p.split(":")) for p in kv["code_switch_pairs"].split(",") if p]
            return cls(
                n_languages=int(kv["n_languages"]),
                counts={s: _counts(kv[f"counts.{s}"], int(kv["n_languages"])) for s in SPLITS},
                seed=int(kv["seed"]),
                overlap=float(kv["overlap"]),
                code_switch=float(kv["code_switch"]),
                code_switch_pairs=pairs,
                code_switch_count=int(kv["code_switch_count"]),
                feat_dim=int(kv["feat_dim"]),
                vocab_per_language=int(kv["vocab_per_language"]),
                noise=float(kv["noise"]),
                accent=float(kv["accent"]),
                mean_length=float(kv["mean_length"]),
                concentration=float(kv["concentration"]),
            )
        except KeyError as e:
            raise CorpusFormatError(f"manifest is missing key {e.args[0]!r}") from None

    def language_specs(self) -> tuple[list[LanguageSpec], int]:
        return gen_language_specs(self.n_languages, self.feat_dim, self.vocab_per_language, self.overlap,
                                  self.seed, self.noise, self.accent, self.mean_length, self.concentration)


@dataclass
class Corpus:
    manifest: CorpusManifest
    vocab: VocabularyTable
    splits: dict[str, list[Utterance]]

    def by_language(self, split: str) -> list[list[Utterance]]:
        out: list[list[Utterance]] = [[] for _ in range(self.manifest.n_languages)]
        for u in self.splits[split]:
            out[u.lang_id].append(u)
        return out


def generate_corpus(manifest: CorpusManifest) -> Corpus:
    """The whole corpus as a pure function of the manifest (seed included)."""
    specs, total = manifest.language_specs()
    vocab = VocabularyTable.from_lists(total, [s.tokens for s in specs])
    splits: dict[str, list[Utterance]] = {}
    for k, split in enumerate(SPLITS):
        utts = []
        for spec, n in zip(specs, manifest.counts[split]):
            rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, k, spec.lang_id]))
            utts.extend(sample_utterance(spec, rng) for _ in range(n))
        splits[split] = utts
    cs = []
    if manifest.code_switch > 0:
        for a, b in manifest.code_switch_pairs:
            rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, 99, a, b]))
            cs.extend(sample_code_switch(specs[a], specs[b], manifest.code_switch, rng)[0]
                      for _ in range(manifest.code_switch_count))
    splits["codeswitch"] = cs
    return Corpus(manifest, vocab, splits)


# ---------------------------------------------------------------------------
# binary file format
# ---------------------------------------------------------------------------

_REC_HEAD = struct.Struct("<iiIII")
_LEN = struct.Struct("<I")


def _header(manifest: CorpusManifest, vocab: VocabularyTable, split: str, n: int) -> bytes:
    lines = [MAGIC, f"split={split}", f"records={n}", *manifest.to_lines(), f"vocab_total={vocab.total_size}"]
    lines += [f"vocab.{i}=" + ",".join(map(str, sorted(v))) for i, v in enumerate(vocab.per_language)]
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8")


def encode_record(u: Utterance) -> bytes:
    T, F = u.frames.shape
    payload = (
        _REC_HEAD.pack(u.lang_id, u.alt_lang, T, u.U, F)
        + u.frames.astype("<f8").tobytes()
        + u.targets.astype("<i4").tobytes()
    )
    return _LEN.pack(len(payload)) + payload


def write_corpus(path, manifest: CorpusManifest, vocab: VocabularyTable, split: str,
                 utterances: list[Utterance]) -> None:
    with open(path, "wb") as fh:
        fh.write(_header(manifest, vocab, split, len(utterances)))
        for u in utterances:
            fh.write(encode_record(u))


def _parse_header(buf: bytes) -> tuple[dict[str, str], int]:
    end = buf.find(b"\nEND\n")
    if not buf.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise CorpusFormatError("not a corpus file (bad magic or unterminated header)")
    kv = {}
    for line in buf[len(MAGIC) + 1 : end].decode("utf-8").split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise CorpusFormatError(f"malformed header line {line!r}")
        kv[key] = value
    return kv, end + len(b"\nEND\n")


def iter_records(buf: bytes, offset: int, n: int) -> Iterator[Utterance]:
    for i in range(n):
        if offset + 4 > len(buf):
            raise CorpusFormatError(f"record {i}: truncated length prefix at byte offset {offset}")
        (size,) = _LEN.unpack_from(buf, offset)
        start = offset + 4
        if start + size > len(buf):
            raise CorpusFormatError(f"record {i}: payload of {size} bytes truncated at byte offset {len(buf)}")
        if size < _REC_HEAD.size:
            raise CorpusFormatError(f"record {i}: payload too short at byte offset {start}")
        lang, alt, T, U, F = _REC_HEAD.unpack_from(buf, start)
        if size != _REC_HEAD.size + 8 * T * F + 4 * U:
            raise CorpusFormatError(f"record {i}: length {size} inconsistent with T={T}, U={U}, F={F} at byte offset {start}")
        p = start + _REC_HEAD.size
        frames = np.frombuffer(buf, dtype="<f8", count=T * F, offset=p).reshape(T, F).astype(np.float64)
        targets = np.frombuffer(buf, dtype="<i4", count=U, offset=p + 8 * T * F).astype(np.int64)
        try:
            yield Utterance(frames, targets, lang, alt)
        except ValueError as e:
            raise CorpusFormatError(f"record {i}: {e}") from None
        offset = start + size
    if offset != len(buf):
        raise CorpusFormatError(f"{len(buf) - offset} trailing bytes after {n} records at byte offset {offset}")


def read_corpus(path) -> tuple[CorpusManifest, VocabularyTable, str, list[Utterance]]:
    """Manifest, vocabulary, split name and utterances of one split file."""
    buf = Path(path).read_bytes()
    kv, off = _parse_header(buf)
    manifest = CorpusManifest.from_items(kv)
    try:
        vocab = VocabularyTable.from_lists(int(kv["vocab_total"]),
                                           [_ints(kv[f"vocab.{i}"]) for i in range(manifest.n_languages)])
        n = int(kv["records"])
        split = kv["split"]
    except KeyError as e:
        raise CorpusFormatError(f"header is missing key {e.args[0]!r}") from None
    return manifest, vocab, split, list(iter_records(buf, off, n))


def save_corpus_dir(directory, corpus: Corpus) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, utts in corpus.splits.items():
        p = directory / f"{split}.cmmc"
        write_corpus(p, corpus.manifest, corpus.vocab, split, utts)
        paths.append(p)
    return paths


def load_corpus_dir(directory) -> Corpus:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {directory}")
    splits, manifest, vocab = {}, None, None
    for p in sorted(directory.glob("*.cmmc")):
        manifest, vocab, split, utts = read_corpus(p)
        splits[split] = utts
    if manifest is None:
        raise FileNotFoundError(f"no .cmmc split files in {directory}")
    return Corpus(manifest, vocab, splits)


def nearest_mean_language(frames: np.ndarray, specs: list[LanguageSpec]) -> int:
    """Language whose emission means best explain the frames (sum of nearest squared distances)."""
    scores = []
    for s in specs:
        d = ((frames[:, None, :] - s.emission_means[None]) ** 2).sum(-1)
        scores.append(d.min(axis=1).sum())
    return int(np.argmin(scores))
