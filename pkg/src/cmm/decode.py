"""Greedy and beam transducer decoding, token error rate, and the evaluation grid.

Tie-break rule: among equal scores the lowest token id wins. Blank is the
highest id, so a token beats blank on an exact tie.

Emission cap: after ``max_emit`` emissions at one frame the decoder advances to
the next frame without consulting the joint network and without adding any
score for the forced advance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .core import ops
from .core.ops import MASK_VALUE
from .core.tensor import Tensor, no_grad
from .model import (ChoiceVector, CmmConfig, CmmParams, ConfigError, Utterance, _gru_step, _proj, _specific,
                    encode_batch, joint_output, make_choice_vector, prepare_encoder)
from .vocab import VocabularyTable, merge_vocab

MAX_EMIT = 4


@dataclass
class Decodable:
    """A model bound to a fixed choice and output restriction.

    ``out_ids`` maps output columns to token ids (None: columns are ids
    0..V with blank last). ``allowed`` is the set of token ids that may be
    emitted; None disables masking.
    """

    cfg: CmmConfig
    params: CmmParams
    choice: ChoiceVector
    allowed: frozenset[int] | None = None
    out_ids: np.ndarray | None = None

    @property
    def n_out(self) -> int:
        return self.params["out.w"].shape[1]

    def column_ids(self) -> np.ndarray:
        return np.arange(self.n_out) if self.out_ids is None else self.out_ids

    def keep_mask(self) -> np.ndarray:
        ids = self.column_ids()
        if self.allowed is None:
            return np.ones(len(ids), dtype=bool)
        keep = np.isin(ids, list(self.allowed))
        keep[ids == self.cfg.blank_id] = True
        return keep


def bind(cfg: CmmConfig, params: CmmParams, choice: ChoiceVector, vocab: VocabularyTable | None = None,
         use_mask: bool = True) -> Decodable:
    """Full model under ``choice``; masks to the merged vocabulary when given."""
    allowed = merge_vocab(vocab, choice) if (vocab is not None and use_mask and not choice.is_universal) else None
    return Decodable(cfg, params, choice, allowed)


@dataclass
class DecodeResult:
    tokens: list[int]
    step_logprobs: list[float]
    frames: int

    @property
    def score(self) -> float:
        return float(sum(self.step_logprobs))


class _Scorer:
    """Joint-network scoring against one encoded utterance (or a batch of them)."""

    def __init__(self, models: Sequence[Decodable], frames_list: Sequence[np.ndarray]):
        m0 = models[0]
        self.cfg, self.params = m0.cfg, m0.params
        p = self.params
        with no_grad():
            eb = prepare_encoder(self.cfg, p, frames_list, [m.choice for m in models])
            henc = encode_batch(self.cfg, p, eb)
            self.encJ = ops.matmul(henc, p["joint.U"]).data
        self.offsets = eb.offsets
        self.lengths = eb.lengths
        self.slot_w = np.stack([p.slot_weights(m.choice) for m in models])
        self.add_mask = np.stack([np.where(m.keep_mask(), 0.0, MASK_VALUE) for m in models])
        self.col_ids = m0.column_ids()
        self.blank_col = int(np.flatnonzero(self.col_ids == self.cfg.blank_id)[0])
        self.d = self.cfg.model_dim

    def initial_state(self, n: int) -> np.ndarray:
        sos = np.full(n, self.cfg.blank_id)
        return self.advance(np.zeros((n, self.d)), sos)

    def advance(self, h: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        p = self.params
        with no_grad():
            xg = _proj(Tensor(p["pred.embed"].data[np.asarray(tokens, dtype=np.intp)]), p["pred.wx"], p["pred.bx"])
            return _gru_step(p, self.d, xg, Tensor(h)).data

    def logprobs(self, which: np.ndarray, t: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Masked log-softmax rows for utterances ``which`` at frames ``t`` with states ``h``."""
        p = self.params
        with no_grad():
            hd = Tensor(h)
            decJ = ops.matmul(hd, p["joint.V"])
            if self.cfg.pred_specific:
                decJ = ops.add(decJ, _specific(self.cfg, p, "pred.", hd, self.slot_w[which]))
            pre = ops.add(Tensor(self.encJ[self.offsets[which] + t]), decJ)
            logits = joint_output(p, pre).data
        logits = logits + self.add_mask[which]
        m = logits.max(axis=1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def greedy_decode_batch(models: Sequence[Decodable], frames_list: Sequence[np.ndarray],
                        max_emit: int = MAX_EMIT) -> list[DecodeResult]:
    """Greedy decoding of several utterances at once (models must share parameters)."""
    if max_emit < 1:
        raise ConfigError("max_emit_per_frame must be at least 1")
    sc = _Scorer(models, frames_list)
    B = len(frames_list)
    T = sc.lengths
    t = np.zeros(B, dtype=np.int64)
    emits = np.zeros(B, dtype=np.int64)
    h = sc.initial_state(B)
    toks: list[list[int]] = [[] for _ in range(B)]
    lps: list[list[float]] = [[] for _ in range(B)]
    while True:
        active = t < T
        forced = active & (emits >= max_emit)
        t[forced] += 1
        emits[forced] = 0
        which = np.flatnonzero(active & ~forced)
        if which.size == 0:
            if not (t < T).any():
                break
            continue
        lp = sc.logprobs(which, t[which], h[which])
        k = lp.argmax(axis=1)  # first maximum: lowest column
        best = lp[np.arange(which.size), k]
        is_blank = k == sc.blank_col
        for i, b in enumerate(which):
            lps[b].append(float(best[i]))
            if not is_blank[i]:
                toks[b].append(int(sc.col_ids[k[i]]))
        adv = which[is_blank]
        t[adv] += 1
        emits[adv] = 0
        em = which[~is_blank]
        if em.size:
            emits[em] += 1
            h[em] = sc.advance(h[em], sc.col_ids[k[~is_blank]])
    return [DecodeResult(toks[b], lps[b], int(T[b])) for b in range(B)]


def greedy_decode(model: Decodable, frames: np.ndarray, max_emit: int = MAX_EMIT) -> DecodeResult:
    return greedy_decode_batch([model], [frames], max_emit)[0]


@dataclass
class _Hyp:
    prefix: tuple[int, ...]
    score: float
    h: np.ndarray
    lps: list[float] = field(default_factory=list)


def _rank_key(score: float, last: int) -> tuple[float, int]:
    return (-score, last)


def beam_decode(model: Decodable, frames: np.ndarray, beam_width: int = 4,
                max_emit: int = MAX_EMIT) -> DecodeResult:
    """Frame-synchronous beam search with prefix merging.

    Within a frame, each round expands every still-emitting hypothesis by
    blank (finishing the frame) and by its best tokens; the pooled
    candidates, together with hypotheses already finished for the frame, are
    pruned to ``beam_width``. Finished hypotheses with equal prefixes are
    merged by log-sum-exp. Width 1 reproduces :func:`greedy_decode`.
    """
    if beam_width < 1:
        raise ConfigError("beam_width must be at least 1")
    if max_emit < 1:
        raise ConfigError("max_emit_per_frame must be at least 1")
    sc = _Scorer([model], [frames])
    T = int(sc.lengths[0])
    blank = sc.blank_col
    beam = [_Hyp((), 0.0, sc.initial_state(1)[0])]
    for t in range(T):
        done: dict[tuple[int, ...], _Hyp] = {}
        active = beam
        for rnd in range(max_emit + 1):
            if not active:
                break
            if rnd == max_emit:
                cands = [("done", a, a.score, None, sc.cfg.blank_id) for a in active]
            else:
                H = np.stack([a.h for a in active])
                lp = sc.logprobs(np.zeros(len(active), dtype=np.int64), np.full(len(active), t), H)
                cands = []
                for i, a in enumerate(active):
                    row = lp[i]
                    cands.append(("done", a, a.score + row[blank], row[blank], sc.cfg.blank_id))
                    order = np.argsort(-row, kind="stable")
                    n = 0
                    for c in order:
                        if c == blank or row[c] <= MASK_VALUE / 2:
                            continue
                        cands.append(("emit", a, a.score + row[c], row[c], int(sc.col_ids[c])))
                        n += 1
                        if n == beam_width:
                            break
            # merge finished candidates into the frame's done set
            pool: list[tuple] = []
            for kind, a, s, lpv, tok in cands:
                if kind == "done":
                    lps = a.lps + ([float(lpv)] if lpv is not None else [])
                    old = done.get(a.prefix)
                    if old is None:
                        done[a.prefix] = _Hyp(a.prefix, float(s), a.h, lps)
                    else:
                        keep = old if old.score >= s else _Hyp(a.prefix, float(s), a.h, lps)
                        done[a.prefix] = _Hyp(a.prefix, float(np.logaddexp(old.score, s)), keep.h, keep.lps)
                else:
                    pool.append((float(s), tok, a, float(lpv)))
            # prune emits and done jointly to beam_width
            ranked = [(_rank_key(h.score, sc.cfg.blank_id), "done", h) for h in done.values()]
            ranked += [(_rank_key(s, tok), "emit", (s, tok, a, lpv)) for s, tok, a, lpv in pool]
            ranked.sort(key=lambda r: r[0])
            ranked = ranked[:beam_width]
            done = {h.prefix: h for _, kind, h in ranked if kind == "done"}
            emitted = [x for _, kind, x in ranked if kind == "emit"]
            if emitted:
                new_h = sc.advance(np.stack([a.h for _, _, a, _ in emitted]), np.array([tok for _, tok, _, _ in emitted]))
                active = [_Hyp(a.prefix + (tok,), s, new_h[i], a.lps + [lpv]) for i, (s, tok, a, lpv) in enumerate(emitted)]
            else:
                active = []
        beam = sorted(done.values(), key=lambda h: _rank_key(h.score, 0))[:beam_width]
    best = beam[0]
    return DecodeResult(list(best.prefix), best.lps, T)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    return kernels.edit_distance(np.asarray(hyp, dtype=np.int64), np.asarray(ref, dtype=np.int64))


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Levenshtein distance over ``max(len(ref), 1)``; uniform edit costs."""
    return edit_distance(hyp, ref) / max(len(ref), 1)


# ---------------------------------------------------------------------------
# evaluation grid
# ---------------------------------------------------------------------------


@dataclass
class System:
    """A trained model plus the policy used to build its decode-time choice.

    ``lid=False`` decodes with the all-zero choice (universal baseline);
    ``use_mask=False`` disables vocabulary masking.
    """

    name: str
    cfg: CmmConfig
    params: CmmParams
    max_hot: int
    lid: bool = True
    use_mask: bool = True


def distractor_choice(lang_id: int, n_languages: int, n_hot: int, seed: int, index: int) -> ChoiceVector:
    """Ground truth plus ``n_hot - 1`` others, seeded by (seed, language, utterance index, n_hot)."""
    rng = np.random.default_rng([seed, lang_id, index, n_hot])
    others = [i for i in range(n_languages) if i != lang_id]
    extra = rng.choice(others, size=n_hot - 1, replace=False) if n_hot > 1 else []
    return make_choice_vector([lang_id, *map(int, extra)], n_languages)


@dataclass
class CellStats:
    edits: int = 0
    ref_len: int = 0
    utterances: int = 0
    oov: int = 0  # emitted tokens outside the merged vocabulary of the choice

    @property
    def ter(self) -> float:
        return self.edits / max(self.ref_len, 1)


@dataclass
class EvalGrid:
    cells: dict[tuple[str, int, int], CellStats]
    flagged: set[tuple[str, int]] = field(default_factory=set)  # (system, n_hot) beyond trained max_hot

    def ter(self, system: str, lang: int, n_hot: int) -> float:
        return self.cells[(system, lang, n_hot)].ter

    def systems(self) -> list[str]:
        return sorted({k[0] for k in self.cells}, key=list(dict.fromkeys(k[0] for k in self.cells)).index)

    def languages(self) -> list[int]:
        return sorted({k[1] for k in self.cells})

    def n_hots(self) -> list[int]:
        return sorted({k[2] for k in self.cells})

    def average(self, system: str, n_hot: int) -> float:
        vals = [self.cells[(system, l, n_hot)].ter for l in self.languages() if (system, l, n_hot) in self.cells]
        return float(np.mean(vals))

    def oov_count(self, system: str, n_hot: int | None = None) -> int:
        return sum(c.oov for (s, _, n), c in self.cells.items() if s == system and (n_hot is None or n == n_hot))

    def to_table(self) -> str:
        langs = self.languages()
        head = ["system", "n_hot"] + [f"L{l}" for l in langs] + ["avg"]
        rows = [head]
        for s in self.systems():
            for n in self.n_hots():
                if (s, langs[0], n) not in self.cells:
                    continue
                flag = "*" if (s, n) in self.flagged else ""
                rows.append([s, f"{n}{flag}"] + [f"{100 * self.ter(s, l, n):.2f}" for l in langs]
                            + [f"{100 * self.average(s, n):.2f}"])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        if self.flagged:
            lines.append("* n_hot exceeds the system's trained max_hot")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = []
        for (s, l, n), c in self.cells.items():
            out.append(json.dumps({"system": s, "language": l, "n_hot": n, "ter": c.ter, "edits": c.edits,
                                   "ref_len": c.ref_len, "utterances": c.utterances, "oov": c.oov,
                                   "beyond_max_hot": (s, n) in self.flagged}))
        for s in self.systems():
            for n in self.n_hots():
                if any(k[0] == s and k[2] == n for k in self.cells):
                    out.append(json.dumps({"system": s, "language": "avg", "n_hot": n, "ter": self.average(s, n)}))
        return "\n".join(out) + "\n"


def decode_set(system: System, utts: Sequence[Utterance], choices: Sequence[ChoiceVector],
               vocab: VocabularyTable | None, batch_size: int = 64, beam_width: int = 1,
               max_emit: int = MAX_EMIT) -> list[DecodeResult]:
    """Decode utterances under per-utterance choices."""
    N = system.cfg.n_languages
    models = []
    for ch in choices:
        dec_choice = ch if system.lid else ChoiceVector.universal(N)
        allowed = merge_vocab(vocab, ch) if (vocab is not None and system.use_mask) else None
        models.append(Decodable(system.cfg, system.params, dec_choice, allowed))
    if beam_width > 1:
        return [beam_decode(m, u.frames, beam_width, max_emit) for m, u in zip(models, utts)]
    out: list[DecodeResult] = []
    for i in range(0, len(utts), batch_size):
        out += greedy_decode_batch(models[i : i + batch_size], [u.frames for u in utts[i : i + batch_size]], max_emit)
    return out


def run_eval_grid(systems: Sequence[System], test_by_language: Sequence[Sequence[Utterance]],
                  vocab: VocabularyTable, n_hots: Sequence[int] = (1, 2, 3), seed: int = 0,
                  beam_width: int = 1) -> EvalGrid:
    """TER per (system, language, n_hot); corpus-level within each cell."""
    N = len(test_by_language)
    cells: dict[tuple[str, int, int], CellStats] = {}
    flagged: set[tuple[str, int]] = set()
    for n_hot in n_hots:
        if not 1 <= n_hot <= N:
            raise ConfigError(f"n_hot {n_hot} outside [1, {N}]")
    for sysm in systems:
        # without LID or mask the decode ignores the choice, so decode each language once
        reuse: dict[int, list[DecodeResult]] = {}
        fixed = not sysm.lid and not sysm.use_mask
        for n_hot in n_hots:
            if sysm.lid and n_hot > sysm.max_hot:
                flagged.add((sysm.name, n_hot))
            for lang, utts in enumerate(test_by_language):
                choices = [distractor_choice(lang, N, n_hot, seed, i) for i in range(len(utts))]
                if fixed and lang in reuse:
                    res = reuse[lang]
                else:
                    res = decode_set(sysm, utts, choices, vocab, beam_width=beam_width)
                    if fixed:
                        reuse[lang] = res
                st = CellStats()
                for u, ch, r in zip(utts, choices, res):
                    st.edits += edit_distance(r.tokens, u.targets)
                    st.ref_len += u.U
                    st.utterances += 1
                    allowed = merge_vocab(vocab, ch)
                    st.oov += sum(1 for k in r.tokens if k not in allowed)
                cells[(sysm.name, lang, n_hot)] = st
    return EvalGrid(cells, flagged)


def relative_reduction(base: float, new: float) -> float:
    """WERR-style relative reduction of ``new`` against ``base``."""
    return (base - new) / base if base > 0 else (0.0 if new == 0 else -math.inf)
