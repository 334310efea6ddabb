"""Configurable multilingual transducer.

Encoder: input projection of ``[frame; choice bits]``, then post-LN
transformer layers with relative-position attention bias. Layers listed in
``CmmConfig.specific_layers`` add ``sum_i w_i * Linear_i(h_att)`` to their
output. Prediction network: one GRU over the label history. Joint:
``tanh(U h_enc + V h_dec + sum_i w_i Linear_i(h_dec) + b)`` followed by the
output projection onto the vocabulary plus blank (blank is the last index).

All forward code works on packed batches so training, evaluation and the
single-utterance helpers share one code path.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .core import ops
from .core.tensor import DTYPE, Parameter, Tensor, no_grad


class ConfigError(ValueError):
    """Invalid configuration, choice vector or selection."""


# ---------------------------------------------------------------------------
# choice vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChoiceVector:
    """Multi-hot language selection and its combination weights."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigError(f"choice bits must be 0/1, got {self.bits}")

    @classmethod
    def universal(cls, n_languages: int) -> "ChoiceVector":
        """All-zero bits: the 'no user choice' input of universal training."""
        return cls((0,) * n_languages)

    @property
    def n_languages(self) -> int:
        return len(self.bits)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def is_universal(self) -> bool:
        return not any(self.bits)

    @property
    def weights(self) -> np.ndarray:
        n = sum(self.bits)
        w = np.zeros(len(self.bits))
        if n:
            w[list(self.selected)] = 1.0 / n
        return w

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.selected)) + "}"


def make_choice_vector(selected: Iterable[int], n_languages: int) -> ChoiceVector:
    selected = set(int(i) for i in selected)
    if not selected:
        raise ConfigError("choice vector needs at least one selected language")
    bad = [i for i in selected if not 0 <= i < n_languages]
    if bad:
        raise ConfigError(f"language index out of range [0, {n_languages}): {sorted(bad)}")
    return ChoiceVector(tuple(int(i in selected) for i in range(n_languages)))


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CmmConfig:
    n_languages: int = 5
    feat_dim: int = 16
    model_dim: int = 64
    ffn_dim: int = 256
    n_layers: int = 4
    n_heads: int = 4
    vocab_size_total: int = 72
    specific_layers: tuple[int, ...] | None = None  # None -> (0, n_layers - 1)
    joint_dim: int = 48
    causal: bool = False
    max_rel_pos: int = 16
    embed_choice: bool = True
    pred_specific: bool = True
    specific_bias: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.specific_layers is None:
            object.__setattr__(self, "specific_layers", tuple(sorted({0, self.n_layers - 1})))
        else:
            object.__setattr__(self, "specific_layers", tuple(sorted(set(self.specific_layers))))
        if self.n_languages < 1 or self.n_layers < 1 or self.feat_dim < 1:
            raise ConfigError("n_languages, n_layers and feat_dim must be positive")
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if any(not 0 <= l < self.n_layers for l in self.specific_layers):
            raise ConfigError(f"specific_layers {self.specific_layers} outside [0, {self.n_layers})")
        if self.vocab_size_total < 1:
            raise ConfigError("vocab_size_total must be positive")

    @property
    def blank_id(self) -> int:
        return self.vocab_size_total

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CmmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("specific_layers") is not None:
            d["specific_layers"] = tuple(d["specific_layers"])
        return cls(**d)

    def replace(self, **kw) -> "CmmConfig":
        return replace(self, **kw)


SPECIFIC_SUFFIXES = (".specific", ".specific_b")


def is_specific(name: str) -> bool:
    return name.endswith(SPECIFIC_SUFFIXES)


def is_choice_columns(name: str) -> bool:
    return name == "input.w_choice"


class CmmParams:
    """Named parameter tensors plus the language held by each specific slot.

    Specific tensors stack one map per slot along axis 0; ``languages[s]`` is
    the language of slot s. A full model has ``languages == (0, ..., N-1)``;
    an extracted model keeps only the selected ones.
    """

    def __init__(self, tensors: dict[str, Parameter], languages: Sequence[int]):
        self.tensors = dict(tensors)
        self.languages = tuple(int(i) for i in languages)

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def specific_names(self) -> list[str]:
        return [n for n in self.tensors if is_specific(n)]

    def universal_names(self) -> list[str]:
        return [n for n in self.tensors if not is_specific(n)]

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def copy(self) -> "CmmParams":
        return CmmParams({n: Parameter(p.data.copy(), name=n) for n, p in self.tensors.items()}, self.languages)

    def slot_weights(self, choice: ChoiceVector) -> np.ndarray:
        return choice.weights[list(self.languages)] if self.languages else np.zeros(0)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: CmmConfig, seed: int = 0) -> CmmParams:
    """Scaled-uniform universal weights; zero specific maps and choice columns."""
    rng = np.random.default_rng(seed)
    d, f, N, J = cfg.model_dim, cfg.ffn_dim, cfg.n_languages, cfg.joint_dim
    V1 = cfg.vocab_size_total + 1
    t: dict[str, np.ndarray] = {}
    fan_in = cfg.feat_dim + N
    t["input.w_feat"] = _uniform(rng, fan_in, (cfg.feat_dim, d))
    t["input.w_choice"] = np.zeros((N, d))
    t["input.b"] = np.zeros(d)
    for l in range(cfg.n_layers):
        p = f"enc.{l}."
        for m in ("q", "k", "v", "o"):
            t[p + "w" + m] = _uniform(rng, d, (d, d))
            t[p + "b" + m] = np.zeros(d)
        t[p + "pos"] = np.zeros((cfg.n_heads, 2 * cfg.max_rel_pos + 1))
        t[p + "ln1.g"] = np.ones(d)
        t[p + "ln1.b"] = np.zeros(d)
        t[p + "ffn.w1"] = _uniform(rng, d, (d, f))
        t[p + "ffn.b1"] = np.zeros(f)
        t[p + "ffn.w2"] = _uniform(rng, f, (f, d))
        t[p + "ffn.b2"] = np.zeros(d)
        t[p + "ln2.g"] = np.ones(d)
        t[p + "ln2.b"] = np.zeros(d)
        if l in cfg.specific_layers:
            t[p + "specific"] = np.zeros((N, d, d))
            if cfg.specific_bias:
                t[p + "specific_b"] = np.zeros((N, d))
    t["pred.embed"] = rng.uniform(-1.0, 1.0, size=(V1, d))
    t["pred.wx"] = _uniform(rng, d, (d, 3 * d))
    t["pred.bx"] = np.zeros(3 * d)
    t["pred.wh"] = _uniform(rng, d, (d, 3 * d))
    t["pred.bh"] = np.zeros(3 * d)
    if cfg.pred_specific:
        t["pred.specific"] = np.zeros((N, d, J))
        if cfg.specific_bias:
            t["pred.specific_b"] = np.zeros((N, J))
    t["joint.U"] = _uniform(rng, d, (d, J))
    t["joint.V"] = _uniform(rng, d, (d, J))
    t["joint.b"] = np.zeros(J)
    t["out.w"] = _uniform(rng, J, (J, V1))
    t["out.b"] = np.zeros(V1)
    return CmmParams({n: Parameter(a, name=n) for n, a in t.items()}, range(N))


def conform_params(cfg: CmmConfig, params: CmmParams, seed: int = 0) -> CmmParams:
    """Copy of ``params`` in exactly the tensor layout of ``cfg``.

    Tensors the config does not use are dropped (an ablated model fine-tuned
    from a full universal checkpoint); tensors it needs but ``params`` lacks
    take their fresh initial values.
    """
    fresh = init_params(cfg, seed)
    if tuple(params.languages) != tuple(fresh.languages):
        raise ConfigError(f"parameters hold specific slots {params.languages}, config needs {fresh.languages}")
    out = {}
    for n, p in fresh.items():
        if n in params:
            if params[n].shape != p.shape:
                raise ConfigError(f"parameter {n}: shape {params[n].shape} does not fit config shape {p.shape}")
            p = params[n]
        out[n] = Parameter(p.data.copy(), name=n)
    return CmmParams(out, fresh.languages)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    frames: np.ndarray  # (T, feat_dim)
    targets: np.ndarray  # (U,) token ids
    lang_id: int
    alt_lang: int = -1  # secondary language of a code-switched utterance

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, feat_dim), got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def U(self) -> int:
        return len(self.targets)

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.lang_id == other.lang_id
            and self.alt_lang == other.alt_lang
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.targets, other.targets)
        )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def embed_input(frames: np.ndarray, choice: ChoiceVector) -> np.ndarray:
    """Concatenate the choice bits onto every frame."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"need a non-empty (T, feat_dim) frame matrix, got {frames.shape}")
    bits = np.asarray(choice.bits, dtype=np.float64)
    return np.concatenate([frames, np.broadcast_to(bits, (frames.shape[0], bits.size))], axis=1)


@dataclass
class EncoderBatch:
    """Encoder input for B utterances.

    Row-wise layers run on packed rows (utterance after utterance, no padding);
    attention scatters them into a padded (B, Tm) layout via ``valid``.
    """

    lengths: np.ndarray
    Tm: int
    valid: np.ndarray  # packed row k -> padded row b*Tm + t
    x: np.ndarray  # (rows, feat_dim + N)
    row_weights: np.ndarray  # (rows, slots)
    attn_mask: np.ndarray  # (B*H, Tm, Tm) bool
    pos_index: np.ndarray  # (B*H, Tm, Tm) into flattened (H, 2c+1) table

    @property
    def B(self) -> int:
        return len(self.lengths)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)


def _check_choice(cfg: CmmConfig, choice: ChoiceVector) -> None:
    if choice.n_languages != cfg.n_languages:
        raise ConfigError(f"choice has {choice.n_languages} languages, model has {cfg.n_languages}")


def prepare_encoder(cfg: CmmConfig, params: CmmParams, frames_list: Sequence[np.ndarray],
                    choices: Sequence[ChoiceVector]) -> EncoderBatch:
    B = len(frames_list)
    lengths = np.array([len(f) for f in frames_list], dtype=np.int64)
    if B == 0 or lengths.min() < 1:
        raise ValueError("every utterance needs at least one frame")
    Tm = int(lengths.max())
    N, F, H, c = cfg.n_languages, cfg.feat_dim, cfg.n_heads, cfg.max_rel_pos
    xs, ws = [], []
    for fr, ch in zip(frames_list, choices):
        _check_choice(cfg, ch)
        fr = np.asarray(fr, dtype=np.float64)
        if fr.ndim != 2 or fr.shape[1] != F:
            raise ValueError(f"frames must be (T, {F}), got {fr.shape}")
        bits = ch if cfg.embed_choice else ChoiceVector.universal(N)
        xs.append(embed_input(fr, bits))
        ws.append(np.broadcast_to(params.slot_weights(ch), (len(fr), len(params.languages))))
    valid = np.concatenate([b * Tm + np.arange(n) for b, n in enumerate(lengths)])
    keys = np.arange(Tm)[None, :] < lengths[:, None]  # (B, Tm)
    mask = np.broadcast_to(keys[:, None, :], (B, Tm, Tm))
    if cfg.causal:
        mask = mask & np.tril(np.ones((Tm, Tm), dtype=bool))[None]
    mask = np.repeat(mask, H, axis=0)
    rel = np.clip(np.arange(Tm)[None, :] - np.arange(Tm)[:, None], -c, c) + c
    pos = (np.arange(H)[:, None, None] * (2 * c + 1) + rel[None]).astype(np.intp)
    pos = np.tile(pos, (B, 1, 1))
    return EncoderBatch(lengths, Tm, valid, np.concatenate(xs), np.concatenate(ws), mask, pos)


def _proj(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.add_bias(ops.matmul(x, w), b)


def _specific(cfg: CmmConfig, params: CmmParams, prefix: str, h: Tensor, weights: np.ndarray) -> Tensor:
    out = ops.mix_linear(h, params[prefix + "specific"], weights)
    if cfg.specific_bias:
        out = ops.add(out, ops.matmul(Tensor(weights), params[prefix + "specific_b"]))
    return out


def attention(cfg: CmmConfig, params: CmmParams, l: int, v: Tensor, eb: EncoderBatch) -> Tensor:
    p = f"enc.{l}."
    B, Tm, H, dh = eb.B, eb.Tm, cfg.n_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        t = ops.reshape(ops.scatter_rows(t, eb.valid, B * Tm), (B, Tm, H, dh))
        return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (B * H, Tm, dh))

    q = heads(_proj(v, params[p + "wq"], params[p + "bq"]))
    k = heads(_proj(v, params[p + "wk"], params[p + "bk"]))
    val = heads(_proj(v, params[p + "wv"], params[p + "bv"]))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    table = params[p + "pos"]
    bias = ops.gather(ops.reshape(table, (table.size,)), eb.pos_index)
    att = ops.softmax(ops.add(scores, bias), mask=eb.attn_mask)
    ctx = ops.matmul(att, val)
    ctx = ops.reshape(ops.transpose(ops.reshape(ctx, (B, H, Tm, dh)), (0, 2, 1, 3)), (B * Tm, H * dh))
    ctx = ops.gather(ctx, eb.valid)
    return _proj(ctx, params[p + "wo"], params[p + "bo"])


def encoder_layer_forward(cfg: CmmConfig, params: CmmParams, l: int, v: Tensor, eb: EncoderBatch) -> Tensor:
    if not 0 <= l < cfg.n_layers:
        raise ValueError(f"layer index {l} outside [0, {cfg.n_layers})")
    p = f"enc.{l}."
    h_att = ops.layer_norm(ops.add(attention(cfg, params, l, v, eb), v), params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
    hidden = ops.relu(_proj(h_att, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    ffn = _proj(hidden, params[p + "ffn.w2"], params[p + "ffn.b2"])
    h_uni = ops.layer_norm(ops.add(ffn, h_att), params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
    if l not in cfg.specific_layers:
        return h_uni
    return ops.add(h_uni, _specific(cfg, params, p, h_att, eb.row_weights))


def encode_batch(cfg: CmmConfig, params: CmmParams, eb: EncoderBatch) -> Tensor:
    """Encoder output, packed rows (sum of lengths, model_dim)."""
    F = cfg.feat_dim
    v = ops.matmul(Tensor(eb.x[:, :F]), params["input.w_feat"])
    v = ops.add(v, ops.matmul(Tensor(eb.x[:, F:]), params["input.w_choice"]))
    v = ops.add_bias(v, params["input.b"])
    for l in range(cfg.n_layers):
        v = encoder_layer_forward(cfg, params, l, v, eb)
    return v


def encode(cfg: CmmConfig, params: CmmParams, frames: np.ndarray, choice: ChoiceVector) -> np.ndarray:
    """h_enc (T, model_dim) for one utterance."""
    with no_grad():
        eb = prepare_encoder(cfg, params, [frames], [choice])
        return encode_batch(cfg, params, eb).data.copy()


def _gru_step(params: CmmParams, d: int, xg: Tensor, h: Tensor) -> Tensor:
    hg = _proj(h, params["pred.wh"], params["pred.bh"])
    cols = lambda t, i: ops.slice_(t, (slice(None), slice(i * d, (i + 1) * d)))
    r = ops.sigmoid(ops.add(cols(xg, 0), cols(hg, 0)))
    z = ops.sigmoid(ops.add(cols(xg, 1), cols(hg, 1)))
    n = ops.tanh(ops.add(cols(xg, 2), ops.mul(r, cols(hg, 2))))
    # h' = n + z * (h - n)
    return ops.add(n, ops.mul(z, ops.sub(h, n)))


def _check_tokens(cfg: CmmConfig, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size_total):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size_total})")


def predict_batch(cfg: CmmConfig, params: CmmParams, target_lists: Sequence[np.ndarray]) -> tuple[Tensor, int]:
    """Prediction-network outputs, rows u*B + b for u in [0, Umax]."""
    B = len(target_lists)
    Um = max(len(y) for y in target_lists)
    d = cfg.model_dim
    sos = cfg.blank_id
    idx = np.full((Um + 1, B), sos, dtype=np.intp)
    for b, y in enumerate(target_lists):
        y = np.asarray(y, dtype=np.int64)
        _check_tokens(cfg, y)
        idx[1 : len(y) + 1, b] = y
    xg = _proj(ops.gather(params["pred.embed"], idx.reshape(-1)), params["pred.wx"], params["pred.bx"])
    h = Tensor(np.zeros((B, d)))
    outs = []
    for u in range(Um + 1):
        h = _gru_step(params, d, ops.slice_(xg, (slice(u * B, (u + 1) * B),)), h)
        outs.append(h)
    return ops.concat(outs, axis=0), Um


def predict(cfg: CmmConfig, params: CmmParams, targets) -> np.ndarray:
    """h_dec (U+1, model_dim) for one label sequence."""
    with no_grad():
        hdec, _ = predict_batch(cfg, params, [np.asarray(targets, dtype=np.int64)])
        return hdec.data.copy()


def joint_inputs(cfg: CmmConfig, params: CmmParams, henc: Tensor, hdec: Tensor,
                 dec_weights: np.ndarray) -> tuple[Tensor, Tensor]:
    """Encoder and decoder halves of the joint pre-activation."""
    encJ = ops.matmul(henc, params["joint.U"])
    decJ = ops.matmul(hdec, params["joint.V"])
    if cfg.pred_specific:
        decJ = ops.add(decJ, _specific(cfg, params, "pred.", hdec, dec_weights))
    return encJ, decJ


def joint_output(params: CmmParams, pre: Tensor) -> Tensor:
    z = ops.tanh(ops.add_bias(pre, params["joint.b"]))
    return _proj(z, params["out.w"], params["out.b"])


def joint(cfg: CmmConfig, params: CmmParams, h_enc: np.ndarray, h_dec: np.ndarray,
          choice: ChoiceVector) -> np.ndarray:
    """Logits over the vocabulary plus blank for one (h_enc, h_dec) pair."""
    _check_choice(cfg, choice)
    with no_grad():
        w = params.slot_weights(choice)[None, :]
        encJ, decJ = joint_inputs(cfg, params, Tensor(np.atleast_2d(h_enc)), Tensor(np.atleast_2d(h_dec)), w)
        return joint_output(params, ops.add(encJ, decJ)).data[0].copy()


@dataclass
class BatchForward:
    log_probs: Tensor  # (rows, V+1), t-major per utterance
    Ts: np.ndarray
    Us: np.ndarray
    row_off: np.ndarray


def forward_batch(cfg: CmmConfig, params: CmmParams, frames_list: Sequence[np.ndarray],
                  target_lists: Sequence[np.ndarray], choices: Sequence[ChoiceVector]) -> BatchForward:
    eb = prepare_encoder(cfg, params, frames_list, choices)
    henc = encode_batch(cfg, params, eb)
    hdec, _ = predict_batch(cfg, params, target_lists)
    B = eb.B
    S = len(params.languages)
    dec_w = np.zeros((hdec.shape[0], S))
    slot_w = np.stack([params.slot_weights(c) for c in choices]) if S else np.zeros((B, 0))
    dec_w[:] = np.tile(slot_w, (hdec.shape[0] // B, 1))
    encJ, decJ = joint_inputs(cfg, params, henc, hdec, dec_w)
    ia, ib = [], []
    Us = np.array([len(y) for y in target_lists], dtype=np.int64)
    for b in range(B):
        T, U = int(eb.lengths[b]), int(Us[b])
        tt, uu = np.meshgrid(np.arange(T), np.arange(U + 1), indexing="ij")
        ia.append((eb.offsets[b] + tt).ravel())
        ib.append((uu * B + b).ravel())
    pre = ops.add(ops.gather(encJ, np.concatenate(ia)), ops.gather(decJ, np.concatenate(ib)))
    logp = ops.log_softmax(joint_output(params, pre))
    sizes = eb.lengths * (Us + 1)
    row_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return BatchForward(logp, eb.lengths.copy(), Us, row_off)


def forward_all_logits(cfg: CmmConfig, params: CmmParams, utt: Utterance, choice: ChoiceVector) -> np.ndarray:
    """Log-probabilities (T, U+1, V+1) at every lattice node."""
    with no_grad():
        fb = forward_batch(cfg, params, [utt.frames], [utt.targets], [choice])
        return fb.log_probs.data.reshape(utt.T, utt.U + 1, -1).copy()
