"""Training: choice-vector simulation, data sampling, Adam with warmup and clipping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .core import ops
from .core.tensor import NumericError, Tape, no_grad
from .model import (ChoiceVector, CmmConfig, CmmParams, ConfigError, Utterance, conform_params, init_params,
                    is_choice_columns, is_specific)
from .transducer import batch_loss

log = logging.getLogger(__name__)

STRATEGIES = ("scratch", "finetune", "universal")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "scratch"
    max_hot: int = 3
    batch_size: int = 32
    steps: int = 1000
    lr: float = 3e-3
    warmup_steps: int | None = None  # None -> 10% of steps
    clip_norm: float = 1.0
    sampling_temperature: float = 1.0
    freeze_universal: bool = False
    restart_warmup: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 0  # 0 disables periodic evaluation

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", max(1, self.steps // 10))
        if self.max_hot < 1:
            raise ConfigError("max_hot must be at least 1")
        if self.warmup_steps > max(self.steps, 1):
            raise ConfigError(f"warmup_steps {self.warmup_steps} exceeds steps {self.steps}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps non-negative")

    def check(self, n_languages: int) -> None:
        if not 1 <= self.max_hot <= n_languages:
            raise ConfigError(f"max_hot {self.max_hot} outside [1, {n_languages}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def simulate_choice(lang_id: int, n_languages: int, max_hot: int, rng: np.random.Generator) -> ChoiceVector:
    """Ground-truth language plus ``k-1`` random others, ``k`` uniform in [1, max_hot]."""
    if not 0 <= lang_id < n_languages:
        raise ConfigError(f"lang_id {lang_id} outside [0, {n_languages})")
    k = int(rng.integers(1, max_hot + 1))
    others = [i for i in range(n_languages) if i != lang_id]
    extra = rng.choice(others, size=k - 1, replace=False) if k > 1 else []
    bits = [0] * n_languages
    bits[lang_id] = 1
    for i in extra:
        bits[int(i)] = 1
    return ChoiceVector(tuple(bits))


def language_probs(counts: Sequence[int], temperature: float) -> np.ndarray:
    """P(language) proportional to count**temperature."""
    c = np.asarray(counts, dtype=np.float64)
    w = np.where(c > 0, c ** temperature, 0.0)
    return w / w.sum()


def sample_batch(by_language: Sequence[Sequence[Utterance]], temperature: float, rng: np.random.Generator,
                 batch_size: int) -> list[Utterance]:
    p = language_probs([len(x) for x in by_language], temperature)
    langs = rng.choice(len(p), size=batch_size, p=p)
    return [by_language[l][int(rng.integers(len(by_language[l])))] for l in langs]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then inverse-sqrt decay (step is 0-based)."""
    s = step + 1
    if s <= warmup:
        return peak * s / warmup
    return peak * math.sqrt(warmup / s)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    params: CmmParams
    step: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng_state: dict
    strategy: str = "scratch"


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)  # {"step": s, "ter": {"lang/n_hot": rate}}
    combo_counts: dict[str, int] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def trainable_names(params: CmmParams, tc: TrainConfig) -> list[str]:
    if tc.strategy == "universal":
        return [n for n in params.names() if not is_specific(n) and not is_choice_columns(n)]
    if tc.strategy == "finetune" and tc.freeze_universal:
        return [n for n in params.names() if is_specific(n) or is_choice_columns(n)]
    return params.names()


class Trainer:
    def __init__(self, tc: TrainConfig, mc: CmmConfig, train_by_language: Sequence[Sequence[Utterance]],
                 initial: CmmParams | None = None, state: TrainState | None = None):
        tc.check(mc.n_languages)
        self.tc, self.mc = tc, mc
        self.data = train_by_language
        if len(train_by_language) != mc.n_languages:
            raise ConfigError(f"corpus has {len(train_by_language)} languages, model expects {mc.n_languages}")
        if state is not None:
            self.state = state
        else:
            if tc.strategy == "finetune":
                if initial is None:
                    raise ConfigError("finetune strategy needs initial parameters from universal training")
                params = conform_params(mc, initial, tc.seed)
            elif initial is not None:
                params = conform_params(mc, initial, tc.seed)
            else:
                params = init_params(mc, tc.seed)
            self.state = TrainState(params, 0, {}, {}, np.random.default_rng(tc.seed).bit_generator.state,
                                    tc.strategy)
        self.names = trainable_names(self.state.params, tc)
        for n in self.names:
            self.state.adam_m.setdefault(n, np.zeros_like(self.state.params[n].data))
            self.state.adam_v.setdefault(n, np.zeros_like(self.state.params[n].data))
        self.log = TrainLog()

    @property
    def params(self) -> CmmParams:
        return self.state.params

    def _rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.state.rng_state
        return rng

    def choices_for(self, batch: list[Utterance], rng: np.random.Generator) -> list[ChoiceVector]:
        N = self.mc.n_languages
        if self.tc.strategy == "universal":
            return [ChoiceVector.universal(N)] * len(batch)
        return [simulate_choice(u.lang_id, N, self.tc.max_hot, rng) for u in batch]

    def step(self) -> dict:
        tc, st = self.tc, self.state
        rng = self._rng()
        batch = sample_batch(self.data, tc.sampling_temperature, rng, tc.batch_size)
        choices = self.choices_for(batch, rng)
        st.rng_state = rng.bit_generator.state
        for c in choices:
            key = str(c)
            self.log.combo_counts[key] = self.log.combo_counts.get(key, 0) + 1

        with Tape() as tape:
            per_utt = batch_loss(self.mc, st.params, batch, choices)
            loss = ops.scale(ops.total(per_utt), 1.0 / len(batch))
        total = float(per_utt.data.sum())
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss at step {st.step}")
        raw = tape.backward(loss)
        grads = {n: raw.get(st.params[n], None) for n in self.names}
        grads = {n: (g if g is not None else np.zeros_like(st.params[n].data)) for n, g in grads.items()}
        grads, norm = clip_by_global_norm(grads, tc.clip_norm)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {st.step}")

        lr = learning_rate(st.step, tc.lr, tc.warmup_steps)
        t = st.step + 1
        c1 = 1.0 - tc.beta1 ** t
        c2 = 1.0 - tc.beta2 ** t
        for n, g in grads.items():
            m = st.adam_m[n]
            v = st.adam_v[n]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            p = st.params[n].data
            p -= lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
        rec = {"step": st.step, "loss": total / len(batch), "loss_sum": total, "lr": lr, "grad_norm": norm}
        st.step += 1
        self.log.records.append(rec)
        return rec

    def run(self, until: int | None = None, log_every: int = 100, on_eval=None) -> TrainLog:
        """Train up to step ``until``; ``on_eval(trainer)`` returns TER cells every eval_interval steps."""
        until = self.tc.steps if until is None else until
        while self.state.step < until:
            rec = self.step()
            if log_every and rec["step"] % log_every == 0:
                log.info("step %d loss %.4f lr %.2e |g| %.3f", rec["step"], rec["loss"], rec["lr"], rec["grad_norm"])
            k = self.tc.eval_interval
            if on_eval is not None and k and self.state.step % k == 0:
                self.log.evals.append({"step": self.state.step, "ter": on_eval(self)})
        return self.log


def train(tc: TrainConfig, mc: CmmConfig, train_by_language, initial: CmmParams | None = None):
    """Run ``tc.steps`` steps; returns (params, log)."""
    tr = Trainer(tc, mc, train_by_language, initial)
    tr.run()
    return tr.params, tr.log


def train_universal(tc: TrainConfig, mc: CmmConfig, train_by_language):
    """Universal-module training with all-zero choice bits; specific maps stay zero."""
    tc = TrainConfig.from_dict({**tc.to_dict(), "strategy": "universal"})
    return train(tc, mc, train_by_language)


def eval_loss(mc: CmmConfig, params: CmmParams, utts: Sequence[Utterance], choices: Sequence[ChoiceVector],
              batch_size: int = 64) -> float:
    """Mean per-utterance NLL without recording gradients."""
    total = 0.0
    with no_grad():
        for i in range(0, len(utts), batch_size):
            total += float(batch_loss(mc, params, utts[i : i + batch_size], choices[i : i + batch_size]).data.sum())
    return total / max(len(utts), 1)


# ---------------------------------------------------------------------------
# checkpoint hand-off
# ---------------------------------------------------------------------------


def to_checkpoint(trainer: Trainer, vocab, extra_meta: dict | None = None):
    """Checkpoint carrying the parameters plus everything needed to resume."""
    from .deploy import Checkpoint

    st = trainer.state
    meta = {"step": st.step, "seed": trainer.tc.seed, "strategy": trainer.tc.strategy,
            "max_hot": trainer.tc.max_hot, "train": trainer.tc.to_dict(), "rng_state": st.rng_state}
    meta.update(extra_meta or {})
    return Checkpoint(trainer.mc, st.params, vocab, meta, dict(st.adam_m), dict(st.adam_v))


def state_from_checkpoint(ckpt) -> TrainState:
    m = ckpt.meta
    if "rng_state" not in m or ckpt.adam_m is None:
        raise ConfigError("checkpoint has no training state to resume from")
    return TrainState(ckpt.params, int(m["step"]), dict(ckpt.adam_m), dict(ckpt.adam_v), m["rng_state"],
                      m.get("strategy", "scratch"))
