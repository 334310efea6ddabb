"""Transducer negative log-likelihood over the (T, U+1) alignment lattice.

``log_probs[t, u]`` is the normalised output distribution at lattice node
(t, u); its last entry is the blank. A path from (0, 0) either takes blank
(t -> t+1) or emits ``targets[u]`` (u -> u+1), and must finish with the
blank taken at (T-1, U)::

    u=U   .  .  .  .  -> end (blank at T-1)
          |  |  |  |
    u=1   .  .  .  .
          |  |  |  |      vertical: emit targets[u]
    u=0   .--.--.--.      horizontal: blank, consume frame
         t=0      T-1
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core.tensor import DTYPE, Tensor, make


@dataclass
class LossLattice:
    alpha: np.ndarray  # (T, U+1)
    beta: np.ndarray  # (T, U+1)
    loss: float

    @property
    def log_likelihood(self) -> float:
        return -self.loss

    def diagonal_totals(self) -> np.ndarray:
        """logsumexp of alpha+beta along each anti-diagonal t+u = n; all equal log P(y|x)."""
        T, U1 = self.alpha.shape
        s = self.alpha + self.beta
        out = np.empty(T + U1 - 1)
        for n in range(T + U1 - 1):
            t = np.arange(max(0, n - U1 + 1), min(T - 1, n) + 1)
            out[n] = np.logaddexp.reduce(s[t, n - t])
        return out


class OracleError(ValueError):
    """The brute-force oracle was asked for an instance it will not enumerate."""


def _split(log_probs: np.ndarray, targets) -> tuple[np.ndarray, np.ndarray]:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.ndim != 3:
        raise ValueError(f"log_probs must be (T, U+1, V+1), got {log_probs.shape}")
    T, U1, _ = log_probs.shape
    if T < 1:
        raise ValueError("need at least one frame")
    if U1 != len(targets) + 1:
        raise ValueError(f"log_probs has {U1} label positions for {len(targets)} targets")
    blank = log_probs[:, :, -1]
    emit = log_probs[:, np.arange(len(targets)), targets] if len(targets) else np.zeros((T, 0))
    return blank, emit


def transducer_nll(log_probs: np.ndarray, targets) -> tuple[float, LossLattice]:
    """-log P(targets | frames) by forward/backward recursion."""
    blank, emit = _split(log_probs, targets)
    alpha, beta, ll = kernels.lattice(blank, emit)
    return -ll, LossLattice(alpha, beta, -ll)


def brute_force_nll(log_probs: np.ndarray, targets, max_paths: int = 10**6) -> float:
    """Same quantity by enumerating every monotone path explicitly."""
    blank, emit = _split(log_probs, targets)
    T, U1 = blank.shape
    U = U1 - 1
    n_paths = math.comb(T - 1 + U, U)
    if n_paths > max_paths:
        raise OracleError(f"{n_paths} paths exceeds the enumeration limit {max_paths}")
    scores = []
    for emit_steps in itertools.combinations(range(T - 1 + U), U):
        emit_steps = set(emit_steps)
        t = u = 0
        s = 0.0
        for step in range(T - 1 + U):
            if step in emit_steps:
                s += emit[t, u]
                u += 1
            else:
                s += blank[t, u]
                t += 1
        s += blank[T - 1, U]
        scores.append(s)
    return -float(np.logaddexp.reduce(np.array(scores)))


@dataclass(frozen=True)
class LatticeLayout:
    """Packing of a batch of lattices into one flat, t-major row array."""

    Ts: np.ndarray
    Us: np.ndarray
    row_off: np.ndarray
    targets: np.ndarray
    tgt_off: np.ndarray

    @classmethod
    def build(cls, Ts, target_lists) -> "LatticeLayout":
        Ts = np.asarray(Ts, dtype=np.int64)
        Us = np.array([len(y) for y in target_lists], dtype=np.int64)
        sizes = Ts * (Us + 1)
        row_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        tgt_off = np.concatenate([[0], np.cumsum(Us)[:-1]]).astype(np.int64)
        flat = np.concatenate([np.asarray(y, dtype=np.int64) for y in target_lists]) if Us.sum() else np.zeros(0, np.int64)
        return cls(Ts, Us, row_off, flat, tgt_off)

    @property
    def n_rows(self) -> int:
        return int((self.Ts * (self.Us + 1)).sum())


def transducer_loss(log_probs: Tensor, layout: LatticeLayout, blank_id: int) -> Tensor:
    """Differentiable per-utterance NLL vector for flat packed log-probabilities."""
    losses, grad = kernels.transducer_batch(
        log_probs.data, layout.row_off, layout.Ts, layout.Us, layout.targets, layout.tgt_off, blank_id
    )

    def backward(g):
        # rows of utterance b scale by g[b]
        per_row = np.repeat(g, layout.Ts * (layout.Us + 1))
        return ((grad * per_row[:, None]).astype(DTYPE),)

    return make(losses.astype(DTYPE), (log_probs,), backward)


def batch_loss(cfg, params, utts, choices) -> Tensor:
    """Per-utterance transducer NLL vector for a batch (differentiable)."""
    from .model import forward_batch

    fb = forward_batch(cfg, params, [u.frames for u in utts], [u.targets for u in utts], choices)
    layout = LatticeLayout.build(fb.Ts, [u.targets for u in utts])
    return transducer_loss(fb.log_probs, layout, cfg.blank_id)


class TrainingContractError(ValueError):
    """A training choice vector omits the utterance's ground-truth language."""


def per_utterance_grad(cfg, params, utt, choice):
    """Loss and gradients w.r.t. every parameter for a single utterance."""
    from .core.ops import total
    from .core.tensor import Tape

    if not choice.is_universal and not choice.bits[utt.lang_id]:
        raise TrainingContractError(f"choice {choice} does not contain ground-truth language {utt.lang_id}")
    with Tape() as tape:
        loss = total(batch_loss(cfg, params, [utt], [choice]))
    grads = tape.backward(loss)
    return loss.item(), {n: grads.get(p, np.zeros_like(p.data)) for n, p in params.items()}
