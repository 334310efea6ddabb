"""Per-language vocabularies and decode-time masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.ops import MASK_VALUE
from .model import ChoiceVector


@dataclass(frozen=True)
class VocabularyTable:
    total_size: int
    per_language: tuple[frozenset[int], ...]

    def __post_init__(self):
        for i, v in enumerate(self.per_language):
            if not v:
                raise ValueError(f"vocabulary of language {i} is empty")
            if min(v) < 0 or max(v) >= self.total_size:
                raise ValueError(f"vocabulary of language {i} has ids outside [0, {self.total_size})")

    @property
    def blank_id(self) -> int:
        return self.total_size

    @property
    def n_languages(self) -> int:
        return len(self.per_language)

    @classmethod
    def from_lists(cls, total_size: int, lists) -> "VocabularyTable":
        return cls(int(total_size), tuple(frozenset(int(t) for t in v) for v in lists))

    def language_of(self, token: int) -> list[int]:
        return [i for i, v in enumerate(self.per_language) if token in v]


def merge_vocab(table: VocabularyTable, choice: ChoiceVector) -> frozenset[int]:
    """Union of the selected languages' vocabularies."""
    out: set[int] = set()
    for i in choice.selected:
        out |= table.per_language[i]
    return frozenset(out)


def allowed_mask(allowed, vocab_size_total: int) -> np.ndarray:
    """Boolean keep-mask over vocabulary + blank (blank always kept)."""
    keep = np.zeros(vocab_size_total + 1, dtype=bool)
    keep[list(allowed)] = True
    keep[vocab_size_total] = True
    return keep


def mask_logits(logits: np.ndarray, allowed, blank_id: int) -> np.ndarray:
    """Set logits outside ``allowed`` and blank to the large-negative sentinel."""
    if not allowed:
        raise ValueError("allowed token set must be non-empty")
    logits = np.asarray(logits, dtype=np.float64)
    keep = np.zeros(logits.shape[-1], dtype=bool)
    keep[list(allowed)] = True
    keep[blank_id] = True
    return np.where(keep, logits, MASK_VALUE)
