"""Experiment recipes: the comparison systems, ablation variants and a result cache."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .decode import System
from .deploy import load_checkpoint, save_checkpoint
from .model import CmmConfig, CmmParams, ConfigError
from .trainer import TrainConfig, Trainer, to_checkpoint

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("no-specific-embedding", "no-specific-layer", "no-specific-vocab", "no-encoder-sl",
                  "no-prediction-sl")


def ablation_variant(mc: CmmConfig, flags: Sequence[str]) -> tuple[CmmConfig, bool]:
    """Model config and decode-mask switch for an ablation.

    ``"none"`` names the baseline and cannot be combined with real flags.
    no-specific-layer implies both no-encoder-sl and no-prediction-sl, so
    naming them together is allowed and redundant.
    """
    flags = list(flags)
    bad = [f for f in flags if f not in ABLATION_FLAGS and f != "none"]
    if bad:
        raise ConfigError(f"unknown ablation flag(s) {bad}; choose from {', '.join(ABLATION_FLAGS)}")
    if len(set(flags)) != len(flags):
        raise ConfigError(f"repeated ablation flag in {flags}")
    if "none" in flags and len(flags) > 1:
        raise ConfigError("'none' contradicts every other ablation flag")
    kw: dict = {}
    if "no-specific-embedding" in flags:
        kw["embed_choice"] = False
    if "no-specific-layer" in flags or "no-encoder-sl" in flags:
        kw["specific_layers"] = ()
    if "no-specific-layer" in flags or "no-prediction-sl" in flags:
        kw["pred_specific"] = False
    return (mc.replace(**kw) if kw else mc), "no-specific-vocab" not in flags


@dataclass(frozen=True)
class Recipe:
    """One trained system: how to build it and how to decode with it."""

    name: str
    strategy: str = "scratch"
    max_hot: int = 3
    steps: int = 1000
    model: dict = field(default_factory=dict)  # CmmConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides (lr, batch_size, ...)
    init: str | None = None  # recipe name providing initial parameters
    lid: bool = True
    use_mask: bool = True


class Lab:
    """Trains recipes once per seed, optionally caching checkpoints on disk."""

    def __init__(self, base_model: CmmConfig, train_by_language, vocab, corpus_id: str,
                 base_train: TrainConfig | None = None, cache_dir: str | Path | None = None):
        self.base_model = base_model
        self.train = train_by_language
        self.vocab = vocab
        self.corpus_id = corpus_id
        self.base_train = base_train or TrainConfig()
        self.cache = Path(cache_dir) if cache_dir else None
        self.results: dict[tuple[str, int], CmmParams] = {}
        self.recipes: dict[str, Recipe] = {}
        self.seconds: dict[tuple[str, int], float] = {}

    def configs(self, rec: Recipe, seed: int) -> tuple[CmmConfig, TrainConfig]:
        mc = self.base_model.replace(**rec.model) if rec.model else self.base_model
        tc = TrainConfig.from_dict({**self.base_train.to_dict(), "warmup_steps": None, **rec.train,
                                    "strategy": rec.strategy, "max_hot": rec.max_hot, "steps": rec.steps,
                                    "seed": seed})
        return mc, tc

    def key(self, rec: Recipe, seed: int) -> str:
        """Cache key covering the recipe, its configs and its whole init chain."""
        mc, tc = self.configs(rec, seed)
        parent = self.key(self.recipes[rec.init], seed) if rec.init else None
        blob = json.dumps([rec.name, parent, mc.to_dict(), tc.to_dict(), self.corpus_id, seed], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def get(self, rec: Recipe, seed: int) -> CmmParams:
        self.recipes[rec.name] = rec
        if (rec.name, seed) in self.results:
            return self.results[(rec.name, seed)]
        mc, tc = self.configs(rec, seed)
        path = self.cache / f"{rec.name}-{seed}-{self.key(rec, seed)}.ckpt" if self.cache else None
        if path is not None and path.exists():
            params = load_checkpoint(path).params
        else:
            init = self.get(self.recipes[rec.init], seed) if rec.init else None
            t0 = time.perf_counter()
            tr = Trainer(tc, mc, self.train, init)
            tr.run(log_every=0)
            self.seconds[(rec.name, seed)] = time.perf_counter() - t0
            log.info("trained %s seed %d in %.0fs", rec.name, seed, self.seconds[(rec.name, seed)])
            params = tr.params
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, to_checkpoint(tr, self.vocab))
        self.results[(rec.name, seed)] = params
        return params

    def register(self, *recs: Recipe) -> None:
        for r in recs:
            self.recipes[r.name] = r

    def chain_seconds(self, name: str, seed: int) -> float | None:
        """Training time of a recipe plus its init chain (None if any part came from the cache)."""
        rec = self.recipes[name]
        own = self.seconds.get((name, seed))
        if own is None:
            return None
        if rec.init is None:
            return own
        parent = self.chain_seconds(rec.init, seed)
        return None if parent is None else own + parent

    def system(self, rec: Recipe, seed: int, name: str | None = None) -> System:
        mc, _ = self.configs(rec, seed)
        return System(name or rec.name, mc, self.get(rec, seed), rec.max_hot, lid=rec.lid, use_mask=rec.use_mask)


PRETRAIN_STEPS = 1500
FINETUNE_STEPS = 2500
FINETUNE_LR = 1e-3


def standard_recipes(n_languages: int, pretrain_steps: int = PRETRAIN_STEPS, finetune_steps: int = FINETUNE_STEPS,
                     finetune_lr: float = FINETUNE_LR) -> dict[str, Recipe]:
    """The comparison systems at desk scale.

    Every system sees the same number of updates: a universal pre-train
    followed by ``finetune_steps`` more at ``finetune_lr``. The universal
    baseline continues without choice vectors; the CMM variants fine-tune
    with simulated choices. ``cmm-m3-scratch`` spends the same budget
    training from random initialisation.
    """
    m = min(3, n_languages)
    ft = {"lr": finetune_lr}
    tune = dict(strategy="finetune", steps=finetune_steps, init="universal-pretrain", train=ft)
    return {r.name: r for r in [
        Recipe("universal-pretrain", strategy="universal", max_hot=n_languages, steps=pretrain_steps, lid=False,
               use_mask=False),
        Recipe("universal", strategy="universal", max_hot=n_languages, steps=finetune_steps, train=ft,
               init="universal-pretrain", lid=False, use_mask=False),
        Recipe("cmm-m3", max_hot=m, **tune),
        Recipe(f"cmm-m{n_languages}", max_hot=n_languages, **tune),
        Recipe("no-embedding", max_hot=m, model={"embed_choice": False}, **tune),
        Recipe("no-layer", max_hot=m, model={"specific_layers": (), "pred_specific": False}, **tune),
        Recipe("cmm-m3-scratch", max_hot=m, steps=pretrain_steps + finetune_steps),
    ]}
