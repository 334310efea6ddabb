"""Flat ``section.key = value`` experiment configuration.

Sections: ``corpus``, ``model``, ``train``, ``eval``. Lines starting with ``#``
are comments. Command-line overrides use the same ``section.key=value`` form
and win over the file. :meth:`Resolved.to_text` writes every key, so a printed
config reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .corpus import CorpusManifest
from .model import CmmConfig, ConfigError
from .trainer import TrainConfig

SECTIONS = ("corpus", "model", "train", "eval")

# optional-valued fields whose default is None: the type they take otherwise
_OPTIONAL = {"specific_layers": "ints", "warmup_steps": "int"}


@dataclass(frozen=True)
class EvalConfig:
    n_hots: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    beam_width: int = 1
    max_emit: int = 4
    split: str = "test"

    def __post_init__(self):
        if self.beam_width < 1 or self.max_emit < 1:
            raise ConfigError("beam_width and max_emit must be at least 1")
        if not self.n_hots:
            raise ConfigError("n_hots must list at least one value")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if default is None or key in _OPTIONAL:
        if raw.lower() in ("none", ""):
            return None
        kind = _OPTIONAL.get(key, "str")
        if kind == "int":
            return int(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


def parse_lines(lines: Iterable[str], origin: str = "config") -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected section.key=value, got {line!r}")
        key, val = (x.strip() for x in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{origin}:{no}: unknown key {key!r} (sections: {', '.join(SECTIONS)})")
        out[section][name] = val
    return out


def _build(cls, section: str, items: dict[str, str]):
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    unknown = sorted(set(items) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(section + '.' + k for k in unknown)}")
    kw = {}
    for k, raw in items.items():
        try:
            kw[k] = _coerce(k, raw, defaults[k])
        except ValueError as e:
            raise ConfigError(f"{section}.{k}: {e}") from None
    return cls(**kw)


def _manifest(items: dict[str, str]) -> CorpusManifest:
    base = dict(line.split("=", 1) for line in CorpusManifest.default().to_lines())
    known = set(base)
    unknown = sorted(set(items) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join('corpus.' + k for k in unknown)}")
    merged = {**base, **items}
    n = int(merged["n_languages"])
    if "n_languages" in items:
        # default counts follow the language count unless given explicitly
        for s, c in (("train", 2000), ("valid", 100), ("test", 200)):
            if f"counts.{s}" not in items:
                merged[f"counts.{s}"] = str(c)
        if "code_switch_pairs" not in items and n < 3:
            merged["code_switch_pairs"] = "1:0" if n == 2 else ""
    try:
        return CorpusManifest.from_items(merged)
    except ValueError as e:
        raise ConfigError(f"corpus: {e}") from None


@dataclass
class Resolved:
    corpus: CorpusManifest
    model: CmmConfig
    train: TrainConfig
    eval: EvalConfig
    explicit: set[str] = field(default_factory=set)  # keys set by file or override

    def to_text(self) -> str:
        lines = ["corpus." + line for line in self.corpus.to_lines()]
        for sec, obj in (("model", self.model), ("train", self.train), ("eval", self.eval)):
            lines += [f"{sec}.{f.name}={_format(getattr(obj, f.name))}" for f in fields(obj)]
        return "\n".join(lines) + "\n"


def resolve(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Resolved:
    """File contents overlaid by ``overrides`` (``section.key=value`` strings)."""
    merged: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        for s, kv in parse_lines(p.read_text().splitlines(), str(p)).items():
            merged[s].update(kv)
    for s, kv in parse_lines(overrides, "override").items():
        merged[s].update(kv)
    explicit = {f"{s}.{k}" for s, kv in merged.items() for k in kv}
    corpus = _manifest(merged["corpus"])
    model = _build(CmmConfig, "model", merged["model"])
    train = _build(TrainConfig, "train", merged["train"])
    ev = _build(EvalConfig, "eval", merged["eval"])
    return Resolved(corpus, model, train, ev, explicit)
