"""Checkpoints and configured (extracted) sub-models.

File layout (all integers little-endian)::

    magic    8 bytes  b"CMMCKPT\\0"
    version  u32
    section* tag (4 bytes) | length u64 | payload | crc32(payload) u32
    trailer  crc32 of every preceding byte, u32

Sections appear in the order CONF, VOCB, META, TENS, END. CONF and META are
UTF-8 JSON with sorted keys; VOCB lists the per-language token ids; TENS holds
named float64 tensors, each with its own crc32. docs/checkpoint_format.md has
the full byte layout.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core.tensor import DTYPE, Parameter
from .decode import Decodable
from .model import ChoiceVector, CmmConfig, CmmParams, ConfigError, is_specific, make_choice_vector
from .vocab import VocabularyTable, merge_vocab

MAGIC = b"CMMCKPT\0"
FORMAT_VERSION = 1
SECTION_ORDER = (b"CONF", b"VOCB", b"META", b"TENS", b"END ")


class IntegrityError(ValueError):
    """Checkpoint bytes do not match their checksums or layout."""


class VersionError(ValueError):
    """Checkpoint written by an unsupported format version."""


@dataclass
class Checkpoint:
    config: CmmConfig
    params: CmmParams
    vocab: VocabularyTable
    meta: dict = field(default_factory=dict)
    # optional optimiser moments for resuming training
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _vocab_bytes(v: VocabularyTable) -> bytes:
    out = [struct.pack("<II", v.total_size, v.n_languages)]
    for ids in v.per_language:
        arr = np.array(sorted(ids), dtype="<i4")
        out.append(struct.pack("<I", arr.size) + arr.tobytes())
    return b"".join(out)


def _tensor_bytes(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    named = list(named)
    out = [struct.pack("<I", len(named))]
    for name, a in named:
        a = np.ascontiguousarray(a, dtype="<f8")
        nb = name.encode()
        data = a.tobytes()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 1, a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(struct.pack("<QI", len(data), zlib.crc32(data)) + data)
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    meta = dict(ckpt.meta)
    meta["languages"] = list(ckpt.params.languages)
    tensors = [(n, p.data) for n, p in ckpt.params.items()]
    if ckpt.adam_m is not None:
        meta["has_optimizer"] = True
        tensors += [(f"@adam_m/{n}", a) for n, a in ckpt.adam_m.items()]
        tensors += [(f"@adam_v/{n}", a) for n, a in ckpt.adam_v.items()]
    payloads = {
        b"CONF": _json(ckpt.config.to_dict()),
        b"VOCB": _vocab_bytes(ckpt.vocab),
        b"META": _json(meta),
        b"TENS": _tensor_bytes(tensors),
        b"END ": b"",
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", version))
    for tag in SECTION_ORDER:
        p = payloads[tag]
        buf.write(tag + struct.pack("<Q", len(p)) + p + struct.pack("<I", zlib.crc32(p)))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.what}: truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_vocab(p: bytes) -> VocabularyTable:
    r = _Reader(p, "VOCB")
    total, n = r.unpack("<II")
    lists = []
    for _ in range(n):
        (k,) = r.unpack("<I")
        lists.append(np.frombuffer(r.take(4 * k), dtype="<i4").tolist())
    return VocabularyTable.from_lists(total, lists)


def _parse_tensors(p: bytes) -> dict[str, np.ndarray]:
    r = _Reader(p, "TENS")
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code != 1:
            raise IntegrityError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        nbytes, crc = r.unpack("<QI")
        data = r.take(nbytes)
        if zlib.crc32(data) != crc:
            raise IntegrityError(f"tensor {name!r}: checksum mismatch")
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise IntegrityError(f"tensor {name!r}: {nbytes} bytes do not fit shape {shape}")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(DTYPE)
    return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    body, (trailer,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != trailer:
        raise IntegrityError("checkpoint checksum mismatch")
    r = _Reader(body, "checkpoint")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}; this build reads version {FORMAT_VERSION}")
    sections = {}
    for tag in SECTION_ORDER:
        got = r.take(4)
        if got != tag:
            raise IntegrityError(f"expected section {tag!r} at byte {r.pos - 4}, found {got!r}")
        (n,) = r.unpack("<Q")
        p = r.take(n)
        (crc,) = r.unpack("<I")
        if zlib.crc32(p) != crc:
            raise IntegrityError(f"section {tag.decode().strip()} checksum mismatch")
        sections[tag] = p
    if r.pos != len(body):
        raise IntegrityError(f"{len(body) - r.pos} trailing bytes after END section")
    try:
        cfg = CmmConfig.from_dict(json.loads(sections[b"CONF"]))
        meta = json.loads(sections[b"META"])
    except (ValueError, TypeError) as e:
        raise IntegrityError(f"malformed config or metadata: {e}") from e
    tensors = _parse_tensors(sections[b"TENS"])
    languages = meta.pop("languages")
    has_opt = meta.pop("has_optimizer", False)
    params = CmmParams({n: Parameter(a, name=n) for n, a in tensors.items() if not n.startswith("@")}, languages)
    ckpt = Checkpoint(cfg, params, _parse_vocab(sections[b"VOCB"]), meta)
    if has_opt:
        ckpt.adam_m = {n[len("@adam_m/"):]: a for n, a in tensors.items() if n.startswith("@adam_m/")}
        ckpt.adam_v = {n[len("@adam_v/"):]: a for n, a in tensors.items() if n.startswith("@adam_v/")}
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


@dataclass
class ConfiguredModel(Decodable):
    """Universal stack plus the selected languages' specific maps, with a baked choice."""

    selected: tuple[int, ...] = ()

    @property
    def vocab_tmp(self) -> frozenset[int]:
        return self.allowed

    def param_count(self) -> int:
        return self.params.count()


def extract(ckpt: Checkpoint, selected: Iterable[int], prune_output: bool = False) -> ConfiguredModel:
    """Keep only the specific slots of ``selected``; the choice stays N-dimensional."""
    cfg = ckpt.config
    sel = sorted(set(int(i) for i in selected))
    choice = make_choice_vector(sel, cfg.n_languages)
    have = ckpt.params.languages
    missing = [i for i in sel if i not in have]
    if missing:
        raise ConfigError(f"checkpoint holds no specific modules for languages {missing}")
    slots = [have.index(i) for i in sel]
    tensors = {}
    for name, p in ckpt.params.items():
        data = p.data[slots] if is_specific(name) else p.data
        tensors[name] = Parameter(np.array(data, copy=True), name=name)
    allowed = merge_vocab(ckpt.vocab, choice)
    out_ids = None
    if prune_output:
        out_ids = np.array(sorted(allowed) + [cfg.blank_id], dtype=np.int64)
        tensors["out.w"] = Parameter(tensors["out.w"].data[:, out_ids].copy(), name="out.w")
        tensors["out.b"] = Parameter(tensors["out.b"].data[out_ids].copy(), name="out.b")
    return ConfiguredModel(cfg, CmmParams(tensors, sel), choice, allowed, out_ids, tuple(sel))


def configured_checkpoint(model: ConfiguredModel, vocab: VocabularyTable, meta: dict | None = None) -> Checkpoint:
    m = dict(meta or {})
    m["choice"] = list(model.choice.bits)
    if model.out_ids is not None:
        m["out_ids"] = model.out_ids.tolist()
    return Checkpoint(model.cfg, model.params, vocab, m)


def as_configured(ckpt: Checkpoint) -> ConfiguredModel:
    """Re-open a checkpoint written by :func:`configured_checkpoint`."""
    if "choice" not in ckpt.meta:
        raise ConfigError("checkpoint is not a configured model (no baked choice)")
    choice = ChoiceVector(tuple(ckpt.meta["choice"]))
    out_ids = np.array(ckpt.meta["out_ids"], dtype=np.int64) if "out_ids" in ckpt.meta else None
    return ConfiguredModel(ckpt.config, ckpt.params, choice, merge_vocab(ckpt.vocab, choice), out_ids,
                           tuple(ckpt.params.languages))


@dataclass(frozen=True)
class ParamReport:
    universal: int
    specific: int
    by_site: dict[str, int]

    @property
    def total(self) -> int:
        return self.universal + self.specific

    @property
    def overhead(self) -> float:
        """Specific parameters as a fraction of universal ones."""
        return self.specific / self.universal if self.universal else 0.0

    def to_text(self) -> str:
        lines = [f"{k:<24} {v:>10}" for k, v in self.by_site.items()]
        lines += [f"{'universal':<24} {self.universal:>10}", f"{'specific':<24} {self.specific:>10}",
                  f"{'total':<24} {self.total:>10}", f"{'overhead':<24} {100 * self.overhead:>9.2f}%"]
        return "\n".join(lines) + "\n"


def param_report(model: Checkpoint | Decodable | CmmParams) -> ParamReport:
    """Parameter counts per site; ``overhead`` is specific over universal."""
    params = model if isinstance(model, CmmParams) else model.params
    by_site: dict[str, int] = {}
    for name, p in params.items():
        site = name.rsplit(".", 1)[0] if is_specific(name) else name.split(".", 1)[0]
        key = ("specific:" if is_specific(name) else "universal:") + site
        by_site[key] = by_site.get(key, 0) + p.size
    specific = params.count(params.specific_names())
    universal = params.count(params.universal_names())
    return ParamReport(universal, specific, by_site)
