"""Comprehensive checkpoint selection and the binary checkpoint format."""

from __future__ import annotations

import enum
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .decoder import DecoderConfig, check_params
from .errors import ConfigurationError, DomainError, FormatError

log = logging.getLogger(__name__)

DEFAULT_METRICS = ("B4", "C", "M", "R")


class Decision(str, enum.Enum):
    SAVE = "save_champion"
    SKIP = "skip"


def overall_score(values: Sequence[float], bests: Sequence[float], weights: Sequence[float]) -> float:
    """sum_i w_i * v_i / b_i."""
    if not len(values) == len(bests) == len(weights):
        raise DomainError(f"length mismatch: {len(values)} values, {len(bests)} bests, "
                          f"{len(weights)} weights")
    for b in bests:
        if not b > 0:
            raise DomainError(f"running best must be positive, got {b}")
    return math.fsum(w * v / b for v, b, w in zip(values, bests, weights))


@dataclass
class SelectionState:
    metrics: list[str]
    weights: list[float]
    bests: list[float | None] = None
    best_overall: float = -math.inf
    champion: object = None
    champion_epoch: int | None = None
    champion_values: list[float] | None = None
    history: list[tuple[int, list[float], float, str]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.metrics) == 0 or len(self.metrics) != len(self.weights):
            raise ConfigurationError("need one weight per metric and at least one metric")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ConfigurationError(f"metric weights must sum to 1, got {math.fsum(self.weights)}")
        if self.bests is None:
            self.bests = [None] * len(self.metrics)

    @classmethod
    def default(cls) -> "SelectionState":
        return cls(list(DEFAULT_METRICS), [0.25] * 4)

    @classmethod
    def single(cls, metric: str) -> "SelectionState":
        return cls([metric], [1.0])

    def warm_start(self, bests: Mapping[str, float]):
        """Seed running bests from an earlier run."""
        self.bests = [bests.get(m, b) for m, b in zip(self.metrics, self.bests)]


def _score(values, bests, weights) -> float:
    # A metric whose running best is still 0 counts as tying its best.
    live = [i for i, b in enumerate(bests) if b > 0]
    o = overall_score([values[i] for i in live], [bests[i] for i in live],
                      [weights[i] for i in live])
    return o + math.fsum(w for i, w in enumerate(weights) if i not in live)


def observe(report, epoch: int, state: SelectionState) -> Decision:
    """Update running bests, score the epoch, and decide whether it becomes champion.

    ``report`` is a :class:`~vnsgru.metrics.MetricReport` or a mapping from
    metric name to value. Bests are updated before scoring, so scores never
    exceed 1. The champion's score is re-evaluated against the updated bests
    and the epoch is saved only if it strictly beats that score.
    """
    source = report.values() if hasattr(report, "values") and not isinstance(report, Mapping) \
        else report
    try:
        values = [float(source[m]) for m in state.metrics]
    except KeyError as exc:
        raise ConfigurationError(f"report lacks metric {exc}") from None
    if not all(math.isfinite(v) for v in values):
        log.warning("epoch %d: non-finite metric values %s; epoch ignored", epoch, values)
        return Decision.SKIP
    if any(v < 0 for v in values):
        raise DomainError(f"epoch {epoch}: metric values must be non-negative, got {values}")
    state.bests = [v if b is None else max(b, v) for v, b in zip(values, state.bests)]
    o = _score(values, state.bests, state.weights)
    if state.champion_values is not None:
        state.best_overall = _score(state.champion_values, state.bests, state.weights)
    decision = Decision.SAVE if o > state.best_overall else Decision.SKIP
    if decision is Decision.SAVE:
        state.best_overall = o
        state.champion_epoch = epoch
        state.champion_values = values
    state.history.append((epoch, values, o, decision.value))
    return decision


def write_history(state: SelectionState, path):
    lines = ["\t".join(["epoch", *state.metrics, "overall", "decision"])]
    for epoch, values, o, decision in state.history:
        lines.append("\t".join([str(epoch), *(f"{v:.6f}" for v in values), f"{o:.6f}", decision]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- checkpoint format
#
# little-endian: b"VNSG", u32 version, u32 count, then per tensor:
# u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 data.

MAGIC = b"VNSG"
VERSION = 1


def checkpoint_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(tensors: Mapping[str, np.ndarray], path):
    """Write atomically (temp file + rename). Values are stored as float32."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(tensors))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start + 4) from None
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor", r.pos)
    return out


_META_FIELDS = ("vocab_size", "n_x", "n_h", "n_f", "n_s", "n_v", "layer_norm",
                "visual_to_all_layers", "pad", "bos", "eos", "unk")


def save_model(path, params: Mapping[str, np.ndarray], config: DecoderConfig):
    """Checkpoint with the decoder configuration stored as a ``meta.decoder`` tensor."""
    meta = np.array([float(getattr(config, f)) for f in _META_FIELDS], dtype=np.float32)
    save_checkpoint({"meta.decoder": meta, **params}, path)


def load_model(path) -> tuple[dict[str, np.ndarray], DecoderConfig]:
    tensors = load_checkpoint(path)
    meta = tensors.pop("meta.decoder", None)
    if meta is None or meta.shape != (len(_META_FIELDS),):
        raise FormatError(f"{path}: missing or malformed meta.decoder tensor")
    fields = {f: int(x) for f, x in zip(_META_FIELDS, meta)}
    fields["layer_norm"] = bool(fields["layer_norm"])
    fields["visual_to_all_layers"] = bool(fields["visual_to_all_layers"])
    config = DecoderConfig(**fields)
    check_params(tensors, config)
    return tensors, config
