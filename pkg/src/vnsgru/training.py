"""General learning followed by professional learning, with Adam and clipping.

The first ``epoch_sw`` epochs treat every (video, annotation) pair equally.
Afterwards each video contributes ``n`` sampled annotations whose losses are
weighted by :func:`professional_weights` (held constant during backprop).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Vocabulary, sample_indices
from .decoder import DecoderConfig, annotation_losses, greedy_decode, init_decoder, \
    sample_decoder_masks
from .errors import ConfigurationError, DimensionError, DomainError, OptimizerError
from .metrics import evaluate_corpus
from .selection import Decision, SelectionState, observe, save_model, write_history

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
WARNINGS: Counter = Counter()

SCHEDULES = ("fixed", "exponential", "exponential_absolute", "exponential_relative")


@dataclass
class TrainConfig:
    epoch_total: int = 50
    epoch_sw: int = 16
    gamma: float = 0.8
    schedule: str = "fixed"
    sample_size: int = 16       # c for the fixed schedule
    period: int = 16            # n = base ** (epoch // period), epoch-absolute
    base: int = 2
    sigma: int = 16             # n = base ** ((epoch - epoch_sw) // sigma), relative
    batch_size: int = 32
    lr: float = 2e-4
    decay_factor: float = 0.861
    decay_interval: int = 1000
    l2: float = 0.0
    clip: float = 40.0
    keep_h: float = 0.5
    keep_x: float = 0.8         # shared by the x, s and v streams
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_len: int = 20
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epoch_total < 0 or not 0 <= self.epoch_sw <= self.epoch_total:
            raise ConfigurationError(
                f"need 0 <= epoch_sw <= epoch_total, got {self.epoch_sw}, {self.epoch_total}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        for name in ("sample_size", "period", "sigma", "base", "batch_size", "decay_interval",
                     "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clip <= 0 or self.lr <= 0:
            raise ConfigurationError("clip and lr must be positive")
        for name in ("keep_h", "keep_x"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)

    @property
    def keep_rates(self) -> dict[str, float]:
        return {"x": self.keep_x, "s": self.keep_x, "v": self.keep_x, "h": self.keep_h}

    @property
    def dropout(self) -> bool:
        return self.keep_h < 1.0 or self.keep_x < 1.0


# ---------------------------------------------------------------- losses and weights

def per_annotation_loss(p, a) -> float:
    """Mean over steps of -log p[gold]; ``a`` is a one-hot matrix or an id vector."""
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a)
    if a.ndim == 2:
        if a.shape != p.shape:
            raise DimensionError(f"one-hot targets {a.shape} vs distributions {p.shape}")
        gold = (p * a).sum(axis=1)
    else:
        if a.shape[0] != p.shape[0]:
            raise DimensionError(f"{a.shape[0]} targets vs {p.shape[0]} distributions")
        gold = p[np.arange(len(a)), a]
    clamped = gold < LOG_CLAMP
    if clamped.any():
        WARNINGS["clamped_log"] += int(clamped.sum())
        log.warning("clamped %d zero-probability gold tokens", int(clamped.sum()))
    return float(np.mean(-np.log(np.maximum(gold, LOG_CLAMP))))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def professional_weights(losses, lengths, mean_len: float, gamma: float) -> np.ndarray:
    """gamma * softmax(-l) + (1 - gamma) * softmax(-|len - mean_len|)."""
    losses = np.asarray(losses, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if losses.size == 0:
        raise DomainError("professional_weights needs at least one annotation")
    if losses.shape != lengths.shape:
        raise DimensionError(f"losses {losses.shape} vs lengths {lengths.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must be in [0, 1], got {gamma}")
    return gamma * _softmax(-losses) + (1.0 - gamma) * _softmax(-np.abs(lengths - mean_len))


@dataclass
class ProfessionalBatch:
    annotations: list[list[list[int]]]      # per video: n token-id sequences
    lengths: np.ndarray                     # (bs, n)
    losses: np.ndarray                      # (bs, n)
    betas: np.ndarray                       # (bs, n)
    mean_len: float

    def validate(self):
        if not (self.lengths.shape == self.losses.shape == self.betas.shape):
            raise DimensionError(f"misaligned batch: lengths {self.lengths.shape}, losses "
                                 f"{self.losses.shape}, betas {self.betas.shape}")
        n = self.losses.shape[1]
        if any(len(a) != n for a in self.annotations):
            raise DimensionError("every video must carry the same number of annotations")


def weighted_batch_loss(batch: ProfessionalBatch) -> float:
    """(1 / bs) * sum over videos of beta . l."""
    batch.validate()
    return float(np.sum(batch.betas * batch.losses) / batch.losses.shape[0])


# ---------------------------------------------------------------- schedules

def sampling_size(epoch: int, cfg: TrainConfig, available: int | None = None) -> int:
    if epoch < cfg.epoch_sw:
        return 1
    if cfg.schedule == "fixed":
        n = cfg.sample_size
    elif cfg.schedule == "exponential_relative":
        n = 1 if epoch <= cfg.epoch_sw else cfg.base ** ((epoch - cfg.epoch_sw) // cfg.sigma)
    else:
        n = cfg.base ** (epoch // cfg.period)
    return n if available is None else max(1, min(n, available))


def decayed_lr(step: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.decay_factor ** (step // cfg.decay_interval)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns new (params, state) without mutating inputs."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - step).astype(p.dtype)
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, AdamState(m_new, v_new, t)


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: dict, max_norm: float = 40.0):
    """Scale all gradients by max_norm / ||g|| when the global norm exceeds max_norm."""
    if max_norm <= 0:
        raise ConfigurationError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    n: int
    loss: float
    lr: float
    values: dict
    overall: float
    decision: str

    def line(self, metrics: Sequence[str]) -> str:
        cols = [str(self.epoch), self.phase, str(self.n), f"{self.loss:.6f}", f"{self.lr:.6e}"]
        cols += [f"{self.values[m]:.4f}" for m in ("B4", "C", "M", "R")]
        cols += [f"{self.overall:.6f}", self.decision]
        return "\t".join(cols)


LOG_HEADER = "epoch\tphase\tn\tloss\tlr\tB4\tC\tM\tR\toverall\tdecision"


@dataclass
class Trainer:
    """Owns parameters, optimiser state and RNG streams for one training run."""

    train: list
    validation: list
    vocab: Vocabulary
    model: DecoderConfig
    config: TrainConfig
    params: dict = field(default=None)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            raise ConfigurationError("training split is empty")
        seeds = np.random.SeedSequence(self.config.seed).spawn(4)
        init_rng, self.shuffle_rng, self.mask_rng, self.sample_rng = \
            (np.random.default_rng(s) for s in seeds)
        if self.params is None:
            self.params = init_decoder(self.model, init_rng)
        self.adam = AdamState.zeros(self.params)
        self.step = 0
        self.train_ids = [[self.vocab.encode(a) for a in r.annotations] for r in self.train]
        self.val_ids = [[self.vocab.encode(a) for a in r.annotations] for r in self.validation]
        lengths = [len(a) for r in self.train for a in r.annotations]
        self.mean_len = float(np.mean(lengths))
        self.min_available = min(len(a) for a in self.train_ids)

    # -- one optimisation step

    def _features(self, records, repeat=1):
        s = np.stack([r.s for r in records for _ in range(repeat)]).astype(self._dtype)
        v = np.stack([r.v for r in records for _ in range(repeat)]).astype(self._dtype)
        return s, v

    @property
    def _dtype(self):
        return self.params["out.b"].dtype

    def _losses(self, leaves, s, v, annotations):
        masks = (None, None)
        if self.config.dropout:
            masks = sample_decoder_masks(self.model, self.config.keep_rates, self.mask_rng,
                                         len(annotations), self._dtype)
        return annotation_losses(leaves, self.model, s, v, annotations, masks)

    def _apply(self, tape, loss, leaves):
        grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        if self.config.l2:
            grads = {k: g + self.config.l2 * self.params[k] for k, g in grads.items()}
        grads, _ = clip_global_norm(grads, self.config.clip)
        lr = decayed_lr(self.step, self.config)
        self.params, self.adam = adam_step(self.params, grads, self.adam, lr,
                                           self.config.adam_beta1, self.config.adam_beta2,
                                           self.config.adam_eps)
        self.step += 1

    def general_step(self, pairs) -> float:
        """Equal-weight step on a list of (video index, annotation index) pairs."""
        records = [self.train[i] for i, _ in pairs]
        annotations = [self.train_ids[i][j] for i, j in pairs]
        s, v = self._features(records)
        leaves = {k: T.Tensor(p, requires_grad=True) for k, p in self.params.items()}
        with T.GradTape() as tape:
            losses = self._losses(leaves, s, v, annotations)
            loss = T.dot(losses, np.full(len(pairs), 1.0 / len(pairs)))
        self._apply(tape, loss, leaves)
        return float(loss.data)

    def professional_step(self, videos: Sequence[int], n: int) -> ProfessionalBatch:
        """Weighted step: n sampled annotations per video, weights from their losses."""
        chosen = [sample_indices(len(self.train_ids[i]), n, self.sample_rng) for i in videos]
        annotations = [[self.train_ids[i][j] for j in idx] for i, idx in zip(videos, chosen)]
        flat = [a for group in annotations for a in group]
        s, v = self._features([self.train[i] for i in videos], repeat=n)
        leaves = {k: T.Tensor(p, requires_grad=True) for k, p in self.params.items()}
        lengths = np.array([[len(a) - 1 for a in group] for group in annotations], dtype=float)
        with T.GradTape() as tape:
            losses = self._losses(leaves, s, v, flat)
            l = losses.data.astype(np.float64).reshape(len(videos), n)
            betas = np.stack([professional_weights(l[k], lengths[k], self.mean_len,
                                                   self.config.gamma) for k in range(len(videos))])
            loss = T.dot(losses, (betas / len(videos)).reshape(-1))
        self._apply(tape, loss, leaves)
        return ProfessionalBatch(annotations, lengths, l, betas, self.mean_len)

    # -- epochs

    def train_epoch(self, epoch: int) -> tuple[str, int, float]:
        cfg = self.config
        bs = cfg.batch_size
        if epoch < cfg.epoch_sw:
            pairs = [(i, j) for i, anns in enumerate(self.train_ids) for j in range(len(anns))]
            order = self.shuffle_rng.permutation(len(pairs))
            losses = [self.general_step([pairs[k] for k in order[b:b + bs]])
                      for b in range(0, len(order), bs)]
            return "general", 1, float(np.mean(losses))
        n = sampling_size(epoch, cfg, self.min_available)
        order = self.shuffle_rng.permutation(len(self.train))
        losses = [weighted_batch_loss(self.professional_step(order[b:b + bs], n))
                  for b in range(0, len(order), bs)]
        return "professional", n, float(np.mean(losses))

    def caption(self, records, params=None) -> list[list[str]]:
        params = self.params if params is None else params
        s, v = self._features(records)
        ids = greedy_decode(params, self.model, s, v, self.config.max_len)
        return [self.vocab.decode(x) for x in ids]

    def mean_loss(self, records, ids=None, params=None) -> float:
        """Eval-mode teacher-forced loss averaged over every (video, annotation) pair."""
        params = self.params if params is None else params
        if ids is None:
            ids = [[self.vocab.encode(a) for a in r.annotations] for r in records]
        flat = [a for anns in ids for a in anns]
        s = np.stack([r.s for r, anns in zip(records, ids) for _ in anns]).astype(self._dtype)
        v = np.stack([r.v for r, anns in zip(records, ids) for _ in anns]).astype(self._dtype)
        return float(np.mean(annotation_losses(params, self.model, s, v, flat).data))

    def validate(self) -> dict:
        caps = self.caption(self.validation)
        report = evaluate_corpus(caps, [r.annotations for r in self.validation])
        xe = self.mean_loss(self.validation, self.val_ids)
        return {**report.values(), "XE": math.exp(-xe), "loss": xe}

    def run(self, state: SelectionState, out_dir=None) -> SelectionState:
        """Train for ``epoch_total`` epochs, selecting a champion after each one.

        With ``out_dir`` the champion checkpoint, training log and selection
        history are written there; otherwise the champion parameters are kept
        in ``state.champion``. Without a validation split the final parameters
        become the champion.
        """
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        lines = [LOG_HEADER]
        for epoch in range(self.config.epoch_total):
            phase, n, loss = self.train_epoch(epoch)
            if not math.isfinite(loss):
                raise OptimizerError(f"training loss became non-finite at epoch {epoch}")
            values = self.validate() if self.validation else {}
            seen = len(state.history)
            decision = observe(values, epoch, state) if values else Decision.SKIP
            if decision is Decision.SAVE:
                if out is not None:
                    save_model(out / "champion.ckpt", self.params, self.model)
                    state.champion = str(out / "champion.ckpt")
                else:
                    state.champion = {k: p.copy() for k, p in self.params.items()}
            overall = state.history[-1][2] if len(state.history) > seen else float("nan")
            rec = EpochRecord(epoch, phase, n, loss, decayed_lr(self.step, self.config),
                              values or dict.fromkeys(("B4", "C", "M", "R"), float("nan")),
                              overall, decision.value)
            self.history.append(rec)
            lines.append(rec.line(state.metrics))
            log.info(lines[-1])
        if not self.validation:
            # nothing to select on: the final parameters are the champion
            state.champion_epoch = self.config.epoch_total - 1
            if out is not None:
                save_model(out / "champion.ckpt", self.params, self.model)
                state.champion = str(out / "champion.ckpt")
            else:
                state.champion = {k: p.copy() for k, p in self.params.items()}
        if out is not None:
            (out / "train_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            write_history(state, out / "selection_history.tsv")
        return state


def run_training(train, validation, vocab, model: DecoderConfig, config: TrainConfig,
                 state: SelectionState | None = None, out_dir=None) -> SelectionState:
    state = state if state is not None else SelectionState.default()
    return Trainer(train, validation, vocab, model, config).run(state, out_dir)
