"""Two-layer VNS-GRU caption decoder: embedding, teacher forcing, greedy and beam search."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .cells import CellDims, CellParams, DropoutMasks, glorot, init_params, prepare_sequence, \
    sample_masks, semantic_step
from .errors import ConfigurationError, DimensionError, VocabularyError

NEG_INF = -np.inf


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    n_x: int
    n_h: int
    n_f: int
    n_s: int
    n_v: int
    layer_norm: bool = True
    visual_to_all_layers: bool = True
    ln_eps: float = 1e-5
    pad: int = 0
    bos: int = 1
    eos: int = 2
    unk: int = 3

    def __post_init__(self):
        specials = (self.pad, self.bos, self.eos, self.unk)
        if len(set(specials)) != 4 or max(specials) >= self.vocab_size or min(specials) < 0:
            raise ConfigurationError(
                f"special ids {specials} must be distinct and below vocab size {self.vocab_size}")
        for name in ("vocab_size", "n_x", "n_h", "n_f", "n_s", "n_v"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def layer1_dims(self) -> CellDims:
        return CellDims(self.n_x, self.n_h, self.n_f, self.n_s, self.n_v)

    @property
    def layer2_dims(self) -> CellDims:
        return CellDims(self.n_h, self.n_h, self.n_f, self.n_s,
                        self.n_v if self.visual_to_all_layers else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def init_decoder(config: DecoderConfig, seed, dtype=np.float32) -> dict[str, np.ndarray]:
    """Flat name -> array parameter dict for the whole decoder."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {"embedding": glorot(rng, (config.vocab_size, config.n_x), dtype)}
    for prefix, dims in (("layer1", config.layer1_dims), ("layer2", config.layer2_dims)):
        cell = init_params(dims, rng, dtype=dtype)
        params.update({f"{prefix}.{k}": v for k, v in cell.tensors.items()})
    params["out.W"] = glorot(rng, (config.n_h, config.vocab_size), dtype)
    params["out.b"] = np.zeros(config.vocab_size, dtype=dtype)
    return params


def cell_view(params: dict, config: DecoderConfig, layer: int) -> CellParams:
    prefix = f"layer{layer}."
    dims = config.layer1_dims if layer == 1 else config.layer2_dims
    return CellParams(dims, {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})


def check_params(params: dict, config: DecoderConfig):
    """Raise ConfigurationError if any tensor is missing or mis-shaped."""
    from .cells import param_shapes
    expected = {"embedding": (config.vocab_size, config.n_x),
                "out.W": (config.n_h, config.vocab_size), "out.b": (config.vocab_size,)}
    for layer, dims in ((1, config.layer1_dims), (2, config.layer2_dims)):
        expected.update({f"layer{layer}.{k}": s for k, s in param_shapes(dims).items()})
    for name, shape in expected.items():
        if name not in params:
            raise ConfigurationError(f"parameter {name!r} missing")
        if tuple(np.shape(params[name])) != shape:
            raise ConfigurationError(
                f"parameter {name!r} has shape {tuple(np.shape(params[name]))}, expected {shape}")


def sample_decoder_masks(config: DecoderConfig, keep, rng: np.random.Generator,
                         batch: int | None, dtype=np.float32):
    """One mask set per layer; ``keep`` maps stream -> keep rate."""
    return (sample_masks(keep, config.layer1_dims, rng, batch, dtype),
            sample_masks(keep, config.layer2_dims, rng, batch, dtype))


class DecoderState:
    """Per-batch recurrent state for step-by-step decoding."""

    def __init__(self, params, config: DecoderConfig, s, v, masks=(None, None)):
        self.params = params
        self.config = config
        self.ctx1 = prepare_sequence(s, v, cell_view(params, config, 1), masks[0],
                                     config.layer_norm, config.ln_eps)
        self.ctx2 = prepare_sequence(s, v, cell_view(params, config, 2), masks[1],
                                     config.layer_norm, config.ln_eps)
        batch = np.shape(s)[:-1]
        dtype = np.asarray(params["out.b"]).dtype
        self.h1 = np.zeros(batch + (config.n_h,), dtype=dtype)
        self.h2 = np.zeros(batch + (config.n_h,), dtype=dtype)

    def step(self, token_ids) -> T.Tensor:
        """Feed ``token_ids`` and return next-token logits."""
        x = T.embedding(self.params["embedding"], token_ids)
        self.h1 = semantic_step(x, self.h1, self.ctx1).h
        self.h2 = semantic_step(self.h1, self.h2, self.ctx2).h
        return T.add_bias(T.matmul(self.h2, self.params["out.W"]), self.params["out.b"])


def _input_tokens(tokens: np.ndarray, bos: int) -> np.ndarray:
    """Shift right: step t reads token t-1, step 0 reads BOS."""
    inputs = np.empty_like(tokens)
    inputs[:, 0] = bos
    inputs[:, 1:] = tokens[:, :-1]
    return inputs


def pad_annotations(annotations, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """(B, T) padded id matrix and per-row lengths."""
    lengths = np.array([len(a) for a in annotations], dtype=np.intp)
    out = np.full((len(annotations), int(lengths.max(initial=0))), pad, dtype=np.intp)
    for i, a in enumerate(annotations):
        out[i, :len(a)] = a
    return out, lengths


def unroll_logits(params, config: DecoderConfig, s, v, tokens: np.ndarray,
                  masks=(None, None)) -> list[T.Tensor]:
    """Teacher-forced logits for a (B, T) batch of target tokens."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.max() >= config.vocab_size or tokens.min() < 0):
        raise VocabularyError(f"token id outside vocabulary of size {config.vocab_size}")
    state = DecoderState(params, config, s, v, masks)
    inputs = _input_tokens(tokens, config.bos)
    return [state.step(inputs[:, t]) for t in range(tokens.shape[1])]


def annotation_losses(params, config: DecoderConfig, s, v, annotations,
                      masks=(None, None)) -> T.Tensor:
    """Per-annotation mean cross entropy, shape (B,)."""
    tokens, lengths = pad_annotations(annotations, config.pad)
    if lengths.min(initial=1) < 1:
        raise DimensionError("empty annotation (must contain at least EOS)")
    logits = unroll_logits(params, config, s, v, tokens, masks)
    steps = np.arange(tokens.shape[1])
    dtype = np.asarray(params["out.b"]).dtype
    weights = (steps[None, :] < lengths[:, None]).astype(dtype) / lengths[:, None].astype(dtype)
    return T.sequence_nll(logits, tokens, weights)


def teacher_forced_forward(s, v, annotation, params, config: DecoderConfig,
                           masks=(None, None)) -> np.ndarray:
    """Next-token distributions (L, |V|) for one annotation ending in EOS.

    Dropout is active iff ``masks`` are given (train mode).
    """
    tokens = np.asarray(annotation, dtype=np.intp)[None, :]
    s2, v2 = np.asarray(s)[None, :], np.asarray(v)[None, :]
    m = tuple(_batch1(mk) for mk in masks)
    logits = unroll_logits(params, config, s2, v2, tokens, m)
    return np.stack([T.softmax(l).data[0] for l in logits]) if logits else \
        np.zeros((0, config.vocab_size))


def _batch1(masks: DropoutMasks | None):
    if masks is None:
        return None
    return DropoutMasks({g: {k: np.atleast_2d(a) for k, a in d.items()}
                         for g, d in masks.masks.items()}, masks.keep)


def _generation_logits(logits: np.ndarray, config: DecoderConfig) -> np.ndarray:
    out = np.array(logits, dtype=np.float64)
    out[..., [config.pad, config.bos, config.unk]] = NEG_INF
    return out


def greedy_decode(params, config: DecoderConfig, s, v, max_len: int) -> list[list[int]]:
    """Argmax decoding for a batch of videos; EOS is not included in the output."""
    s, v = np.atleast_2d(s), np.atleast_2d(v)
    batch = s.shape[0]
    state = DecoderState(params, config, s, v)
    tokens = np.full(batch, config.bos, dtype=np.intp)
    done = np.zeros(batch, dtype=bool)
    out: list[list[int]] = [[] for _ in range(batch)]
    for _ in range(max_len):
        logits = _generation_logits(state.step(tokens).data, config)
        tokens = logits.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            if tokens[i] == config.eos:
                done[i] = True
            else:
                out[i].append(int(tokens[i]))
        if done.all():
            break
    return out


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = x - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_search(step_fn, init_state, bos: int, eos: int, max_len: int, width: int):
    """Length-normalised beam search.

    ``step_fn(state, token) -> (log_probs over vocab, new_state)``. Hypotheses
    are ranked by mean log-probability per generated token (EOS counts as a
    token). Returns ``(tokens_without_eos, normalised_score)``.
    """
    if width < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {width}")
    beams = [(0.0, [], init_state, bos)]        # (sum log p, tokens, state, last token)
    finished = []
    for _ in range(max_len):
        candidates = []
        for total, toks, state, last in beams:
            logp, new_state = step_fn(state, last)
            for tok in np.argsort(-logp, kind="stable")[:width]:
                lp = float(logp[tok])
                if lp == NEG_INF:
                    continue
                candidates.append((total + lp, toks + [int(tok)], new_state))
        if not candidates:
            break
        candidates.sort(key=lambda c: -c[0] / len(c[1]))
        beams = []
        for total, toks, state in candidates[:width]:
            if toks[-1] == eos:
                finished.append((total / len(toks), toks[:-1]))
            else:
                beams.append((total, toks, state, toks[-1]))
        if not beams:
            break
    finished.extend((total / len(toks), toks) for total, toks, _, _ in beams if toks)
    if not finished:
        return [], 0.0
    score, toks = max(finished, key=lambda f: f[0])
    return toks, score


def beam_decode(params, config: DecoderConfig, s, v, max_len: int, beam: int = 5) -> list[int]:
    """Beam search for a single video; ``beam=1`` matches :func:`greedy_decode`."""
    if beam < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {beam}")
    s, v = np.asarray(s)[None, :], np.asarray(v)[None, :]
    base = DecoderState(params, config, s, v)

    def step_fn(state, token):
        h1, h2 = state
        base.h1, base.h2 = h1, h2
        logits = base.step(np.array([token], dtype=np.intp)).data[0]
        return log_softmax_np(_generation_logits(logits, config)), (base.h1, base.h2)

    toks, _ = beam_search(step_fn, (base.h1, base.h2), config.bos, config.eos, max_len, beam)
    return toks


def sequence_log_prob(params, config: DecoderConfig, s, v, tokens, finished: bool = True) -> float:
    """Sum of generation log-probabilities of ``tokens`` (+ EOS if ``finished``)."""
    ids = list(tokens) + ([config.eos] if finished else [])
    state = DecoderState(params, config, np.asarray(s)[None, :], np.asarray(v)[None, :])
    prev, total = config.bos, 0.0
    for tok in ids:
        logp = log_softmax_np(_generation_logits(state.step(np.array([prev])).data[0], config))
        total += float(logp[tok])
        prev = tok
    return total
