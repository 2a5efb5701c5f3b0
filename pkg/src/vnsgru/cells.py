"""GRU, semantic GRU and VNS-GRU cells.

All three share one calling convention: inputs may be single vectors or
row-batches, parameters may be plain arrays (inference) or leaf tensors
(training under a :class:`~vnsgru.tensor.GradTape`). The semantic and
visual terms are constant along a sequence, so :func:`prepare_sequence`
computes them once and :func:`semantic_step` reuses them at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError

GATES = ("z", "r", "h")
STREAMS = ("x", "h", "v", "s")


@dataclass(frozen=True)
class CellDims:
    """Sizes of one cell. ``n_v == 0`` builds a cell without visual terms."""

    n_x: int
    n_h: int
    n_f: int = 0
    n_s: int = 0
    n_v: int = 0

    def validate(self, kind: str = "semantic"):
        required = ("n_x", "n_h") if kind == "gru" else ("n_x", "n_h", "n_f", "n_s")
        for name in required:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_v < 0:
            raise ConfigurationError(f"n_v must be non-negative, got {self.n_v}")

    @property
    def stream_sizes(self) -> dict[str, int]:
        return {"x": self.n_x, "h": self.n_h, "v": self.n_v, "s": self.n_s}


def param_shapes(dims: CellDims, kind: str = "semantic") -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a cell.

    ``kind="gru"`` is the unfactorised cell (``W``, ``U`` per gate); any other
    kind uses the semantic factorisation plus a layer-norm gain/bias per gate.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    if kind == "gru":
        for g in GATES:
            shapes[f"{g}.W"] = (dims.n_h, dims.n_x)
            shapes[f"{g}.U"] = (dims.n_h, dims.n_h)
        return shapes
    for g in GATES:
        shapes[f"{g}.W1"] = (dims.n_f, dims.n_s)
        shapes[f"{g}.W2"] = (dims.n_f, dims.n_x)
        shapes[f"{g}.W3"] = (dims.n_h, dims.n_f)
        shapes[f"{g}.U1"] = (dims.n_f, dims.n_s)
        shapes[f"{g}.U2"] = (dims.n_f, dims.n_h)
        shapes[f"{g}.U3"] = (dims.n_h, dims.n_f)
        if dims.n_v:
            shapes[f"{g}.V1"] = (dims.n_f, dims.n_s)
            shapes[f"{g}.V2"] = (dims.n_f, dims.n_v)
            shapes[f"{g}.V3"] = (dims.n_h, dims.n_f)
        shapes[f"{g}.ln_gain"] = (dims.n_h,)
        shapes[f"{g}.ln_bias"] = (dims.n_h,)
    return shapes


def param_count(dims: CellDims, kind: str = "semantic") -> int:
    return sum(int(np.prod(s)) for s in param_shapes(dims, kind).values())


@dataclass
class CellParams:
    dims: CellDims
    tensors: dict
    kind: str = "semantic"

    def __getitem__(self, key):
        return self.tensors[key]

    def map(self, fn) -> "CellParams":
        return CellParams(self.dims, {k: fn(v) for k, v in self.tensors.items()}, self.kind)


def glorot(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(dims: CellDims, seed, kind: str = "semantic", dtype=np.float64) -> CellParams:
    """Glorot-uniform matrices, unit LN gains, zero LN biases.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    dims.validate(kind)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(param_shapes(dims, kind).items()):
        if name.endswith("ln_gain"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("ln_bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = glorot(rng, shape, dtype)
    return CellParams(dims, tensors, kind)


@dataclass
class DropoutMasks:
    """Per-gate, per-stream inverted-dropout masks, fixed for a whole sequence.

    ``masks[gate][stream]`` has shape (n,) or (batch, n); entries are 0 or 1/keep.
    """

    masks: dict
    keep: dict

    def __getitem__(self, gate):
        return self.masks[gate]


def _keep_rates(p_keep) -> dict[str, float]:
    if isinstance(p_keep, Mapping):
        rates = {s: float(p_keep.get(s, 1.0)) for s in STREAMS}
    else:
        rates = dict.fromkeys(STREAMS, float(p_keep))
    for stream, p in rates.items():
        if not 0.0 < p <= 1.0:
            raise ConfigurationError(f"keep rate for stream {stream!r} must be in (0, 1], got {p}")
    return rates


def sample_masks(p_keep, dims: CellDims, rng: np.random.Generator,
                 batch: int | None = None, dtype=np.float64) -> DropoutMasks:
    """Draw one Bernoulli(p_keep)/p_keep mask per gate and stream.

    ``p_keep`` is a float or a mapping stream -> rate (missing streams keep 1).
    """
    rates = _keep_rates(p_keep)
    sizes = dims.stream_sizes
    masks = {}
    for g in GATES:
        masks[g] = {}
        for stream in STREAMS:
            n = sizes[stream]
            if n == 0:
                continue
            shape = (n,) if batch is None else (batch, n)
            p = rates[stream]
            if p == 1.0:
                masks[g][stream] = np.ones(shape, dtype=dtype)
            else:
                keep = rng.random(shape) < p
                masks[g][stream] = keep.astype(dtype) * (np.asarray(1.0, dtype) / np.asarray(p, dtype))
    return DropoutMasks(masks, rates)


@dataclass
class StepTrace:
    z: T.Tensor
    r: T.Tensor
    h_tilde: T.Tensor
    h: T.Tensor
    x_hat: dict = field(default_factory=dict)
    h_hat: dict = field(default_factory=dict)
    v_hat: dict = field(default_factory=dict)
    masks: DropoutMasks | None = None


def _check_vec(name, x, n):
    shape = np.shape(x.data if isinstance(x, T.Tensor) else x)
    if not shape or shape[-1] != n:
        raise DimensionError(f"{name}: expected trailing size {n}, got shape {shape}")


# ---------------------------------------------------------------- vanilla GRU

def gru_step(x_t, h_prev, params: CellParams) -> StepTrace:
    """One step of the original GRU; the reset gate scales ``U h`` (not ``h``)."""
    d = params.dims
    _check_vec("x_t", x_t, d.n_x)
    _check_vec("h_prev", h_prev, d.n_h)
    z = T.sigmoid(T.add(T.linear(x_t, params["z.W"]), T.linear(h_prev, params["z.U"])))
    r = T.sigmoid(T.add(T.linear(x_t, params["r.W"]), T.linear(h_prev, params["r.U"])))
    h_tilde = T.tanh(T.add(T.linear(x_t, params["h.W"]),
                           T.mul(r, T.linear(h_prev, params["h.U"]))))
    h = _interpolate(z, h_prev, h_tilde)
    return StepTrace(z, r, h_tilde, h)


def _interpolate(z, h_prev, h_tilde):
    one_minus_z = T.sub(np.ones_like(z.data), z)
    return T.add(T.mul(one_minus_z, h_prev), T.mul(z, h_tilde))


# ---------------------------------------------------------------- semantic / VNS

@dataclass
class SequenceContext:
    """Time-invariant pieces of a semantic cell for one (batch of) sequence(s)."""

    params: CellParams
    masks: DropoutMasks | None
    layer_norm: bool
    eps: float
    u_s: dict          # U_{*1}(s ⊙ m_s)
    w_s: dict          # W_{*1}(s ⊙ m_s)
    v_hat: dict        # V_{*1}(s ⊙ m_s) ⊙ V_{*2}(v ⊙ m_v)
    v_term: dict       # V_{*3} v_hat


def prepare_sequence(s, v, params: CellParams, masks: DropoutMasks | None = None,
                     layer_norm: bool = False, eps: float = 1e-5) -> SequenceContext:
    d = params.dims
    _check_vec("s", s, d.n_s)
    visual = d.n_v > 0
    if visual:
        _check_vec("v", v, d.n_v)
    w_s, u_s, v_hat, v_term = {}, {}, {}, {}
    for g in GATES:
        s_in = s if masks is None else T.mul(s, masks[g]["s"])
        w_s[g] = T.linear(s_in, params[f"{g}.W1"])
        u_s[g] = T.linear(s_in, params[f"{g}.U1"])
        if visual:
            v_in = v if masks is None else T.mul(v, masks[g]["v"])
            v_hat[g] = T.mul(T.linear(s_in, params[f"{g}.V1"]), T.linear(v_in, params[f"{g}.V2"]))
            v_term[g] = T.linear(v_hat[g], params[f"{g}.V3"])
    return SequenceContext(params, masks, layer_norm, eps, u_s, w_s, v_hat, v_term)


def semantic_step(x_t, h_prev, ctx: SequenceContext) -> StepTrace:
    p, masks = ctx.params, ctx.masks
    d = p.dims
    _check_vec("x_t", x_t, d.n_x)
    _check_vec("h_prev", h_prev, d.n_h)
    x_hat, h_hat, x_term, h_term = {}, {}, {}, {}
    for g in GATES:
        x_in = x_t if masks is None else T.mul(x_t, masks[g]["x"])
        h_in = h_prev if masks is None else T.mul(h_prev, masks[g]["h"])
        x_hat[g] = T.mul(ctx.w_s[g], T.linear(x_in, p[f"{g}.W2"]))
        h_hat[g] = T.mul(ctx.u_s[g], T.linear(h_in, p[f"{g}.U2"]))
        x_term[g] = T.linear(x_hat[g], p[f"{g}.W3"])
        h_term[g] = T.linear(h_hat[g], p[f"{g}.U3"])

    def pre(g, recurrent):
        acc = T.add(x_term[g], recurrent)
        if g in ctx.v_term:
            acc = T.add(acc, ctx.v_term[g])
        if ctx.layer_norm:
            acc = T.layer_norm(acc, p[f"{g}.ln_gain"], p[f"{g}.ln_bias"], ctx.eps)
        return acc

    z = T.sigmoid(pre("z", h_term["z"]))
    r = T.sigmoid(pre("r", h_term["r"]))
    h_tilde = T.tanh(pre("h", T.mul(r, h_term["h"])))
    h = _interpolate(z, h_prev, h_tilde)
    return StepTrace(z, r, h_tilde, h, x_hat, h_hat, ctx.v_hat, masks)


def semantic_gru_step(x_t, h_prev, s, v, params: CellParams) -> StepTrace:
    """Semantic GRU: every weight is factorised through the semantic vector ``s``."""
    return semantic_step(x_t, h_prev, prepare_sequence(s, v, params))


def vns_gru_step(x_t, h_prev, s, v, params: CellParams, masks: DropoutMasks | None,
                 layer_norm: bool = True, eps: float = 1e-5) -> StepTrace:
    """Semantic GRU with time-invariant dropout masks and layer-normalised gates.

    ``layer_norm=False`` swaps LN for the identity (used to check the reduction
    to the plain semantic cell).
    """
    return semantic_step(x_t, h_prev, prepare_sequence(s, v, params, masks, layer_norm, eps))


def stacked_forward(x_seq, s, v, layer1: CellParams, layer2: CellParams,
                    masks1: DropoutMasks | None = None, masks2: DropoutMasks | None = None,
                    h0=None, layer_norm: bool = True, eps: float = 1e-5,
                    return_traces: bool = False):
    """Run two VNS-GRU layers over ``x_seq``; returns layer-2 hidden states.

    Layer 2 reads layer-1 hidden states; both see the same ``s`` (and ``v`` if
    the layer has visual weights). ``h0`` defaults to zeros for both layers.
    """
    if layer2.dims.n_x != layer1.dims.n_h:
        raise ConfigurationError(
            f"layer 2 input size {layer2.dims.n_x} != layer 1 hidden size {layer1.dims.n_h}")
    if layer2.dims.n_s != layer1.dims.n_s:
        raise ConfigurationError("both layers must share the semantic size n_s")
    ctx1 = prepare_sequence(s, v, layer1, masks1, layer_norm, eps)
    ctx2 = prepare_sequence(s, v, layer2, masks2, layer_norm, eps)
    batch_shape = np.shape(s.data if isinstance(s, T.Tensor) else s)[:-1]
    dtype = np.asarray(layer1["z.W1"]).dtype
    if h0 is None:
        h1 = np.zeros(batch_shape + (layer1.dims.n_h,), dtype=dtype)
        h2 = np.zeros(batch_shape + (layer2.dims.n_h,), dtype=dtype)
    else:
        h1, h2 = h0
    outputs, traces = [], []
    for x_t in x_seq:
        t1 = semantic_step(x_t, h1, ctx1)
        t2 = semantic_step(t1.h, h2, ctx2)
        h1, h2 = t1.h, t2.h
        outputs.append(h2)
        traces.append((t1, t2))
    return (outputs, traces) if return_traces else outputs
