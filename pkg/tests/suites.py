"""Gradient-check workloads shared by the unit tests and the acceptance run."""

import numpy as np

from vnsgru import tensor as T
from vnsgru.cells import GATES, CellDims, CellParams
from vnsgru.decoder import DecoderConfig, annotation_losses, init_decoder, sample_decoder_masks

# Five candidates with two references each; expected values below were
# produced once by the brute-force functions in oracles.py.
TOY_CANDIDATES = ["a man is playing a guitar", "a woman slices an onion", "the cat sat",
                  "two dogs run on the grass", "a boy kicks a ball"]
TOY_REFERENCES = [["a man is playing guitar", "a person plays a guitar"],
                  ["a woman is slicing an onion", "someone cuts an onion"],
                  ["the cat sat on the mat", "a cat is sitting"],
                  ["two dogs are running on grass", "dogs play on the grass"],
                  ["a boy is kicking a ball", "a child kicks the ball around"]]
TOY_BLEU = 0.35535913090921156
TOY_ROUGE = 0.7447174774012153
TOY_CIDER = 2.8783557483579876
# (matches, chunks, candidate length, reference length) per reference, counted by hand
TOY_METEOR_COUNTS = [[(5, 2, 6, 5), (3, 2, 6, 5)], [(4, 2, 5, 6), (2, 1, 5, 4)],
                     [(3, 1, 3, 6), (1, 1, 3, 4)], [(4, 3, 6, 6), (4, 2, 6, 5)],
                     [(4, 2, 5, 6), (3, 3, 5, 6)]]
TOY_METEOR = 0.6944138733895779

# |V|=7, n_x=4, n_h=6, n_f=3, n_s=4, n_v=5
TOY_DECODER = DecoderConfig(vocab_size=7, n_x=4, n_h=6, n_f=3, n_s=4, n_v=5)


def primitive_cases(seed):
    """(name, f, params) for every differentiable primitive on random shapes up to 8x8."""
    rng = np.random.default_rng(seed)
    m, n, k = (int(d) for d in rng.integers(1, 9, size=3))
    n2 = max(2, n)
    r = rng.standard_normal
    ids = rng.integers(0, m, size=k)
    targets = rng.integers(0, n2, size=(m, 3))
    weights = rng.random((m, 3))
    # fixed random projections turn every output into a scalar
    w_mk, w_km, w_n, w_kn2, w_kn, w_m = r((m, k)), r((k, m)), r(n), r((k, n2)), r((k, n)), r(m)
    return [
        ("matmul", lambda p: T.dot(T.matmul(p["a"], p["b"]), w_mk),
         {"a": r((m, n)), "b": r((n, k))}),
        ("linear", lambda p: T.dot(T.linear(p["x"], p["w"], p["b"]), w_km),
         {"x": r((k, n)), "w": r((m, n)), "b": r(m)}),
        ("add_bias", lambda p: T.dot(T.add_bias(p["x"], p["b"]), w_km),
         {"x": r((k, m)), "b": r(m)}),
        ("add", lambda p: T.dot(T.add(p["a"], p["b"]), w_n), {"a": r(n), "b": r(n)}),
        ("sub", lambda p: T.dot(T.sub(p["a"], p["b"]), w_n), {"a": r(n), "b": r(n)}),
        ("mul", lambda p: T.dot(T.mul(p["a"], p["b"]), w_n), {"a": r(n), "b": r(n)}),
        ("sigmoid", lambda p: T.dot(T.sigmoid(p["a"]), w_n), {"a": r(n)}),
        ("tanh", lambda p: T.dot(T.tanh(p["a"]), w_n), {"a": r(n)}),
        ("layer_norm", lambda p: T.dot(T.layer_norm(p["x"], p["g"], p["b"]), w_kn2),
         {"x": r((k, n2)), "g": r(n2), "b": r(n2)}),
        ("softmax", lambda p: T.dot(T.softmax(p["x"]), w_kn2), {"x": r((k, n2))}),
        ("log_softmax", lambda p: T.dot(T.log_softmax(p["x"]), w_kn2), {"x": r((k, n2))}),
        ("embedding", lambda p: T.dot(T.embedding(p["e"], ids), w_kn), {"e": r((m, n))}),
        ("sequence_nll",
         lambda p: T.dot(T.sequence_nll([p["l0"], p["l1"], p["l2"]], targets, weights), w_m),
         {"l0": r((m, n2)), "l1": r((m, n2)), "l2": r((m, n2))}),
    ]


def primitive_gradient_errors(seed):
    return {name: T.finite_diff_check(f, params) for name, f, params in primitive_cases(seed)}


def decoder_loss_case(seed, keep=0.7, config=TOY_DECODER, steps=3, batch=2):
    """Mean cross entropy of the two-layer decoder on random T=3 annotations, dropout on."""
    rng = np.random.default_rng(seed)
    params = init_decoder(config, rng, dtype=np.float64)
    # perturb LN gains/biases and the output bias away from their init values
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    s = rng.random((batch, config.n_s))
    v = rng.random((batch, config.n_v))
    anns = [[int(t) for t in rng.integers(4, config.vocab_size, size=steps - 1)] + [config.eos]
            for _ in range(batch)]
    masks = sample_decoder_masks(config, keep, rng, batch, np.float64)
    weights = np.full(batch, 1.0 / batch)

    def f(p):
        return T.dot(annotation_losses(p, config, s, v, anns, masks), weights)

    return f, params


def rig_unit_semantics(params: CellParams, s_index: int = 0) -> CellParams:
    """Make W1 s = U1 s = 1 for the one-hot s = e_{s_index}."""
    t = dict(params.tensors)
    for g in GATES:
        for name in ("W1", "U1"):
            m = np.zeros_like(t[f"{g}.{name}"])
            m[:, s_index] = 1.0
            t[f"{g}.{name}"] = m
    return CellParams(params.dims, t, params.kind)


def composite_gru(params: CellParams) -> CellParams:
    t = {}
    for g in GATES:
        t[f"{g}.W"] = params[f"{g}.W3"] @ params[f"{g}.W2"]
        t[f"{g}.U"] = params[f"{g}.U3"] @ params[f"{g}.U2"]
    return CellParams(CellDims(params.dims.n_x, params.dims.n_h), t, "gru")
