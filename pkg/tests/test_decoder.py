import itertools
import math

import numpy as np
import pytest

from vnsgru import tensor as T
from vnsgru.decoder import DecoderConfig, annotation_losses, beam_decode, beam_search, \
    greedy_decode, init_decoder, log_softmax_np, sequence_log_prob, teacher_forced_forward
from vnsgru.errors import ConfigurationError, VocabularyError
from vnsgru.training import AdamState, adam_step

from suites import TOY_DECODER, decoder_loss_case

CFG = DecoderConfig(vocab_size=9, n_x=5, n_h=6, n_f=3, n_s=4, n_v=3)


def _features(seed, cfg=CFG):
    rng = np.random.default_rng(seed)
    return rng.random(cfg.n_s), rng.random(cfg.n_v)


def _rigged(cfg, favourite, margin=50.0):
    """Output layer ignores the state and always prefers ``favourite``."""
    p = init_decoder(cfg, 0, dtype=np.float64)
    p["out.W"] = np.zeros_like(p["out.W"])
    p["out.b"] = np.zeros(cfg.vocab_size)
    p["out.b"][favourite] = margin
    return p


def test_specials_must_be_distinct():
    with pytest.raises(ConfigurationError):
        DecoderConfig(vocab_size=9, n_x=2, n_h=2, n_f=1, n_s=1, n_v=1, eos=1)
    with pytest.raises(ConfigurationError):
        DecoderConfig(vocab_size=3, n_x=2, n_h=2, n_f=1, n_s=1, n_v=1)


def test_teacher_forced_shapes_and_normalisation():
    p = init_decoder(CFG, 1, dtype=np.float64)
    s, v = _features(1)
    ann = [4, 5, 6, 2]
    dist = teacher_forced_forward(s, v, ann, p, CFG)
    assert dist.shape == (4, CFG.vocab_size)
    np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(dist >= 0)
    assert np.array_equal(dist, teacher_forced_forward(s, v, ann, p, CFG))


def test_uniform_logits_give_log_vocab_loss():
    p = init_decoder(CFG, 2, dtype=np.float64)
    p["out.W"] = np.zeros_like(p["out.W"])
    s, v = _features(2)
    dist = teacher_forced_forward(s, v, [4, 7, 2], p, CFG)
    np.testing.assert_allclose(dist, 1.0 / CFG.vocab_size, rtol=1e-12)
    loss = annotation_losses(p, CFG, s[None], v[None], [[4, 7, 2]]).data[0]
    assert loss == pytest.approx(math.log(CFG.vocab_size), rel=1e-12)


def test_out_of_vocabulary_token():
    p = init_decoder(CFG, 0, dtype=np.float64)
    s, v = _features(0)
    with pytest.raises(VocabularyError):
        teacher_forced_forward(s, v, [4, 99, 2], p, CFG)


def test_greedy_always_eos_gives_empty_caption():
    s, v = _features(0)
    assert greedy_decode(_rigged(CFG, CFG.eos), CFG, s, v, max_len=10) == [[]]


def test_greedy_respects_max_len():
    s, v = _features(0)
    assert greedy_decode(_rigged(CFG, 5), CFG, s, v, max_len=3) == [[5, 5, 5]]


def test_generation_never_emits_unk_pad_or_bos():
    for tok in (CFG.unk, CFG.pad, CFG.bos):
        p = _rigged(CFG, tok)
        s, v = _features(0)
        out = greedy_decode(p, CFG, s, v, max_len=4)[0]
        assert not {CFG.unk, CFG.pad, CFG.bos} & set(out)


def test_overfit_single_annotation_is_reproduced():
    cfg = DecoderConfig(vocab_size=9, n_x=8, n_h=12, n_f=4, n_s=4, n_v=3)
    p = init_decoder(cfg, 3, dtype=np.float64)
    s, v = _features(3, cfg)
    target = [5, 7, 4, 8, 2]
    state = AdamState.zeros(p)
    for _ in range(150):
        leaves = {k: T.Tensor(a, requires_grad=True) for k, a in p.items()}
        with T.GradTape() as tape:
            loss = T.total(annotation_losses(leaves, cfg, s[None], v[None], [target]))
        grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        p, state = adam_step(p, grads, state, 0.02)
    assert greedy_decode(p, cfg, s, v, max_len=10) == [target[:-1]]


@pytest.mark.parametrize("seed", range(6))
def test_beam_width_one_is_greedy(seed):
    p = init_decoder(CFG, seed, dtype=np.float64)
    p["out.W"] *= 5.0
    s, v = _features(seed)
    assert beam_decode(p, CFG, s, v, max_len=8, beam=1) == greedy_decode(p, CFG, s, v, 8)[0]


@pytest.mark.parametrize("seed", range(6))
def test_beam_score_not_below_greedy(seed):
    p = init_decoder(CFG, seed, dtype=np.float64)
    p["out.W"] *= 5.0
    s, v = _features(seed)

    def normalised(tokens, max_len=8):
        finished = len(tokens) < max_len
        lp = sequence_log_prob(p, CFG, s, v, tokens, finished)
        return lp / (len(tokens) + finished)

    g = greedy_decode(p, CFG, s, v, 8)[0]
    b = beam_decode(p, CFG, s, v, max_len=8, beam=5)
    assert normalised(b) >= normalised(g) - 1e-12


def test_beam_width_zero_rejected():
    s, v = _features(0)
    with pytest.raises(ConfigurationError):
        beam_decode(init_decoder(CFG, 0), CFG, s, v, max_len=3, beam=0)


# ---------------------------------------------------------------- enumerable toy search

BOS, EOS = 0, 1
# next-token log-probs for a 4-token toy language {bos, eos, a, b}; a greedy
# first step ("a") leads to a poor continuation, "b" to a confident one.
TABLE = {
    BOS: [-np.inf, math.log(0.1), math.log(0.5), math.log(0.4)],
    2: [-np.inf, math.log(0.3), math.log(0.35), math.log(0.35)],
    3: [-np.inf, math.log(0.9), math.log(0.05), math.log(0.05)],
}


def toy_step(state, token):
    return np.array(TABLE[token]), state


def enumerate_best(max_len):
    best = None
    for length in range(1, max_len + 1):
        for body in itertools.product((2, 3), repeat=length - 1):
            for last in (EOS, 2, 3):
                if length < max_len and last != EOS:
                    continue
                seq = list(body) + [last]
                prev, total = BOS, 0.0
                for tok in seq:
                    total += TABLE[prev][tok]
                    prev = tok
                score = total / len(seq)
                out = seq[:-1] if last == EOS else seq
                if best is None or score > best[0]:
                    best = (score, out)
    return best


def test_beam_matches_exhaustive_enumeration():
    score, toks = enumerate_best(max_len=2)
    assert toks == [3]
    got, got_score = beam_search(toy_step, None, BOS, EOS, max_len=2, width=4)
    assert got == toks and got_score == pytest.approx(score, abs=1e-12)
    greedy, _ = beam_search(toy_step, None, BOS, EOS, max_len=2, width=1)
    assert greedy != toks


def test_log_softmax_np_handles_masked_entries():
    out = log_softmax_np(np.array([-np.inf, 0.0, 0.0]))
    assert out[0] == -np.inf
    np.testing.assert_allclose(out[1:], math.log(0.5))


def test_decoder_gradient_full_check():
    f, params = decoder_loss_case(0)
    assert T.finite_diff_check(f, params) < 1e-4
    assert TOY_DECODER.vocab_size == 7
