import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnsgru import tensor as T
from vnsgru.data import SyntheticSpec, build_vocabulary, generate_synthetic_dataset
from vnsgru.decoder import DecoderConfig, annotation_losses, init_decoder
from vnsgru.errors import ConfigurationError, DimensionError, DomainError, OptimizerError
from vnsgru.selection import SelectionState
from vnsgru.training import WARNINGS, AdamState, ProfessionalBatch, Trainer, TrainConfig, \
    adam_step, clip_global_norm, decayed_lr, global_norm, per_annotation_loss, \
    professional_weights, sampling_size, weighted_batch_loss

# ---------------------------------------------------------------- per-annotation loss


def test_loss_perfect_and_uniform():
    assert per_annotation_loss(np.eye(4)[[1, 2]], [1, 2]) == 0.0
    assert per_annotation_loss(np.full((3, 4), 0.25), [0, 1, 3]) == pytest.approx(math.log(4))


def test_loss_hand_set_two_steps():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    expected = -(math.log(0.7) + math.log(0.6)) / 2
    assert per_annotation_loss(p, [0, 2]) == pytest.approx(expected, abs=1e-15)
    one_hot = np.array([[1, 0, 0], [0, 0, 1]])
    assert per_annotation_loss(p, one_hot) == pytest.approx(expected, abs=1e-15)


def test_loss_clamps_zero_probability():
    before = WARNINGS["clamped_log"]
    value = per_annotation_loss(np.array([[1.0, 0.0]]), [1])
    assert value == pytest.approx(-math.log(1e-12))
    assert WARNINGS["clamped_log"] == before + 1


def test_loss_length_mismatch():
    with pytest.raises(DimensionError):
        per_annotation_loss(np.full((2, 3), 1 / 3), [0, 1, 2])


# ---------------------------------------------------------------- professional weights

def test_weights_examples():
    assert professional_weights([3.0], [7], 5.0, 0.3).tolist() == [1.0]
    np.testing.assert_allclose(professional_weights([2.0] * 4, [3, 5, 8, 9], 6.0, 1.0), 0.25)
    beta = professional_weights([1.0, 2.0], [5, 7], 6.0, 0.5)
    e1, e2 = math.exp(-1), math.exp(-2)
    oracle = [0.5 * e1 / (e1 + e2) + 0.25, 0.5 * e2 / (e1 + e2) + 0.25]
    np.testing.assert_allclose(beta, oracle, rtol=0, atol=1e-15)
    np.testing.assert_allclose(beta, [0.61553, 0.38447], atol=1e-5)


def test_weights_errors():
    with pytest.raises(DomainError):
        professional_weights([], [], 1.0, 0.5)
    with pytest.raises(DomainError):
        professional_weights([1.0], [1], 1.0, 1.5)


vectors = st.integers(1, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 20), min_size=n, max_size=n),
    st.lists(st.integers(1, 30), min_size=n, max_size=n)))


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(1, 30), st.floats(0, 1))
def test_weights_are_a_distribution(data, mean_len, gamma):
    losses, lengths = data
    beta = professional_weights(losses, lengths, mean_len, gamma)
    assert abs(beta.sum() - 1) <= 1e-9
    assert np.all(beta > 0) and np.all(beta < 1) or len(beta) == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2000), min_size=2, max_size=8, unique=True), st.integers(1, 30),
       st.floats(1, 30), st.floats(0.01, 1))
def test_weights_decrease_with_loss_at_equal_length(cents, length, mean_len, gamma):
    losses = np.array(cents) / 100.0
    beta = professional_weights(losses, [length] * len(losses), mean_len, gamma)
    order = np.argsort(losses)
    assert np.all(np.diff(beta[order]) < 0)


def test_gamma_extremes():
    rng = np.random.default_rng(0)
    lengths = rng.integers(3, 12, size=5)
    a = professional_weights(rng.random(5) * 5, lengths, 7.0, 0.0)
    b = professional_weights(rng.random(5) * 5, lengths, 7.0, 0.0)
    np.testing.assert_array_equal(a, b)
    losses = rng.random(5) * 5
    c = professional_weights(losses, rng.integers(3, 12, size=5), 7.0, 1.0)
    d = professional_weights(losses, rng.integers(3, 12, size=5), 7.0, 1.0)
    np.testing.assert_array_equal(c, d)


# ---------------------------------------------------------------- weighted batch loss

def _batch(losses, betas):
    losses, betas = np.asarray(losses, float), np.asarray(betas, float)
    n = losses.shape[1]
    return ProfessionalBatch([[[2]] * n for _ in range(len(losses))], np.ones_like(losses),
                             losses, betas, 1.0)


def test_weighted_loss_examples():
    losses = [[1.0, 3.0], [2.0, 6.0]]
    assert weighted_batch_loss(_batch(losses, [[0.5, 0.5]] * 2)) == pytest.approx((2 + 4) / 2)
    assert weighted_batch_loss(_batch([[0.0, 0.0]], [[0.3, 0.7]])) == 0.0
    hand = (0.2 * 1 + 0.8 * 3 + 0.6 * 2 + 0.4 * 6) / 2
    assert weighted_batch_loss(_batch(losses, [[0.2, 0.8], [0.6, 0.4]])) == pytest.approx(hand)
    with pytest.raises(DimensionError):
        weighted_batch_loss(_batch(losses, [[1.0], [1.0]]))


def test_weighted_loss_gradient_with_constant_weights():
    cfg = DecoderConfig(vocab_size=7, n_x=4, n_h=6, n_f=3, n_s=4, n_v=5)
    rng = np.random.default_rng(1)
    params = init_decoder(cfg, rng, dtype=np.float64)
    s, v = rng.random((4, 4)), rng.random((4, 5))
    anns = [[4, 5, 2], [6, 2], [5, 5, 4, 2], [4, 2]]
    betas = np.array([0.7, 0.3, 0.45, 0.55]) / 2

    def f(p):
        return T.dot(annotation_losses(p, cfg, s, v, anns), betas)

    assert T.finite_diff_check(f, params, coords=4) < 1e-4


# ---------------------------------------------------------------- schedules

def test_sampling_size_examples():
    cfg = TrainConfig(epoch_total=100, epoch_sw=16, schedule="fixed", sample_size=16)
    assert sampling_size(10, cfg) == 1
    assert sampling_size(20, cfg) == 16
    assert sampling_size(20, cfg, available=8) == 8
    exp = TrainConfig(epoch_total=100, epoch_sw=16, schedule="exponential")
    assert [sampling_size(e, exp) for e in (32, 79)] == [4, 16]
    rel = TrainConfig(epoch_total=100, epoch_sw=10, schedule="exponential_relative", sigma=5)
    assert [sampling_size(e, rel) for e in (9, 10, 14, 15, 25)] == [1, 1, 1, 2, 8]


def test_decayed_lr_examples():
    cfg = TrainConfig()
    assert decayed_lr(0, cfg) == 2e-4
    assert decayed_lr(1000, cfg) == pytest.approx(1.722e-4, rel=1e-12)
    assert decayed_lr(2500, cfg) == pytest.approx(2e-4 * 0.861 ** 2, rel=1e-12)


@pytest.mark.parametrize("bad", [dict(epoch_sw=60), dict(gamma=1.2), dict(sample_size=0),
                                 dict(clip=0.0), dict(schedule="cosine"), dict(keep_h=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- optimiser

def test_adam_zero_gradient_and_first_step():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    p = {"w": np.array(0.5)}
    new, state = adam_step(p, {"w": np.array(1.0)}, AdamState.zeros(p), 1e-3)
    assert new["w"] == pytest.approx(0.5 - 1e-3, abs=1e-10)
    assert state.t == 1


def test_adam_deterministic_and_rejects_nan():
    rng = np.random.default_rng(0)
    p = {"w": rng.standard_normal(3)}
    grads = [{"w": rng.standard_normal(3)} for _ in range(4)]

    def run():
        q, st_ = p, AdamState.zeros(p)
        for g in grads:
            q, st_ = adam_step(q, g, st_, 0.01)
        return q["w"]

    np.testing.assert_array_equal(run(), run())
    with pytest.raises(OptimizerError, match="'w'"):
        adam_step(p, {"w": np.array([np.nan, 0, 0])}, AdamState.zeros(p), 0.01)


def test_clip_examples():
    g = {"a": np.array([48.0, 64.0])}       # norm 80
    clipped, norm = clip_global_norm(g, 40.0)
    assert norm == 80.0
    np.testing.assert_array_equal(clipped["a"], [24.0, 32.0])
    small = {"a": np.array([0.6, 0.8])}
    np.testing.assert_array_equal(clip_global_norm(small, 40.0)[0]["a"], small["a"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_clip_norm_and_direction(seed, scale):
    rng = np.random.default_rng(seed)
    g = {"a": scale * rng.standard_normal((3, 4)), "b": scale * rng.standard_normal(5)}
    out, norm = clip_global_norm(g, 40.0)
    assert global_norm(out) == pytest.approx(min(norm, 40.0), abs=1e-9)
    flat_in = np.concatenate([g["a"].ravel(), g["b"]])
    flat_out = np.concatenate([out["a"].ravel(), out["b"]])
    cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
    assert abs(cos - 1) <= 1e-12


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def synthetic():
    ds = generate_synthetic_dataset(SyntheticSpec(), 7)
    train = ds.split("train")
    vocab = build_vocabulary([a for r in train for a in r.annotations])
    return ds, train, ds.split("validation"), vocab


def _model(ds, vocab, n_h=32, **kw):
    return DecoderConfig(len(vocab), n_h, n_h, 8, ds.manifest.n_s, ds.manifest.n_v, **kw)


def _cfg(**kw):
    base = dict(lr=5e-3, batch_size=16, decay_interval=100, decay_factor=0.9, keep_h=0.8,
                keep_x=0.8, sample_size=8, seed=0)
    return TrainConfig(**{**base, **kw})


# first five epoch losses of the pinned run below, recorded once
FROZEN_TRACE = [3.798828673362732, 3.322488045692444, 2.957702660560608, 2.766011095046997,
                2.6122260093688965]


def test_loss_trace_decreases_over_first_epochs(synthetic):
    ds, train, _, vocab = synthetic
    tr = Trainer(train, [], vocab, _model(ds, vocab), _cfg(epoch_total=5, epoch_sw=5))
    tr.run(SelectionState.default())
    losses = [r.loss for r in tr.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    np.testing.assert_allclose(losses, FROZEN_TRACE, rtol=1e-4)


@pytest.mark.slow
def test_toy_decoder_reaches_low_loss(synthetic):
    ds, train, _, vocab = synthetic
    tr = Trainer(train, [], vocab, _model(ds, vocab, n_h=64),
                 _cfg(epoch_total=30, epoch_sw=30, lr=1e-2, keep_h=1.0, keep_x=1.0))
    tr.run(SelectionState.default())
    assert tr.mean_loss(train) < 0.3


def test_pure_teacher_forcing_when_switch_is_at_the_end(synthetic):
    ds, train, val, vocab = synthetic
    tr = Trainer(train, val, vocab, _model(ds, vocab), _cfg(epoch_total=2, epoch_sw=2))
    tr.run(SelectionState.default())
    assert [r.phase for r in tr.history] == ["general", "general"]
    assert [r.n for r in tr.history] == [1, 1]


def test_single_annotation_professional_step_has_unit_weights(synthetic):
    ds, train, _, vocab = synthetic
    tr = Trainer(train, [], vocab, _model(ds, vocab), _cfg(epoch_total=1, epoch_sw=0, gamma=1.0))
    batch = tr.professional_step([0, 1, 2], 1)
    np.testing.assert_array_equal(batch.betas, 1.0)
    assert weighted_batch_loss(batch) == pytest.approx(batch.losses.mean())


def test_professional_batches_are_distributions(synthetic):
    ds, train, _, vocab = synthetic
    tr = Trainer(train, [], vocab, _model(ds, vocab), _cfg(epoch_total=1, epoch_sw=0))
    batch = tr.professional_step(list(range(6)), 5)
    batch.validate()
    np.testing.assert_allclose(batch.betas.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((batch.betas > 0) & (batch.betas < 1))
    assert batch.mean_len == pytest.approx(np.mean([len(a) for r in train for a in r.annotations]))


def test_empty_training_split_rejected(synthetic):
    ds, _, val, vocab = synthetic
    with pytest.raises(ConfigurationError):
        Trainer([], val, vocab, _model(ds, vocab), _cfg())


def test_training_is_deterministic(synthetic):
    ds, train, val, vocab = synthetic
    runs = []
    for _ in range(2):
        tr = Trainer(train, val, vocab, _model(ds, vocab), _cfg(epoch_total=3, epoch_sw=1))
        state = tr.run(SelectionState.default())
        runs.append((tr.params, [r.line(state.metrics) for r in tr.history]))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert np.array_equal(runs[0][0][k], runs[1][0][k])
