import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrec import channel as ch
from fedrec import nn
from fedrec.nn import AdamState, LocalTrainer, ModelParams, TrainConfig
from fedrec.rng import stream


def random_model(rng, dims=(2, 16), scale=1.0):
    return ModelParams(dims, scale * rng.normal(size=nn.param_count(dims)))


def central_fd(params, msgs, feats, h=1e-5):
    out = np.empty(params.size)
    for i in range(params.size):
        p, m = params.copy(), params.copy()
        p.flat[i] += h
        m.flat[i] -= h
        out[i] = (nn.loss(p, msgs, feats) - nn.loss(m, msgs, feats)) / (2 * h)
    return out


# -- parameters ---------------------------------------------------------------------------

def test_default_model_has_48_parameters():
    p = nn.init_params(stream(0, "init", 0))
    assert p.size == 48 == nn.param_count((2, 16))
    W, b = p.layers()[0]
    assert W.shape == (2, 16) and b.shape == (16,)
    np.testing.assert_array_equal(b, 0)
    lim = math.sqrt(6 / 18)
    assert np.all(np.abs(W) <= lim)


def test_init_is_deterministic_and_layout_is_weights_then_bias():
    a = nn.init_params(stream(1, "init", 0), (2, 8, 16))
    b = nn.init_params(stream(1, "init", 0), (2, 8, 16))
    np.testing.assert_array_equal(a.flat, b.flat)
    assert a.size == 2 * 8 + 8 + 8 * 16 + 16
    (W1, b1), (W2, b2) = a.layers()
    assert np.shares_memory(W1, a.flat) and W1.base is not None
    np.testing.assert_array_equal(a.flat[:16], W1.ravel())
    np.testing.assert_array_equal(a.flat[16:24], b1)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams((2, 16), np.zeros(47))
    with pytest.raises(ValueError):
        ModelParams((2,), np.zeros(0))


# -- forward / loss ---------------------------------------------------------------------

def test_zero_model_is_uniform():
    p = ModelParams((2, 16), np.zeros(48))
    f = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(nn.forward(p, f), 1 / 16)
    assert nn.predict(p, f[0]) == 0
    assert math.isclose(nn.loss(p, np.arange(10), f), math.log(16), rel_tol=1e-15)


def test_softmax_shift_invariance_and_normalisation():
    rng = np.random.default_rng(1)
    p = random_model(rng, scale=3.0)
    f = rng.normal(size=(100, 2)) * 10
    q = p.copy()
    q.layers()[0][1][...] += 123.0
    np.testing.assert_allclose(nn.forward(p, f), nn.forward(q, f), atol=1e-12)
    out = nn.forward(p, f)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out > 0)


def test_softmax_survives_huge_logits():
    p = ModelParams((2, 16), np.concatenate([np.full(32, 1e3), np.zeros(16)]))
    out = nn.forward(p, np.array([[50.0, 50.0]]))
    assert np.all(np.isfinite(out))
    assert np.isfinite(nn.loss(p, [3], [[50.0, 50.0]]))


def test_predict_is_argmax_of_forward():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_model(rng)
        f = rng.normal(size=(50, 2))
        np.testing.assert_array_equal(nn.predict(p, f), np.argmax(nn.forward(p, f), axis=1))


def test_single_sample_loss_is_minus_log_prob():
    rng = np.random.default_rng(3)
    p = random_model(rng)
    f = rng.normal(size=2)
    assert math.isclose(nn.loss(p, 5, f), -math.log(nn.forward(p, f)[5]), rel_tol=1e-12)


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        nn.loss(ModelParams((2, 16), np.zeros(48)), [], np.zeros((0, 2)))


# -- gradient -----------------------------------------------------------------------------

def test_gradient_at_zero_is_softmax_minus_onehot():
    p = ModelParams((2, 16), np.zeros(48))
    f = np.array([[0.7, -1.2]])
    g = nn.grad(p, [4], f)
    _, gb = p.layers(g)[0]
    want = np.full(16, 1 / 16)
    want[4] -= 1
    np.testing.assert_allclose(gb, want, atol=1e-15)
    gW, _ = p.layers(g)[0]
    np.testing.assert_allclose(gW, np.outer(f[0], want), atol=1e-15)


@pytest.mark.parametrize("dims", [(2, 16), (2, 8, 16)])
def test_gradient_matches_finite_differences(dims):
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = random_model(rng, dims)
        n = rng.integers(1, 30)
        f = rng.normal(size=(n, 2)) * 2
        y = rng.integers(0, 16, n)
        g, fd = nn.grad(p, y, f), central_fd(p, y, f)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_batch_gradient_is_mean_of_sample_gradients():
    rng = np.random.default_rng(5)
    p = random_model(rng)
    f = rng.normal(size=(7, 2))
    y = rng.integers(0, 16, 7)
    per = np.mean([nn.grad(p, y[i:i + 1], f[i:i + 1]) for i in range(7)], axis=0)
    np.testing.assert_allclose(nn.grad(p, y, f), per, atol=1e-12)


# -- optimisers --------------------------------------------------------------------------

def test_zero_gradient_is_a_fixed_point():
    theta = np.arange(48.0)
    np.testing.assert_array_equal(nn.sgd_step(theta, np.zeros(48), 0.1), theta)
    _, t2 = nn.adam_step(AdamState.zeros(48), theta, np.zeros(48))
    np.testing.assert_array_equal(t2, theta)


def test_sgd_with_unit_step_on_theta_gives_zero():
    theta = np.random.default_rng(6).normal(size=48)
    np.testing.assert_array_equal(nn.sgd_step(theta, theta, 1.0), 0)


@settings(max_examples=30)
@given(st.floats(0.1, 1e6))
def test_adam_first_step_has_size_lr(scale):
    # bias correction makes the first step lr * g / (|g| + eps)
    rng = np.random.default_rng(7)
    g = rng.choice([-1.0, 1.0], 48) * rng.uniform(0.5, 1.5, 48) * scale
    state, t2 = nn.adam_step(AdamState.zeros(48, lr=1e-3), np.zeros(48), g)
    np.testing.assert_allclose(t2, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(np.abs(t2), 1e-3, rtol=1e-6)
    assert state.t == 1


def test_optimisers_reject_shape_mismatch():
    with pytest.raises(ValueError):
        nn.sgd_step(np.zeros(48), np.zeros(47), 0.1)
    with pytest.raises(ValueError):
        nn.adam_step(AdamState.zeros(48), np.zeros(48), np.zeros(47))


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(epochs=0), dict(optimizer="rmsprop"), dict(lr=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training ------------------------------------------------------------------------------

def pilots(n, snr=10.0, seed=0):
    c = ch.Constellation.for_snr(snr)
    return ch.gen_dataset(0, 1.0, n, c, stream(seed, "data", 0), stream(seed, "noise", 0))


def test_training_is_deterministic():
    d = pilots(500)
    p0 = nn.init_params(stream(0, "init", 0))
    cfg = TrainConfig(epochs=3, shuffle_seed=9)
    np.testing.assert_array_equal(nn.local_train(p0, d, cfg).flat, nn.local_train(p0, d, cfg).flat)


def test_training_in_pieces_equals_training_at_once():
    d = pilots(300)
    p0 = nn.init_params(stream(0, "init", 0))
    cfg = TrainConfig(epochs=5, shuffle_seed=3)
    whole = nn.local_train(p0, d, cfg)
    tr = LocalTrainer.from_data(p0, d, cfg)
    tr.run(2)
    np.testing.assert_array_equal(tr.run(3).flat, whole.flat)


def test_training_leaves_input_untouched_and_rejects_empty():
    p0 = nn.init_params(stream(0, "init", 0))
    before = p0.flat.copy()
    nn.local_train(p0, pilots(100), TrainConfig(epochs=1))
    np.testing.assert_array_equal(p0.flat, before)
    with pytest.raises(ValueError):
        nn.local_train(p0, (np.zeros(0, int), np.zeros((0, 2))), TrainConfig())


def test_converged_single_sample_barely_moves():
    # a sample fit with overwhelming margin has a vanishing gradient
    p = ModelParams((2, 16), np.zeros(48))
    p.layers()[0][1][3] = 60.0
    out = nn.local_train(p, (np.array([3]), np.array([[0.1, 0.2]])), TrainConfig(optimizer="sgd", epochs=1))
    assert np.linalg.norm(out.flat - p.flat) < 1e-8


def test_separable_toy_problem_is_learned_perfectly():
    f = np.array([[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]])
    y = np.array([0, 1, 2, 3])
    p0 = nn.init_params(stream(0, "init", 0), (2, 4))
    p = nn.local_train(p0, (np.tile(y, 25), np.tile(f, (25, 1))), TrainConfig(lr=0.05, batch_size=4, epochs=50))
    np.testing.assert_array_equal(nn.predict(p, f), y)


def test_loss_decreases_over_training():
    d = pilots(4000)
    p0 = nn.init_params(stream(0, "init", 0))
    p = nn.local_train(p0, d, TrainConfig(epochs=25))
    assert nn.loss(p, d.msgs, d.features()) < nn.loss(p0, d.msgs, d.features())


def test_sgd_training_decreases_loss():
    d = pilots(2000)
    p0 = nn.init_params(stream(0, "init", 0))
    p = nn.local_train(p0, d, TrainConfig(optimizer="sgd", lr=0.05, sgd_decay=1e-3, epochs=5))
    assert nn.loss(p, d.msgs, d.features()) < nn.loss(p0, d.msgs, d.features())


@pytest.mark.slow
def test_trained_detector_accuracy_at_10db():
    d = pilots(20_000)
    held = pilots(50_000, seed=1)
    p = nn.local_train(nn.init_params(stream(0, "init", 0)), d, TrainConfig(epochs=25))
    assert np.mean(nn.predict(p, held.features()) == held.msgs) > 0.8


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = nn.init_params(stream(2, "init", 0), (2, 8, 16))
    path = nn.save_params(p, tmp_path / "m.bin")
    raw = path.read_bytes()
    assert raw[:4] == b"FRNN"
    assert len(raw) == 4 + 4 + 3 * 4 + 4 * p.size
    q = nn.load_params(path)
    assert q.layer_dims == p.layer_dims
    np.testing.assert_array_equal(q.flat, p.flat.astype(np.float32))


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.params_from_bytes(b"NOPE" + bytes(20))
