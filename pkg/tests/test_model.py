import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malsmooth.errors import ConfigError, DimensionError, UsageError
from malsmooth.model import (
    PARAM_NAMES,
    AdamState,
    Model,
    ModelConfig,
    TrainingConfig,
    _bce,
    _scores_fixed,
    adam_step,
    embedding_lookup,
    evaluate_accuracy,
    forward_from_bytes,
    forward_from_embedding,
    grad_wrt_embedding,
    loss_and_param_gradients,
    penultimate_features,
    predict_scores,
    train,
)

from conftest import TINY, tiny_model


def naive_forward(x, model):
    """Loop-by-loop reference: embed, gate each window, max over time, dense, sigmoid."""
    c, p = model.config, model.params
    e = [p["embedding"][b] for b in x]
    pooled = []
    for f in range(c.num_filters):
        best = -math.inf
        for t in range(c.num_positions):
            a = p["conv_a_bias"][f]
            b = p["conv_b_bias"][f]
            for j in range(c.conv_window):
                for ch in range(c.embed_dim):
                    v = e[t * c.conv_stride + j][ch]
                    a += v * p["conv_a_weight"][j * c.embed_dim + ch, f]
                    b += v * p["conv_b_weight"][j * c.embed_dim + ch, f]
            h = max(a, 0.0) * (1.0 / (1.0 + math.exp(-b)))
            best = max(best, h)
        pooled.append(best)
    z = sum(pooled[f] * p["dense_weight"][f] for f in range(c.num_filters)) + p["dense_bias"][0]
    return 1.0 / (1.0 + math.exp(-z))


# ---------------------------------------------------------------------------
# config


def test_presets_match_published_sizes():
    paper = ModelConfig.preset("paper")
    assert (paper.input_length, paper.conv_window, paper.conv_stride, paper.num_filters, paper.embed_dim) == (
        250000,
        500,
        500,
        128,
        8,
    )
    desk = ModelConfig.preset("desk")
    assert (desk.input_length, desk.conv_window, desk.conv_stride, desk.num_filters) == (4096, 32, 32, 16)


@pytest.mark.parametrize(
    "kwargs, key",
    [
        (dict(input_length=100, conv_window=8, conv_stride=8, num_filters=4), "model.conv_stride"),
        (dict(input_length=64, conv_window=8, conv_stride=8, num_filters=0), "model.num_filters"),
        (dict(input_length=64, conv_window=8, conv_stride=8, num_filters=4, vocab=255), "model.vocab"),
        (dict(input_length=64, conv_window=8, conv_stride=8, num_filters=4, decision_threshold=1.0), "model.decision_threshold"),
    ],
)
def test_config_rejects_invalid(kwargs, key):
    with pytest.raises(ConfigError) as info:
        ModelConfig(**kwargs)
    assert info.value.key == key


def test_config_dict_round_trip():
    c = ModelConfig.preset("desk")
    assert ModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------------------
# embedding lookup


def test_lookup_all_zero_gives_row_zero(tiny):
    out = embedding_lookup(np.zeros(64, np.uint8), tiny.embedding, 64)
    assert np.array_equal(out, np.repeat(tiny.embedding[:1], 64, axis=0))


def test_lookup_matches_per_element_gather(rng):
    table = rng.normal(size=(256, 8))
    x = rng.integers(0, 256, 16, dtype=np.uint8)
    out = embedding_lookup(x, table, 16)
    for i in range(16):
        for c in range(8):
            assert out[i, c] == table[x[i], c]


def test_lookup_wrong_length_is_dimension_error(tiny):
    with pytest.raises(DimensionError):
        embedding_lookup(np.zeros(10, np.uint8), tiny.embedding, 64)


# ---------------------------------------------------------------------------
# forward


def test_forward_matches_loop_reference(rng):
    for seed in range(3):
        m = tiny_model(seed)
        x = rng.integers(0, 256, 64, dtype=np.uint8)
        assert forward_from_bytes(x, m) == pytest.approx(naive_forward(x, m), rel=1e-12, abs=1e-14)


def test_forward_general_stride_matches_loop_reference(rng):
    cfg = ModelConfig(input_length=40, conv_window=8, conv_stride=4, num_filters=3)
    m = tiny_model(5, config=cfg)
    x = rng.integers(0, 256, 40, dtype=np.uint8)
    assert forward_from_bytes(x, m) == pytest.approx(naive_forward(x, m), rel=1e-12)


def test_batched_scores_match_single(rng, tiny):
    xs = [rng.integers(0, 256, int(k), dtype=np.uint8).tobytes() for k in rng.integers(1, 100, 7)]
    batched = predict_scores(xs, tiny, batch_size=3)
    single = [forward_from_bytes(x, tiny) for x in xs]
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_penultimate_features_shape(tiny, rng):
    f = penultimate_features(rng.integers(0, 256, 64, dtype=np.uint8), tiny)
    assert f.shape == (4,) and np.all(f >= 0)


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=1, max_size=128), st.integers(0, 50))
def test_score_is_probability(data, seed):
    m = tiny_model(seed)
    m.params["dense_weight"] *= 100  # push toward saturation
    s = forward_from_bytes(data, m)
    assert 0.0 <= s <= 1.0


# ---------------------------------------------------------------------------
# gradients against central differences


def _loss(model, X, y):
    return float(_bce(_scores_fixed(X, model), y).mean())


def max_rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    small = np.abs(a) < 1e-8
    if np.any(np.abs(a[small] - n[small]) > 1e-6):
        return np.inf
    big = ~small
    if not big.any():
        return 0.0
    return float(np.max(np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))))


def param_gradient_error(seed, h=1e-6):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    X = rng.integers(0, 256, (3, 64), dtype=np.uint8)
    y = np.array([0.0, 1.0, 1.0])
    loss_and_param_gradients(list(zip(X, y.astype(int))), m)
    worst = 0.0
    for name in PARAM_NAMES:
        p = m.params[name]
        numeric = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = _loss(m, X, y)
            p[i] = old - h
            down = _loss(m, X, y)
            p[i] = old
            numeric[i] = (up - down) / (2 * h)
        worst = max(worst, max_rel_error(m.grads[name], numeric))
    return worst


def input_gradient_error(seed, h=1e-6):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    e = m.embedding[rng.integers(0, 256, 64)] + rng.normal(0, 0.1, (64, 8))
    target = int(seed % 2)
    analytic = grad_wrt_embedding(e, target, m)

    def loss(ee):
        return float(_bce(np.array([forward_from_embedding(ee, m)]), np.array([float(target)]))[0])

    numeric = np.zeros_like(e)
    for i in np.ndindex(e.shape):
        old = e[i]
        e[i] = old + h
        up = loss(e)
        e[i] = old - h
        down = loss(e)
        e[i] = old
        numeric[i] = (up - down) / (2 * h)
    return max_rel_error(analytic, numeric)


@pytest.mark.parametrize("seed", range(3))
def test_param_gradients_match_finite_differences(seed):
    assert param_gradient_error(seed) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_input_gradient_matches_finite_differences(seed):
    assert input_gradient_error(seed) <= 1e-3


def test_input_gradient_general_stride(rng):
    cfg = ModelConfig(input_length=40, conv_window=8, conv_stride=4, num_filters=3)
    m = tiny_model(2, config=cfg)
    e = m.embedding[rng.integers(0, 256, 40)]
    g = grad_wrt_embedding(e, 0, m)
    h = 1e-6
    num = np.zeros_like(e)
    for i in np.ndindex(e.shape):
        old = e[i]
        e[i] = old + h
        up = -np.log(1 - forward_from_embedding(e, m))
        e[i] = old - h
        down = -np.log(1 - forward_from_embedding(e, m))
        e[i] = old
        num[i] = (up - down) / (2 * h)
    assert max_rel_error(g, num) <= 1e-3


def test_embedding_param_gradient_equals_scattered_input_gradient(rng):
    """The table gradient is the input gradient summed over positions holding each byte."""
    m = tiny_model(7)
    x = rng.integers(0, 4, 64, dtype=np.uint8)  # few distinct bytes so rows collide
    loss_and_param_gradients([(x, 1)], m)
    gin = grad_wrt_embedding(m.embedding[x], 1, m)
    expect = np.zeros_like(m.embedding)
    for i, b in enumerate(x):
        expect[b] += gin[i]
    np.testing.assert_allclose(m.grads["embedding"], expect, rtol=1e-10, atol=1e-14)


def test_saturated_score_has_zero_logit_gradient(tiny):
    tiny.params["dense_bias"][0] = 60.0
    g = grad_wrt_embedding(tiny.embedding[np.zeros(64, int)], 0, tiny)
    assert not g.any()


# ---------------------------------------------------------------------------
# optimizer


def test_adam_matches_scalar_trace():
    cfg = ModelConfig(input_length=8, conv_window=8, conv_stride=8, num_filters=1, embed_dim=1)
    m = Model.initialize(cfg, seed=0, dtype=np.float64)
    state = AdamState.for_model(m, learning_rate=0.1)
    grads = [0.5, -2.0, 0.25]
    w, mom, vel = float(m.params["dense_bias"][0]), 0.0, 0.0
    for t, g in enumerate(grads, 1):
        for name in PARAM_NAMES:
            m.grads[name][...] = 0.0
        m.grads["dense_bias"][0] = g
        m.has_grads = True
        adam_step(m, state)
        mom = 0.9 * mom + 0.1 * g
        vel = 0.999 * vel + 0.001 * g * g
        w -= 0.1 * (mom / (1 - 0.9**t)) / (math.sqrt(vel / (1 - 0.999**t)) + 1e-8)
        assert m.params["dense_bias"][0] == pytest.approx(w, rel=1e-12)
        assert state.t == t
    # zero gradient leaves other parameters untouched
    assert m.params["dense_weight"][0] == Model.initialize(cfg, seed=0, dtype=np.float64).params["dense_weight"][0]


def test_first_adam_step_has_bias_corrected_size():
    """After bias correction the first step is lr * |g| / (|g| + eps_hat)."""
    m = tiny_model(1)
    before = {k: v.copy() for k, v in m.params.items()}
    loss_and_param_gradients([(np.arange(64) % 256, 1)], m)
    adam_step(m, AdamState.for_model(m, learning_rate=0.01))
    for name in PARAM_NAMES:
        moved = np.abs(m.params[name] - before[name])
        g = np.abs(m.grads[name])
        np.testing.assert_allclose(moved, 0.01 * g / (g + 1e-8), rtol=1e-9, atol=1e-15)


def test_adam_without_gradients_is_usage_error(tiny):
    with pytest.raises(UsageError):
        adam_step(tiny, AdamState.for_model(tiny))


# ---------------------------------------------------------------------------
# training


def test_training_config_validation():
    with pytest.raises(UsageError):
        TrainingConfig(batch_size=0)
    with pytest.raises(UsageError):
        TrainingConfig(validation_fraction=1.0)


def test_training_is_deterministic_and_finite(small_corpus):
    cfg = ModelConfig(input_length=256, conv_window=16, conv_stride=16, num_filters=4)
    a = train(small_corpus, cfg, epochs=2, batch_size=16, seed=9)
    b = train(small_corpus, cfg, epochs=2, batch_size=16, seed=9)
    for name in PARAM_NAMES:
        assert np.array_equal(a.params[name], b.params[name])
        assert np.all(np.isfinite(a.params[name]))


def test_training_learns_separable_corpus(small_corpus):
    cfg = ModelConfig(input_length=256, conv_window=16, conv_stride=16, num_filters=8)
    m = train(small_corpus, cfg, epochs=15, batch_size=8, seed=0, learning_rate=3e-3)
    assert evaluate_accuracy(small_corpus, m) >= 0.9


def test_zero_epochs_returns_initial_model(small_corpus):
    cfg = ModelConfig(input_length=256, conv_window=16, conv_stride=16, num_filters=4)
    m = train(small_corpus, cfg, epochs=0, seed=4)
    assert not m.has_grads


def test_train_rejects_empty_corpus():
    with pytest.raises(UsageError):
        train([], TINY, epochs=1)
