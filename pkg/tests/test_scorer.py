import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from listlearn import scorer
from listlearn.errors import ConfigurationError, ShapeError, UpdateRejected


def numeric_grad(model, x, out_grad, h=1e-5):
    """Central differences of mean_n <out_grad[n], forward(x[n])> per parameter."""
    grads = []
    for p in model.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = np.sum(scorer.forward(model, x) * out_grad)
            p[idx] = orig - h
            down = np.sum(scorer.forward(model, x) * out_grad)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h) / x.shape[0]
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    return max(float(np.max(np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)))
               for x, y in zip(a, b))


def hand_network():
    # 2-2-2: W0 = [[1, -1], [2, 0.5]], b0 = [0.1, -0.2]; W1 = [[1, 2], [-1, 3]], b1 = [0.5, 0]
    return scorer.ScoringModel(
        [2, 2, 2],
        [np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([[1.0, 2.0], [-1.0, 3.0]])],
        [np.array([0.1, -0.2]), np.array([0.5, 0.0])],
    )


# -- init ----------------------------------------------------------------------


def test_init_is_deterministic():
    a = scorer.init_model([16, 64, 64, 10], 7)
    b = scorer.init_model([16, 64, 64, 10], 7)
    for x, y in zip(a.params, b.params):
        assert np.array_equal(x, y)


def test_init_biases_zero_and_output_dim():
    m = scorer.init_model([5, 8, 3], 1)
    assert all(np.all(b == 0) for b in m.biases)
    assert m.num_queries == 3
    assert scorer.forward(m, np.ones(5)).shape == (3,)


def test_init_he_variance():
    m = scorer.init_model([16, 32, 10], 0)
    var = m.weights[0].var()
    assert m.weights[0].size >= 512
    assert abs(var - 2 / 16) < 0.2 * (2 / 16)


@pytest.mark.parametrize("sizes", [[], [4], [4, 0, 2], [4, -1], [3, 2.5]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ConfigurationError):
        scorer.init_model(sizes, 0)


# -- forward / score -------------------------------------------------------------


def test_zero_model_scores_zero():
    m = scorer.zero_model([4, 6, 3])
    assert np.all(scorer.forward(m, np.random.default_rng(0).normal(size=4)) == 0)
    assert scorer.score(m, np.ones(4), 2) == 0


def test_single_linear_layer():
    rng = np.random.default_rng(3)
    w, b, x = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=4)
    m = scorer.ScoringModel([4, 3], [w], [b])
    np.testing.assert_allclose(scorer.forward(m, x), x @ w + b, rtol=0, atol=1e-14)


def test_hand_built_forward():
    m = hand_network()
    # x = (1, 1): pre = (1 + 2 + 0.1, -1 + 0.5 - 0.2) = (3.1, -0.7); relu -> (3.1, 0)
    # out = (3.1 * 1 + 0 * -1 + 0.5, 3.1 * 2 + 0 * 3 + 0) = (3.6, 6.2)
    np.testing.assert_allclose(scorer.forward(m, [1.0, 1.0]), [3.6, 6.2], atol=1e-12)
    # x = (-1, 2): pre = (-1 + 4 + 0.1, 1 + 1 - 0.2) = (3.1, 1.8)
    # out = (3.1 - 1.8 + 0.5, 6.2 + 5.4) = (1.8, 11.6)
    np.testing.assert_allclose(scorer.forward(m, [-1.0, 2.0]), [1.8, 11.6], atol=1e-12)
    assert scorer.score(m, [-1.0, 2.0], 1) == pytest.approx(11.6, abs=1e-12)


def test_score_matches_forward_and_checks_range():
    m = scorer.init_model([6, 8, 4], 2)
    x = np.random.default_rng(1).normal(size=6)
    full = scorer.forward(m, x)
    for q in range(4):
        assert scorer.score(m, x, q) == full[q]
    with pytest.raises(IndexError):
        scorer.score(m, x, 4)
    with pytest.raises(IndexError):
        scorer.score(m, x, -1)


def test_forward_shape_error():
    m = scorer.init_model([6, 4], 0)
    with pytest.raises(ShapeError):
        scorer.forward(m, np.ones(5))
    with pytest.raises(ShapeError):
        scorer.forward(m, np.ones((2, 2, 6)))


def test_batch_forward_matches_rows():
    m = scorer.init_model([5, 7, 3], 4)
    x = np.random.default_rng(0).normal(size=(9, 5))
    out = scorer.forward(m, x)
    for i in range(9):
        np.testing.assert_allclose(out[i], scorer.forward(m, x[i]), rtol=1e-13, atol=1e-15)


# -- backward -----------------------------------------------------------------


def test_zero_output_grad_gives_zero_gradients():
    m = scorer.init_model([4, 5, 3], 0)
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert all(np.all(g == 0) for g in scorer.backward(m, x, np.zeros((3, 3))))


@pytest.mark.parametrize("sizes,seed", [
    ([3, 2], 0),
    ([4, 8, 3], 1),
    ([5, 16, 16, 4], 2),
    ([6, 32, 32, 5], 3),
    ([2, 2, 2], 4),
])
def test_backward_matches_finite_differences(sizes, seed):
    rng = np.random.default_rng(seed)
    m = scorer.init_model(sizes, seed)
    for b in m.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(4, sizes[0]))
    g = rng.normal(size=(4, sizes[-1]))
    assert max_rel_err(scorer.backward(m, x, g), numeric_grad(m, x, g)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(
    hidden=st.lists(st.integers(1, 8), min_size=0, max_size=2),
    d=st.integers(1, 5),
    m=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_backward_finite_differences_property(hidden, d, m, seed):
    rng = np.random.default_rng(seed)
    model = scorer.init_model([d, *hidden, m], seed)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(3, d))
    g = rng.normal(size=(3, m))
    # finite differences are meaningless across a ReLU kink
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        pre = h @ w + b
        assume(np.min(np.abs(pre)) > 1e-3)
        h = np.maximum(pre, 0)
    assert max_rel_err(scorer.backward(model, x, g), numeric_grad(model, x, g)) < 1e-4


def test_backward_averages_over_batch():
    m = scorer.init_model([4, 6, 2], 5)
    rng = np.random.default_rng(5)
    x, g = rng.normal(size=4), rng.normal(size=2)
    single = scorer.backward(m, x, g)
    double = scorer.backward(m, np.stack([x, x]), np.stack([g, g]))
    for a, b in zip(single, double):
        np.testing.assert_allclose(a, b, rtol=1e-15, atol=1e-15)


def test_backward_normalizer_and_cache():
    m = scorer.init_model([4, 6, 2], 5)
    rng = np.random.default_rng(6)
    x, g = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
    _, cache = scorer.forward_cached(m, x)
    plain = scorer.backward(m, x, g)
    for a, b in zip(scorer.backward(m, x, g, normalizer=3, cache=cache), plain):
        np.testing.assert_allclose(a, 2 * b, rtol=1e-14)


def test_backward_shape_errors():
    m = scorer.init_model([4, 3], 0)
    with pytest.raises(ShapeError):
        scorer.backward(m, np.ones((2, 4)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        scorer.backward(m, np.ones((2, 4)), np.ones((3, 3)))
    with pytest.raises(ShapeError):
        scorer.backward(m, np.ones((0, 4)), np.ones((0, 3)))


def test_forward_backward_deterministic():
    x = np.random.default_rng(9).normal(size=(5, 8))
    g = np.random.default_rng(10).normal(size=(5, 3))
    runs = []
    for _ in range(2):
        m = scorer.init_model([8, 16, 3], 11)
        runs.append((scorer.forward(m, x), scorer.backward(m, x, g)))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


# -- adam -------------------------------------------------------------------------


def reference_adam(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (vhat**0.5 + eps)
        trace.append(theta)
    return trace


def test_adam_defaults():
    st_ = scorer.adam_init([np.zeros(2)])
    assert (st_.learning_rate, st_.beta1, st_.beta2, st_.epsilon) == (1e-4, 0.9, 0.999, 1e-8)


def test_adam_zero_gradient_is_fixed_point():
    m = scorer.init_model([3, 4, 2], 0)
    before = [p.copy() for p in m.params]
    state = scorer.adam_init(m)
    scorer.adam_step(m, state, [np.zeros_like(p) for p in m.params])
    assert state.step_count == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adam_first_step_closed_form(g):
    p = np.array([0.5])
    state = scorer.adam_init([p])
    scorer.adam_step([p], state, [np.array([g])])
    expected = 0.5 - 1e-4 * g / (abs(g) + 1e-8)
    assert p[0] == pytest.approx(expected, abs=1e-15)
    assert p[0] - 0.5 == pytest.approx(-1e-4 * np.sign(g), rel=1e-4)


def test_adam_matches_reference_trace():
    p = np.array([1.0])
    state = scorer.adam_init([p], learning_rate=1e-2)
    trace = reference_adam(1.0, [0.7, 0.7], lr=1e-2)
    for t in range(2):
        scorer.adam_step([p], state, [np.array([0.7])])
        assert p[0] == pytest.approx(trace[t], abs=1e-15)
    # varying gradients too
    p = np.array([0.0])
    state = scorer.adam_init([p], learning_rate=1e-3)
    gs = [0.3, -1.2, 4.0, 0.0, -0.5]
    trace = reference_adam(0.0, gs, lr=1e-3)
    for g, expected in zip(gs, trace):
        scorer.adam_step([p], state, [np.array([g])])
        assert p[0] == pytest.approx(expected, abs=1e-15)


def test_adam_step_count_and_moment_shapes():
    m = scorer.init_model([3, 5, 2], 0)
    state = scorer.adam_init(m)
    for t in range(1, 4):
        scorer.adam_step(m, state, [np.ones_like(p) for p in m.params])
        assert state.step_count == t
    assert [a.shape for a in state.first_moment] == [p.shape for p in m.params]
    assert [a.shape for a in state.second_moment] == [p.shape for p in m.params]


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_adam_rejects_non_finite(bad):
    m = scorer.init_model([3, 2], 0)
    before = [p.copy() for p in m.params]
    state = scorer.adam_init(m)
    grads = [np.zeros_like(p) for p in m.params]
    grads[1][0] = bad
    with pytest.raises(UpdateRejected):
        scorer.adam_step(m, state, grads)
    assert state.step_count == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, m.params))


def test_adam_shape_mismatch():
    m = scorer.init_model([3, 2], 0)
    with pytest.raises(ShapeError):
        scorer.adam_step(m, scorer.adam_init(m), [np.zeros(3)])


def test_adam_stays_finite_over_many_steps():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=3), rng.normal(size=2)]
    state = scorer.adam_init(p, learning_rate=1e-2)
    grads = rng.uniform(-1e3, 1e3, size=(100_000, 5))
    for row in grads:
        scorer.adam_step(p, state, [row[:3], row[3:]])
    assert state.step_count == 100_000
    assert all(np.all(np.isfinite(x)) for x in p)


# -- checkpoint ---------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = scorer.init_model([4, 6, 3], 0)
    state = scorer.adam_init(m, learning_rate=3e-4)
    rng = np.random.default_rng(1)
    for _ in range(3):
        scorer.adam_step(m, state, [rng.normal(size=p.shape) for p in m.params])
    extras = {"w": np.array([1.0, 1 / 3, np.pi])}
    path = scorer.save_checkpoint(tmp_path / "ck.npz", m, state, extras, {"note": "x"})
    m2, s2, e2, meta = scorer.load_checkpoint(path)
    assert m2.layer_sizes == m.layer_sizes
    assert all(np.array_equal(a, b) for a, b in zip(m.params, m2.params))
    assert all(np.array_equal(a, b) for a, b in zip(state.first_moment, s2.first_moment))
    assert all(np.array_equal(a, b) for a, b in zip(state.second_moment, s2.second_moment))
    assert (s2.step_count, s2.learning_rate) == (3, 3e-4)
    assert np.array_equal(e2["w"], extras["w"])
    assert meta == {"note": "x"}
