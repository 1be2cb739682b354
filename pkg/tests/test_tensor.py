import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from surprisenet.errors import NonFiniteError, ShapeError, TapeConsumedError
from surprisenet.tensor import (
    AdamState,
    GradientTape,
    Tensor,
    adam_step,
    backward,
    cross_entropy_loss,
    kl_standard_normal,
    matmul,
    mse_loss,
    relu,
    reparameterize,
    tensor_sum,
)


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def softmax_then_nll(logits, labels):
    """Unfused reference: explicit softmax, then mean negative log-likelihood."""
    total = 0.0
    for row, y in zip(logits.astype(np.float64), labels):
        e = [math.exp(v) for v in row]
        total += -math.log(e[y] / sum(e))
    return total / len(labels)


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), [[1, 2], [3, 4]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul([[1, 0], [0, 0]], [[5, 6], [7, 8]])
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(4, 3)).astype(np.float32)
        b = rng.normal(size=(3, 2)).astype(np.float32)
        np.testing.assert_allclose(matmul(a, b).data, triple_loop_matmul(a, b), atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])

    def test_all_negative(self):
        assert not relu(-np.ones(5)).data.any()

    def test_gradient_indicator(self):
        x = Tensor([-1.0, 2.0], trainable=True)
        with GradientTape() as tape:
            loss = tensor_sum(relu(x))
        np.testing.assert_array_equal(backward(loss, tape)[x], [0, 1])


class TestLosses:
    def test_mse_identity(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0

    def test_mse_examples(self):
        assert mse_loss([0.0, 0.0], [1.0, 1.0]).item() == pytest.approx(1.0)
        assert mse_loss([1.0, 0.0], [0.0, 2.0]).item() == pytest.approx(2.5)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss([1.0, 2.0], [1.0])

    def test_ce_uniform(self):
        assert cross_entropy_loss([[0.0, 0.0]], [0]).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_ce_saturated(self):
        assert cross_entropy_loss([[100.0, 0.0]], [0]).item() == pytest.approx(0.0, abs=1e-6)

    def test_ce_matches_unfused(self, rng):
        logits = rng.normal(size=(3, 4)).astype(np.float32)
        labels = np.array([0, 3, 1])
        assert cross_entropy_loss(logits, labels).item() == pytest.approx(softmax_then_nll(logits, labels), abs=1e-6)

    def test_ce_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_loss([[0.0, 1.0]], [2])

    def test_ce_gradient_formula(self, rng):
        logits = Tensor(rng.normal(size=(5, 3)), trainable=True)
        labels = np.array([0, 1, 2, 2, 1])
        with GradientTape() as tape:
            loss = cross_entropy_loss(logits, labels)
        g = backward(loss, tape)[logits]
        z = logits.data.astype(np.float64)
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(5), labels] -= 1
        np.testing.assert_allclose(g, p / 5, atol=1e-6)

    def test_kl_zero(self):
        assert kl_standard_normal(np.zeros((2, 3)), np.zeros((2, 3))).item() == 0.0

    def test_kl_half_mu_squared(self):
        assert kl_standard_normal([1.0], [0.0]).item() == pytest.approx(0.5)

    def test_kl_matches_direct_formula(self, rng):
        mu = rng.normal(scale=0.5, size=(4, 3))
        lv = rng.normal(scale=0.5, size=(4, 3))
        direct = sum(
            -0.5 * (1 + lv[i, j] - mu[i, j] ** 2 - math.exp(lv[i, j])) for i in range(4) for j in range(3)
        ) / 4
        assert kl_standard_normal(mu.astype(np.float32), lv.astype(np.float32)).item() == pytest.approx(direct, abs=1e-6)

    def test_kl_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            kl_standard_normal([0.0], [1000.0])


class TestReparameterize:
    def test_zero_noise(self):
        mu = np.array([[1.0, -2.0]], dtype=np.float32)
        np.testing.assert_array_equal(reparameterize(mu, [[0.3, 0.1]], np.zeros((1, 2))).data, mu)

    def test_unit_variance(self):
        z = reparameterize([[1.0, 2.0]], [[0.0, 0.0]], [[0.5, -1.0]])
        np.testing.assert_allclose(z.data, [[1.5, 1.0]])

    def test_log_var_gradient_finite_difference(self, rng):
        mu = rng.normal(size=(2, 3))
        lv = rng.normal(scale=0.3, size=(2, 3))
        noise = rng.normal(size=(2, 3))
        lv_t = Tensor(lv, trainable=True, dtype=np.float64)
        with GradientTape() as tape:
            loss = tensor_sum(reparameterize(Tensor(mu, dtype=np.float64), lv_t, noise))
        analytic = backward(loss, tape)[lv_t]
        h = 1e-5
        f = lambda v: np.sum(mu + np.exp(v / 2) * noise)
        fd = np.zeros_like(lv)
        for idx in np.ndindex(lv.shape):
            up, dn = lv.copy(), lv.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (f(up) - f(dn)) / (2 * h)
        np.testing.assert_allclose(analytic, fd, atol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reparameterize([[0.0]], [[0.0, 0.0]], [[0.0]])


class TestBackward:
    @pytest.mark.parametrize("shape", [(3,), (2, 4), (1, 1)])
    def test_sum_gradient_all_ones(self, shape):
        w = Tensor(np.random.default_rng(0).normal(size=shape), trainable=True)
        with GradientTape() as tape:
            loss = tensor_sum(w)
        np.testing.assert_array_equal(backward(loss, tape)[w], np.ones(shape))

    def test_mse_against_zero(self):
        w = Tensor([2.0], trainable=True)
        with GradientTape() as tape:
            loss = mse_loss(w, [0.0])
        np.testing.assert_allclose(backward(loss, tape)[w], [4.0])

    def test_non_trainable_gets_nothing(self):
        w = Tensor([[1.0, 2.0]], trainable=True)
        c = Tensor([[3.0], [4.0]])
        with GradientTape() as tape:
            loss = tensor_sum(matmul(w, c))
        grads = backward(loss, tape)
        assert set(grads) == {w}

    def test_tape_consumed(self):
        w = Tensor([1.0], trainable=True)
        with GradientTape() as tape:
            loss = tensor_sum(w)
        backward(loss, tape)
        with pytest.raises(TapeConsumedError):
            backward(loss, tape)

    def test_no_recording_without_tape(self):
        w = Tensor([1.0], trainable=True)
        tensor_sum(relu(w))
        with GradientTape() as tape:
            pass
        assert len(tape) == 0

    def test_shared_input_accumulates(self):
        a = Tensor([3.0], trainable=True)
        with GradientTape() as tape:
            loss = tensor_sum(a * a + a)
        np.testing.assert_allclose(backward(loss, tape)[a], [7.0])

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])


def adam_reference(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar, loop-based Adam update used as an independent reference."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor([1.0, -2.0], trainable=True)
        before = p.data.copy()
        state = AdamState(lr=0.1)
        adam_step([p], {p: np.zeros(2, dtype=np.float32)}, state)
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        p = Tensor([0.0, 0.0, 0.0], trainable=True)
        state = AdamState(lr=0.01)
        adam_step([p], {p: np.array([3.0, -0.2, 50.0], dtype=np.float32)}, state)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-5)

    def test_quadratic_trajectory_matches_reference(self):
        # f(x) = (x - 3)^2, gradient 2(x - 3)
        p = Tensor([0.5], trainable=True, dtype=np.float64)
        state = AdamState(lr=0.05)
        traj = []
        for _ in range(10):
            adam_step([p], {p: 2 * (p.data - 3.0)}, state)
            traj.append(float(p.data[0]))
        np.testing.assert_allclose(traj, adam_reference(0.5, lambda x: 2 * (x - 3), 10, 0.05), atol=1e-6)

    def test_shape_mismatch(self):
        p = Tensor([0.0, 0.0], trainable=True)
        with pytest.raises(ShapeError):
            adam_step([p], {p: np.zeros(3, dtype=np.float32)}, AdamState())

    def test_state_shape_mismatch(self):
        p = Tensor([0.0, 0.0], trainable=True)
        state = AdamState()
        state.m[p] = np.zeros(3)
        with pytest.raises(ShapeError):
            adam_step([p], {}, state)


finite = st.floats(-50, 50, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite), st.data())
def test_mse_nonnegative_zero_iff_equal(x, data):
    y = data.draw(arrays(np.float32, x.shape, elements=finite))
    val = mse_loss(x, y).item()
    assert val >= 0
    if np.all(x == y):
        assert val == 0
    elif np.max(np.abs(x.astype(np.float64) - y)) > 1e-10:
        assert val > 0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=finite), st.data())
def test_ce_gradient_sums_to_zero_per_row(logits, data):
    labels = data.draw(arrays(np.int64, logits.shape[0], elements=st.integers(0, logits.shape[1] - 1)))
    t = Tensor(logits, trainable=True)
    with GradientTape() as tape:
        loss = cross_entropy_loss(t, labels)
    assert loss.item() >= 0
    np.testing.assert_allclose(backward(loss, tape)[t].sum(axis=1), 0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-5, 5, width=32)),
    st.data(),
)
def test_kl_nonnegative(mu, data):
    lv = data.draw(arrays(np.float32, mu.shape, elements=st.floats(-5, 5, width=32)))
    assert kl_standard_normal(mu, lv).item() >= -1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (3, 4), elements=finite), arrays(np.float32, (4, 2), elements=finite))
def test_deterministic(a, b):
    assert matmul(a, b).data.tobytes() == matmul(a, b).data.tobytes()
