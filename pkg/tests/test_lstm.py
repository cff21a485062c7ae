"""LSTM cell and BPTT tests against trivial cases and finite-difference oracles."""

import math

import numpy as np
import pytest

from gradcheck import check_grads, finite_difference, max_rel_error
from capfuse.errors import ShapeError
from capfuse.lstm import (
    LstmParams,
    LstmState,
    cell_backward,
    cell_forward,
    new_lstm_params,
    sequence_bptt,
    zero_state,
)
from capfuse.numerics import Rng


def _zero_params(d, h):
    return LstmParams(np.zeros((4 * h, d)), np.zeros((4 * h, h)), np.zeros(4 * h))


def _random_params(d, h, seed):
    rng = Rng(seed)
    return LstmParams(
        rng.uniform(-0.6, 0.6, (4 * h, d)),
        rng.uniform(-0.6, 0.6, (4 * h, h)),
        rng.uniform(-0.6, 0.6, (4 * h,)),
    )


class TestCellForward:
    def test_all_zero(self):
        p = _zero_params(3, 4)
        state, _ = cell_forward(np.zeros(3), zero_state(4), p)
        assert np.array_equal(state.h, np.zeros(4))
        assert np.array_equal(state.c, np.zeros(4))

    def test_zero_params_halve_cell_state(self):
        # sigmoid(0) = 0.5 gates, tanh(0) = 0 candidate
        p = _zero_params(3, 4)
        c0 = np.array([0.4, -1.2, 2.0, 0.0])
        state, _ = cell_forward(np.zeros(3), LstmState(np.zeros(4), c0.copy()), p)
        np.testing.assert_allclose(state.c, 0.5 * c0, atol=1e-15)
        np.testing.assert_allclose(state.h, 0.5 * np.tanh(0.5 * c0), atol=1e-15)

    def test_matches_independent_cell_oracle(self):
        d, h = 5, 6
        p = _random_params(d, h, 21)
        rng = Rng(22)
        x = rng.uniform(-1, 1, (d,))
        h0 = rng.uniform(-0.9, 0.9, (h,))
        c0 = rng.uniform(-1.5, 1.5, (h,))
        state, _ = cell_forward(x, LstmState(h0.copy(), c0.copy()), p)

        # second, scalar-loop implementation of the same equations
        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        h_ref = np.zeros(h)
        c_ref = np.zeros(h)
        for k in range(h):
            acts = []
            for gate in range(4):
                row = gate * h + k
                a = p.b[row]
                for j in range(d):
                    a += p.W_x[row, j] * x[j]
                for j in range(h):
                    a += p.W_h[row, j] * h0[j]
                acts.append(a)
            i, f, o = sig(acts[0]), sig(acts[1]), sig(acts[2])
            g = math.tanh(acts[3])
            c_ref[k] = f * c0[k] + i * g
            h_ref[k] = o * math.tanh(c_ref[k])
        assert max_rel_error(state.h, h_ref, floor=1e-9) < 1e-12
        assert max_rel_error(state.c, c_ref, floor=1e-9) < 1e-12

    def test_bounds_and_determinism(self):
        p = _random_params(4, 8, 30)
        rng = Rng(31)
        state = zero_state(8)
        for _ in range(40):
            x = rng.uniform(-5, 5, (4,))
            state, cache = cell_forward(x, state, p)
            assert np.all(np.abs(state.h) < 1.0)
            for gate in (cache.i, cache.f, cache.o):
                assert np.all(gate > 0) and np.all(gate < 1)
        again, _ = cell_forward(np.ones(4), state, p)
        twice, _ = cell_forward(np.ones(4), state, p)
        assert again.h.tobytes() == twice.h.tobytes()
        assert again.c.tobytes() == twice.c.tobytes()

    def test_shape_errors(self):
        p = _zero_params(3, 4)
        with pytest.raises(ShapeError):
            cell_forward(np.zeros(5), zero_state(4), p)
        with pytest.raises(ShapeError):
            cell_forward(np.zeros(3), zero_state(5), p)


class TestCellBackward:
    def test_zero_upstream_gives_zero_grads(self):
        p = _random_params(3, 4, 40)
        _, cache = cell_forward(np.ones(3), zero_state(4), p)
        grads, dx, dprev = cell_backward(np.zeros(4), np.zeros(4), cache, p)
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(dx == 0) and np.all(dprev.h == 0) and np.all(dprev.c == 0)

    def test_param_and_input_grads_match_finite_differences(self):
        d, h = 3, 4
        p = _random_params(d, h, 41)
        rng = Rng(42)
        x = rng.uniform(-1, 1, (d,))
        h0 = rng.uniform(-0.5, 0.5, (h,))
        c0 = rng.uniform(-0.5, 0.5, (h,))
        w_h = rng.uniform(-1, 1, (h,))
        w_c = rng.uniform(-1, 1, (h,))

        def loss():
            state, _ = cell_forward(x, LstmState(h0.copy(), c0.copy()), p)
            return float(w_h @ state.h + w_c @ state.c)

        _, cache = cell_forward(x, LstmState(h0.copy(), c0.copy()), p)
        grads, dx, dprev = cell_backward(w_h.copy(), w_c.copy(), cache, p)
        check_grads(loss, {"W_x": p.W_x, "W_h": p.W_h, "b": p.b}, grads, tol=1e-6)
        assert max_rel_error(dx, finite_difference(loss, x)) < 1e-6
        assert max_rel_error(dprev.h, finite_difference(loss, h0)) < 1e-6
        assert max_rel_error(dprev.c, finite_difference(loss, c0)) < 1e-6


class TestSequenceBptt:
    def test_length_one_reduces_to_cell_composition(self):
        d, h, V = 3, 4, 5
        p = _random_params(d, h, 50)
        rng = Rng(51)
        head = (rng.uniform(-1, 1, (V, h)), rng.uniform(-1, 1, (V,)))
        x = rng.uniform(-1, 1, (1, d))
        loss, grads, dx = sequence_bptt(x, [2], p, head)

        from capfuse.numerics import cross_entropy, softmax

        state, cache = cell_forward(x[0], zero_state(h), p)
        dist = softmax(head[0] @ state.h + head[1])
        assert loss == cross_entropy(dist, 2)
        dlogits = dist.copy() * (dist[2] / (dist[2] + 1e-12))
        dlogits[2] -= dist[2] / (dist[2] + 1e-12)
        dh = head[0].T @ dlogits
        cell_grads, dx_ref, _ = cell_backward(dh, np.zeros(h), cache, p)
        for key in ("W_x", "W_h", "b"):
            assert np.allclose(grads[key], cell_grads[key], atol=1e-12)
        assert np.allclose(dx[0], dx_ref, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        d, h, V, T = 3, 4, 6, 5
        p = _random_params(d, h, 60)
        rng = Rng(61)
        head_W = rng.uniform(-1, 1, (V, h))
        head_b = rng.uniform(-1, 1, (V,))
        inputs = rng.uniform(-1, 1, (T, d))
        targets = [rng.randint(V) for _ in range(T)]

        def loss():
            value, _, _ = sequence_bptt(inputs, targets, p, (head_W, head_b))
            return value

        _, grads, d_inputs = sequence_bptt(inputs, targets, p, (head_W, head_b))
        check_grads(
            loss,
            {"W_x": p.W_x, "W_h": p.W_h, "b": p.b, "head_W": head_W, "head_b": head_b},
            grads,
        )
        assert max_rel_error(d_inputs, finite_difference(loss, inputs)) < 1e-4

    def test_loss_weight_doubling_doubles_gradients(self):
        d, h, V, T = 2, 3, 4, 4
        p = _random_params(d, h, 70)
        rng = Rng(71)
        head = (rng.uniform(-1, 1, (V, h)), rng.uniform(-1, 1, (V,)))
        inputs = rng.uniform(-1, 1, (T, d))
        targets = [rng.randint(V) for _ in range(T)]
        loss1, grads1, dx1 = sequence_bptt(inputs, targets, p, head, loss_weights=[1.0] * T)
        loss2, grads2, dx2 = sequence_bptt(inputs, targets, p, head, loss_weights=[2.0] * T)
        assert abs(loss2 - 2 * loss1) < 1e-10
        for key in grads1:
            assert np.abs(grads2[key] - 2 * grads1[key]).max() < 1e-10
        assert np.abs(dx2 - 2 * dx1).max() < 1e-10

    def test_gradient_check_random_configs(self):
        rng = Rng(80)
        for _ in range(3):
            d = 1 + rng.randint(8)
            h = 1 + rng.randint(8)
            T = 1 + rng.randint(6)
            V = 2 + rng.randint(6)
            p = _random_params(d, h, rng.randint(10_000))
            head_W = rng.uniform(-1, 1, (V, h))
            head_b = rng.uniform(-1, 1, (V,))
            inputs = rng.uniform(-1, 1, (T, d))
            targets = [rng.randint(V) for _ in range(T)]

            def loss():
                value, _, _ = sequence_bptt(inputs, targets, p, (head_W, head_b))
                return value

            _, grads, _ = sequence_bptt(inputs, targets, p, (head_W, head_b))
            check_grads(
                loss,
                {"W_x": p.W_x, "W_h": p.W_h, "b": p.b, "head_W": head_W, "head_b": head_b},
                grads,
            )

    def test_length_mismatch(self):
        p = _random_params(2, 3, 90)
        head = (np.zeros((4, 3)), np.zeros(4))
        with pytest.raises(ShapeError):
            sequence_bptt(np.zeros((3, 2)), [0, 1], p, head)


def test_forget_bias_initialized_to_one():
    p = new_lstm_params(3, 5, Rng(4))
    assert np.array_equal(p.b[5:10], np.ones(5))
    others = np.concatenate([p.b[:5], p.b[10:]])
    assert np.all(np.abs(others) <= 0.08)
    assert np.all(np.abs(p.W_x) <= 0.08) and np.all(np.abs(p.W_h) <= 0.08)
