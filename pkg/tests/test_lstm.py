import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mat_caption.lstm import LstmParams, LstmState, ModulationMode, lstm_step, lstm_step_backward
from mat_caption.numerics import DimensionError, grad_check

from oracles import lstm_step_scalar


def zero_params(H, E=None):
    rng = np.random.default_rng(0)
    p = LstmParams.init("t", E or H, H, rng)
    for q in p.parameters():
        q.value[...] = 0.0
    return p


def random_params(H, E, seed=0, scale=0.5):
    return LstmParams.init("t", E, H, np.random.default_rng(seed), scale)


def test_zero_params_sigmoid_gate():
    p = zero_params(4)
    state, cache = lstm_step(p, np.random.default_rng(1).standard_normal(4), LstmState.zeros(4))
    for gate in (cache.i, cache.f, cache.o, cache.g):
        np.testing.assert_array_equal(gate, 0.5)
    np.testing.assert_allclose(state.c, 0.25)
    np.testing.assert_allclose(state.h, 0.5 * math.tanh(0.25))
    assert abs(state.h[0] - 0.12245) < 1e-5


def test_zero_params_standard():
    p = zero_params(4)
    state, _ = lstm_step(p, np.ones(4), LstmState.zeros(4), ModulationMode.TANH)
    assert not state.c.any() and not state.h.any()


@pytest.mark.parametrize("mode", list(ModulationMode))
def test_step_matches_scalar_oracle(mode):
    rng = np.random.default_rng(7)
    p = random_params(3, 5, seed=2)
    x, h, c = rng.standard_normal(5), rng.standard_normal(3) * 0.5, rng.standard_normal(3)
    state, _ = lstm_step(p, x, LstmState(h, c), mode)
    h_ref, c_ref = lstm_step_scalar(p.W_x.value.tolist(), p.W_h.value.tolist(), p.b.value.tolist(),
                                    x.tolist(), h.tolist(), c.tolist(),
                                    mode is ModulationMode.SIGMOID)
    np.testing.assert_allclose(state.h, h_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.c, c_ref, rtol=0, atol=1e-12)


def test_gate_blocks_are_views():
    p = random_params(3, 2)
    p.block("W_hf")[...] = 7.0
    assert np.all(p.W_h.value[3:6] == 7.0)
    p.block("b_g")[...] = 1.0
    assert np.all(p.b.value[9:] == 1.0)
    assert p.block("W_xi").shape == (3, 2)


def test_dimension_errors():
    p = random_params(3, 2)
    with pytest.raises(DimensionError):
        lstm_step(p, np.ones(3), LstmState.zeros(3))
    with pytest.raises(DimensionError):
        lstm_step(p, np.ones(2), LstmState.zeros(4))
    with pytest.raises(ValueError):
        lstm_step_backward(p, None, np.ones(3), np.ones(3))


def test_zero_cotangent_gives_zero_gradients():
    p = random_params(4, 4)
    _, cache = lstm_step(p, np.ones(4), LstmState.zeros(4))
    dx, dprev = lstm_step_backward(p, cache, np.zeros(4), np.zeros(4))
    assert not dx.any() and not dprev.h.any() and not dprev.c.any()
    assert not any(q.grad.any() for q in p.parameters())


def test_backward_accumulates():
    p = random_params(4, 3)
    rng = np.random.default_rng(0)
    x, dh, dc = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
    _, cache = lstm_step(p, x, LstmState.zeros(4))
    lstm_step_backward(p, cache, dh, dc)
    once = [q.grad.copy() for q in p.parameters()]
    lstm_step_backward(p, cache, dh, dc)
    for g1, q in zip(once, p.parameters()):
        np.testing.assert_allclose(q.grad, 2 * g1, rtol=1e-15, atol=0)


def _sequence_loss(p, xs, target, mode):
    """0.5*|h_T - target|^2 + sum_t 0.1 * sum(c_t) over an unrolled sequence."""
    state = LstmState.zeros(p.hidden_size)
    caches, loss = [], 0.0
    for x in xs:
        state, cache = lstm_step(p, x, state, mode)
        caches.append(cache)
        loss += 0.1 * float(state.c.sum())
    loss += 0.5 * float(np.sum((state.h - target) ** 2))
    return loss, caches, state


@pytest.mark.parametrize("mode", list(ModulationMode))
@pytest.mark.parametrize("T", [1, 2, 8])
def test_bptt_matches_finite_differences(mode, T):
    H, E = 8 if T == 8 else 4, 3
    p = random_params(H, E, seed=T, scale=0.6)
    rng = np.random.default_rng(T)
    xs = [rng.standard_normal(E) for _ in range(T)]
    target = rng.standard_normal(H)
    _, caches, state = _sequence_loss(p, xs, target, mode)
    dh, dc = state.h - target, np.zeros(H)
    for cache in reversed(caches):
        dc = dc + 0.1
        _, dprev = lstm_step_backward(p, cache, dh, dc)
        dh, dc = dprev.h, dprev.c
    err = grad_check(lambda: _sequence_loss(p, xs, target, mode)[0], p.parameters(), 1e-5)
    assert err < 1e-4


def test_single_step_softmax_nll_grad_check():
    from mat_caption.numerics import Parameter, log_softmax, softmax
    H, V = 4, 5
    p = random_params(H, H, seed=11)
    rng = np.random.default_rng(11)
    W = Parameter("W", rng.uniform(-0.5, 0.5, (V, H)))
    x, h0, c0 = rng.standard_normal(H), rng.standard_normal(H) * 0.3, rng.standard_normal(H)

    def loss():
        s, _ = lstm_step(p, x, LstmState(h0, c0))
        return -float(log_softmax(W.value @ s.h)[2])

    s, cache = lstm_step(p, x, LstmState(h0, c0))
    d_logits = softmax(W.value @ s.h)
    d_logits[2] -= 1.0
    W.grad += np.outer(d_logits, s.h)
    lstm_step_backward(p, cache, W.value.T @ d_logits, np.zeros(H))
    assert grad_check(loss, [W, *p.parameters()]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 1.0), st.sampled_from(list(ModulationMode)))
def test_state_ranges(seed, scale, mode):
    rng = np.random.default_rng(seed)
    p = random_params(6, 4, seed=seed % 1000, scale=scale)
    state = LstmState.zeros(6)
    for _ in range(5):
        state, cache = lstm_step(p, rng.standard_normal(4), state, mode)
        assert np.all(np.abs(state.h) < 1)
        for gate in (cache.i, cache.f, cache.o):
            assert np.all((gate > 0) & (gate < 1))


def test_batched_step_matches_rows():
    p = random_params(5, 3, seed=4)
    rng = np.random.default_rng(4)
    X, Hs, Cs = rng.standard_normal((4, 3)), rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    batched, _ = lstm_step(p, X, LstmState(Hs, Cs))
    for b in range(4):
        single, _ = lstm_step(p, X[b], LstmState(Hs[b], Cs[b]))
        np.testing.assert_allclose(batched.h[b], single.h, atol=1e-15)
