import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inverse_ecg.autodiff import Tape, gradient
from inverse_ecg.neuralnet import (AdamConfig, NetworkSpec, NetworkState, accumulate_sharded,
                                   adam_step, forward, forward_tape, init_network,
                                   load_checkpoint, parameter_inputs, save_checkpoint)


def _zero_state(spec):
    state = init_network(spec, 0)
    state.params = [np.zeros_like(p) for p in state.params]
    return state


def test_parameter_count():
    assert NetworkSpec(3, 5, 10, 2).parameter_count == 502


def test_init_is_deterministic_with_zero_biases():
    a, b = init_network(NetworkSpec(), 7), init_network(NetworkSpec(), 7)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(not p.any() for p in a.params[1::2])
    assert a.flat().size == 502


def test_output_scale_shrinks_last_layer_only():
    a, b = init_network(NetworkSpec(), 3), init_network(NetworkSpec(), 3, output_scale=0.01)
    assert np.array_equal(a.params[0], b.params[0])
    assert np.allclose(b.params[-2], 0.01 * a.params[-2])


def test_zero_network_outputs_zero():
    spec = NetworkSpec()
    out = forward(_zero_state(spec), np.random.default_rng(0).normal(size=(5, 3)))
    assert out.shape == (5, 2) and not out.any()


def test_hand_set_single_layer_network():
    spec = NetworkSpec(input_width=2, hidden_layers=1, neurons=1, output_width=1)
    params = [np.array([[2.0], [-1.0]]), np.zeros(1), np.array([[1.0]]), np.zeros(1)]
    zeros = [np.zeros_like(p) for p in params]
    state = NetworkState(spec, params, zeros, zeros)
    assert round(float(forward(state, [[2.0, 3.0]])[0, 0]), 4) == 0.7616


def test_batch_permutation_commutes():
    state = init_network(NetworkSpec(), 1)
    X = np.random.default_rng(1).normal(size=(7, 3))
    perm = np.array([3, 0, 6, 1, 5, 2, 4])
    assert np.array_equal(forward(state, X)[perm], forward(state, X[perm]))


def test_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        forward(init_network(NetworkSpec(), 0), np.ones((2, 4)))


def test_tape_forward_agrees_with_numpy():
    state = init_network(NetworkSpec(), 5)
    X = np.random.default_rng(5).normal(size=(9, 3))
    tape = Tape()
    out = forward_tape(parameter_inputs(tape, state), X, state.spec)
    assert np.allclose(out.value, forward(state, X), atol=1e-15)


def test_zero_gradient_step_keeps_parameters():
    state = init_network(NetworkSpec(), 2)
    nxt = adam_step(state, [np.zeros_like(p) for p in state.params], AdamConfig())
    assert nxt.step == 1
    assert all(np.array_equal(p, q) for p, q in zip(state.params, nxt.params))


def test_first_adam_step_by_hand():
    spec = NetworkSpec(1, 1, 1, 1)
    params = [np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1)]
    state = NetworkState(spec, params, [np.zeros_like(p) for p in params],
                         [np.zeros_like(p) for p in params])
    grads = [np.ones((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1)]
    nxt = adam_step(state, grads, AdamConfig(lr=0.1))
    assert nxt.params[0][0, 0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)


def test_adam_is_not_linear_in_steps():
    # gradient of 0.5 * |theta - 1|^2 taken at the current parameters; a constant
    # gradient would make two bias-corrected steps coincide with one doubled step
    def grads(s):
        return [p - 1.0 for p in s.params]

    state = init_network(NetworkSpec(), 4)
    once = adam_step(state, grads(state), AdamConfig(lr=0.01))
    twice = adam_step(once, grads(once), AdamConfig(lr=0.01))
    doubled = adam_step(state, grads(state), AdamConfig(lr=0.02))
    assert not np.allclose(twice.flat(), doubled.flat())


def test_non_finite_gradient_names_block():
    state = init_network(NetworkSpec(), 0)
    grads = [np.zeros_like(p) for p in state.params]
    grads[3] = grads[3] + np.nan
    with pytest.raises(FloatingPointError, match="b2"):
        adam_step(state, grads, AdamConfig())


def test_single_shard_divided_by_size():
    g = [np.array([4.0, 8.0])]
    assert np.array_equal(accumulate_sharded([(g, 4)])[0], np.array([1.0, 2.0]))


def test_opposite_shards_cancel():
    g = [np.array([1.5, -2.0])]
    out = accumulate_sharded([(g, 3), ([-g[0]], 3)])
    assert not out[0].any()


def test_empty_shard_list():
    with pytest.raises(ValueError):
        accumulate_sharded([])


def _per_sample_sum_grad(state, X, Y):
    tape = Tape()
    pv = parameter_inputs(tape, state)
    loss = (forward_tape(pv, X, state.spec) - Y).square().sum()
    return gradient(loss, pv)


def test_sharded_equals_full_batch():
    state = init_network(NetworkSpec(), 9)
    rng = np.random.default_rng(9)
    X, Y = rng.normal(size=(64, 3)), rng.normal(size=(64, 2))
    full = [g / 64 for g in _per_sample_sum_grad(state, X, Y)]
    shards = [(_per_sample_sum_grad(state, X[k:k + 16], Y[k:k + 16]), 16)
              for k in range(0, 64, 16)]
    for a, b in zip(accumulate_sharded(shards), full):
        assert np.max(np.abs(a - b)) < 1e-12


def test_checkpoint_roundtrip(tmp_path):
    state = init_network(NetworkSpec(3, 2, 4, 2), 11)
    state = adam_step(state, [np.ones_like(p) for p in state.params], AdamConfig())
    save_checkpoint(state, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt.json")
    assert back.step == 1 and back.spec == state.spec
    for a, b in zip(back.params + back.m + back.v, state.params + state.m + state.v):
        assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(sizes=st.lists(st.integers(1, 12), min_size=1, max_size=6), seed=st.integers(0, 1000))
def test_random_partitions_match_full_batch(sizes, seed):
    """Any split of a batch into shards reproduces the full-batch mean gradient."""
    spec = NetworkSpec(3, 2, 4, 2)
    state = init_network(spec, seed)
    n = sum(sizes)
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    full = [g / n for g in _per_sample_sum_grad(state, X, Y)]
    cuts = np.cumsum([0] + sizes)
    shards = [(_per_sample_sum_grad(state, X[a:b], Y[a:b]), b - a)
              for a, b in zip(cuts[:-1], cuts[1:])]
    for a, b in zip(accumulate_sharded(shards), full):
        assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(hidden=st.integers(1, 4), neurons=st.integers(1, 12), seed=st.integers(0, 99))
def test_parameter_count_matches_blocks(hidden, neurons, seed):
    spec = NetworkSpec(3, hidden, neurons, 2)
    assert init_network(spec, seed).flat().size == spec.parameter_count
