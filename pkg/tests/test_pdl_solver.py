import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inverse_ecg.autodiff import Tape
from inverse_ecg.forward_sim import APParameters, SingularCouplingError, StimulusSpec, simulate
from inverse_ecg.geometry import build_grid, laplacian_operator
from inverse_ecg.neuralnet import NetworkSpec, forward, init_network, parameter_inputs
from inverse_ecg.pdl_solver import (LossBreakdown, Problem, TrainConfig, _Context,
                                    _interior_residual_sq, data_loss, draw_minibatch,
                                    history_without_timing, loss_and_gradient, pde_residuals,
                                    physics_loss, predict_hsp, sample_collocation, total_loss,
                                    train)
from inverse_ecg.transfer import synth_transfer


@pytest.fixture(scope="module")
def small_problem():
    dom = build_grid(5, 5, 1.0)
    fs = simulate(dom, APParameters(), StimulusSpec((0, 1, 5)), 30, 0.01, record_every=2)
    R = synth_transfer(dom, 6, 2.0).matrix
    return Problem(dom, R, R @ fs.u, fs.times), fs


def _zeroed(state):
    state = state.copy()
    state.params = [np.zeros_like(p) for p in state.params]
    return state


def test_empty_collocation_set():
    c = sample_collocation(build_grid(4, 4, 1.0), 2.0, 0, 0, seed=1)
    assert c.n_interior == 0 and c.n_boundary == 0


def test_continuous_samples_in_range():
    dom = build_grid(3, 3, 0.5)
    c = sample_collocation(dom, 4.0, 1000, 50, seed=2, mode="continuous")
    assert c.interior_coords.min() >= 0 and c.interior_coords.max() <= 1
    assert c.interior_times.min() >= 0 and c.interior_times.max() <= 4.0


def test_collocation_deterministic():
    dom = build_grid(6, 6, 1.0)
    a = sample_collocation(dom, 3.0, 300, 40, seed=5)
    b = sample_collocation(dom, 3.0, 300, 40, seed=5)
    for name in ("interior_coords", "interior_times", "interior_nodes", "boundary_coords",
                 "boundary_times", "boundary_nodes"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_closed_surface_boundary_set_is_empty():
    from inverse_ecg.geometry import icosphere, mesh_domain
    dom = mesh_domain(*icosphere(1))
    with pytest.warns(UserWarning, match="closed surface"):
        c = sample_collocation(dom, 1.0, 20, 20, seed=0)
    assert c.n_boundary == 0 and c.interior_coords.shape == (20, 3)


def test_data_loss_zero_cases(small_problem):
    problem, fs = small_problem
    state = _zeroed(init_network(NetworkSpec(), 0))
    y0 = np.zeros_like(problem.y)
    assert float(data_loss(state, problem.R, y0, problem.domain.node_coords,
                           problem.times).value) == 0.0
    N = problem.domain.node_count
    coords = problem.domain.node_coords
    net = init_network(NetworkSpec(), 3)
    ctx = _Context(coords, problem.times)
    T = problem.times.size
    pred = forward(net, ctx.inputs(np.tile(coords, (T, 1)), np.repeat(problem.times, N)))
    y_exact = pred[:, 0].reshape(T, N).T
    loss = data_loss(net, np.eye(N), y_exact, coords, problem.times, sample=[0, 4, 9])
    assert float(loss.value) < 1e-28


def test_data_loss_hand_values():
    spec = NetworkSpec(input_width=2, hidden_layers=1, neurons=1, output_width=2)
    state = _zeroed(init_network(spec, 0))
    state.params[-1] = np.array([0.5, 0.0])        # u = 0.5 everywhere
    coords = np.array([[0.0], [1.0]])
    R = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    y = np.array([[0.5, 1.0], [0.0, 1.0], [2.0, -1.0]])
    pred = R @ np.full(2, 0.5)
    oracle = np.mean((y - pred[:, None]) ** 2)
    got = float(data_loss(state, R, y, coords, np.array([0.0, 1.0])).value)
    assert got == pytest.approx(oracle, rel=1e-15)


def test_data_loss_dimension_mismatch(small_problem):
    problem, _ = small_problem
    with pytest.raises(ValueError):
        data_loss(init_network(NetworkSpec(), 0), problem.R[:, :-1], problem.y,
                  problem.domain.node_coords, problem.times)


def test_rest_network_has_no_physics_residual():
    dom = build_grid(5, 5, 1.0)
    colloc = sample_collocation(dom, 2.0, 40, 10, seed=0)
    state = _zeroed(init_network(NetworkSpec(), 0))
    for mode in ("discrete", "continuous"):
        Lf, Lbc = physics_loss(state, colloc, APParameters(), mode, dom, 2.0)
        assert float(Lf.value) == 0.0 and float(Lbc.value) == 0.0


def test_residual_hand_values():
    r_u, r_v = pde_residuals(0.5, 0.0, 0.5, 0.0, 0.0, APParameters())
    assert r_u == pytest.approx(-0.3, abs=1e-15)
    assert r_v == pytest.approx(-0.002 * 2.4, abs=1e-15)


def test_singular_coupling_in_residual():
    with pytest.raises(SingularCouplingError):
        pde_residuals(-0.3, 0.0, 0.0, 0.0, 0.0, APParameters())


def test_boundary_residual_zero_for_space_constant_output():
    dom = build_grid(5, 5, 1.0)
    spec = NetworkSpec()
    state = init_network(spec, 4)
    state.params[0][:2] = 0.0               # first layer ignores x and y
    colloc = sample_collocation(dom, 2.0, 0, 30, seed=3)
    _, Lbc = physics_loss(state, colloc, APParameters(), "discrete", dom, 2.0)
    assert float(Lbc.value) == 0.0


def _fd_residual_oracle(state, ctx, params, coords, times, nodes, mode, lap_op, eps=1e-5):
    """Residuals from numpy evaluations and central differences in physical units."""
    def net(c, t):
        return forward(state, ctx.inputs(c, t))

    out = net(coords, times)
    u, v = out[:, 0], out[:, 1]
    d_t = (net(coords, times + eps) - net(coords, times - eps)) / (2 * eps)
    if mode == "discrete":
        lap = np.empty(len(nodes))
        for k, (node, t) in enumerate(zip(nodes, times)):
            field = net(ctx.node_coords, np.full(ctx.node_coords.shape[0], t))[:, 0]
            lap[k] = (lap_op @ field)[node]
    else:
        lap = np.zeros(len(times))
        e = 1e-4
        for axis in range(coords.shape[1]):
            step = np.zeros(coords.shape[1])
            step[axis] = e
            lap += (net(coords + step, times)[:, 0] - 2 * u
                    + net(coords - step, times)[:, 0]) / e ** 2
    r_u, r_v = pde_residuals(u, v, d_t[:, 0], d_t[:, 1], lap, params)
    return r_u ** 2 + r_v ** 2


@pytest.mark.parametrize("mode, tol", [("discrete", 1e-7), ("continuous", 1e-4)])
def test_interior_residual_matches_numpy_oracle(mode, tol):
    dom = build_grid(6, 5, 1.5)
    ctx = _Context(dom.node_coords, np.array([0.0, 3.0]), domain=dom)
    colloc = sample_collocation(dom, 3.0, 12, 0, seed=8, mode=mode)
    state = init_network(NetworkSpec(), 2)
    tape = Tape()
    got = _interior_residual_sq(parameter_inputs(tape, state), state.spec, ctx, APParameters(),
                                colloc.interior_coords, colloc.interior_times,
                                colloc.interior_nodes, mode).value.ravel()
    oracle = _fd_residual_oracle(state, ctx, APParameters(), colloc.interior_coords,
                                 colloc.interior_times, colloc.interior_nodes, mode,
                                 laplacian_operator(dom))
    assert np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-3)) < tol


@pytest.mark.parametrize("L_hb, L_bc, L_f, w, expected", [
    (1.0, 0.5, 0.5, 1.0, 2.0),
    (0.7, 0.2, 0.3, 0.0, 0.7),
    (0.3, 0.1, 0.2, 0.44, 0.432),
])
def test_total_loss(L_hb, L_bc, L_f, w, expected):
    bd = total_loss(L_hb, L_bc, L_f, w)
    assert bd.L_total == pytest.approx(expected, abs=1e-15)
    assert isinstance(bd, LossBreakdown)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        total_loss(1.0, 0.0, 0.0, -0.1)


def _cfg(**kw):
    base = dict(epochs=2, batch_times=4, batch_colloc=16, batch_boundary=8, N_f=200, N_bc=40,
                network=NetworkSpec(3, 2, 6, 2))
    base.update(kw)
    return TrainConfig(**base)


def test_resume_matches_uninterrupted_run(small_problem, tmp_path):
    from inverse_ecg.neuralnet import load_checkpoint, save_checkpoint
    problem, _ = small_problem
    full_state, full_hist = train(_cfg(epochs=2), problem)
    half_state, half_hist = train(_cfg(epochs=1), problem)
    save_checkpoint(half_state, tmp_path / "ckpt")
    resumed, rest = train(_cfg(epochs=2), problem, state=load_checkpoint(tmp_path / "ckpt"))
    assert history_without_timing(half_hist + rest) == history_without_timing(full_hist)
    assert np.array_equal(resumed.flat(), full_state.flat())


def test_training_log_written(small_problem, tmp_path):
    import json
    problem, _ = small_problem
    train(_cfg(epochs=3), problem, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert {"L_hb", "L_f", "L_bc", "L_total", "w"} <= set(rows[0])


def test_width_mismatch_rejected(small_problem):
    problem, _ = small_problem
    with pytest.raises(ValueError, match="input width"):
        train(_cfg(network=NetworkSpec(4, 2, 6, 2)), problem)


def test_predict_zero_network(small_problem):
    problem, _ = small_problem
    fs = predict_hsp(_zeroed(init_network(NetworkSpec(), 0)), problem.domain, problem.times)
    assert fs.shape == (25, problem.times.size) and not fs.u.any()


def test_predict_is_pure(small_problem):
    problem, _ = small_problem
    state = init_network(NetworkSpec(), 1)
    a = predict_hsp(state, problem.domain, problem.times)
    b = predict_hsp(state, problem.domain, problem.times)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)


def test_minibatch_depends_only_on_seed_and_epoch(small_problem):
    problem, _ = small_problem
    colloc = sample_collocation(problem.domain, problem.times[-1], 100, 20, seed=0)
    a = draw_minibatch(_cfg(), problem, colloc, 7)
    b = draw_minibatch(_cfg(epochs=50), problem, colloc, 7)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.interior, b.interior)


def test_full_loss_gradient_matches_finite_differences(small_problem):
    problem, _ = small_problem
    cfg = _cfg()
    colloc = sample_collocation(problem.domain, problem.times[-1], 200, 40, seed=0)
    batch = draw_minibatch(cfg, problem, colloc, 0)
    state = init_network(cfg.network, 6)
    _, grads = loss_and_gradient(state, problem, colloc, 0.3, batch)
    rng = np.random.default_rng(0)
    for _ in range(5):
        k = int(rng.integers(len(state.params)))
        idx = tuple(int(rng.integers(n)) for n in state.params[k].shape)
        vals = []
        for sign in (1, -1):
            s = state.copy()
            s.params[k][idx] += sign * 1e-6
            vals.append(loss_and_gradient(s, problem, colloc, 0.3, batch)[0].L_total)
        fd = (vals[0] - vals[1]) / 2e-6
        assert abs(grads[k][idx] - fd) <= 1e-4 * max(abs(fd), 1e-6)


@settings(max_examples=10, deadline=None)
@given(shards=st.integers(2, 6), seed=st.integers(0, 50))
def test_sharded_gradient_is_exact(small_problem, shards, seed):
    """Splitting a mini-batch across shards does not change the gradient."""
    problem, _ = small_problem
    cfg = _cfg(seed=seed)
    colloc = sample_collocation(problem.domain, problem.times[-1], 200, 40, seed=seed)
    batch = draw_minibatch(cfg, problem, colloc, 0)
    state = init_network(cfg.network, seed, cfg.output_init_scale)
    bd1, g1 = loss_and_gradient(state, problem, colloc, 0.2, batch)
    bdn, gn = loss_and_gradient(state, problem, colloc, 0.2, batch, shards=shards,
                                workers=2)
    assert bd1.L_total == pytest.approx(bdn.L_total, rel=1e-12)
    scale = max(np.max(np.abs(g)) for g in g1)
    for a, b in zip(g1, gn):
        assert np.max(np.abs(a - b)) <= 1e-12 * max(scale, 1.0)


def test_training_makes_progress_on_desk_problem():
    """Default 16x16 setup: the smoothed total loss drops over the first 200 epochs."""
    from inverse_ecg.config import ExperimentConfig
    from inverse_ecg.experiment import build_domain, build_transfer, build_truth, measurements

    cfg = ExperimentConfig()
    truth = build_truth(cfg)
    problem = Problem(build_domain(cfg), build_transfer(cfg).matrix,
                      measurements(cfg, 0.01, cfg.trial_seed(0)), truth.times)
    _, hist = train(TrainConfig(epochs=250, seed=100, colloc_seed=8019), problem)
    total = np.array([h["L_total"] for h in hist])
    smooth = np.convolve(total, np.ones(50) / 50, mode="valid")
    assert smooth[200 - 50] < smooth[0]
