import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcra.baselines import grid_search_allocate
from mcra.channel import ChannelInstance, NetworkConfig, generate_dataset
from mcra.ewmmse import (
    SolverOptions, WmmseState, mse_objective, solve, solve_batch, update_u, update_v, update_w,
    user_power, v_coefficients,
)
from mcra.rates import compute_sum_rate, weighted_sum_rate


def waterfill(a, budget):
    """max sum log(1 + a_m p_m) s.t. sum p = budget; water level by sorting."""
    inv = np.sort(1.0 / a)
    for k in range(len(a), 0, -1):
        level = (budget + inv[:k].sum()) / k
        if level > inv[k - 1]:
            return np.maximum(level - 1.0 / a, 0.0)
    raise AssertionError("unreachable")


def one_link_state(v, g=1.0):
    inst = ChannelInstance(np.full((1, 1, 1), g))
    return inst, WmmseState(v=np.full((1, 1), v))


def test_u_update_single_link():
    inst, state = one_link_state(1.0)
    u, J = update_u(state, inst, NetworkConfig(D=1, M=1, noise_power=1.0))
    assert J[0, 0] == 2.0 and u[0, 0] == 0.5


def test_u_zero_when_silent():
    inst, state = one_link_state(0.0)
    u, J = update_u(state, inst, NetworkConfig(D=1, M=1, noise_power=1.0))
    assert u[0, 0] == 0.0 and J[0, 0] == 1.0


def test_u_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    g = rng.uniform(0.1, 1.0, size=(2, 3, 3))
    v = rng.uniform(0.1, 0.7, size=(3, 2))
    state = WmmseState(v=v)
    u, J = update_u(state, ChannelInstance(g), NetworkConfig(D=3, M=2, noise_power=0.05))
    for m in range(2):
        for i in range(3):
            Jim = sum((g[m, i, j] * v[j, m]) ** 2 for j in range(3)) + 0.05
            assert J[i, m] == pytest.approx(Jim, rel=1e-14)
            assert u[i, m] == pytest.approx(g[m, i, i] * v[i, m] / Jim, rel=1e-14)


def test_w_update_single_link():
    inst, state = one_link_state(1.0)
    cfg = NetworkConfig(D=1, M=1, noise_power=1.0)
    update_u(state, inst, cfg)
    e, w = update_w(state, inst, cfg)
    assert e[0, 0] == pytest.approx(0.5) and w[0, 0] == pytest.approx(2.0)


def test_w_update_silent_link():
    inst, state = one_link_state(0.0)
    cfg = NetworkConfig(D=1, M=1)
    update_u(state, inst, cfg)
    e, w = update_w(state, inst, cfg)
    assert e[0, 0] == 1.0 and w[0, 0] == 1.0


def test_w_times_e_is_one_and_mse_matches_sinr():
    rng = np.random.default_rng(1)
    g = rng.uniform(0.1, 1.0, size=(2, 4, 4))
    cfg = NetworkConfig(D=4, M=2, noise_power=0.01)
    state = WmmseState(v=rng.uniform(0, 0.7, size=(4, 2)))
    inst = ChannelInstance(g)
    update_u(state, inst, cfg)
    e, w = update_w(state, inst, cfg)
    np.testing.assert_allclose(w * e, 1.0, rtol=1e-15)
    sinr_rates = compute_sum_rate(inst, state.v ** 2, cfg).rates
    np.testing.assert_allclose(-np.log2(e), sinr_rates, rtol=1e-10)


def test_v_update_binding_single_link():
    inst = ChannelInstance(np.ones((1, 1, 1)))
    state = WmmseState(v=np.ones((1, 1)), u=np.full((1, 1), 0.5), w=np.full((1, 1), 2.0))
    v = update_v(state, inst, NetworkConfig(D=1, M=1, p_max=1.0))
    assert v[0, 0] == pytest.approx(1.0, abs=1e-8)
    assert state.lam[0] == pytest.approx(0.5, abs=1e-8)
    assert v[0, 0] ** 2 <= 1.0


def test_v_update_slack_budget():
    inst = ChannelInstance(np.ones((1, 1, 1)))
    state = WmmseState(v=np.ones((1, 1)), u=np.full((1, 1), 0.5), w=np.full((1, 1), 2.0))
    v = update_v(state, inst, NetworkConfig(D=1, M=1, p_max=10.0))
    assert state.lam[0] == 0.0 and v[0, 0] == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_v_update_binding_users_hit_budget(seed):
    rng = np.random.default_rng(seed)
    inst = ChannelInstance(rng.uniform(0.1, 1.0, size=(2, 2, 2)))
    cfg = NetworkConfig(D=2, M=2, noise_power=1e-3)
    state = WmmseState(v=np.full((2, 2), math.sqrt(0.5)))
    update_u(state, inst, cfg)
    update_w(state, inst, cfg)
    v = update_v(state, inst, cfg)
    power = np.sum(v ** 2, axis=1)
    assert np.all(power <= cfg.p_max * (1 + 1e-9))
    binding = state.lam > 0
    assert np.all(cfg.p_max - power[binding] <= 1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_user_power_strictly_decreasing_in_multiplier(seed):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0.05, 1.0, size=(3, 3, 3))
    u = rng.uniform(0.1, 2.0, size=(3, 3))
    w = rng.uniform(1.0, 5.0, size=(3, 3))
    A, B = v_coefficients(g, u, w, np.ones(3))
    grid = np.linspace(0, 50, 200)
    powers = np.array([user_power(A, B, np.full(3, lam)) for lam in grid])
    assert np.all(np.diff(powers, axis=0) < 0)


def test_single_link_gets_full_power():
    cfg = NetworkConfig(D=1, M=1)
    inst = ChannelInstance(np.full((1, 1, 1), 0.1))
    alloc, _ = solve(inst, cfg)
    assert alloc.P[0, 0] == pytest.approx(1.0, rel=1e-7)
    rate = compute_sum_rate(inst, alloc, cfg).weighted_sum
    assert rate == pytest.approx(math.log2(1 + 0.01 * 1.0 / 1e-4), rel=1e-7)


def test_equal_gains_split_evenly():
    cfg = NetworkConfig(D=1, M=2)
    alloc, _ = solve(ChannelInstance(np.full((2, 1, 1), 0.05)), cfg)
    np.testing.assert_allclose(alloc.P, [[0.5, 0.5]], atol=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_interference_free_solution_is_waterfilling(seed):
    rng = np.random.default_rng(seed)
    D, M = 3, 3
    cfg = NetworkConfig(D=D, M=M, noise_power=1e-2)
    g = np.zeros((M, D, D))
    for m in range(M):
        g[m][np.diag_indices(D)] = rng.uniform(0.1, 0.4, size=D)
    alloc, state = solve(ChannelInstance(g), cfg, SolverOptions(max_iters=300, rel_tol=1e-12))
    for i in range(D):
        a = np.array([g[m, i, i] ** 2 for m in range(M)]) / cfg.noise_power
        p_opt = waterfill(a, cfg.p_max)
        r_opt = np.sum(np.log2(1 + a * p_opt))
        r_got = np.sum(np.log2(1 + a * alloc.P[i]))
        assert r_got == pytest.approx(r_opt, rel=1e-6)
        np.testing.assert_allclose(alloc.P[i], p_opt, atol=2e-3)


@pytest.mark.parametrize("seed", range(8))
def test_objective_non_increasing(seed):
    ds = generate_dataset(NetworkConfig(D=6, M=3, seed=seed), 1)
    _, state = solve(ds[0], ds.config)
    trace = np.array(state.trace)
    assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]) + 1e-12)


def test_fixed_point_consistency():
    ds = generate_dataset(NetworkConfig(D=5, M=2, seed=3), 1)
    cfg = ds.config
    inst = ds[0]
    _, state = solve(inst, cfg, SolverOptions(max_iters=1000, rel_tol=1e-12))
    u_old, w_old = state.u.copy(), state.w.copy()
    update_u(state, inst, cfg)
    update_w(state, inst, cfg)
    np.testing.assert_allclose(state.u, u_old, rtol=1e-6)
    np.testing.assert_allclose(state.w, w_old, rtol=1e-6)


def test_batch_solver_agrees_with_single():
    ds = generate_dataset(NetworkConfig(D=5, M=2, seed=4), 6)
    P, iters, _ = solve_batch(ds.gains, ds.config)
    for k in range(6):
        alloc, state = solve(ds[k], ds.config)
        assert iters[k] == state.iterations
        np.testing.assert_allclose(P[k], alloc.P, rtol=1e-8, atol=1e-12)


def test_batch_traces_are_non_increasing():
    ds = generate_dataset(NetworkConfig(D=4, M=2, seed=5), 5)
    _, _, traces = solve_batch(ds.gains, ds.config, record_trace=True)
    for tr in traces:
        assert len(tr) >= 2 and np.all(np.diff(tr) <= 1e-9 * np.abs(np.array(tr[:-1])) + 1e-12)


def test_near_grid_optimum_small_batch():
    ds = generate_dataset(NetworkConfig(D=2, M=2, seed=8), 5)
    for inst in ds.samples:
        alloc, _ = solve(inst, ds.config)
        grid = grid_search_allocate(inst, ds.config, levels=21)
        ours = weighted_sum_rate(inst.gains, alloc.P, ds.config)
        best = weighted_sum_rate(inst.gains, grid.P, ds.config)
        assert ours >= 0.95 * best


def test_dead_link_gets_no_power():
    g = np.array([[[0.0, 0.1], [0.1, 0.5]]])
    alloc, _ = solve(ChannelInstance(g), NetworkConfig(D=2, M=1))
    assert alloc.P[0, 0] == 0.0 and alloc.C[0, 0] == 0


def test_mse_objective_equals_rate_identity():
    # at optimal u, w the objective is sum(1 + ln e) = D*M - ln(2) * sum rate
    ds = generate_dataset(NetworkConfig(D=4, M=2, seed=6), 1)
    inst, cfg = ds[0], ds.config
    state = WmmseState(v=np.full((4, 2), math.sqrt(0.5)))
    update_u(state, inst, cfg)
    update_w(state, inst, cfg)
    obj = mse_objective(inst.gains, state.u, state.w, state.v, cfg.noise_power, cfg.alpha)
    rate = compute_sum_rate(inst, state.v ** 2, cfg).weighted_sum
    assert obj == pytest.approx(8 - math.log(2) * rate, rel=1e-12)
