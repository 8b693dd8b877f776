import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adalie.bench import SYSTEMS, make_system
from adalie.dynsys import (DivergenceError, LtvSystem, NoiseModel, NonlinearSystem,
                           NotStronglyObservableError, RankDeficientError, absorb_input_matrix,
                           build_cache, checked_pinv, linearize, perturb_system, simulate,
                           state_transition, write_episode_csv)


def random_ltv(seed, T=8, n=2, m=1, p=2):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 0.5, (T + 1, n, n))
    B = rng.normal(0, 1, (T + 1, n, m))
    C = rng.normal(0, 1, (T + 1, p, n))
    return LtvSystem(A, B, C, T)


def scalar(a, T=10):
    return LtvSystem.time_invariant([[a]], [[1.0]], [[1.0]], T)


# --- state transitions -----------------------------------------------------------------

def test_transition_diagonal_is_identity():
    sys_ = random_ltv(0)
    for k in range(sys_.T + 1):
        np.testing.assert_array_equal(state_transition(sys_, k, k), np.eye(2))


def test_transition_lti_is_matrix_power():
    A = np.array([[0.9, 0.2], [-0.1, 0.7]])
    s = LtvSystem.time_invariant(A, np.eye(2), np.eye(2), 10)
    np.testing.assert_allclose(state_transition(s, 7, 2), np.linalg.matrix_power(A, 5), atol=1e-14)


def test_double_integrator_transition_by_hand():
    s = make_system("double-integrator", 5)
    np.testing.assert_array_equal(state_transition(s, 3, 1), [[1, 2], [0, 1]])


def test_transition_index_checks():
    s = random_ltv(1)
    with pytest.raises(IndexError):
        state_transition(s, 2, 3)
    with pytest.raises(IndexError):
        state_transition(s, s.T + 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_transition_composes(seed, data):
    s = random_ltv(seed)
    i = data.draw(st.integers(0, s.T))
    j = data.draw(st.integers(i, s.T))
    t = data.draw(st.integers(j, s.T))
    lhs = state_transition(s, t, i)
    rhs = state_transition(s, t, j) @ state_transition(s, j, i)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# --- cache ---------------------------------------------------------------------------

def test_cache_scalar_h_values():
    assert build_cache(scalar(0.5)).h[2, 0, 0] == pytest.approx(1.5)
    np.testing.assert_allclose(build_cache(scalar(0.0)).h[1:, 0, 0], 1.0)
    np.testing.assert_allclose(build_cache(scalar(1.0)).h[1:, 0, 0], np.arange(1, 11))


def test_cache_table_matches_direct_transitions():
    s = random_ltv(3)
    absorbed, _ = absorb_input_matrix(s)
    cache = build_cache(absorbed)
    lazy = build_cache(absorbed, full_table=False)
    assert lazy.phi is None
    for t in range(s.T + 1):
        for i in range(t + 1):
            np.testing.assert_allclose(cache.transition(t, i), state_transition(s, t, i), atol=1e-12)
            np.testing.assert_allclose(lazy.transition(t, i), cache.transition(t, i), atol=1e-12)
    np.testing.assert_array_equal(lazy.norms, cache.norms)


def test_cache_norms_match_inverse_h_definition():
    s = make_system("http-server", 12)
    absorbed, _ = absorb_input_matrix(s)
    cache = build_cache(absorbed)
    for tau in range(1, 13):
        hinv = np.linalg.inv(cache.h[tau])
        for i in range(tau + 1):
            expect = np.linalg.norm(hinv @ state_transition(absorbed, tau, i), 2)
            assert cache.norms[tau, i] == pytest.approx(expect, rel=1e-9)
        assert cache.pinv_norms[tau] == pytest.approx(np.linalg.norm(hinv, 2), rel=1e-9)
    assert (cache.norms >= 0).all()


@pytest.mark.parametrize("name", [s for s in SYSTEMS if not s.startswith("nonlin")])
def test_strong_observability_witness(name):
    absorbed, _ = absorb_input_matrix(make_system(name, 100))
    cache = build_cache(absorbed)
    for tau in range(1, 101):
        ch = absorbed.C[tau] @ cache.h[tau]
        np.testing.assert_allclose(cache.ch_pinv[tau] @ ch, np.eye(absorbed.n_x), atol=1e-8)


def test_cache_rejects_unobservable_system_naming_tau():
    s = LtvSystem.time_invariant(np.eye(2), np.eye(2), [[0.0, 1.0]], 5)
    with pytest.raises(NotStronglyObservableError) as err:
        build_cache(s)
    assert err.value.tau == 1
    assert "tau=1" in str(err.value)


def test_checked_pinv_reports_rank():
    pinv, rank = checked_pinv([[1.0, 0.0], [0.0, 1e-14]])
    assert rank == 1
    np.testing.assert_allclose(pinv, [[1.0, 0.0], [0.0, 0.0]])
    assert checked_pinv(np.zeros((2, 2)))[1] == 0


# --- input-matrix absorption ---------------------------------------------------------

def test_absorb_identity_is_noop():
    s = LtvSystem.time_invariant(np.eye(2) * 0.5, np.eye(2), np.eye(2), 4)
    absorbed, recover = absorb_input_matrix(s)
    np.testing.assert_array_equal(absorbed.B, s.B)
    np.testing.assert_allclose(recover(np.array([3.0, -1.0]), 2), [3.0, -1.0])


@pytest.mark.parametrize("B,absorbed,expected", [
    ([[0.0], [1.0]], [0.0, 2.0], 2.0),
    ([[1.0], [1.0]], [1.0, 3.0], 2.0),
])
def test_absorb_recovery_map(B, absorbed, expected):
    s = LtvSystem.time_invariant(np.eye(2), B, np.eye(2), 3)
    new, recover = absorb_input_matrix(s)
    np.testing.assert_array_equal(new.B[0], np.eye(2))
    assert recover(np.array(absorbed), 0)[0] == pytest.approx(expected)
    stacked = recover(np.tile(absorbed, (3, 1)))
    np.testing.assert_allclose(stacked[:, 0], expected)


def test_absorb_rejects_rank_deficient_b():
    s = LtvSystem.time_invariant(np.eye(2), [[1.0, 2.0], [2.0, 4.0]], np.eye(2), 3)
    with pytest.raises(RankDeficientError):
        absorb_input_matrix(s)


# --- noise ---------------------------------------------------------------------------

@pytest.mark.parametrize("family", ["uniform", "truncated-gaussian"])
@pytest.mark.parametrize("dim", [1, 2, 5])
def test_noise_samples_bounded_and_zero_mean(family, dim):
    noise = NoiseModel(0.3, family, 7)
    draws = noise.sample(np.random.default_rng(7), dim, 100_000)
    assert np.linalg.norm(draws, axis=1).max() <= 0.3 + 1e-15
    assert np.all(np.abs(draws.mean(axis=0)) <= 3 * 0.3 / np.sqrt(100_000))


def test_uniform_noise_variance_matches_declared():
    noise = NoiseModel(0.5, "uniform", 0)
    draws = noise.sample(np.random.default_rng(0), 3, 200_000)
    np.testing.assert_allclose(draws.var(axis=0), noise.component_variance(3), rtol=0.02)


def test_zero_noise_and_bad_arguments():
    assert not NoiseModel(1.0, "zero").sample(np.random.default_rng(), 3).any()
    with pytest.raises(ValueError):
        NoiseModel(-1.0)
    with pytest.raises(ValueError):
        NoiseModel(1.0, "laplace")


# --- simulation ----------------------------------------------------------------------

def test_simulate_zero_everything_gives_zero_outputs():
    ep = simulate(make_system("spring-mass", 20), lambda t, y: [0.0], NoiseModel(), [0.0, 0.0])
    assert not ep.outputs.any()
    assert ep.T == 20 and ep.true_inputs.shape == (20, 1)


def test_simulate_delay_line():
    ep = simulate(scalar(0.0, 6), lambda t, y: [1.0], NoiseModel(), [0.0])
    np.testing.assert_array_equal(ep.outputs[:, 0], np.ones(6))


def test_simulate_measurement_noise_is_bounded():
    s = make_system("http-server", 50)
    ep = simulate(s, lambda t, y: [np.sin(t)], NoiseModel(0.2, "uniform", 3), [1.0, -1.0])
    ys = ep.all_outputs()
    resid = ys - np.einsum("ij,tj->ti", s.C[0], ep.states)
    assert np.linalg.norm(resid, axis=1).max() <= 0.2


def test_simulate_noiseless_output_decomposition():
    s = random_ltv(11, T=12)
    rng = np.random.default_rng(11)
    us = rng.normal(size=(12, 1))
    x0 = rng.normal(size=2)
    ep = simulate(s, lambda t, y: us[t], NoiseModel(), x0)
    for t in range(1, 13):
        forced = sum(s.C[t] @ state_transition(s, t, i + 1) @ s.B[i] @ us[i] for i in range(t))
        np.testing.assert_allclose(ep.outputs[t - 1] - s.C[t] @ state_transition(s, t, 0) @ x0, forced,
                                   atol=1e-10)


def test_simulate_input_fn_sees_measurement():
    seen = []
    simulate(scalar(0.5, 4), lambda t, y: seen.append(y.copy()) or [1.0], NoiseModel(), [2.0])
    assert seen[0][0] == 2.0 and seen[1][0] == 2.0


def test_simulate_divergence_names_step():
    with pytest.raises(DivergenceError) as err:
        simulate(scalar(1e4, 10), lambda t, y: [0.0], NoiseModel(), [1.0])
    assert err.value.t == 4


def test_episode_window_reanchors():
    s = make_system("spring-mass", 20)
    ep = simulate(s, lambda t, y: [1.0], NoiseModel(0.1, "uniform", 1), [0.0, 0.0])
    w = ep.window(5, 10)
    assert w.T == 10
    np.testing.assert_array_equal(w.x0_hat, ep.all_outputs()[5])
    np.testing.assert_array_equal(w.outputs, ep.outputs[5:15])


def test_episode_csv_round_trip(tmp_path):
    from adalie.config import read_measurements

    ep = simulate(make_system("http-server", 6), lambda t, y: [0.5 * t], NoiseModel(0.1, "uniform", 2),
                  [0.0, 0.0])
    path = tmp_path / "ep.csv"
    write_episode_csv(ep, path)
    Y, U = read_measurements(path)
    np.testing.assert_array_equal(Y, ep.all_outputs())
    np.testing.assert_array_equal(U[:-1], ep.true_inputs)
    assert np.isnan(U[-1]).all()


# --- linearization -------------------------------------------------------------------

def test_linearize_linear_map_recovers_matrices():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    nl = NonlinearSystem(g=lambda x: A @ x, h=lambda x: B, dg=lambda x: A, C=np.eye(2), dt=1.0)
    ys = np.random.default_rng(0).normal(size=(6, 2))
    lin = linearize(nl, ys[1:], ys[0])
    assert lin.T == 5
    np.testing.assert_array_equal(lin.A, np.broadcast_to(A, (6, 2, 2)))
    np.testing.assert_array_equal(lin.B, np.broadcast_to(B, (6, 2, 1)))


@pytest.mark.parametrize("x,expected", [(0.0, 1.0), (1.0, 0.7)])
def test_linearize_cubic_slope(x, expected):
    nl = make_system("nonlin-1", 3)
    lin = linearize(nl, [[x]] * 3, [x])
    np.testing.assert_allclose(lin.A[:, 0, 0], expected)


def test_linearize_contracts_input_derivative():
    # h(x) = [[x0], [1]] so dh/dx0 adds x0 to the first row of B
    nl = NonlinearSystem(g=lambda x: x, h=lambda x: np.array([[x[0]], [1.0]]), dg=lambda x: np.eye(2),
                         C=np.eye(2), dt=1.0,
                         dh=lambda x: np.array([[[1.0, 0.0]], [[0.0, 0.0]]]))
    lin = linearize(nl, [[2.0, 0.0]], [3.0, 0.0])
    np.testing.assert_allclose(lin.B[0], [[6.0], [1.0]])
    np.testing.assert_allclose(lin.B[1], [[4.0], [1.0]])


def test_linearize_requires_full_rank_c():
    nl = NonlinearSystem(g=lambda x: x, h=lambda x: np.eye(2)[:, :1], dg=lambda x: np.eye(2),
                         C=[[1.0, 0.0]], dt=1.0)
    with pytest.raises(RankDeficientError):
        linearize(nl, [[1.0]], [1.0, 0.0])


# --- perturbation --------------------------------------------------------------------

def test_perturb_zero_sigma_is_identity():
    s = make_system("spring-mass", 10)
    assert perturb_system(s, 0.0, 3) is s


def test_perturb_is_deterministic_and_touches_only_a():
    s = make_system("spring-mass", 10)
    p1, p2 = perturb_system(s, 0.1, 5), perturb_system(s, 0.1, 5)
    np.testing.assert_array_equal(p1.A, p2.A)
    assert not np.array_equal(p1.A, s.A)
    np.testing.assert_array_equal(p1.B, s.B)
    np.testing.assert_array_equal(p1.C, s.C)


def test_perturb_entry_std():
    s = LtvSystem.time_invariant(np.zeros((2, 2)), np.eye(2), np.eye(2), 9_999)
    p = perturb_system(s, 0.1, 0)
    std = p.A.std(axis=0)
    assert np.all((std >= 0.097) & (std <= 0.103))
    with pytest.raises(ValueError):
        perturb_system(s, -0.1, 0)


def test_ltv_system_validates_shapes():
    with pytest.raises(ValueError):
        LtvSystem.time_invariant(np.eye(2), np.ones((3, 1)), np.eye(2), 4)
    with pytest.raises(ValueError):
        LtvSystem(np.zeros((3, 2, 2)), np.ones((2, 1)), np.eye(2), 4)
    with pytest.raises(ValueError):
        LtvSystem.time_invariant(np.eye(2), np.eye(2), np.eye(2), 0)
