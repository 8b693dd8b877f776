import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adalie.bench import make_signal, make_system
from adalie.dynsys import LtvSystem, NoiseModel, absorb_input_matrix, build_cache, simulate
from adalie.estimator import (TIME_ONLY, AdaptiveEstimator, DistanceMetric, QpProblem, SolverOptions,
                              WeightVector, bias_matrix, build_bias_vector, build_q_matrix, error_bound,
                              estimate_input, estimate_sequence, initial_weights, inversions,
                              noise_variance_constant, pgd_residual, project_simplex, solve_batch,
                              solve_weights, sparsity_profile)
from oracles import (brute_bias_vector, brute_q_matrix, random_qp, support_enumeration_minimum,
                     transition_sum)


def scalar(a, T):
    return LtvSystem.time_invariant([[a]], [[1.0]], [[1.0]], T)


def noiseless(system, u, x0=None):
    x0 = np.zeros(system.n_x) if x0 is None else x0
    return simulate(system, lambda t, y: u[t], NoiseModel(), x0)


# --- V(beta) -------------------------------------------------------------------------

@pytest.mark.parametrize("b,beta,expected", [(0.0, 0.3, 0.0), (1.0, 1.0, 36.0), (1.0, 1 / math.e, 144.0)])
def test_noise_variance_constant(b, beta, expected):
    assert noise_variance_constant(b, beta) == pytest.approx(expected)


@pytest.mark.parametrize("beta", [0.0, 1.5, -0.1])
def test_noise_variance_constant_rejects_beta(beta):
    with pytest.raises(ValueError):
        noise_variance_constant(1.0, beta)


# --- distance metric -----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 10_000))
def test_metric_symmetric_and_triangle(tw, ow, seed):
    rng = np.random.default_rng(seed)
    m = DistanceMetric(tw, ow)
    ys = rng.normal(size=(3, 2))
    D = m.matrix(ys, 3)
    np.testing.assert_allclose(D, D.T)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                assert D[i, k] <= D[i, j] + D[j, k] + 1e-12
    assert m(0, ys[0], 2, ys[2]) == pytest.approx(D[0, 2])


def test_metric_rejects_negative_weights_and_needs_outputs():
    with pytest.raises(ValueError):
        DistanceMetric(-1.0, 0.0)
    with pytest.raises(ValueError):
        DistanceMetric().matrix(None, 3)


# --- Q and q -------------------------------------------------------------------------

def test_q_matrix_delay_line_is_twice_identity():
    cache = build_cache(scalar(0.0, 6))
    np.testing.assert_allclose(build_q_matrix(cache), 2 * np.eye(6))


@pytest.mark.parametrize("name", ["spring-mass", "http-server", "double-integrator"])
def test_q_matrix_matches_definition(name):
    absorbed, _ = absorb_input_matrix(make_system(name, 8))
    Q = build_q_matrix(build_cache(absorbed))
    np.testing.assert_allclose(Q, brute_q_matrix(absorbed), rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(Q, Q.T)


def test_q_matrix_spring_mass_positive_definite():
    absorbed, _ = absorb_input_matrix(make_system("spring-mass", 100))
    assert np.linalg.eigvalsh(build_q_matrix(build_cache(absorbed))).min() > 0


def test_bias_vector_delay_line():
    cache = build_cache(scalar(0.0, 7))
    for t in range(7):
        q = build_bias_vector(cache, t, TIME_ONLY)
        np.testing.assert_allclose(q, [abs(t - (tau - 1)) for tau in range(1, 8)])


@pytest.mark.parametrize("name", ["spring-mass", "http-server"])
def test_bias_vector_matches_definition(name):
    absorbed, _ = absorb_input_matrix(make_system(name, 8))
    cache = build_cache(absorbed)
    for t in range(8):
        np.testing.assert_allclose(build_bias_vector(cache, t, TIME_ONLY), brute_bias_vector(absorbed, t),
                                   rtol=1e-9, atol=1e-12)


def test_bias_vector_zero_metric_and_constant_outputs():
    cache = build_cache(absorb_input_matrix(make_system("spring-mass", 10))[0])
    assert not bias_matrix(cache, DistanceMetric(0.0, 0.0)).any()
    flat = np.ones((11, 2))
    np.testing.assert_allclose(bias_matrix(cache, DistanceMetric(), flat), bias_matrix(cache, TIME_ONLY))
    assert (bias_matrix(cache, DistanceMetric(), np.random.default_rng(0).normal(size=(11, 2))) >= 0).all()
    with pytest.raises(IndexError):
        build_bias_vector(cache, 10, TIME_ONLY)


# --- projection ----------------------------------------------------------------------

@pytest.mark.parametrize("v,expected", [
    ([0.5, 0.5], [0.5, 0.5]),
    ([2.0, 0.0], [1.0, 0.0]),
    ([0.2, 0.2, 0.2], [1 / 3, 1 / 3, 1 / 3]),
])
def test_projection_examples(v, expected):
    np.testing.assert_allclose(project_simplex(v), expected, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_projection_is_feasible_and_optimal(v):
    v = np.array(v)
    a = project_simplex(v)
    assert abs(a.sum() - 1) <= 1e-9 and a.min() >= 0
    # a = max(v - theta, 0): v - a equals theta on the support, v <= theta off it
    tol = 1e-9 * max(1.0, np.abs(v).max())
    shift = v - a
    sup = a > 0
    assert np.ptp(shift[sup]) <= tol
    if (~sup).any():
        assert v[~sup].max() <= shift[sup].mean() + tol


def test_projection_batched_and_idempotent():
    V = np.random.default_rng(3).normal(size=(50, 6))
    P = project_simplex(V)
    for row, p in zip(V, P):
        np.testing.assert_array_equal(project_simplex(row), p)
    np.testing.assert_allclose(project_simplex(P), P, atol=1e-15)


def test_projection_rejects_nonfinite():
    with pytest.raises(ValueError):
        project_simplex([1.0, np.nan])


def test_weight_vector_validates_simplex():
    WeightVector(np.array([0.25, 0.75]), 0)
    with pytest.raises(ValueError):
        WeightVector(np.array([0.5, 0.6]), 0)
    with pytest.raises(ValueError):
        WeightVector(np.array([1.1, -0.1]), 0)


# --- solver --------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["active-set", "pgd"])
@pytest.mark.parametrize("T", [2, 5, 9])
def test_solver_uniform_for_isotropic_problem(method, T):
    w = solve_weights(QpProblem(2 * np.eye(T), np.zeros(T), 0.0), 0, SolverOptions(method=method))
    np.testing.assert_allclose(w.alpha, 1 / T, atol=1e-6)
    assert w.objective == pytest.approx(2 / T, rel=1e-6)
    assert w.converged


def test_solver_strong_bias_term_picks_zero_distance_index():
    q = np.array([1.0, 0.0, 1.0])
    for ratio in (1e2, 1e4, 1e6):
        w = solve_weights(QpProblem(2 * np.eye(3), q, ratio), 1)
        assert w.alpha[1] > 1 - 4 / ratio
    assert w.objective == pytest.approx(2.0, rel=1e-5)


@pytest.mark.parametrize("method", ["active-set", "pgd"])
def test_solver_objective_never_increases(method):
    rng = np.random.default_rng(8)
    for _ in range(10):
        Q, q, ratio = random_qp(rng, 7)
        sol = solve_batch(Q, q[None], ratio, [3], SolverOptions(method=method, max_iter=400), record=True)
        hist = np.array([h[0] for h in sol.history]) if method == "pgd" else np.array(sol.history[0])
        assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0]))
        start = QpProblem(Q, q, ratio).objective(initial_weights([3], 7)[0])
        assert sol.objective[0] <= start + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_solver_matches_support_enumeration(seed, T):
    Q, q, ratio = random_qp(np.random.default_rng(seed), T)
    p = QpProblem(Q, q, ratio)
    best, _ = support_enumeration_minimum(p.matrix)
    w = solve_weights(p, 0)
    assert w.objective <= best + 1e-9 * max(1.0, best)
    assert w.objective >= best - 1e-9 * max(1.0, best)


def test_pgd_and_active_set_agree_on_estimator_problems():
    est = AdaptiveEstimator(make_system("http-server", 30))
    ep = simulate(est.system, lambda t, y: [np.sin(t / 5)], NoiseModel(0.2, "uniform", 1), [0.0, 0.0])
    qs = est.bias_vectors(ep)
    a = solve_batch(est.Q, qs, 0.1, np.arange(30))
    b = solve_batch(est.Q, qs, 0.1, np.arange(30), SolverOptions(method="pgd", max_iter=20000))
    assert a.converged.all()
    np.testing.assert_allclose(b.objective, a.objective, rtol=1e-4)
    assert np.all(a.objective <= b.objective * (1 + 1e-9))


def test_converged_flag_means_small_residual():
    rng = np.random.default_rng(4)
    Q, q, ratio = random_qp(rng, 6)
    sol = solve_batch(Q, q[None], ratio, [2])
    assert sol.converged[0]
    assert pgd_residual(sol.alpha, Q, q[None], ratio)[0] <= 1e-8


def test_iteration_cap_flags_nonconvergence_and_returns_feasible_point():
    rng = np.random.default_rng(5)
    Q, q, ratio = random_qp(rng, 6)
    w = solve_weights(QpProblem(Q, np.zeros(6), 0.0), 0, SolverOptions(method="pgd", max_iter=3, accelerate=False))
    assert not w.converged
    assert abs(w.alpha.sum() - 1) < 1e-12 and w.alpha.min() >= 0


def test_initial_weights():
    np.testing.assert_array_equal(initial_weights([0, 4, 9], 5), np.eye(5)[[0, 4, 4]])
    np.testing.assert_allclose(initial_weights([1], 4, "uniform"), 0.25)
    with pytest.raises(ValueError):
        initial_weights([0], 3, "random")
    with pytest.raises(ValueError):
        solve_batch(np.eye(2), np.zeros((1, 2)), 1.0, opts=SolverOptions(method="newton"))


def test_ratio_monotonicity_of_bias_component():
    est = AdaptiveEstimator(make_system("spring-mass", 60))
    ep = simulate(est.system, lambda t, y: [np.sin(t / 4)], NoiseModel(0.2, "uniform", 2), [0.0, 0.0])
    qs = est.bias_vectors(ep)
    prev = np.full(60, np.inf)
    for ratio in np.logspace(-3, 3, 13):
        sol = solve_batch(est.Q, qs, ratio, np.arange(60))
        bias = np.einsum("ij,ij->i", sol.alpha, qs)
        assert np.all(bias <= prev + 1e-6)
        prev = bias


# --- bound ---------------------------------------------------------------------------

def test_error_bound_examples():
    T = 4
    uniform = np.full(T, 1 / T)
    assert error_bound(uniform, QpProblem(2 * np.eye(T), np.zeros(T), 0.0, V=1.0)) == pytest.approx(4 / T)
    assert error_bound(uniform, QpProblem(2 * np.eye(T), np.zeros(T), 5.0, V=0.0)) == 0.0
    Q, q, ratio = random_qp(np.random.default_rng(1), T)
    p = QpProblem(Q, q, ratio, V=2.0)
    assert error_bound(solve_weights(p, 1), p) <= error_bound(uniform, p) + 1e-12
    assert error_bound(solve_weights(p, 1), p) >= 0


def test_qp_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), -1.0)
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), 1.0, V=-1.0)


# --- estimation ----------------------------------------------------------------------

@pytest.mark.parametrize("name", ["spring-mass", "double-integrator", "email-server", "http-server",
                                  "random-stable"])
def test_constant_input_recovered_for_any_weights(name):
    system = make_system(name, 30)
    ep = noiseless(system, np.full((30, 1), 0.8), x0=np.linspace(-1, 1, system.n_x))
    absorbed, recover = absorb_input_matrix(system)
    cache = build_cache(absorbed)
    z = inversions(ep, cache)
    for row in z:
        np.testing.assert_allclose(recover(row, 0), [0.8], atol=1e-8)
    rng = np.random.default_rng(0)
    for _ in range(5):
        alpha = rng.dirichlet(np.ones(30))
        np.testing.assert_allclose(recover(estimate_input(alpha, ep, cache), 0), [0.8], atol=1e-8)


def test_one_hot_weights_invert_the_forced_response():
    system = make_system("http-server", 12)
    rng = np.random.default_rng(2)
    u = rng.normal(size=(12, 1))
    ep = noiseless(system, u)
    absorbed, _ = absorb_input_matrix(system)
    cache = build_cache(absorbed)
    for tau in (1, 5, 12):
        alpha = np.eye(12)[tau - 1]
        from adalie.dynsys import state_transition

        direct = np.linalg.inv(transition_sum(absorbed, tau)) @ sum(
            state_transition(absorbed, tau, i + 1) @ system.B[i] @ u[i] for i in range(tau))
        np.testing.assert_allclose(estimate_input(alpha, ep, cache), direct, atol=1e-10)


def test_zero_outputs_give_zero_estimate():
    system = make_system("spring-mass", 10)
    ep = noiseless(system, np.zeros((10, 1)))
    cache = build_cache(absorb_input_matrix(system)[0])
    assert not estimate_input(np.full(10, 0.1), ep, cache).any()
    with pytest.raises(ValueError):
        estimate_input(np.full(9, 1 / 9), ep, cache)


def test_estimate_sequence_shapes_constancy_and_determinism():
    system = make_system("spring-mass", 40)
    ep = noiseless(system, np.full((40, 1), -0.3))
    res = estimate_sequence(ep, system, ratio=1.0)
    assert res.estimates.shape == (40, 1) and res.bounds.shape == (40,) and res.weights.shape == (40, 40)
    assert len(res.weight_vectors()) == 40
    np.testing.assert_allclose(res.estimates, -0.3, atol=1e-8)
    again = estimate_sequence(ep, system, ratio=1.0)
    np.testing.assert_array_equal(res.estimates, again.estimates)
    np.testing.assert_array_equal(res.weights, again.weights)


def test_sparsity_profile():
    assert list(sparsity_profile([np.eye(4)[1]])) == [1]
    assert list(sparsity_profile([np.full(5, 0.2)], threshold=0.1)) == [5]
    with pytest.raises(ValueError):
        sparsity_profile([np.full(5, 0.2)], threshold=0.0)


def test_spring_mass_weights_are_sparse_and_local():
    system = make_system("spring-mass", 100)
    u = make_signal("sine", 100)
    ep = simulate(system, lambda t, y: [u[t]], NoiseModel(0.2, "uniform", 3), [0.0, 0.0])
    res = AdaptiveEstimator(system).estimate(ep, 0.1)
    assert np.median(sparsity_profile(res)[10:90]) <= 10
