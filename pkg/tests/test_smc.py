import math

import numpy as np
import pytest
from scipy.stats import chi2

from neuralhmm.dist import gauss_logpdf
from neuralhmm.errors import DegenerateFilterError, InvalidArgument
from neuralhmm.model import emission_dist, make_model, obs_window, simulate, transition_dist
from neuralhmm.oracle import LinearGaussianModel, kalman_loglik, to_vanilla
from neuralhmm.smc import (SmcResult, bootstrap_filter, ess, estimate_loglik, q_hat, reconstruct_paths,
                           resample_multinomial)


@pytest.fixture
def neural():
    return make_model(2, 2, depth=2, width=6, seed=3)


@pytest.fixture
def windowed():
    return make_model(2, 2, depth=1, width=5, seed=8, tau_e=2, tau_t=1)


def test_single_particle(neural, rng):
    _, y = simulate(neural, 12, rng)
    r = bootstrap_filter(neural, y, 1, rng)
    assert r.final_weights[0] == 1.0
    np.testing.assert_array_equal(r.paths[0], r.particles[:, 0])


@pytest.mark.parametrize("fixture", ["neural", "windowed"])
def test_weights_normalized_every_step(fixture, request, rng):
    m = request.getfixturevalue(fixture)
    _, y = simulate(m, 20, rng)
    r = bootstrap_filter(m, y, 50, rng)
    np.testing.assert_allclose(np.exp(r.log_weights).sum(axis=1), 1.0, atol=1e-9)
    assert abs(r.final_weights.sum() - 1.0) < 1e-9 and np.all(r.final_weights >= 0)


def test_genealogy_consistent(neural, rng):
    _, y = simulate(neural, 15, rng)
    r = bootstrap_filter(neural, y, 30, rng)
    for i in range(30):
        k = i
        for t in range(15, -1, -1):
            np.testing.assert_array_equal(r.paths[i, t], r.particles[t, k])
            k = r.ancestor_table[t, k]
    np.testing.assert_array_equal(reconstruct_paths(r.particles, r.ancestor_table), r.paths)


def test_filter_deterministic(neural):
    _, y = simulate(neural, 10, np.random.default_rng(0))
    a = bootstrap_filter(neural, y, 20, np.random.default_rng(5))
    b = bootstrap_filter(neural, y, 20, np.random.default_rng(5))
    assert a.paths.tobytes() == b.paths.tobytes()


def test_filter_errors(neural):
    with pytest.raises(InvalidArgument):
        bootstrap_filter(neural, np.zeros((4, 3)), 10, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        bootstrap_filter(neural, np.zeros((4, 2)), 0, np.random.default_rng(0))


def test_degenerate_filter_names_step(vanilla1):
    y = np.zeros((5, 1))
    y[2] = 1e200
    with pytest.raises(DegenerateFilterError) as exc:
        bootstrap_filter(vanilla1, y, 10, np.random.default_rng(0))
    assert exc.value.step == 2


def test_single_observation_marginal():
    # x0 ~ N(0,1), y0 | x0 ~ N(x0, 1): y0 ~ N(0, 2)
    lg = LinearGaussianModel([[0.5]], [0.0], [1.0], [[1.0]], [0.0], [1.0], [0.0], [1.0])
    est = estimate_loglik(bootstrap_filter(to_vanilla(lg), [[0.0]], 200_000, np.random.default_rng(0)))
    assert est == pytest.approx(-0.5 * math.log(4 * math.pi), abs=5e-3)


def test_zero_increments():
    r = SmcResult(np.zeros((3, 2, 1)), np.zeros((3, 2), dtype=int), np.full((3, 2), np.log(0.5)), np.zeros(3))
    assert estimate_loglik(r) == 0.0


def test_unbiased_likelihood_proxy(lg1):
    m = to_vanilla(lg1)
    rng = np.random.default_rng(42)
    _, y = simulate(m, 5, rng)
    exact = math.exp(kalman_loglik(lg1, y))
    est = np.array([math.exp(estimate_loglik(bootstrap_filter(m, y, 64, np.random.default_rng(s))))
                    for s in range(100)])
    se = est.std(ddof=1) / math.sqrt(len(est))
    assert abs(est.mean() - exact) <= 3 * se


def test_ess_threshold_zero_never_resamples(neural, rng):
    _, y = simulate(neural, 8, rng)
    r = bootstrap_filter(neural, y, 16, rng, ess_threshold=0.0)
    np.testing.assert_array_equal(r.ancestor_table, np.tile(np.arange(16), (9, 1)))


def test_ess_bounds():
    assert ess(np.log(np.full(8, 1 / 8))) == pytest.approx(8)
    assert ess(np.log(np.array([1.0, 1e-300]))) == pytest.approx(1.0)


def test_resample_point_mass(rng):
    np.testing.assert_array_equal(resample_multinomial([1.0, 0.0, 0.0], 50, rng), 0)


def test_resample_empty(rng):
    assert resample_multinomial([0.5, 0.5], 0, rng).shape == (0,)


def test_resample_chi_square():
    counts = np.bincount(resample_multinomial(np.full(4, 0.25), 100_000, np.random.default_rng(7)), minlength=4)
    stat = np.sum((counts - 25_000) ** 2 / 25_000)
    assert stat < chi2.ppf(0.999, 3)


@pytest.mark.parametrize("w", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]])
def test_resample_invalid_simplex(w, rng):
    with pytest.raises(InvalidArgument):
        resample_multinomial(w, 3, rng)


def brute_force_q(m, r, y):
    total = 0.0
    N, T = r.n_particles, r.T
    for i in range(N):
        W = math.exp(r.log_weights[T, i])
        k = i
        path = [None] * (T + 1)
        for t in range(T, -1, -1):
            path[t] = r.particles[t, k]
            k = r.ancestor_table[t, k]
        for t in range(T + 1):
            total += W * gauss_logpdf(emission_dist(m, path[t], obs_window(y, t - 1, m.tau_e)), y[t])
            if t > 0:
                total += W * gauss_logpdf(transition_dist(m, path[t - 1], obs_window(y, t - 1, m.tau_t)), path[t])
    return total


@pytest.mark.parametrize("fixture", ["neural", "windowed"])
def test_q_hat_brute_force(fixture, request, rng):
    m = request.getfixturevalue(fixture)
    _, y = simulate(m, 7, rng)
    r = bootstrap_filter(m, y, 12, rng)
    assert q_hat(m, r, y) == pytest.approx(brute_force_q(m, r, y), rel=1e-12)
    other = make_model(2, 2, depth=1, width=5, seed=99, tau_e=m.tau_e, tau_t=m.tau_t)
    assert q_hat(other, r, y) == pytest.approx(brute_force_q(other, r, y), rel=1e-12)


def test_q_hat_single_particle_joint_density(neural, rng):
    _, y = simulate(neural, 6, rng)
    r = bootstrap_filter(neural, y, 1, rng)
    x = r.paths[0]
    joint = sum(gauss_logpdf(emission_dist(neural, x[t]), y[t]) for t in range(7))
    joint += sum(gauss_logpdf(transition_dist(neural, x[t - 1]), x[t]) for t in range(1, 7))
    assert q_hat(neural, r, y) == pytest.approx(joint, rel=1e-12)
    assert q_hat(neural, r, y, weighting="per_step") == pytest.approx(joint, rel=1e-12)


def test_q_hat_duplication_invariance(neural, rng):
    _, y = simulate(neural, 9, rng)
    r = bootstrap_filter(neural, y, 10, rng)
    dup = SmcResult(np.concatenate([r.particles, r.particles], axis=1),
                    np.concatenate([r.ancestor_table, r.ancestor_table], axis=1),
                    np.concatenate([r.log_weights, r.log_weights], axis=1) - math.log(2),
                    r.loglik_increments)
    assert q_hat(neural, dup, y) == pytest.approx(q_hat(neural, r, y), rel=1e-12)


def test_q_hat_shape_mismatch(neural, rng):
    _, y = simulate(neural, 5, rng)
    r = bootstrap_filter(neural, y, 4, rng)
    with pytest.raises(InvalidArgument):
        q_hat(neural, r, y[:-1])
    with pytest.raises(InvalidArgument):
        q_hat(neural, r, y, weighting="bogus")


def test_dump_json(neural, rng, tmp_path):
    import json
    _, y = simulate(neural, 5, rng)
    r = bootstrap_filter(neural, y, 4, rng)
    r.dump_json(tmp_path / "r.json", max_steps=3)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert np.array(doc["paths"]).shape == (4, 3, 2)
    assert doc["loglik"] == pytest.approx(estimate_loglik(r))


def test_normalization_precise_for_huge_log_weights(vanilla1):
    # log-weights of order -1e8: normalizing must not lose the 1e-9 simplex tolerance
    y = np.full((6, 1), 3e4)
    r = bootstrap_filter(vanilla1, y, 64, np.random.default_rng(0))
    np.testing.assert_allclose(np.exp(r.log_weights).sum(axis=1), 1.0, atol=1e-12)
