import numpy as np
import pytest
from scipy import optimize

from copulasmm import smm
from copulasmm.depmeas import MomentSpec
from copulasmm.errors import ConfigError
from copulasmm.infer import InferenceOptions, run_inference
from copulasmm.simcore import FactorCopulaSpec, make_draw_bank, simulate_panel
from copulasmm.smm import SMMOptions, SMMProblem


def gaussian_spec(n):
    # normal factor and noise: the copula depends on alpha^2 only, so keep alpha >= 0
    return FactorCopulaSpec((0,) * n, factor_dist="normal", eps_dist="normal",
                            bounds_override={"alpha[1,1]": (0.0, 5.0)})


def gaussian_problem(T=1000, n=4, S=10, seed=0, data_seed=100, alpha=1.0):
    spec = gaussian_spec(n)
    data_bank = make_draw_bank((n, T, 1, 1), data_seed)
    eta = simulate_panel(spec, spec.expand([alpha]), None, data_bank)[:, :, 0]
    moment_spec = MomentSpec((0,) * n, taus=(0.25, 0.75))
    return SMMProblem.from_panels(spec, moment_spec, eta, None, make_draw_bank((n, T, S, 1), seed))


def test_self_generated_panel_has_zero_objective_at_truth():
    problem = gaussian_problem(T=300, S=1, seed=9, data_seed=9)
    value, penalized = smm.evaluate_objective(problem, [1.0])
    assert value == 0.0 and not penalized
    result = smm.smm_estimate(problem, SMMOptions(start=(1.0,)))
    assert result.objective == 0.0
    assert not np.any(result.psi_gap)


def test_estimator_recovers_loading():
    problem = gaussian_problem()
    result = smm.smm_estimate(problem, SMMOptions(n_starts=16, seed=1))
    assert abs(result.theta_hat[0] - 1.0) < 0.25
    assert result.free_names == ("alpha[1,1]",)
    assert result.n_evals >= 16
    assert result.n_penalized == 0


def test_estimate_is_deterministic():
    problem = gaussian_problem(T=400, S=5)
    opts = SMMOptions(n_starts=8, seed=2)
    a, b = smm.smm_estimate(problem, opts), smm.smm_estimate(problem, opts)
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert a.objective == b.objective


def test_points_outside_box_are_penalized():
    problem = gaussian_problem(T=200, S=2)
    value, penalized = smm.evaluate_objective(problem, [-0.5])
    assert penalized
    assert value == pytest.approx(smm.PENALTY + 0.5)


def test_domain_violation_is_penalized_not_raised():
    spec = FactorCopulaSpec((0, 0, 0), bounds_override={"zeta_eps": (0.01, 0.7)})
    bank = make_draw_bank((3, 100, 2, 1), 0)
    eta = simulate_panel(spec, spec.expand([1.0, 0.2, 0.0, 0.2, 0.0]), None, make_draw_bank((3, 100, 1, 1), 1))
    problem = SMMProblem.from_panels(spec, MomentSpec((0, 0, 0), taus=(0.1, 0.3, 0.7, 0.9)),
                                     eta[:, :, 0], None, bank)
    value, penalized = smm.evaluate_objective(problem, [1.0, 0.2, 0.0, 0.6, 0.0])
    assert penalized and value == smm.PENALTY


def test_unidentified_problem_is_config_error():
    spec = FactorCopulaSpec((0, 0, 0))
    bank = make_draw_bank((3, 50, 2, 1), 0)
    with pytest.raises(ConfigError):
        SMMProblem.from_panels(spec, MomentSpec((0, 0, 0), taus=(0.25,)), np.zeros((3, 50)) +
                               np.arange(50.0), None, bank)


def test_weight_must_be_symmetric_positive_definite():
    problem = gaussian_problem(T=200, S=2)
    with pytest.raises(ConfigError):
        problem.with_weight(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ConfigError):
        problem.with_weight(np.eye(2))


def test_bounded_simplex_finds_interior_and_boundary_minima():
    bounds = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    x, fx, diag = smm.nelder_mead_bounded(lambda v: (v[0] - 0.3) ** 2 + (v[1] + 2.0) ** 2, [0.0, 0.0], bounds)
    assert diag.converged
    assert np.allclose(x, [0.3, -1.0], atol=1e-4)
    assert np.all(x >= bounds[:, 0]) and np.all(x <= bounds[:, 1])
    assert fx == pytest.approx(1.0, abs=1e-6)


def test_simplex_rejects_start_outside_box():
    with pytest.raises(ConfigError):
        smm.nelder_mead_bounded(lambda v: float(v @ v), [2.0], np.array([[-1.0, 1.0]]))


def test_multi_start_prefers_lowest_value_and_is_seeded():
    bounds = np.array([[0.0, 4.0], [-2.0, 2.0]])
    mid = smm.multi_start(lambda v: float(np.sum((v - [2.0, 0.0]) ** 2)), bounds, n_starts=10, seed=3)
    assert np.allclose(mid.x, [2.0, 0.0]) and mid.n_evaluated == 10

    def f(v):
        return float(np.sum((v - [3.5, 1.5]) ** 2))

    a, b = smm.multi_start(f, bounds, 32, seed=4), smm.multi_start(f, bounds, 32, seed=4)
    assert np.array_equal(a.x, b.x)
    assert a.value < f(np.array([2.0, 0.0]))


def test_efficient_weight_ridges_singular_sigma():
    sigma = np.array([[1.0, 1.0], [1.0, 1.0]])
    weight, used, ridged = smm.efficient_weight(sigma)
    assert ridged
    assert np.all(np.isfinite(weight))
    assert np.allclose(weight @ used, np.eye(2), atol=1e-6)
    _, _, ridged = smm.efficient_weight(np.diag([2.0, 3.0]))
    assert not ridged


def test_two_step_uses_inverse_bootstrap_covariance():
    problem = gaussian_problem(T=600, S=5)
    result = smm.smm_estimate(problem, SMMOptions(two_step=True, B=60, n_starts=8, seed=5))
    assert result.two_step and result.theta_first_step is not None
    assert np.allclose(result.weight @ result.sigma, np.eye(3), atol=1e-8)
    report = run_inference(problem, result, InferenceOptions(B=60, n_draws=200, seed=5))
    assert report.j_mode == "chi2" and report.j_df == 2
    assert np.array_equal(report.sigma, result.sigma)
    G = report.jacobian
    assert np.allclose(report.omega, np.linalg.inv(G.T @ result.weight @ G), rtol=1e-8)


def test_identity_weight_inference_report():
    problem = gaussian_problem(T=600, S=5)
    result = smm.smm_estimate(problem, SMMOptions(n_starts=8, seed=6))
    report = run_inference(problem, result, InferenceOptions(B=60, n_draws=300, seed=6),
                           theta_null=[1.0])
    assert report.j_mode == "simulated"
    assert 0.0 <= report.j_pvalue <= 1.0
    assert report.std_errors[0] > 0
    assert report.t_stats[0] == pytest.approx((result.theta_hat[0] - 1.0) / report.std_errors[0])


def test_scaling_weight_scales_objective_and_keeps_argmin():
    base = gaussian_problem(T=400, S=5).with_weight(np.diag([1.0, 2.0, 3.0]))
    scaled = base.with_weight(4.0 * base.weight)
    for alpha in (0.3, 1.0, 2.5):
        assert smm.objective(scaled, [alpha]) == 4.0 * smm.objective(base, [alpha])

    a = smm.smm_estimate(base, SMMOptions(n_starts=8, seed=2))
    # the simplex stopping rule compares absolute spreads, so fatol scales with the weight
    b = smm.smm_estimate(scaled, SMMOptions(n_starts=8, seed=2, fatol=4.0 * smm.FATOL))
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert b.objective == 4.0 * a.objective


def test_measure_order_does_not_change_estimate():
    n, T = 4, 400
    spec = gaussian_spec(n)
    eta = simulate_panel(spec, spec.expand([1.2]), None, make_draw_bank((n, T, 1, 1), 21))[:, :, 0]
    bank = make_draw_bank((n, T, 5, 1), 22)
    weight = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.5]])
    estimates = []
    for taus in [(0.25, 0.75), (0.75, 0.25)]:
        problem = SMMProblem.from_panels(spec, MomentSpec((0,) * n, taus=taus), eta, None, bank, weight)
        estimates.append(smm.smm_estimate(problem, SMMOptions(n_starts=8, seed=3)))
    assert estimates[0].theta_hat == pytest.approx(estimates[1].theta_hat, abs=1e-6)
    assert np.allclose(estimates[0].psi_gap, estimates[1].psi_gap, atol=1e-12)


def test_bounded_simplex_solves_rosenbrock():
    bounds = np.array([[-5.0, 5.0], [-5.0, 5.0]])
    x, fx, diag = smm.nelder_mead_bounded(optimize.rosen, [-1.2, 1.0], bounds)
    assert fx < 1e-6
    assert np.allclose(x, [1.0, 1.0], atol=1e-2)
