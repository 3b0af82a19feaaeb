import numpy as np
import pytest

from copulasmm import mc
from copulasmm.errors import ConfigError, McRunError
from copulasmm.mc import McDesign, RepOutcome

SMOKE = dict(T=200, S=2, reps=2, B=20, n_draws=50, n_starts=4, burn=100, reference_draws=20_000)


def test_design_truths_have_expected_free_parameters():
    d1 = mc.design_truth(McDesign("design1"))
    assert d1.spec.free_names == ["alpha[1,1]", "beta[1,1]", "zeta_f1", "xi_f1"]
    assert np.allclose(d1.theta_free, [1.0, 0.5, 0.25, -0.5])
    assert d1.factor_source == "ar1"

    d2 = mc.design_truth(McDesign("design2"))
    assert d2.spec.Q == 3 and d2.spec.n == 15
    assert [d2.spec.groups.count(q) for q in range(3)] == [5, 5, 5]
    assert d2.spec.free_names == ["alpha[1,1]", "beta[1,1]", "alpha[2,1]", "alpha[3,1]", "zeta_f1", "xi_f1"]
    assert d2.moment_spec.n_moments == 9

    d1a = mc.design_truth(McDesign("design1A"))
    assert d1a.spec.n == 11 and d1a.spec.p_beta == 0 and d1a.factor_source is None

    d1b = mc.design_truth(McDesign("design1B"))
    assert d1b.factor_source == "logabs_garch"
    assert "xi_f1" not in d1b.spec.free_names


def test_logabs_factor_dgp_coefficients():
    p = mc.LOGABS_GARCH_DGP.params()
    assert p == {"omega": 0.1, "beta": 0.1, "alpha": 0.5}
    assert mc.LOGABS_GARCH_DGP.persistence() == pytest.approx(0.6)


def test_simulable_design_draws_z_inside_estimator():
    truth = mc.design_truth(McDesign("design1", z_mode="simulable"))
    assert truth.spec.z_dist == "normal"
    assert truth.factor_source is None


@pytest.mark.parametrize("kwargs", [
    {"design_id": "design3"},
    {"design_id": "design1", "z_mode": "latent"},
    {"design_id": "design1A", "z_mode": "simulable"},
    {"design_id": "design2", "n": 10},
    {"design_id": "design1", "reps": 0},
])
def test_invalid_designs(kwargs):
    with pytest.raises(ConfigError):
        McDesign(**kwargs)


def test_dgp_is_reproducible_and_shaped():
    design = McDesign("design1", n=4, **SMOKE)
    ss = np.random.SeedSequence(42)
    y1, w1, z1 = mc.simulate_dgp(design, ss)
    y2, w2, z2 = mc.simulate_dgp(design, np.random.SeedSequence(42))
    assert y1.shape == (4, 200) and w1.shape == (200,) and z1.shape == (200,)
    assert np.array_equal(y1, y2) and np.array_equal(w1, w2)
    assert np.all(np.isfinite(y1))


def test_simulable_dgp_has_no_observable_source():
    design = McDesign("design1", z_mode="simulable", n=4, **SMOKE)
    _, w, z = mc.simulate_dgp(design, np.random.SeedSequence(1))
    assert w is None and z.shape == (200,)


def test_gaussian_margins_are_standard_normal():
    design = McDesign("design1A", n=3, reference_draws=50_000)
    reference = mc._reference_samples(design)
    rng = np.random.default_rng(0)
    # fresh draws from the same factor variable
    x = np.vstack([rng.choice(reference[0], size=20_000) for _ in range(3)])
    eta = mc._gaussian_margins(x, (0, 0, 0), reference)
    assert abs(eta.mean()) < 0.03
    assert abs(eta.std() - 1.0) < 0.03


def test_summarize_statistics():
    design = McDesign("design1A", n=3, reps=3)
    truth = mc.design_truth(design).theta_free
    outcomes = [
        RepOutcome(0, truth + 0.1, np.array([True, False, False, False]), True, 0.01),
        RepOutcome(1, truth - 0.1, np.array([False, False, False, False]), False, 0.5),
        RepOutcome(2, failure="FitError: boom"),
    ]
    summary = mc.summarize(design, outcomes, 1.0)
    assert summary.n_ok == 2 and summary.n_failed == 1
    assert np.allclose(summary.mean, truth)
    assert np.allclose(summary.rmse, 0.1)
    assert np.allclose(summary.var, 0.01)
    assert summary.t_reject[0] == 50.0 and summary.j_reject == 50.0
    assert list(summary.to_frame().columns) == ["mean", "median", "var", "rmse", "t", "J"]
    text = summary.to_text()
    for row in ("mean", "median", "var", "rmse", "t", "J"):
        assert any(line.split()[0] == row for line in text.splitlines()[1:])
    assert summary.failures == ("rep 2: FitError: boom",)


def test_summarize_all_failed_raises():
    design = McDesign("design1A", n=3, reps=1)
    with pytest.raises(McRunError):
        mc.summarize(design, [RepOutcome(0, failure="x")], 0.0)


def test_smoke_run_is_deterministic():
    design = McDesign("design1", n=4, **SMOKE)
    a = mc.run_design(design)
    b = mc.run_design(design)
    assert a.n_ok == 2
    assert a.to_frame().equals(b.to_frame())


def test_replication_results_do_not_depend_on_worker_count():
    design = McDesign("design1A", n=3, **SMOKE)
    serial = mc.run_design(design, workers=1)
    parallel = mc.run_design(design, workers=2)
    assert serial.to_frame().equals(parallel.to_frame())


# --- desk-scale acceptance runs ---------------------------------------------------------

@pytest.mark.slow
def test_design1_observable_matches_reference_table():
    summary = mc.run_design(McDesign("design1", T=500, S=25, reps=100, B=200, n_draws=1000, seed=2024),
                            workers=4)
    alpha, beta, zeta, xi = summary.mean
    assert 0.95 <= alpha <= 1.05
    assert 0.40 <= beta <= 0.52
    assert 0.24 <= zeta <= 0.32
    assert -0.60 <= xi <= -0.45
    assert 0.147 * 0.7 <= summary.rmse[0] <= 0.147 * 1.3
    assert np.all((summary.t_reject >= 1.0) & (summary.t_reject <= 12.0))
    assert 1.0 <= summary.j_reject <= 10.0


@pytest.mark.slow
def test_design1b_logabs_garch_factor():
    summary = mc.run_design(McDesign("design1B", T=1000, reps=100, B=200, seed=2024), workers=4)
    names = list(summary.names)
    assert abs(summary.mean[names.index("beta[1,1]")] - 0.784) <= 0.06
    assert abs(summary.mean[names.index("zeta_eps")] - 0.332) <= 0.02


@pytest.mark.slow
def test_observable_and_simulable_z_agree():
    common = dict(T=1000, reps=100, B=200, seed=7)
    obs = mc.run_design(McDesign("design1", z_mode="observable", **common), workers=4)
    sim = mc.run_design(McDesign("design1", z_mode="simulable", **common), workers=4)
    pooled_se = np.sqrt((obs.var + sim.var) / 100)
    assert np.all(np.abs(obs.mean - sim.mean) < 2 * pooled_se)


@pytest.mark.slow
def test_design2_group_loadings():
    summary = mc.run_design(McDesign("design2", T=500, S=25, reps=100, B=200, seed=2024), workers=4)
    names = list(summary.names)
    assert abs(summary.mean[names.index("alpha[1,1]")] - 2.0) <= 0.08
