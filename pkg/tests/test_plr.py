import numpy as np
import pytest

from plrbias.experiment import REFERENCE_A, REFERENCE_B
from plrbias.lti_core import FrequencyGrid, Polynomial, RationalFilter, freq_response
from plrbias.loop_sim import DataRecord, simulate_closed_loop, simulate_open_loop
from plrbias.models import Kind, ModelStructure
from plrbias.pem import loss_gradient
from plrbias.plr import (
    FilterMode,
    PaaState,
    RegressorFilterSpec,
    build_regressor,
    paa_step,
    q_polynomial,
    run_plr,
    stationarity_stats,
)
from plrbias.signals import PrbsConfig, prbs_generate, rng, white_noise

TRUE_THETA = np.array([-2.0, 1.45, -0.35, 1.0, 0.5])


# --- adaptation step ------------------------------------------------------------


def test_scalar_update():
    s = PaaState(theta=[0.0], F=[[1.0]])
    eps, eps0 = paa_step(s, [1.0], 1.0)
    assert (eps0, eps) == (1.0, 0.5)
    assert s.theta[0] == 0.5 and s.F[0, 0] == 0.5


def test_zero_regressor_changes_nothing():
    s = PaaState.initial(3, gain=10.0, theta0=np.array([1.0, 2.0, 3.0]))
    F0 = s.F.copy()
    eps, eps0 = paa_step(s, np.zeros(3), 4.0)
    assert eps == eps0 == 4.0
    assert np.array_equal(s.theta, [1, 2, 3]) and np.array_equal(s.F, F0)


def test_gain_update_matches_information_form():
    gen = np.random.default_rng(1)
    s = PaaState.initial(3, gain=5.0, lambda1=0.97, lambda2=0.8)
    for _ in range(20):
        phi = gen.normal(size=3)
        Finv = s.lambda1 * np.linalg.inv(s.F) + s.lambda2 * np.outer(phi, phi)
        paa_step(s, phi, gen.normal())
        assert np.allclose(s.F, np.linalg.inv(Finv), rtol=1e-9)
        assert np.linalg.eigvalsh(s.F).min() > 0


def test_gain_only_rescaled_when_lambda2_is_zero():
    s = PaaState.initial(2, gain=1.0, lambda1=0.5, lambda2=0.0)
    paa_step(s, [1.0, 1.0], 1.0)
    assert np.allclose(s.F, 2.0 * np.eye(2))


@pytest.mark.parametrize("l1,l2", [(0.0, 1.0), (1.1, 1.0), (1.0, -0.1), (1.0, 2.0)])
def test_forgetting_factor_bounds(l1, l2):
    with pytest.raises(ValueError):
        PaaState.initial(2, lambda1=l1, lambda2=l2)


def test_gain_must_be_positive_definite():
    with pytest.raises(ValueError):
        PaaState(theta=[0.0, 0.0], F=[[1.0, 2.0], [2.0, 1.0]])


def test_build_regressor_reads_measured_signals():
    s = ModelStructure(Kind.OL_ARX, 1, 1)
    state = PaaState.initial(2)
    state.start_pass(3)
    d = DataRecord(u=np.array([1.0, 2.0, 3.0]), y=np.array([4.0, 5.0, 6.0]))
    assert np.array_equal(build_regressor(s, state, d, 2), [-6.0, 3.0])


# --- filter specification -------------------------------------------------------


def test_filter_spec_validation():
    with pytest.raises(ValueError):
        RegressorFilterSpec(FilterMode.FIXED)
    with pytest.raises(ValueError):
        RegressorFilterSpec.fixed(RationalFilter([2.0, 1.0]))
    with pytest.raises(ValueError):
        RegressorFilterSpec.fixed(RationalFilter([1.0, -1.5]))
    with pytest.raises(ValueError):
        RegressorFilterSpec(FilterMode.ADAPTIVE_A0, RationalFilter([1.0, 0.2]))


def test_adaptive_closed_loop_filter_cancels_q(controller):
    s = ModelStructure(Kind.CL_OE, 2, 2, controller=controller)
    theta = np.array([-1.7, 0.9, 1.0, 0.7])
    ratio = q_polynomial(s, theta) * RegressorFilterSpec(FilterMode.ADAPTIVE_P0).current_filter(s, theta).inverse()
    g = freq_response(ratio, FrequencyGrid.uniform(64).omegas[1:])
    assert np.allclose(g, 1.0, atol=1e-12)


# --- Q polynomial ----------------------------------------------------------------


def test_q_polynomial_per_structure(controller):
    th = np.array([-0.5, 0.2, 1.0, 0.5])
    assert q_polynomial(ModelStructure(Kind.OL_ARX, 2, 2), th).num == Polynomial(1)
    q = q_polynomial(ModelStructure(Kind.OL_OE, 1, 1), [-0.5, 1.0])
    assert q.num == Polynomial([1, -0.5]) and q.den == Polynomial(1)
    q = q_polynomial(ModelStructure(Kind.OL_ARMAX, 1, 1, 2), [-0.5, 1.0, 0.3, 0.1])
    assert q.num == Polynomial([1, 0.3, 0.1])
    s = ModelStructure(Kind.CL_OE, 2, 2, controller=controller)
    q = q_polynomial(s, th)
    assert q.num.allclose(s.char_poly(th)) and q.den == controller.S


def test_q_reduces_to_a_when_b_vanishes(controller):
    s = ModelStructure(Kind.CL_OE, 2, 2, controller=controller)
    q = q_polynomial(s, [-0.5, 0.2, 0.0, 0.0])
    g = freq_response(q, FrequencyGrid.uniform(32).omegas[1:])
    assert np.allclose(g, freq_response(Polynomial([1, -0.5, 0.2]), FrequencyGrid.uniform(32).omegas[1:]))


def test_q_closed_loop_armax_is_implied_noise_polynomial(controller):
    # the implied noise polynomial C satisfies C S = (H - 1) S + P
    s = ModelStructure(Kind.CL_ARMAX, 2, 2, 1, controller=controller)
    th = np.array([-0.5, 0.2, 1.0, 0.5, 0.4])
    q = q_polynomial(s, th)
    H = Polynomial([1, 0.4])
    assert q.num.allclose((H - 1.0) * controller.S + s.char_poly(th)) and q.den == controller.S


# --- whole runs ----------------------------------------------------------------


def test_too_short_record_rejected():
    s = ModelStructure(Kind.OL_ARX, 2, 2)
    with pytest.raises(ValueError):
        run_plr(s, DataRecord(u=np.ones(20), y=np.ones(20)))


def test_zero_excitation_rejected():
    s = ModelStructure(Kind.OL_OE, 2, 2)
    with pytest.raises(ValueError):
        run_plr(s, DataRecord(u=np.zeros(200), y=np.zeros(200)))


def test_full_order_closed_loop_recovery_and_guard(controller, loop_data):
    s = ModelStructure(Kind.CL_OE, 3, 2, controller=controller)
    r = run_plr(s, loop_data)
    assert np.max(np.abs(r.theta - TRUE_THETA)) < 1e-3
    assert s.predictor_poly(r.theta).is_stable()
    assert r.diagnostics["passes"] == 10 and len(r.pass_snapshots) == 10
    assert r.diagnostics["guard_trips"] < 0.01 * r.diagnostics["steps"]


def test_open_loop_output_error_with_a_priori_filter(plant, prbs):
    d = simulate_open_loop(plant, 1.0, prbs, np.zeros(prbs.size))
    s = ModelStructure(Kind.OL_OE, 3, 2)
    r = run_plr(s, d, RegressorFilterSpec.fixed(RationalFilter(REFERENCE_A)))
    assert np.max(np.abs(r.theta - TRUE_THETA)) < 1e-3


def test_adaptive_open_loop_filter_recovers_plant(plant, prbs):
    d = simulate_open_loop(plant, 1.0, prbs, np.zeros(prbs.size))
    r = run_plr(ModelStructure(Kind.OL_OE, 3, 2), d, RegressorFilterSpec(FilterMode.ADAPTIVE_A0))
    assert np.max(np.abs(r.theta - TRUE_THETA)) < 1e-3


def test_adaptive_closed_loop_filter_lands_on_the_pem_optimum(order2, loop_data, pem_order2):
    r = run_plr(order2, loop_data, RegressorFilterSpec(FilterMode.ADAPTIVE_P0))
    assert np.max(np.abs(r.theta - pem_order2.theta)) < 5e-3


def test_undermodeled_closed_loop_is_stationary(plr_order2):
    st = plr_order2.stationarity
    assert st["stationary"] and st["max_abs"] < st["bound"]


def test_equation_error_stationarity_differs_from_loss_minimum():
    # undermodeled extended least squares: the PLR fixed point is not a PEM stationary point
    A = Polynomial(REFERENCE_A)
    u = prbs_generate(PrbsConfig(registers=9, length=8 * 511), seed=511)
    e = np.sqrt(0.5) * rng(3).standard_normal(u.size)
    d = simulate_open_loop(RationalFilter(REFERENCE_B, A), RationalFilter([1, 0.5], A), u, e)
    s = ModelStructure(Kind.OL_ARMAX, 2, 2, 1)
    r = run_plr(s, d)
    bound = r.stationarity["bound"]
    assert r.stationarity["stationary"]
    assert np.max(np.abs(loss_gradient(s, r.theta, d))) > 10 * bound


def test_fresh_noise_is_trivially_stationary():
    gen = np.random.default_rng(0)
    st = stationarity_stats(gen.normal(size=5000), gen.normal(size=(5000, 4)))
    assert st["stationary"]


def test_runs_are_bit_identical(order2, loop_data, plr_order2):
    again = run_plr(order2, loop_data)
    assert np.array_equal(again.theta, plr_order2.theta)
    assert all(np.array_equal(a, b) for a, b in zip(again.pass_snapshots, plr_order2.pass_snapshots))


def test_noise_free_arx_recovery():
    gen = np.random.default_rng(4)
    A, B = Polynomial([1, -1.2, 0.5]), Polynomial([0, 0.7, 0.3])
    u = gen.normal(size=600)
    d = simulate_open_loop(RationalFilter(B, A), RationalFilter([1.0], A), u, np.zeros(600))
    r = run_plr(ModelStructure(Kind.OL_ARX, 2, 2), d, passes=2)
    assert np.allclose(r.theta, [-1.2, 0.5, 0.7, 0.3], atol=1e-6)
