"""Acceptance criteria, each at its stated tolerance, one PASS/FAIL line apiece."""

import time

import numpy as np
import pytest

from helpers import random_stable_filter, stable_poly
from plrbias.bias import (
    Method,
    affinity_check,
    bias_weight,
    noise_term,
    q_perturbation_estimate,
)
from plrbias.experiment import REFERENCE_A, REFERENCE_B, ExperimentConfig, reproduce
from plrbias.lti_core import FrequencyGrid, Polynomial, RationalFilter, filter_apply, sensitivity_syp
from plrbias.loop_sim import closed_loop_transfer, simulate_closed_loop, simulate_open_loop
from plrbias.metrics import nu_gap
from plrbias.models import Kind, ModelStructure, prediction_error
from plrbias.pem import loss_gradient
from plrbias.plr import FilterMode, RegressorFilterSpec, q_polynomial, run_plr
from plrbias.signals import PrbsConfig, estimate_spectrum, prbs_generate

TRUE_CL = np.array([-2.0, 1.45, -0.35, 1.0, 0.5])
GRID = FrequencyGrid.uniform(512)


@pytest.fixture(scope="module")
def reproduction(tmp_path_factory):
    t0 = time.perf_counter()
    summary = reproduce(ExperimentConfig.from_dict(), tmp_path_factory.mktemp("acc"))
    return summary, time.perf_counter() - t0


def _line(theta, gen, rel=0.05):
    d = gen.standard_normal(theta.size)
    d *= rel * np.linalg.norm(theta) / np.linalg.norm(d)
    return [theta, theta + d, theta + 2 * d]


def test_rls_matches_normal_equations(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        gen = np.random.default_rng(100 + k)
        A = stable_poly(gen, 2)
        u = gen.standard_normal(500)
        e = 0.1 * gen.standard_normal(500)
        d = simulate_open_loop(RationalFilter(np.r_[0.0, gen.normal(size=2)], A), RationalFilter([1.0], A), u, e)
        r = run_plr(ModelStructure(Kind.OL_ARX, 2, 2), d, passes=1)
        y = d.y
        y1 = np.r_[0.0, y[:-1]]
        u1 = np.r_[0.0, u[:-1]]
        Phi = np.column_stack([-y, -y1, u, u1])[:-1]
        # recursive least squares from theta = 0, F0 = 1000 I is ridge LS with prior F0^-1
        ref = np.linalg.solve(np.eye(4) / 1000.0 + Phi.T @ Phi, Phi.T @ y[1:])
        worst = max(worst, float(np.max(np.abs(r.theta - ref))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 5.0
    acceptance(1, "recursive vs batch least squares", ok, f"max |dtheta| = {worst:.2e}, {dt:.2f} s")
    assert ok


def test_full_order_recovery(acceptance, controller, loop_data, plant, prbs):
    t0 = time.perf_counter()
    cl = run_plr(ModelStructure(Kind.CL_OE, 3, 2, controller=controller), loop_data, passes=10)
    d = simulate_open_loop(plant, 1.0, prbs, np.zeros(prbs.size))
    ol = run_plr(ModelStructure(Kind.OL_OE, 3, 2), d, passes=10)
    dt = time.perf_counter() - t0
    e_cl = float(np.max(np.abs(cl.theta - TRUE_CL)))
    e_ol = float(np.max(np.abs(ol.theta - TRUE_CL)))
    ok = e_cl < 1e-3 and e_ol < 1e-3 and dt < 10.0
    acceptance(2, "full-order recovery", ok, f"CL_OE {e_cl:.1e}, OL_OE {e_ol:.1e}, {dt:.2f} s")
    assert ok


def test_stationarity_vs_pem_gradient(acceptance, order2, loop_data, plr_order2):
    st = plr_order2.stationarity
    bound = st["bound"]
    corr = float(np.max(np.abs(st["correlations"])))
    grad = float(np.max(np.abs(loss_gradient(order2, plr_order2.theta, loop_data))))
    ok = corr < bound and grad > 10 * bound
    acceptance(3, "stationary point is not the PEM optimum", ok,
               f"max |corr| {corr:.2e} < {bound:.2e}, PEM gradient {grad:.3g}")
    assert ok


def test_equivalent_error_affinity(acceptance, plant, controller, prbs):
    gen = np.random.default_rng(7)
    n = prbs.size
    cases = {}

    d = simulate_open_loop(plant, 1.0, prbs, 0.3 * gen.standard_normal(n))
    cases["OL_OE"] = (ModelStructure(Kind.OL_OE, 2, 2), d, np.array([-1.6, 0.8, 1.0, 0.8]))
    e = 0.3 * gen.standard_normal(n)
    d = simulate_open_loop(plant, RationalFilter([1, 0.5], REFERENCE_A), prbs, e)
    cases["OL_ARMAX"] = (ModelStructure(Kind.OL_ARMAX, 2, 2, 1), d, np.array([-1.6, 0.8, 1.0, 0.8, 0.3]))
    d = simulate_closed_loop(plant, controller, prbs, 0.3 * gen.standard_normal(n))
    cases["CL_OE"] = (ModelStructure(Kind.CL_OE, 2, 2, controller=controller), d, np.array([-1.7, 0.9, 1.0, 0.7]))

    syp = sensitivity_syp(Polynomial(REFERENCE_A), Polynomial(REFERENCE_B), controller.R, controller.S)
    rel = {}
    plain = None
    for name, (s, d, th) in cases.items():
        noise = noise_term(s, d, syp if s.kind.closed_loop else None)
        pts = _line(th, gen)
        scale = float(np.max(np.abs(d.y)))
        rel[name] = affinity_check(s, d, noise, pts) / scale
        if name == "OL_OE":
            plain = affinity_check(s, d, noise, pts, equivalent=False) / scale
    worst = max(rel.values())
    ok = worst < 1e-6 and plain >= 1e3 * rel["OL_OE"]
    detail = ", ".join(f"{k} {v:.1e}" for k, v in rel.items()) + f"; plain eps on OL_OE {plain:.1e}"
    acceptance(4, "equivalent prediction error is affine in theta", ok, detail)
    assert ok


def _random_theta(structure, gen):
    while True:
        th = 0.4 * gen.standard_normal(structure.n_params)
        if structure.predictor_poly(th).is_stable():
            return th


def test_q_consistency(acceptance, controller):
    gen = np.random.default_rng(11)
    structures = [
        ModelStructure(Kind.OL_ARX, 2, 2),
        ModelStructure(Kind.OL_ARMAX, 2, 2, 2),
        ModelStructure(Kind.OL_OE, 2, 2),
        ModelStructure(Kind.CL_OE, 2, 2, controller=controller),
        ModelStructure(Kind.CL_ARMAX, 2, 2, 1, controller=controller),
    ]
    worst = 0.0
    for s in structures:
        for _ in range(10):
            th = _random_theta(s, gen)
            est = q_perturbation_estimate(s, th, 40)
            ref = q_polynomial(s, th).impulse_response(40)
            worst = max(worst, float(np.max(np.abs(est - ref))))
    ok = worst < 1e-8
    acceptance(5, "Q polynomial vs regressor perturbation", ok, f"max tap error {worst:.1e} over 50 cases")
    assert ok


def test_bias_integral_optimality(acceptance, reproduction):
    s, _ = reproduction
    p = s["perturbation"]
    at_plr, at_pem = s["integrals"]["at_PLR"], s["integrals"]["at_PEM"]
    local = p["PLR"]["violations"] == 0 and p["PEM"]["violations"] == 0 and p["PLR"]["trials"] == 100
    cross_plr = at_pem["PLR"] / at_plr["PLR"]
    cross_pem = at_plr["PEM"] / at_pem["PEM"]
    ok = local and cross_plr >= 1.01 and cross_pem >= 1.01
    acceptance(6, "each estimate minimizes its own criterion", ok,
               f"min perturbation ratio PLR {p['PLR']['min_ratio']:.3f} PEM {p['PEM']['min_ratio']:.3f}; "
               f"cross ratios {cross_plr:.3f} {cross_pem:.3f}")
    assert ok


def test_shape_reproduction(acceptance, reproduction):
    s, dt = reproduction
    b = s["bands"]
    probe = b["pem_band_at_probe"]
    high = b["plr_band_high"]
    # the part of the PLR-winning band that lies inside [0.35, 0.5]
    inside = None if high is None else (max(high[0], 0.35), min(high[1], 0.5))
    ok = (
        probe is not None
        and inside is not None
        and inside[1] > inside[0]
        and s["filter_peak"]["inside_pem_band"]
        and dt < 60.0
    )
    fmt = lambda band: "none" if band is None else f"[{band[0]:.4f}, {band[1]:.4f}]"
    acceptance(7, "chordal-gap bands and filter peak", ok,
               f"PEM better on {fmt(probe)}, PLR better on {fmt(inside)}, "
               f"peak at {s['filter_peak']['frequency']:.4f}, {dt:.1f} s")
    assert ok


def test_adaptive_filter_weight_equals_pem(acceptance, order2, plant, plr_order2):
    th = plr_order2.theta
    wf = bias_weight(order2, th, Method.PLR_FILTERED, GRID, plant=plant,
                     filter_spec=RegressorFilterSpec(FilterMode.ADAPTIVE_P0))
    wp = bias_weight(order2, th, Method.PEM, GRID, plant=plant)
    err = float(np.max(np.abs(wf.deterministic_weight - wp.deterministic_weight)))
    ok = err < 1e-12
    acceptance(8, "adaptive closed-loop filter weight equals PEM weight", ok, f"max difference {err:.1e}")
    assert ok


def test_numerical_hygiene(acceptance, plant, controller, prbs):
    gen = np.random.default_rng(21)
    gap_ok = True
    for _ in range(50):
        G1 = random_stable_filter(gen, int(gen.integers(1, 4)), int(gen.integers(1, 3)), 1)
        G2 = random_stable_filter(gen, int(gen.integers(1, 4)), int(gen.integers(1, 3)), 1)
        d12, d21 = nu_gap(G1, G2, GRID).nu_gap, nu_gap(G2, G1, GRID).nu_gap
        gap_ok &= nu_gap(G1, G1, GRID).nu_gap == 0.0 and 0.0 <= d12 <= 1.0 and abs(d12 - d21) < 1e-12

    x = prbs_generate(PrbsConfig(registers=9, taps=(9, 5), length=16 * 511), seed=511)
    spec = estimate_spectrum(x, GRID)
    power = float(np.trapezoid(spec.power, GRID.omegas) / np.pi)
    parseval = abs(power / np.mean(x ** 2) - 1.0)

    v = np.random.default_rng(5).standard_normal(prbs.size)
    d = simulate_closed_loop(plant, controller, prbs, v)
    T_ry, S_yp, _, _ = closed_loop_transfer(plant, controller)
    sim_err = float(np.max(np.abs(d.y - filter_apply(T_ry, prbs) - filter_apply(S_yp, v))))

    ok = gap_ok and parseval < 0.05 and sim_err < 1e-8
    acceptance(9, "numerical hygiene", ok,
               f"nu-gap properties {'hold' if gap_ok else 'fail'} on 50 pairs, "
               f"Parseval error {parseval:.1e}, simulator error {sim_err:.1e}")
    assert ok
