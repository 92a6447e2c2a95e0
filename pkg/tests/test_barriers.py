import math
from dataclasses import replace

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from kpplab.barriers import (ETA1, DominationError, InfeasibleError, SubBarrierSpec, SuperBarrierSpec, chi,
                             chi_identity_residual, drift_h, epsilon_constants, eta1_reduction, ode_proxy,
                             smoothstep_cutoff, subsolution_build, subsolution_operator,
                             subsolution_operator_fd, supersolution_operator, supersolution_operator_fd,
                             upper_barrier_run, upper_boundary_value, verify_subsolution,
                             verify_supersolution)
from kpplab.self_similar import SelfSimilarState, default_eta_grid


@pytest.fixture(scope="module")
def sub_spec():
    return subsolution_build(0.2, 1.0)


# ---------------------------------------------------------------------------
# constants and identities

def test_epsilon_constants_closed_form():
    e1, e2 = epsilon_constants()
    assert e1 == pytest.approx(math.exp(-3.5), abs=1e-12)
    assert e2 == pytest.approx(0.5 * math.exp(-0.125), abs=1e-12)
    assert e1 == pytest.approx(0.030197, abs=1e-6)
    assert e2 == pytest.approx(0.441248, abs=1e-6)


def test_epsilon_constants_grid_oracle():
    # independent minimization of the defining expressions at step 1e-5
    e = np.linspace(1e-5, ETA1, int(ETA1 / 1e-5))
    eps1 = np.min(e ** -1 * (e * np.exp(-e * e / 4)) * np.exp(e * e / 8))
    e = np.linspace(0.0, 1.0, 100001)
    eps2 = np.min((1 - e * e / 2) * np.exp(-e * e / 4) * np.exp(e * e / 8))
    c1, c2 = epsilon_constants()
    assert abs(eps1 - c1) <= 1e-9 and abs(eps2 - c2) <= 1e-9
    g1, g2 = epsilon_constants(grid_step=1e-5)
    assert abs(g1 - c1) <= 1e-9 and abs(g2 - c2) <= 1e-9


def test_chi_identity_symbolic():
    eta = sp.Symbol("eta")
    f = eta * sp.exp(-eta ** 2 / 8)
    Lf = -sp.diff(f, eta, 2) - eta / 2 * sp.diff(f, eta) - f
    assert sp.simplify(Lf - (eta ** 2 / 16 - sp.Rational(3, 4)) * f) == 0


def test_chi_identity_numeric():
    eta = np.linspace(0.0, 12.0, 1000)
    assert np.max(np.abs(chi_identity_residual(eta))) <= 1e-10


def test_chi_identity_finite_difference():
    eta = np.linspace(0.1, 11.9, 1000)
    d = 1e-4
    f, fp, fm = chi(eta), chi(eta + d), chi(eta - d)
    L = -(fp - 2 * f + fm) / d ** 2 - eta / 2 * (fp - fm) / (2 * d) - f
    assert np.max(np.abs(L - (eta * eta / 16 - 0.75) * f)) <= 1e-6


# ---------------------------------------------------------------------------
# sub-solution construction

def oracle_feasible(tau0, a2, a3, gamma, eps1, eps2):
    """Direct evaluation of the two constraints plus h < 0 on [tau0, inf)."""
    if -gamma * math.exp(-(0.5 - gamma) * tau0) + 1.5 * math.exp(-0.5 * tau0) >= 0:
        return False
    if eps1 * a3 / 4 < 3 + 4 * math.exp(-tau0 / 4) * (a2 + a3):
        return False
    tau = tau0 + np.linspace(0, 200, 2001)
    zeta = a2 + a3 * np.exp(-(tau - tau0) / 4)
    zeta0 = a2 + a3
    q = np.exp(-(tau - tau0)) + 4 / 3 * np.exp(-tau / 4) * zeta0
    return bool(np.all(zeta > q / eps2))


def test_build_is_lexicographically_smallest(sub_spec):
    eps1, eps2 = epsilon_constants()
    s = sub_spec
    assert oracle_feasible(s.tau0, s.a2, s.a3, 0.2, eps1, eps2)
    assert s.tau0 <= 40
    base = math.ceil(1 / eps2)
    for tau0 in range(10, int(s.tau0) + 1, 2):
        for j in range(40):
            a2 = base + 0.5 * j
            for m in range(40):
                a3 = 2.0 ** m
                if (tau0, a2, a3) >= (s.tau0, s.a2, s.a3):
                    break
                assert not oracle_feasible(tau0, a2, a3, 0.2, eps1, eps2)


def test_build_a2_bound(sub_spec):
    assert sub_spec.a2 > 1 / sub_spec.eps2
    assert 1 / sub_spec.eps2 == pytest.approx(2.266, abs=1e-3)


def test_constraint_margins(sub_spec):
    s = sub_spec
    taus = s.tau0 + np.arange(0, 51)
    m = s.constraint_margins(taus)
    assert m["decay"] >= 1e-12 and m["positivity"] >= 1e-12


def test_feasibility_monotone_in_tau0(sub_spec):
    for later in (sub_spec.tau0 + 2, sub_spec.tau0 + 10, sub_spec.tau0 + 30):
        s = replace(sub_spec, tau0=later)
        m = s.constraint_margins(later + np.arange(0, 51))
        assert m["decay"] >= sub_spec.constraint_margins()["decay"]
        assert m["positivity"] > 0


def test_q_positive_zeta_decreasing(sub_spec):
    tau = sub_spec.tau0 + np.linspace(0, 200, 2001)
    assert np.all(sub_spec.q(tau) > 0)
    assert np.all(sub_spec.dzeta(tau) < 0)
    F = sub_spec.F(tau)
    # the integrand underflows once exp(gam s / 2) is large, so F saturates
    assert np.all(np.diff(F) >= 0) and F[-1] > F[0] and np.isfinite(F[-1])


def test_build_errors():
    with pytest.raises(ValueError):
        subsolution_build(0.3, 1.0)
    with pytest.raises(ValueError):
        subsolution_build(0.2, 0.0)
    with pytest.raises(InfeasibleError):
        subsolution_build(0.2, 1.0, tau0_grid=(10,), a3_powers=4)


# ---------------------------------------------------------------------------
# sub-solution certificate

def test_subsolution_certificate(sub_spec):
    rep = verify_subsolution(sub_spec)
    assert rep.max_violation <= 1e-10
    assert rep.refinement_confirmed
    assert rep.to_dict()["max_violation"] == rep.max_violation


def test_halved_a3(sub_spec):
    # halving a3 breaks the decay constraint, yet the sampled operator stays non-positive:
    # the constraint is sufficient, not necessary
    half = replace(sub_spec, a3=sub_spec.a3 / 2)
    assert half.constraint_margins()["decay"] < 0
    assert verify_subsolution(half).max_violation <= 1e-10
    # a small a3 produces a genuine violation, which is reported, not raised
    rep = verify_subsolution(replace(sub_spec, a3=4.0))
    assert rep.max_violation > 0


def test_eta1_reduction(sub_spec):
    tau = sub_spec.tau0 + np.linspace(0, 30, 61)
    eta = np.linspace(ETA1, 12.0, 101)
    T, E = np.meshgrid(tau, eta, indexing="ij")
    assert np.all(drift_h(tau, sub_spec.gamma) < 0)
    scaled, bound = eta1_reduction(sub_spec, T, E)
    assert np.all(scaled <= bound + 1e-12)
    # the reduced inequality q' + q - e^{-tau/4} zeta >= 0
    assert np.all(bound <= 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 30.0), st.floats(0.05, 11.5))
def test_subsolution_operator_matches_fd(sub_spec, dtau, eta):
    tau = sub_spec.tau0 + dtau
    exact = subsolution_operator(sub_spec, tau, eta)
    fd = subsolution_operator_fd(sub_spec, tau, eta)
    scale = abs(sub_spec.value(tau, eta)) + 1e-3
    assert abs(exact - fd) <= 1e-4 * scale


# ---------------------------------------------------------------------------
# super-solution

def test_cosine_fact():
    spec = SuperBarrierSpec(lam=0.05, gamma=0.25, epsilon=0.05, A=10.0)
    t = np.geomspace(1e3, 1e5, 7)[:, None]
    x = np.linspace(-1, 1, 9)[None, :] * t ** 0.25
    k = spec.gamma + spec.epsilon
    d = 1e-3 * t ** k
    v = spec.value
    sxx = (v(t, x + d) - 2 * v(t, x) + v(t, x - d)) / d ** 2
    assert np.allclose(-sxx, t ** (-2 * k) * v(t, x), rtol=1e-5, atol=0)


def test_supersolution_certificate():
    spec = SuperBarrierSpec(lam=0.05, gamma=0.25, epsilon=0.05, A=10.0)
    assert spec.admissible
    rep = verify_supersolution(spec, t_range=(1e3, 1e5))
    assert rep.min_margin > 0 and rep.refinement_confirmed


@pytest.mark.parametrize("A", [1.0, 10.0, 1e2, 1e4])
def test_gamma_too_large_fails_on_growing_window(A):
    # with gamma = 0.4 the barrier decays like t^{-0.95} but the forcing only like t^{-0.6}
    spec = SuperBarrierSpec(lam=0.05, gamma=0.4, epsilon=0.05, A=A)
    assert not spec.admissible
    margins = [verify_supersolution(spec, t_range=(1e3, 10.0 ** e), n_t=201, n_x=101).min_margin
               for e in (5, 10, 15, 20)]
    assert margins[-1] < 0


def test_admissible_gamma_stays_positive_on_growing_window():
    spec = SuperBarrierSpec(lam=0.05, gamma=0.25, epsilon=0.05, A=10.0)
    for e in (6, 8, 10):
        assert verify_supersolution(spec, t_range=(1e3, 10.0 ** e), n_t=201, n_x=101).min_margin > 0


@settings(max_examples=40, deadline=None)
@given(st.floats(3.0, 5.0), st.floats(-1.0, 1.0))
def test_supersolution_operator_matches_fd(log_t, r):
    spec = SuperBarrierSpec(lam=0.05, gamma=0.25, epsilon=0.05, A=10.0)
    t = 10.0 ** log_t
    x = r * t ** 0.25
    exact = supersolution_operator(spec, t, x)
    fd = supersolution_operator_fd(spec, t, x)
    assert abs(exact - fd) <= 1e-6 * spec.A + 1e-3 * abs(exact)


# ---------------------------------------------------------------------------
# ODE proxy

def direct_ode(gamma, f1, t):
    a = 1 - 2 * gamma
    sol = solve_ivp(lambda s, f: [-a * s ** (-2 * gamma) * f[0] + s ** (gamma - 1)], (1.0, t), [f1],
                    method="Radau", rtol=1e-12, atol=1e-14)
    return sol.y[0, -1]


@pytest.mark.parametrize("t", [2.0, 10.0, 100.0, 1000.0])
def test_ode_proxy_matches_integrator(t):
    assert ode_proxy(0.25, 1.0, t) == pytest.approx(direct_ode(0.25, 1.0, t), rel=1e-8)


def test_ode_proxy_initial_value():
    assert ode_proxy(0.25, 0.7, 1.0) == 0.7


def test_ode_proxy_decays_faster_than_power():
    f2 = ode_proxy(0.25, 0.0, 1e2) * 1e2 ** 0.25
    f4 = ode_proxy(0.25, 0.0, 1e4) * 1e4 ** 0.25
    assert f4 < f2


def test_ode_proxy_errors():
    with pytest.raises(ValueError):
        ode_proxy(0.4, 0.0, 10.0)
    with pytest.raises(ValueError):
        ode_proxy(0.25, 0.0, 0.5)


# ---------------------------------------------------------------------------
# upper barrier

def bump(eta, scale=1.0):
    eta = np.asarray(eta, dtype=float)
    return scale * np.where((eta > 0) & (eta < 1), np.sin(np.pi * eta) ** 2, 0.0)


@pytest.fixture(scope="module")
def reference():
    eta = default_eta_grid(0.01)
    return SelfSimilarState(tau=0.0, eta_grid=eta, w=bump(eta))


def test_cutoff_shape():
    y = np.linspace(0, 3, 3001)
    g, g1, g2 = smoothstep_cutoff(y)
    assert np.all(g[y <= 1] == 1.0) and np.all(g[y >= 2] == 0.0)
    assert np.all(np.diff(g) <= 0)
    assert np.allclose(np.gradient(g, y)[5:-5], g1[5:-5], atol=5e-3)


def test_boundary_value_formula():
    assert upper_boundary_value(3.0, 0.2) == pytest.approx(math.exp(-math.exp(0.6)), rel=1e-14)
    assert upper_boundary_value(3.0, 0.2) == pytest.approx(math.exp(-1.8221), rel=1e-4)


def test_upper_barrier_dominates(reference):
    rec = upper_barrier_run(lambda e: bump(e, 2.0), 0.2, 4.0, reference=reference)
    assert len(rec.domination_gap) == 10
    assert max(rec.domination_gap) <= 1e-9
    assert min(rec.moment) >= 1.0


def test_upper_barrier_moment_enlarged():
    rec = upper_barrier_run(lambda e: bump(e, 20.0), 0.2, 4.0)
    assert min(rec.moment) >= 1.0
    assert rec.boundary_value[-1] == pytest.approx(math.exp(-math.exp(0.8)), rel=1e-12)


def test_upper_barrier_rejects_low_data(reference):
    with pytest.raises(DominationError):
        upper_barrier_run(lambda e: bump(e, 0.5), 0.2, 1.0, reference=reference)
