import math

import numpy as np
import pytest

from kpplab.kpp_solver import (DomainError, Field, FrontTrace, Grid, LevelError, PreAsymptoticError,
                               ReactionFn, StepControl, StepUnderflowError, boundary_limits, bramson_shift,
                               default_grid, evolve, extract_xinf, fit_log_coefficient, front_position,
                               init_data, record_trace)
from kpplab.wave_profile import eval_wave


def explicit_front(t_end, dx=0.2, left=-20.0, right=None):
    """Forward-Euler / three-point oracle for u_t = u_xx + u - u^2 from a step at 0."""
    right = right or 2.2 * t_end + 20.0
    x = np.arange(left, right + dx / 2, dx)
    u = np.where(x <= 0, 1.0, 0.0)
    # forward Euler slows the front by about dt (lambda^2 + 1)^2 / 2 per unit time, so dt must be tiny
    dt = 0.05 * dx * dx
    n = int(math.ceil((t_end - 1.0) / dt))
    dt = (t_end - 1.0) / n
    for _ in range(n):
        lap = np.empty_like(u)
        lap[1:-1] = (u[:-2] - 2 * u[1:-1] + u[2:]) / (dx * dx)
        u[1:-1] = u[1:-1] + dt * (lap[1:-1] + u[1:-1] - u[1:-1] ** 2)
    j = np.nonzero(u >= 0.5)[0][-1]
    return x[j] + (u[j] - 0.5) / (u[j] - u[j + 1]) * dx


def lab_step(t_end, dx=0.1, x1=0.0):
    return init_data(("step", x1), default_grid("lab", t_end, dx=dx), frame="lab")


# ---------------------------------------------------------------------------
# initial data and reactions

def test_step_data():
    g = Grid.from_spacing(-50, 200, 0.5)
    f = init_data(("step", 0.0), g)
    assert np.all(f.values[g.x <= 0] == 1.0) and np.all(f.values[g.x > 0] == 0.0)
    assert f.t == 1.0 and f.left_state == 1.0
    assert boundary_limits(f) == (0.0, 0.0)


def test_bump_data_boundary_limits():
    g = Grid.from_spacing(-50, 50, 0.1)
    f = init_data(("bump", 0.0, 1.0), g)
    assert f.left_state == 0.0
    assert boundary_limits(f) == (0.0, 0.0)
    assert np.all(f.values[(g.x < 0) | (g.x > 1)] == 0.0)


def test_table_out_of_range():
    g = Grid.from_spacing(-10, 10, 0.5)
    with pytest.raises(ValueError):
        init_data({"table": ([-10.0, 0.0, 10.0], [1.0, 1.2, 0.0])}, g)


def test_uniform_one_boundary_limits():
    g = Grid.from_spacing(-10, 30, 0.5)
    f = Field(grid=g, values=np.ones(g.n))
    assert boundary_limits(f) == (0.0, 1.0)


def test_quadratic_reaction_constant():
    assert ReactionFn.quadratic().check() == pytest.approx(1.0, abs=1e-12)


def test_reaction_hypotheses_rejected():
    with pytest.raises(ValueError):
        ReactionFn(f=lambda s: 2 * s * (1 - s)).check()       # f'(0) = 2
    with pytest.raises(ValueError):
        ReactionFn(f=lambda s: s * (1 - s) * (1 + 3 * s)).check()  # f' > 1 inside


def test_custom_reaction_flow_matches_exact():
    u = np.linspace(0, 1, 11)
    quad = ReactionFn.quadratic()
    custom = ReactionFn(f=lambda s: s - s * s)
    assert np.max(np.abs(quad.flow(u, 0.3) - custom.flow(u, 0.3))) < 1e-7


def test_field_invariants():
    g = Grid.from_spacing(-10, 10, 0.5)
    with pytest.raises(ValueError):
        Field(grid=g, values=np.zeros(g.n), t=0.5)
    with pytest.raises(ValueError):
        Field(grid=g, values=np.zeros(3))
    with pytest.raises(ValueError):
        Field(grid=g, values=np.zeros(g.n), frame="moving", diffusion=0.5)


# ---------------------------------------------------------------------------
# evolution

@pytest.mark.parametrize("level", [0.0, 1.0])
def test_equilibria(level):
    g = Grid.from_spacing(-30, 30, 0.2)
    f = Field(grid=g, values=np.full(g.n, level), left_state=level, right_state=level)
    out = evolve(f, 7.5)
    # zero stays exactly zero; one picks up roundoff from the banded solve
    assert np.max(np.abs(out.values - level)) <= 1e-12


def test_lab_speed_against_explicit_oracle():
    f = evolve(lab_step(50.0), 50.0)
    sigma = front_position(f, 0.5)
    oracle = explicit_front(50.0)
    assert 1.75 <= sigma / 50 <= 2.0
    assert 1.75 <= oracle / 50 <= 2.0
    # the oracle is only second order in dx = 0.2, the step data shifts by dx/2
    assert abs(sigma - oracle) < 0.3


def test_guard_band_raises():
    g = Grid.from_spacing(-20, 30, 0.1)
    f = init_data(("step", 0.0), g)
    with pytest.raises(DomainError):
        evolve(f, 20.0)


def test_step_underflow():
    f = lab_step(5.0, dx=0.1)
    with pytest.raises(StepUnderflowError):
        evolve(f, 5.0, StepControl(dt=0.1, tol=1e-30, dt_min=1e-3, startup=0.0))


def test_adaptive_matches_fixed_step():
    f = lab_step(10.0, dx=0.1)
    a = front_position(evolve(f, 10.0, StepControl(dt=0.01)))
    b = front_position(evolve(f, 10.0, StepControl(dt=0.05, tol=1e-6)))
    assert abs(a - b) < 1e-3


def test_follow_window_matches_fixed_window():
    cps = [10.0, 20.0, 30.0]
    a = record_trace(lab_step(30.0), 0.5, cps)
    g = default_grid("lab", 30.0, dx=0.1, follow=True)
    b = record_trace(init_data(("step", 0.0), g), 0.5, cps, follow=40.0)
    assert np.max(np.abs(a.sigma - b.sigma)) < 1e-8


# ---------------------------------------------------------------------------
# front position

def test_front_position_step():
    g = Grid.from_spacing(-10, 10, 0.1)
    f = init_data(("step", 0.0), g)
    assert abs(front_position(f, 0.5)) <= g.dx


def test_front_position_translated_wave(profile):
    g = Grid.from_spacing(-30, 40, 0.05)
    f = Field(grid=g, values=eval_wave(profile, g.x - 7.0))
    s = float(eval_wave(profile, 0.0))
    assert front_position(f, s) == pytest.approx(7.0, abs=g.dx)


def test_front_position_rightmost_crossing():
    g = Grid.from_spacing(-10, 20, 0.01)
    x = g.x
    u = np.where(x < 3, 1.0, np.where(x < 6, 0.0, np.where(x < 9, 1.0, 0.0)))
    u = np.interp(x, [-10, 2.9, 3.1, 5.9, 6.1, 8.9, 9.1, 20], [1, 1, 0, 0, 1, 1, 0, 0])
    f = Field(grid=g, values=u)
    assert front_position(f, 0.5) == pytest.approx(9.0, abs=g.dx)


def test_front_position_level_errors():
    g = Grid.from_spacing(-10, 10, 0.1)
    f = Field(grid=g, values=np.zeros(g.n), left_state=0.0)
    with pytest.raises(LevelError):
        front_position(f, 0.5)
    with pytest.raises(ValueError):
        front_position(init_data(("step", 0.0), g), 1.5)


# ---------------------------------------------------------------------------
# traces

def test_record_trace_shape():
    tr = record_trace(lab_step(8.0), 0.5, [2.0, 4.0, 8.0])
    assert len(tr) == 3 and np.all(np.diff(tr.t) > 0)
    with pytest.raises(ValueError):
        record_trace(lab_step(8.0), 0.5, [4.0, 2.0])


def test_frame_consistency():
    # at t = 1 the moving coordinate is x - 2, so moving-frame step data at 0 is lab step data at 2
    cps = np.linspace(10.0, 100.0, 10)
    lab = record_trace(lab_step(100.0, x1=2.0), 0.5, cps)
    mov = record_trace(init_data(("step", 0.0), default_grid("moving", 100.0, dx=0.1), frame="moving"), 0.5, cps)
    assert np.max(np.abs(lab.sigma - bramson_shift(cps) - mov.sigma)) <= 2 * 0.1


def test_moving_frame_trace_bounded():
    cps = np.geomspace(10.0, 500.0, 20)
    f = init_data(("step", 0.0), default_grid("moving", 500.0, dx=0.2), frame="moving")
    tr = record_trace(f, 0.5, cps, StepControl(dt=0.05))
    # a lab-frame front would move by about 980 over this window
    assert np.ptp(tr.sigma) < 1.0


def test_boundary_limits_moving_run():
    f = init_data(("step", 0.0), default_grid("moving", 100.0, dx=0.1), frame="moving")
    left, right = boundary_limits(evolve(f, 100.0))
    assert left <= 1e-3 and right <= 1e-3


def test_grid_refinement_second_order():
    # smooth data, so the sampling of a discontinuity does not limit the order
    xs = np.linspace(-60, 60, 4001)
    us = 1.0 / (1.0 + np.exp(2 * xs))
    vals = []
    for dx, dt in ((0.4, 0.08), (0.2, 0.04), (0.1, 0.02)):
        f = init_data({"table": (xs, us)}, default_grid("lab", 20.0, dx=dx))
        vals.append(front_position(evolve(f, 20.0, StepControl(dt=dt))))
    d1, d2 = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
    assert d2 <= d1 / 3.0


# ---------------------------------------------------------------------------
# fits

def planted(t, profile, x_inf, b, level=0.5):
    return FrontTrace(level=level, t=t, sigma=profile.level_position(level) + x_inf + b / np.sqrt(t),
                      frame="moving")


def test_extract_xinf_planted(profile):
    t = np.geomspace(100, 2000, 20)
    est = extract_xinf(planted(t, profile, 0.7, 0.3), profile)
    # sigma - phi^{-1}(s) = -y with x_inf = y - log A
    assert est.x_inf == pytest.approx(-0.7 - math.log(profile.amplitude), abs=1e-6)
    est0 = extract_xinf(planted(t, profile, 0.7, 0.0), profile)
    assert est0.stderr["x_inf"] < 1e-10


def test_extract_xinf_preconditions(profile):
    with pytest.raises(PreAsymptoticError):
        extract_xinf(planted(np.geomspace(100, 500, 20), profile, 0.7, 0.3), profile)
    with pytest.raises(PreAsymptoticError):
        extract_xinf(planted(np.geomspace(100, 2000, 5), profile, 0.7, 0.3), profile)
    t = np.geomspace(100, 2000, 20)
    noisy = planted(t, profile, 0.7, 0.3)
    noisy = FrontTrace(level=0.5, t=t, sigma=noisy.sigma + 0.2 * np.sin(t), frame="moving")
    with pytest.raises(PreAsymptoticError):
        extract_xinf(noisy, profile)


def test_fit_log_coefficient_planted():
    t = np.geomspace(200, 2000, 30)
    tr = FrontTrace(level=0.5, t=t, sigma=2 * t - 1.5 * np.log(t) - 0.2, frame="lab")
    c1, _ = fit_log_coefficient(tr)
    assert c1 == pytest.approx(1.5, abs=1e-8)
    tr = FrontTrace(level=0.5, t=t, sigma=2 * t - 1.5 * np.log(t) - 0.2 + 5 / np.sqrt(t), frame="lab")
    assert fit_log_coefficient(tr)[0] == pytest.approx(1.5, abs=0.02)


def test_fit_log_coefficient_ill_conditioned():
    t = np.linspace(1000, 1100, 10)
    tr = FrontTrace(level=0.5, t=t, sigma=2 * t - 1.5 * np.log(t), frame="lab")
    with pytest.raises(PreAsymptoticError):
        fit_log_coefficient(tr)


def test_trace_invariants():
    with pytest.raises(ValueError):
        FrontTrace(level=0.5, t=np.array([2.0, 1.0]), sigma=np.zeros(2), frame="lab")
    with pytest.raises(ValueError):
        FrontTrace(level=0.5, t=np.array([1.0, 2.0]), sigma=np.array([0.0, np.nan]), frame="lab")
