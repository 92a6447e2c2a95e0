"""Explicit barriers for the Bramson-frame problem and their numerical certificates.

Three constructions are covered.

* The bounded-window super-solution ``A t^{-lam} cos(x / t^{gam+eps})`` of the
  linearized difference equation near the front, together with the scalar ODE
  ``f' + (1 - 2 gam) t^{-2 gam} f = t^{gam - 1}`` that motivates it.
* The self-similar upper barrier, evolved on the half line after the shift
  ``y = eta + exp(-(1/2 - gam) tau)`` that straightens its moving edge.
* The sub-solution ``(zeta phi0 - q eta e^{-eta^2/8}) e^{-F}`` with
  ``phi0 = eta e^{-eta^2/4}`` and the linear constraints on
  ``zeta = a2 + a3 e^{-(tau - tau0)/4}`` that make it work.

Certificates are obtained by dense sampling; every grid is halved once to
confirm that the sign does not change.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad

from .self_similar import SelfSimilarState, _bands, _theta_step, moment

ETA1 = math.sqrt(28.0)


class InfeasibleError(ValueError):
    """No lattice point satisfies the sub-solution constraints."""


class DominationError(RuntimeError):
    """The upper barrier fails to dominate the reference solution."""


# ---------------------------------------------------------------------------
# shared closed forms

def phi0(eta):
    eta = np.asarray(eta, dtype=float)
    return eta * np.exp(-0.25 * eta * eta)


def dphi0(eta):
    eta = np.asarray(eta, dtype=float)
    return (1.0 - 0.5 * eta * eta) * np.exp(-0.25 * eta * eta)


def chi(eta):
    """``eta e^{-eta^2/8}``, the correction profile of the sub-solution."""
    eta = np.asarray(eta, dtype=float)
    return eta * np.exp(-0.125 * eta * eta)


def dchi(eta):
    eta = np.asarray(eta, dtype=float)
    return (1.0 - 0.25 * eta * eta) * np.exp(-0.125 * eta * eta)


def d2chi(eta):
    eta = np.asarray(eta, dtype=float)
    return (eta**3 / 16.0 - 0.75 * eta) * np.exp(-0.125 * eta * eta)


def chi_identity_residual(eta) -> np.ndarray:
    """``L chi - (eta^2/16 - 3/4) chi`` from the analytic derivatives of ``chi``."""
    eta = np.asarray(eta, dtype=float)
    L_chi = -d2chi(eta) - 0.5 * eta * dchi(eta) - chi(eta)
    return L_chi - (eta * eta / 16.0 - 0.75) * chi(eta)


def drift_h(tau, gamma: float):
    """Drift of the shifted lower-barrier problem, ``-gam e^{-(1/2-gam) tau} + (3/2) e^{-tau/2}``."""
    tau = np.asarray(tau, dtype=float)
    return -gamma * np.exp(-(0.5 - gamma) * tau) + 1.5 * np.exp(-0.5 * tau)


def epsilon_constants(grid_step: Optional[float] = None):
    """``(eps1, eps2)`` in closed form, or by grid minimization when ``grid_step`` is given.

    ``eps1 = min_{[0, eta1]} eta^{-1} phi0 e^{eta^2/8}`` and
    ``eps2 = min_{[0, 1]} phi0' e^{eta^2/8}``.
    """
    if grid_step is None:
        return math.exp(-ETA1**2 / 8.0), 0.5 * math.exp(-0.125)
    e1 = np.linspace(0.0, ETA1, int(math.ceil(ETA1 / grid_step)) + 1)
    e2 = np.linspace(0.0, 1.0, int(math.ceil(1.0 / grid_step)) + 1)
    eps1 = float(np.min(np.exp(-0.25 * e1 * e1) * np.exp(0.125 * e1 * e1)))
    eps2 = float(np.min(dphi0(e2) * np.exp(0.125 * e2 * e2)))
    return eps1, eps2


# ---------------------------------------------------------------------------
# sub-solution

@dataclass(frozen=True)
class SubBarrierSpec:
    tau0: float
    a2: float
    a3: float
    C_gamma: float
    gamma: float
    eps1: float
    eps2: float
    eta1: float = ETA1

    def zeta(self, tau):
        return self.a2 + self.a3 * np.exp(-(np.asarray(tau, dtype=float) - self.tau0) / 4.0)

    def dzeta(self, tau):
        return -0.25 * self.a3 * np.exp(-(np.asarray(tau, dtype=float) - self.tau0) / 4.0)

    def q(self, tau):
        tau = np.asarray(tau, dtype=float)
        return np.exp(-(tau - self.tau0)) + (4.0 / 3.0) * np.exp(-tau / 4.0) * self.zeta(self.tau0)

    def dq(self, tau):
        tau = np.asarray(tau, dtype=float)
        return -np.exp(-(tau - self.tau0)) - (1.0 / 3.0) * np.exp(-tau / 4.0) * self.zeta(self.tau0)

    def absorption(self, tau):
        return self.C_gamma * np.exp(-np.exp(0.5 * self.gamma * np.asarray(tau, dtype=float)))

    def F(self, tau) -> np.ndarray:
        """``int_0^tau C_gam exp(-exp(gam s / 2)) ds``."""
        tau = np.asarray(tau, dtype=float)
        uniq, inv = np.unique(tau, return_inverse=True)
        vals = np.empty_like(uniq)
        acc, prev = 0.0, 0.0
        for i, tk in enumerate(uniq):
            acc += quad(lambda s: self.absorption(s), prev, tk, epsabs=1e-14, epsrel=1e-12)[0]
            prev = tk
            vals[i] = acc
        return vals[inv].reshape(tau.shape)

    def value(self, tau, eta):
        tau, eta = np.broadcast_arrays(np.asarray(tau, float), np.asarray(eta, float))
        return (self.zeta(tau) * phi0(eta) - self.q(tau) * chi(eta)) * np.exp(-self.F(tau))

    def constraint_margins(self, taus=None) -> dict:
        """Left minus right side of the two linear constraints (positive means satisfied)."""
        if taus is None:
            taus = self.tau0 + np.linspace(0.0, 200.0, 4001)
        taus = np.asarray(taus, dtype=float)
        c1 = self.eps1 * self.a3 / 4.0 - 3.0 - 4.0 * math.exp(-self.tau0 / 4.0) * (self.a2 + self.a3)
        c2 = self.zeta(taus) - self.q(taus) / self.eps2
        return {"decay": float(c1), "positivity": float(np.min(c2))}


def _feasible(tau0, a2, a3, gamma, eps1, eps2) -> bool:
    # h < 0 on [tau0, inf) needs gam e^{gam tau0} > 3/2
    if gamma * math.exp(gamma * tau0) <= 1.5:
        return False
    if eps1 * a3 / 4.0 < 3.0 + 4.0 * math.exp(-tau0 / 4.0) * (a2 + a3):
        return False
    s = np.linspace(0.0, 200.0, 4001)
    zeta = a2 + a3 * np.exp(-s / 4.0)
    q = np.exp(-s) + (4.0 / 3.0) * np.exp(-(tau0 + s) / 4.0) * (a2 + a3)
    return bool(np.all(zeta - q / eps2 > 0))


def subsolution_build(gamma: float, C_gamma: float,
                      tau0_grid: Sequence[float] = tuple(range(10, 61, 2)),
                      a2_steps: int = 40, a3_powers: int = 40) -> SubBarrierSpec:
    """Smallest feasible ``(tau0, a2, a3)`` in lexicographic order on the search lattice.

    The lattice is ``tau0`` in ``tau0_grid``, ``a2 = ceil(1/eps2) + j/2`` for
    ``j < a2_steps`` and ``a3 = 2**m`` for ``m < a3_powers``.
    """
    if not 0 < gamma < 0.25:
        raise ValueError("gamma must lie in (0, 1/4)")
    if not C_gamma > 0:
        raise ValueError("C_gamma must be positive")
    eps1, eps2 = epsilon_constants()
    a2_base = math.ceil(1.0 / eps2)
    for tau0 in tau0_grid:
        for j in range(a2_steps):
            a2 = a2_base + 0.5 * j
            for m in range(a3_powers):
                a3 = float(2**m)
                if _feasible(tau0, a2, a3, gamma, eps1, eps2):
                    return SubBarrierSpec(tau0=float(tau0), a2=a2, a3=a3, C_gamma=C_gamma,
                                          gamma=gamma, eps1=eps1, eps2=eps2)
    raise InfeasibleError("no feasible (tau0, a2, a3) on the lattice; widen the search range")


def subsolution_operator(spec: SubBarrierSpec, tau, eta) -> np.ndarray:
    """Closed-form ``p_tau + L p + h p_eta + C_gam e^{-exp(gam tau/2)} p`` for the sub-solution.

    The absorption term is cancelled by the ``e^{-F}`` factor, leaving
    ``e^{-F} [zeta' phi0 - (q' + (eta^2/16 - 3/4) q) chi + h (zeta phi0' - q chi')]``.
    """
    tau, eta = np.broadcast_arrays(np.asarray(tau, float), np.asarray(eta, float))
    h = drift_h(tau, spec.gamma)
    body = (spec.dzeta(tau) * phi0(eta)
            - (spec.dq(tau) + (eta * eta / 16.0 - 0.75) * spec.q(tau)) * chi(eta)
            + h * (spec.zeta(tau) * dphi0(eta) - spec.q(tau) * dchi(eta)))
    F = spec.F(tau)
    return body * np.exp(-F)


def subsolution_operator_fd(spec: SubBarrierSpec, tau, eta, d_tau: float = 1e-4,
                            d_eta: float = 1e-4) -> np.ndarray:
    """The same operator by central differences of ``spec.value``."""
    tau, eta = np.broadcast_arrays(np.asarray(tau, float), np.asarray(eta, float))
    p = spec.value(tau, eta)
    p_t = (spec.value(tau + d_tau, eta) - spec.value(tau - d_tau, eta)) / (2 * d_tau)
    pp = spec.value(tau, eta + d_eta)
    pm = spec.value(tau, eta - d_eta)
    p_e = (pp - pm) / (2 * d_eta)
    p_ee = (pp - 2 * p + pm) / (d_eta * d_eta)
    Lp = -p_ee - 0.5 * eta * p_e - p
    return p_t + Lp + drift_h(tau, spec.gamma) * p_e + spec.absorption(tau) * p


@dataclass(frozen=True)
class BarrierReport:
    spec: dict
    grid: dict
    value: float
    refinement_confirmed: bool
    location: tuple = ()
    kind: str = "max_violation"

    @property
    def max_violation(self) -> float:
        return self.value

    @property
    def min_margin(self) -> float:
        return self.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d[self.kind] = d.pop("value")
        return d


def _sub_max(spec, tau_range, eta_range, n_tau, n_eta):
    taus = np.linspace(tau_range[0], tau_range[1], n_tau)
    etas = np.linspace(eta_range[0], eta_range[1], n_eta)
    if etas[0] <= 0:
        etas = etas[1:]
    T, E = np.meshgrid(taus, etas, indexing="ij")
    op = subsolution_operator(spec, T, E)
    k = np.unravel_index(np.argmax(op), op.shape)
    return float(op[k]), (float(T[k]), float(E[k]))


def verify_subsolution(spec: SubBarrierSpec, tau_range=None, eta_range=(0.0, 12.0),
                       n_tau: int = 301, n_eta: int = 1201, tol: float = 1e-10) -> BarrierReport:
    """Largest value of the sub-solution operator over a dense grid (should be <= 0)."""
    if tau_range is None:
        tau_range = (spec.tau0, spec.tau0 + 30.0)
    coarse, loc = _sub_max(spec, tau_range, eta_range, n_tau, n_eta)
    fine, loc_f = _sub_max(spec, tau_range, eta_range, 2 * n_tau - 1, 2 * n_eta - 1)
    worst, where = (fine, loc_f) if fine > coarse else (coarse, loc)
    confirmed = (coarse <= tol) == (fine <= tol)
    return BarrierReport(spec=asdict(spec), grid={"tau": list(tau_range), "eta": list(eta_range),
                                                   "n_tau": n_tau, "n_eta": n_eta},
                         value=worst, refinement_confirmed=confirmed, location=where)


def eta1_reduction(spec: SubBarrierSpec, tau, eta):
    """Scaled operator ``eta^{-1} e^{eta^2/8} e^F`` times the sub-solution operator and its bound.

    For ``eta >= eta1`` and ``h < 0`` the scaled operator is at most
    ``zeta e^{-tau/4} - (q' + q)``; returns ``(scaled, bound)``.
    """
    tau, eta = np.broadcast_arrays(np.asarray(tau, float), np.asarray(eta, float))
    F = spec.F(tau)
    scaled = subsolution_operator(spec, tau, eta) * np.exp(F) * np.exp(0.125 * eta * eta) / eta
    bound = spec.zeta(tau) * np.exp(-tau / 4.0) - (spec.dq(tau) + spec.q(tau))
    return scaled, bound


# ---------------------------------------------------------------------------
# super-solution near the front

@dataclass(frozen=True)
class SuperBarrierSpec:
    lam: float
    gamma: float
    epsilon: float
    A: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.gamma, self.epsilon) <= 0 or self.A < 1:
            raise ValueError("exponents must be positive and A >= 1")

    @property
    def admissible(self) -> bool:
        """``gam < 1/3`` and ``2 gam + 2 eps + lam < 1 - gam``."""
        return self.gamma < 1.0 / 3.0 and 2 * self.gamma + 2 * self.epsilon + self.lam < 1 - self.gamma

    def value(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return self.A * t ** (-self.lam) * np.cos(x * t ** (-(self.gamma + self.epsilon)))


def supersolution_operator(spec: SuperBarrierSpec, t, x) -> np.ndarray:
    """Closed-form ``(d_t - d_xx + (3/(2t))(d_x - 1)) A t^{-lam} cos(x / t^{gam+eps})``."""
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    k = spec.gamma + spec.epsilon
    th = x * t ** (-k)
    c, s = np.cos(th), np.sin(th)
    amp = spec.A * t ** (-spec.lam)
    s_t = amp * (-spec.lam / t * c + k * th / t * s)
    s_x = -amp * t ** (-k) * s
    s_xx = -amp * t ** (-2 * k) * c
    return s_t - s_xx + 1.5 / t * (s_x - amp * c)


def supersolution_operator_fd(spec: SuperBarrierSpec, t, x, d_t: float = 1e-3, d_x: float = 1e-4):
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    v = spec.value
    s_t = (v(t + d_t, x) - v(t - d_t, x)) / (2 * d_t)
    s_x = (v(t, x + d_x) - v(t, x - d_x)) / (2 * d_x)
    s_xx = (v(t, x + d_x) - 2 * v(t, x) + v(t, x - d_x)) / (d_x * d_x)
    return s_t - s_xx + 1.5 / t * (s_x - v(t, x))


def _super_min(spec, t_range, forcing_bound, n_t, n_x):
    ts = np.geomspace(t_range[0], t_range[1], n_t)
    r = np.linspace(-1.0, 1.0, n_x)
    T, R = np.meshgrid(ts, r, indexing="ij")
    X = R * T ** spec.gamma
    margin = supersolution_operator(spec, T, X) - forcing_bound * T ** (-(1 - spec.gamma))
    k = np.unravel_index(np.argmin(margin), margin.shape)
    return float(margin[k]), (float(T[k]), float(X[k]))


def verify_supersolution(spec: SuperBarrierSpec, t_range=(1e3, 1e5), forcing_bound: float = 1.0,
                         n_t: int = 401, n_x: int = 201) -> BarrierReport:
    """Smallest ``operator - forcing_bound t^{-(1-gam)}`` over ``|x| <= t^gam`` (positive certifies)."""
    coarse, loc = _super_min(spec, t_range, forcing_bound, n_t, n_x)
    fine, loc_f = _super_min(spec, t_range, forcing_bound, 2 * n_t - 1, 2 * n_x - 1)
    worst, where = (fine, loc_f) if fine < coarse else (coarse, loc)
    return BarrierReport(spec=asdict(spec), grid={"t": list(t_range), "n_t": n_t, "n_x": n_x,
                                                   "forcing_bound": forcing_bound},
                         value=worst, refinement_confirmed=(coarse > 0) == (fine > 0),
                         location=where, kind="min_margin")


def ode_proxy(gamma: float, f1: float, t) -> float:
    """Closed-form solution of ``f' + (1 - 2 gam) t^{-2 gam} f = t^{gam - 1}``, ``f(1) = f1``.

    The Duhamel integral is evaluated after the substitution
    ``u = t^a - s^a`` (``a = 1 - 2 gam``), which turns it into
    ``(1/a) int_0^{t^a - 1} s(u)^{gam - a} e^{-u} du``.
    """
    if not 0 < gamma < 1.0 / 3.0:
        raise ValueError("gamma must lie in (0, 1/3)")
    t = float(t)
    if t < 1:
        raise ValueError("t must be at least 1")
    if t == 1.0:
        return float(f1)
    a = 1.0 - 2.0 * gamma
    ta = t**a
    U = ta - 1.0

    def integrand(u):
        s = (ta - u) ** (1.0 / a)
        return s ** (gamma - a) * math.exp(-u)

    pts = [p for p in (1.0, 10.0, 40.0) if p < U]
    val, err = quad(integrand, 0.0, U, points=pts or None, limit=200, epsabs=0.0, epsrel=1e-13)
    if not np.isfinite(val) or err > 1e-9 * max(abs(val), 1e-300):
        raise ArithmeticError(f"quadrature did not converge (estimate {err:.2e})")
    return float(f1 * math.exp(1.0 - ta) + val / a)


# ---------------------------------------------------------------------------
# upper barrier

def smoothstep_cutoff(y):
    """Cutoff ``g``: 1 on ``[0, 1]``, cubic smoothstep down to 0 on ``[1, 2]``, 0 beyond.

    Returns ``(g, g', g'')``.
    """
    y = np.asarray(y, dtype=float)
    s = np.clip(y - 1.0, 0.0, 1.0)
    inside = (y > 1.0) & (y < 2.0)
    g = 1.0 - (3 * s * s - 2 * s**3)
    g1 = np.where(inside, -(6 * s - 6 * s * s), 0.0)
    g2 = np.where(inside, -(6 - 12 * s), 0.0)
    return g, g1, g2


def upper_boundary_value(tau, gamma: float):
    """Left-edge value ``exp(-exp(gam tau))`` of the upper barrier."""
    return np.exp(-np.exp(gamma * np.asarray(tau, dtype=float)))


def upper_drift(tau, gamma: float):
    return gamma * np.exp(-(0.5 - gamma) * np.asarray(tau, float)) + 1.5 * np.exp(-0.5 * np.asarray(tau, float))


def upper_forcing(tau: float, y, gamma: float):
    """``G`` such that ``p_tau + L p + d p_y = G e^{-exp(gam tau)}`` for ``p = w - e^{-exp(gam tau)} g``."""
    g, g1, g2 = smoothstep_cutoff(y)
    return gamma * math.exp(gamma * tau) * g + g2 + 0.5 * np.asarray(y) * g1 + g - upper_drift(tau, gamma) * g1


@dataclass
class UpperBarrierRecord:
    gamma: float
    y_grid: np.ndarray
    tau: list = field(default_factory=list)
    moment: list = field(default_factory=list)
    boundary_value: list = field(default_factory=list)
    domination_gap: list = field(default_factory=list)
    negative_mass: list = field(default_factory=list)
    p: Optional[np.ndarray] = None

    def w_bar(self, tau: float, p: np.ndarray) -> np.ndarray:
        return p + upper_boundary_value(tau, self.gamma) * smoothstep_cutoff(self.y_grid)[0]


def upper_barrier_run(w0_bar, gamma: float, tau_end: float, reference: Optional[SelfSimilarState] = None,
                      checkpoints: Optional[Sequence[float]] = None, dy: float = 0.005,
                      y_max: float = 14.0, dtau: float = 0.01, tol: float = 1e-9) -> UpperBarrierRecord:
    """Evolve the upper barrier ``w_bar`` and compare it with a reference ``w`` run.

    ``w0_bar`` is a callable of ``eta`` (the initial barrier on ``eta > -1``).
    The barrier is advanced as ``p(tau, y)`` with ``y = eta + e^{-(1/2-gam) tau}``
    and ``w_bar = p + e^{-exp(gam tau)} g(y)``.  When ``reference`` holds the
    initial ``w`` of the true problem at ``tau = 0``, it is evolved alongside
    and the largest ``w - w_bar`` is recorded at each checkpoint.
    """
    if not 0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    from .self_similar import evolve_w

    y = np.arange(0.0, y_max + dy / 2, dy)
    g0 = smoothstep_cutoff(y)[0]
    p = np.asarray(w0_bar(y - 1.0), dtype=float) - math.exp(-1.0) * g0
    p[0] = p[-1] = 0.0
    if checkpoints is None:
        checkpoints = np.linspace(0.0, tau_end, 11)[1:]
    rec = UpperBarrierRecord(gamma=gamma, y_grid=y)

    ref = reference
    if ref is not None:
        if abs(ref.tau) > 1e-12:
            raise ValueError("the reference state must start at tau = 0")
        eta_ref = ref.eta_grid
        wbar0 = np.interp(eta_ref, y - 1.0, rec.w_bar(0.0, p), left=np.inf, right=0.0)
        if np.any(ref.w > wbar0 + tol):
            raise DominationError("initial barrier lies below the reference data")

    tau = 0.0
    count = 0
    for stop in checkpoints:
        while tau < stop - 1e-12:
            theta, h = (1.0, 0.25 * dtau) if count < 8 else (0.5, dtau)
            h = min(h, stop - tau)
            tm = tau + (0.5 if theta == 0.5 else 1.0) * h
            B = _bands(dy, y.size, 0.5 * y - upper_drift(tm, gamma), 1.0, order=4)
            src_new = upper_boundary_value(tau + h, gamma) * upper_forcing(tau + h, y, gamma)
            if theta == 0.5:
                src = 0.5 * (upper_boundary_value(tau, gamma) * upper_forcing(tau, y, gamma) + src_new)
            else:
                src = src_new
            src[0] = src[-1] = 0.0
            p = _theta_step(B, p, h, theta, source=src)
            tau += h
            count += 1
        if ref is not None:
            ref = evolve_w(ref, tau, dtau=dtau) if tau > ref.tau else ref
            shift = math.exp(-(0.5 - gamma) * tau)
            wbar = rec.w_bar(tau, p)
            eta_ref = ref.eta_grid
            on = eta_ref > -shift
            wb = np.interp(eta_ref[on] + shift, y, wbar, right=0.0)
            gap = float(np.max(ref.w[on] - wb))
            rec.domination_gap.append(gap)
            if gap > tol:
                raise DominationError(f"w exceeds the barrier by {gap:.3e} at tau={tau:.3f}")
        rec.tau.append(tau)
        rec.moment.append(moment(y, p))
        rec.boundary_value.append(float(upper_boundary_value(tau, gamma)))
        rec.negative_mass.append(float(np.trapezoid(np.minimum(p, 0.0), y)))
    rec.p = p
    return rec
