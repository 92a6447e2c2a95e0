"""Self-similar variables for the Bramson-frame solution.

With ``v = e^x u`` and ``w(tau, eta) = t^{-1/2} v(t, x)``, ``tau = log t``,
``eta = x / sqrt(t)``, the moving-frame equation becomes

    w_tau = w_etaeta + (eta/2) w_eta + w - (3/2) e^{-tau/2} w_eta
            - e^{3 tau/2 - eta e^{tau/2}} w**2 .

Dropping the last two terms leaves ``p_tau + L p = 0`` with
``L = -d^2 - (eta/2) d - 1``.  On the half line with a Dirichlet condition at
zero, ``L`` has eigenvalues ``0, 1, 2, ...`` with eigenfunctions
``phi_k = P_k(eta) exp(-eta^2/4)`` generated by ``phi_{k+1} = phi_k''``, and
the adjoint principal eigenfunction is ``eta``.  The pairing with ``eta``
(the moment ``I``) is conserved, which is what pins the amplitude
``alpha = I / (2 sqrt(pi))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .kpp_solver import Field

SQRT_PI = math.sqrt(math.pi)
EXP_CAP = 700.0


@dataclass(frozen=True)
class SelfSimilarState:
    tau: float
    eta_grid: np.ndarray
    w: np.ndarray
    fit_window: tuple = (2.0, 5.0)

    def __post_init__(self):
        if self.eta_grid.shape != self.w.shape:
            raise ValueError("w does not match eta_grid")

    @property
    def alpha_moment(self) -> float:
        return alpha_estimate(self, "moment")

    @property
    def alpha_fit(self) -> float:
        return alpha_estimate(self, "fit", self.fit_window)

    @property
    def moment(self) -> float:
        return moment(self.eta_grid, self.w)


def principal_mode(eta):
    """``eta_+ exp(-eta^2/4)``, the zero mode of ``L`` with unit amplitude."""
    eta = np.asarray(eta, dtype=float)
    return np.where(eta > 0, eta, 0.0) * np.exp(-0.25 * eta * eta)


def moment(eta: np.ndarray, w: np.ndarray) -> float:
    """Trapezoid value of the integral of ``eta w`` over ``eta > 0``."""
    pos = eta > 0
    e, v = eta[pos], w[pos]
    if e.size == 0:
        return 0.0
    if e[0] > 0 and eta[0] < 0:
        # close the interval at eta = 0, where the integrand vanishes
        e = np.concatenate([[0.0], e])
        v = np.concatenate([[0.0], v])
    return float(np.trapezoid(e * v, e))


# ---------------------------------------------------------------------------
# transforms

def transform_to_ss(field: Field, eta_grid: Optional[np.ndarray] = None) -> SelfSimilarState:
    """Map a moving-frame field at time ``t`` to ``w(log t, eta)``."""
    if field.frame != "moving":
        raise ValueError("transform_to_ss needs a moving-frame field")
    t = field.t
    x = field.x
    u = field.values
    with np.errstate(divide="ignore"):
        logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), -np.inf)
    expo = x + logu - 0.5 * math.log(t)
    w_native = np.where(np.isfinite(expo), np.exp(np.minimum(expo, EXP_CAP)), 0.0)
    eta_native = x / math.sqrt(t)
    if eta_grid is None:
        return SelfSimilarState(tau=math.log(t), eta_grid=eta_native, w=w_native)
    eta_grid = np.asarray(eta_grid, dtype=float)
    w = np.interp(eta_grid, eta_native, w_native, left=0.0, right=0.0)
    return SelfSimilarState(tau=math.log(t), eta_grid=eta_grid, w=w)


def inverse_transform(state: SelfSimilarState, x: np.ndarray) -> np.ndarray:
    """Recover ``u(t, x)`` from ``w`` at ``t = exp(tau)``."""
    t = math.exp(state.tau)
    eta = np.asarray(x, dtype=float) / math.sqrt(t)
    w = np.interp(eta, state.eta_grid, state.w, left=0.0, right=0.0)
    return math.sqrt(t) * np.exp(-np.asarray(x, dtype=float)) * w


# ---------------------------------------------------------------------------
# amplitude estimators

def alpha_estimate(state: SelfSimilarState, mode: str = "moment",
                   window: Sequence[float] = (2.0, 5.0)) -> float:
    """Amplitude of the ``eta e^{-eta^2/4}`` component of ``w``."""
    eta, w = state.eta_grid, state.w
    if mode == "moment":
        a = moment(eta, w) / (2.0 * SQRT_PI)
    elif mode == "fit":
        lo, hi = window
        if not 0 < lo < hi <= eta[-1]:
            raise ValueError(f"fit window {window} outside (0, {eta[-1]}]")
        m = (eta >= lo) & (eta <= hi)
        if m.sum() < 2:
            raise ValueError("fit window contains fewer than two nodes")
        b = principal_mode(eta[m])
        a = float(b @ w[m] / (b @ b))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not a > 0:
        raise ValueError(f"non-positive amplitude estimate {a:.3e}")
    return float(a)


def decompose_remainder(eta: np.ndarray, values: np.ndarray, weight: float = 1.0 / 6.0,
                        eta_range: Sequence[float] = (0.0, 8.0)) -> tuple[float, float]:
    """Amplitude (moment estimate) and weighted sup of the remainder.

    The remainder ``values - a * eta e^{-eta^2/4}`` is weighted by
    ``exp(weight * eta^2)`` and its sup is taken over ``eta_range``.
    """
    eta = np.asarray(eta, dtype=float)
    values = np.asarray(values, dtype=float)
    a = moment(eta, values) / (2.0 * SQRT_PI)
    m = (eta >= eta_range[0]) & (eta <= eta_range[1])
    r = (values[m] - a * principal_mode(eta[m])) * np.exp(weight * eta[m] ** 2)
    return float(a), float(np.max(np.abs(r)))


# ---------------------------------------------------------------------------
# banded theta-scheme for variable-coefficient operators

def _bands(dx: float, n: int, drift: np.ndarray, react, order: int,
           odd_left: bool = False) -> np.ndarray:
    """Coefficients of ``u_{i-2} .. u_{i+2}`` in ``u'' + drift u' + react u`` per row.

    Boundary rows are zero (Dirichlet); rows next to the boundary use the
    three-point stencil.  With ``odd_left`` the left edge is a symmetry point
    (``eta = 0`` with an odd drift) and row 1 keeps the wide stencil through
    the ghost value ``u_{-1} = -u_1``.
    """
    B = np.zeros((5, n))
    react = np.broadcast_to(np.asarray(react, dtype=float), (n,))
    d2 = 1.0 / (dx * dx)
    B[1, 1:-1] = d2 - drift[1:-1] / (2 * dx)
    B[2, 1:-1] = -2 * d2 + react[1:-1]
    B[3, 1:-1] = d2 + drift[1:-1] / (2 * dx)
    if order == 4 and n > 6:
        s = slice(2, n - 2)
        b = drift[s]
        B[0, s] = -d2 / 12 + b / (12 * dx)
        B[1, s] = 16 * d2 / 12 - 8 * b / (12 * dx)
        B[2, s] = -30 * d2 / 12 + react[s]
        B[3, s] = 16 * d2 / 12 + 8 * b / (12 * dx)
        B[4, s] = -d2 / 12 - b / (12 * dx)
        if odd_left:
            b = drift[1]
            B[1, 1] = 16 * d2 / 12 - 8 * b / (12 * dx)
            B[2, 1] = -30 * d2 / 12 + react[1] - (-d2 / 12 + b / (12 * dx))
            B[3, 1] = 16 * d2 / 12 + 8 * b / (12 * dx)
            B[4, 1] = -d2 / 12 - b / (12 * dx)
    return B


def _apply_bands(B: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = B[2] * u
    out[1:] += B[1, 1:] * u[:-1]
    out[2:] += B[0, 2:] * u[:-2]
    out[:-1] += B[3, :-1] * u[1:]
    out[:-2] += B[4, :-2] * u[2:]
    return out


def _theta_step(B: np.ndarray, u: np.ndarray, h: float, theta: float,
                extra_diag: Optional[np.ndarray] = None,
                source: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``(I - theta h B + h D) u' = (I + (1-theta) h B) u + h S`` with ``u'`` = ``u`` on the edges."""
    n = u.size
    rhs = u + (1.0 - theta) * h * _apply_bands(B, u)
    if source is not None:
        rhs += h * source
    ab = np.zeros((5, n))
    # ab[2 + i - j, j] = M[i, j]; band k of row i touches column i + k - 2
    for k in range(5):
        coef = -theta * h * B[k]
        off = k - 2
        if off >= 0:
            ab[2 - off, off:] = coef[: n - off]
        else:
            ab[2 - off, : n + off] = coef[-off:]
    ab[2] += 1.0
    if extra_diag is not None:
        ab[2] += h * extra_diag
    # Dirichlet rows stay the identity
    ab[2, 0] = ab[2, -1] = 1.0
    ab[1, 1] = ab[0, 2] = 0.0
    ab[3, -2] = ab[4, -3] = 0.0
    rhs[0], rhs[-1] = u[0], u[-1]
    out = solve_banded((2, 2), ab, rhs)
    # pivoting can leave roundoff in the identity rows
    out[0], out[-1] = u[0], u[-1]
    return out


# ---------------------------------------------------------------------------
# evolutions

def default_eta_grid(d_eta: float = 0.0025, lo: float = -1.0, hi: float = 12.0) -> np.ndarray:
    n = int(round((hi - lo) / d_eta)) + 1
    return np.linspace(lo, hi, n)


def evolve_w(state: SelfSimilarState, tau_end: float, dtau: float = 0.01,
             startup: int = 8, snapshot: Optional[Callable[[SelfSimilarState], None]] = None,
             snapshot_every: float = 0.5) -> SelfSimilarState:
    """Advance the nonlinear ``w``-equation to ``tau_end``.

    Linear part by Crank-Nicolson, absorption linearly implicit with its
    coefficient frozen at the previous iterate.  The first ``startup`` steps
    are backward Euler with a quarter step to damp non-smooth data.
    """
    if not tau_end > state.tau:
        raise ValueError("tau_end must exceed the current tau")
    eta = state.eta_grid
    if eta[0] > -1.0 + 1e-12 or eta[-1] < 12.0 - 1e-12:
        raise ValueError("eta grid must span at least [-1, 12]")
    dx = float(eta[1] - eta[0])
    n = eta.size
    w = state.w.astype(float).copy()
    w[0] = w[-1] = 0.0
    tau = float(state.tau)
    count = 0
    next_snap = tau + snapshot_every
    while tau < tau_end - 1e-12:
        theta, h = (1.0, 0.25 * dtau) if count < startup else (0.5, dtau)
        h = min(h, tau_end - tau)
        tm = tau + (0.5 if theta == 0.5 else 1.0) * h
        drift = 0.5 * eta - 1.5 * math.exp(-0.5 * tm)
        B = _bands(dx, n, drift, 1.0, order=2)
        expo = 1.5 * (tau + h) - eta * math.exp(0.5 * (tau + h))
        dead = expo > EXP_CAP
        absorb = np.where(dead, 0.0, np.exp(np.minimum(expo, EXP_CAP))) * np.maximum(w, 0.0)
        w = _theta_step(B, w, h, theta, extra_diag=absorb)
        w[dead] = 0.0
        tau += h
        count += 1
        if snapshot is not None and tau >= next_snap - 1e-9:
            snapshot(replace(state, tau=tau, w=w.copy()))
            next_snap += snapshot_every
    return replace(state, tau=float(tau_end) if abs(tau - tau_end) < 1e-9 else tau, w=w)


def evolve_dirichlet(p0: np.ndarray, eta: np.ndarray, tau: float, dtau: float = 0.005,
                     order: int = 4, startup: int = 0,
                     checkpoints: Optional[Sequence[float]] = None):
    """Solve ``p_tau = p'' + (eta/2) p' + p`` on ``[0, eta_max]`` with zero Dirichlet data.

    Returns the field at ``tau``, or a list of fields at ``checkpoints``
    when these are supplied.
    """
    eta = np.asarray(eta, dtype=float)
    p = np.asarray(p0, dtype=float).copy()
    if abs(eta[0]) > 1e-14:
        raise ValueError("the half-line grid must start at eta = 0")
    if abs(p[0]) > 1e-12:
        raise ValueError("p0 must vanish at eta = 0")
    p[0] = p[-1] = 0.0
    dx = float(eta[1] - eta[0])
    B = _bands(dx, eta.size, 0.5 * eta, 1.0, order=order, odd_left=True)
    stops = [tau] if checkpoints is None else list(checkpoints)
    out = []
    s = 0.0
    count = 0
    for stop in stops:
        while s < stop - 1e-12:
            theta, h = (1.0, 0.25 * dtau) if count < startup else (0.5, dtau)
            h = min(h, stop - s)
            p = _theta_step(B, p, h, theta)
            s += h
            count += 1
        out.append(p.copy())
    return out[0] if checkpoints is None else out


def apply_L(eta: np.ndarray, p: np.ndarray, order: int = 4) -> np.ndarray:
    """``L p = -p'' - (eta/2) p' - p`` by finite differences at interior nodes (edges set to 0)."""
    eta = np.asarray(eta, dtype=float)
    B = _bands(float(eta[1] - eta[0]), eta.size, 0.5 * eta, 1.0, order=order,
               odd_left=abs(eta[0]) < 1e-14)
    out = -_apply_bands(B, np.asarray(p, dtype=float))
    out[0] = out[-1] = 0.0
    return out


# ---------------------------------------------------------------------------
# exact polynomial algebra

Poly = tuple  # ascending Fraction coefficients


def _trim(c: list) -> Poly:
    while len(c) > 1 and c[-1] == 0:
        c.pop()
    return tuple(c)


def _deriv(p: Poly) -> Poly:
    return _trim([i * p[i] for i in range(1, len(p))] or [Fraction(0)])


def _add(p: Poly, q: Poly) -> Poly:
    n = max(len(p), len(q))
    return _trim([(p[i] if i < len(p) else 0) + (q[i] if i < len(q) else 0) for i in range(n)])


def _scale(p: Poly, a) -> Poly:
    return _trim([a * c for c in p])


def _times_eta(p: Poly) -> Poly:
    return _trim([Fraction(0)] + list(p))


def _gauss_deriv(p: Poly) -> Poly:
    """Polynomial part of ``d/deta [P e^{-eta^2/4}]``, i.e. ``P' - (eta/2) P``."""
    return _add(_deriv(p), _scale(_times_eta(p), Fraction(-1, 2)))


def poly_eval(p: Poly, x):
    """Horner evaluation in extended precision (the coefficients grow factorially)."""
    x = np.asarray(x, dtype=np.longdouble)
    out = np.zeros_like(x)
    for c in reversed(p):
        out = out * x + np.longdouble(c.numerator) / np.longdouble(c.denominator)
    return out


@dataclass(frozen=True)
class SpectralPair:
    k: int
    poly: Poly

    @property
    def eigenvalue(self) -> int:
        return self.k

    def __call__(self, eta):
        eta = np.asarray(eta, dtype=np.longdouble)
        return (poly_eval(self.poly, eta) * np.exp(-0.25 * eta * eta)).astype(float)


def hermite_eigen(k: int) -> SpectralPair:
    """Eigenpair ``(k, P_k)`` of ``L`` with ``P_0 = eta`` and ``phi_{k+1} = phi_k''``."""
    if not 0 <= k <= 20:
        raise ValueError("k must lie in [0, 20]")
    p: Poly = (Fraction(0), Fraction(1))
    for _ in range(k):
        p = _gauss_deriv(_gauss_deriv(p))
    return SpectralPair(k=k, poly=p)


@dataclass(frozen=True)
class AdjointReport:
    passed: bool
    residual: Poly
    max_coefficient: Fraction


def adjoint_check(psi: Optional[Sequence] = None) -> AdjointReport:
    """Exact ``L* psi = -psi'' + (1/2)(eta psi)' - psi`` for a polynomial ``psi``.

    ``psi`` is given by ascending coefficients and defaults to ``eta``.
    """
    p: Poly = _trim([Fraction(c) for c in (psi if psi is not None else (0, 1))] or [Fraction(0)])
    r = _add(_scale(_deriv(_deriv(p)), -1),
             _add(_scale(_deriv(_times_eta(p)), Fraction(1, 2)), _scale(p, -1)))
    mx = max(abs(c) for c in r)
    return AdjointReport(passed=mx == 0, residual=r, max_coefficient=mx)
