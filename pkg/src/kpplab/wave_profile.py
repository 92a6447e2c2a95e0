"""Minimal-speed Fisher-KPP traveling wave.

The profile solves ``-phi'' - 2 phi' = phi - phi**2`` with ``phi(-inf) = 1`` and
``phi(+inf) = 0``.  The solve is carried out for ``psi = exp(xi) * phi``, which
satisfies the much tamer equation ``psi'' = exp(-xi) * psi**2`` and grows only
linearly in the tail, ``psi ~ A (xi + k)``.

Two normalizations of the translate are offered:

``"offset"``
    the translate whose tail has zero offset, ``psi ~ A xi`` (``k_tail = 0``).
``"unit"``
    the translate with unit tail amplitude, ``psi ~ xi + k`` (``amplitude = 1``).

The two differ by the shift ``k`` of the unit profile, and ``amplitude`` of the
offset profile equals ``exp(k)``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.optimize import OptimizeWarning, brentq, curve_fit

# decay rate of 1 - phi as xi -> -inf
LEFT_RATE = math.sqrt(2.0) - 1.0

NORMALIZATIONS = ("offset", "unit")


class WaveSolveError(RuntimeError):
    """Newton iteration for the profile did not converge."""


class ProfileRangeError(WaveSolveError):
    """The discrete profile left (0, 1); the grid is too coarse."""


class TailFitError(ValueError):
    """The tail window cannot support a fit."""


class MatchError(ValueError):
    """No bracketing interval for the matching shift."""


@dataclass(frozen=True)
class WaveProfile:
    xi_grid: np.ndarray
    phi: np.ndarray
    k_tail: float
    omega_fit: float
    residual_norm: float
    amplitude: float = 1.0
    normalization: str = "offset"
    settings: dict = field(default_factory=dict)

    @property
    def xi_min(self) -> float:
        return float(self.xi_grid[0])

    @property
    def xi_max(self) -> float:
        return float(self.xi_grid[-1])

    def spline(self) -> CubicSpline:
        sp = self.__dict__.get("_spline")
        if sp is None:
            sp = CubicSpline(self.xi_grid, self.phi)
            object.__setattr__(self, "_spline", sp)
        return sp

    def scaled_tail(self, xi):
        """``exp(xi) * phi(xi)`` from the asymptotic tail ``A (xi + k)``."""
        return self.amplitude * (np.asarray(xi, dtype=float) + self.k_tail)

    def level_position(self, s: float) -> float:
        """Position where the profile equals ``s`` (the inverse of phi)."""
        if not 0.0 < s < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {s}")
        sp = self.spline()
        phi = self.phi
        idx = np.nonzero(phi < s)[0]
        if idx.size == 0 or idx[0] == 0:
            raise ValueError(f"level {s} not attained on the profile grid")
        j = idx[0]
        return brentq(lambda x: float(sp(x)) - s, self.xi_grid[j - 1], self.xi_grid[j], xtol=1e-14)

    def shifted(self, shift: float) -> "WaveProfile":
        """The translate ``phi(. + shift)`` tabulated on the same grid."""
        values = np.asarray(eval_wave(self, self.xi_grid + shift))
        return WaveProfile(
            xi_grid=self.xi_grid.copy(),
            phi=values,
            k_tail=self.k_tail + shift,
            omega_fit=self.omega_fit,
            residual_norm=float("nan"),
            amplitude=self.amplitude * math.exp(-shift),
            normalization="custom",
            settings=dict(self.settings, shift=shift),
        )


# ---------------------------------------------------------------------------
# finite-difference stencils (fourth order)

_D2_INTERIOR = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_D2_NEAR_LEFT = np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / 12.0
_D1_LEFT = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0


def _wave_system(psi, xi, dx, normalization):
    """Residual and banded Jacobian of the collocation equations for psi.

    Rows are scaled by ``exp(-xi)`` so every residual is in units of the
    phi-equation.
    """
    n = psi.size
    res = np.zeros(n)
    # dense-by-diagonal storage: ab[4 + i - j, j] = J[i, j]
    ab = np.zeros((9, n))
    h2 = dx * dx

    def put(i, j, val):
        ab[4 + i - j, j] += val

    w = np.exp(-xi)

    # interior, five-point stencil
    i = np.arange(2, n - 2)
    d2 = (
        -psi[i - 2] + 16 * psi[i - 1] - 30 * psi[i] + 16 * psi[i + 1] - psi[i + 2]
    ) / (12 * h2)
    res[i] = w[i] * (d2 - w[i] * psi[i] ** 2)
    for off, c in zip(range(-2, 3), _D2_INTERIOR):
        ab[4 - off, i + off] += w[i] * c / h2
    ab[4, i] += -2 * w[i] ** 2 * psi[i]

    # near-boundary rows, one-sided fourth-order second derivative
    for row, sign in ((1, 1), (n - 2, -1)):
        cols = row - 1 + sign * np.arange(6) if sign == 1 else row + 1 - np.arange(6)
        d2 = np.dot(_D2_NEAR_LEFT, psi[cols]) / h2
        res[row] = w[row] * (d2 - w[row] * psi[row] ** 2)
        for c, col in zip(_D2_NEAR_LEFT, cols):
            put(row, col, w[row] * c / h2)
        put(row, row, -2 * w[row] ** 2 * psi[row])

    # left closure: phi' = LEFT_RATE (phi - 1), i.e. psi' = (1 + r) psi - r e^xi
    cols = np.arange(5)
    d1 = np.dot(_D1_LEFT, psi[cols]) / dx
    res[0] = w[0] * (d1 - (1 + LEFT_RATE) * psi[0] + LEFT_RATE * math.exp(xi[0]))
    for c, col in zip(_D1_LEFT, cols):
        put(0, col, w[0] * c / dx)
    put(0, 0, -w[0] * (1 + LEFT_RATE))

    # right closure from the tail ansatz psi = A (xi + k) + rho(xi)
    R = xi[-1]
    cols = n - 1 - np.arange(5)
    d1 = -np.dot(_D1_LEFT, psi[cols]) / dx
    amp = d1
    kk = psi[-1] / max(amp, 1e-300) - R
    z = R + kk
    rho = amp**2 * math.exp(-R) * (z * z + 4 * z + 6)
    drho = -(amp**2) * math.exp(-R) * (z * z + 2 * z + 2)
    if normalization == "unit":
        # psi'(R) - rho'(R) = 1
        res[-1] = d1 - drho - 1.0
        for c, col in zip(_D1_LEFT, cols):
            put(n - 1, col, -c / dx)
    else:
        # psi(R) - rho(R) = R (psi'(R) - rho'(R))
        res[-1] = psi[-1] - rho - R * (d1 - drho)
        put(n - 1, n - 1, 1.0)
        for c, col in zip(_D1_LEFT, cols):
            put(n - 1, col, R * c / dx)
    return res, ab


def solve_wave(half_width: float = 25.0, n: int = 2000, tol: float = 1e-8,
               normalization: str = "offset", max_iter: int = 100,
               tail_window: tuple[float, float] | None = None) -> WaveProfile:
    """Solve for the minimal-speed profile on ``[-half_width, half_width]``.

    Raises WaveSolveError when damped Newton stalls and ProfileRangeError when
    the converged profile is not a monotone front with values in (0, 1).
    """
    if half_width < 20:
        raise ValueError("half_width must be at least 20")
    if n < 200:
        raise ValueError("need at least 200 nodes")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")

    xi = np.linspace(-half_width, half_width, n)
    dx = xi[1] - xi[0]
    # softplus starts with the right growth at both ends
    psi = np.logaddexp(0.0, xi)
    if normalization == "unit":
        psi = np.logaddexp(0.0, xi - 2.0) * math.exp(2.0)

    converged = False
    for _ in range(max_iter):
        res, ab = _wave_system(psi, xi, dx, normalization)
        delta = solve_banded((4, 4), ab, -res)
        scale = np.abs(psi) + 1e-300
        rel = np.max(np.abs(delta) / scale)
        step = 1.0 if rel < 0.5 else 0.5 / rel
        psi = psi + step * delta
        if rel < 1e-10:
            converged = True
            break
    if not converged:
        raise WaveSolveError(f"Newton did not converge in {max_iter} iterations (last relative update {rel:.3e})")

    res, _ = _wave_system(psi, xi, dx, normalization)
    residual = float(np.max(np.abs(res[1:-1])))
    if residual > tol:
        raise WaveSolveError(f"residual {residual:.3e} exceeds tolerance {tol:.1e}")

    phi = np.exp(-xi) * psi
    if np.any(phi[1:-1] <= 0) or np.any(phi[1:-1] >= 1) or np.any(np.diff(phi) >= 0):
        raise ProfileRangeError("discrete profile is not a decreasing front in (0, 1)")

    # amplitude and offset straight from the right closure
    d1 = -np.dot(_D1_LEFT, psi[n - 1 - np.arange(5)]) / dx
    R = xi[-1]
    z = psi[-1] / d1 - R
    amp = d1 + d1**2 * math.exp(-R) * ((R + z) ** 2 + 2 * (R + z) + 2)

    settings = {"half_width": half_width, "n": n, "tol": tol, "normalization": normalization}
    prof = WaveProfile(xi_grid=xi, phi=phi, k_tail=0.0, omega_fit=float("nan"),
                       residual_norm=residual, amplitude=float(amp),
                       normalization=normalization, settings=settings)
    window = tail_window or (6.0, 0.6 * half_width)
    k, omega = tail_constants(prof, window)
    if normalization == "offset":
        k_closure = 0.0
    else:
        z = psi[-1] - R
        k_closure = float(psi[-1] - math.exp(-R) * (z * z + 4 * z + 6) - R)
    settings["k_fit"] = k
    return WaveProfile(xi_grid=xi, phi=phi, k_tail=k_closure, omega_fit=omega,
                       residual_norm=residual, amplitude=float(amp),
                       normalization=normalization, settings=settings)


def _tail_model(lo):
    # quadratic-times-exponential remainder mirrors the xi**2 exp(-xi) correction
    def f(xx, a, k, c0, c1, c2, om):
        d = xx - lo
        return a * (xx + k) + (c0 + c1 * d + c2 * d * d) * np.exp(-om * d)
    return f


def tail_constants(profile: WaveProfile, window: tuple[float, float] = (6.0, 15.0),
                   return_amplitude: bool = False):
    """Fit the tail ``exp(xi) phi = A (xi + k) + remainder`` on ``window``.

    ``k`` comes from a joint nonlinear fit with a polynomial-times-exponential
    remainder; ``omega`` is minus the regression slope of ``log|remainder|``.
    Returns ``(k, omega)``, plus ``A`` when ``return_amplitude`` is set.
    """
    lo, hi = window
    if hi - lo < 5:
        raise TailFitError("tail window must have length at least 5")
    if lo < profile.xi_min or hi > profile.xi_max:
        raise TailFitError(f"window {window} outside the profile grid")
    mask = (profile.xi_grid >= lo) & (profile.xi_grid <= hi)
    x = profile.xi_grid[mask]
    y = np.exp(x) * profile.phi[mask]

    # a linear fit on the right half seeds the nonlinear fit
    half = x >= 0.5 * (lo + hi)
    a0, b0 = np.polyfit(x[half], y[half], 1)
    p0 = (a0, b0 / a0, y[0] - a0 * x[0] - b0, 0.0, 0.0, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        try:
            popt, _ = curve_fit(_tail_model(lo), x, y, p0=p0, maxfev=50000)
        except RuntimeError as exc:
            raise TailFitError(f"tail fit failed: {exc}") from exc
    amp, k = float(popt[0]), float(popt[1])

    remainder = np.abs(y - amp * (x + k))
    floor = 1e3 * np.finfo(float).eps * np.max(np.abs(y))
    if np.min(remainder) <= floor:
        raise TailFitError("tail remainder is below the floating-point noise floor; move the window left")
    omega = float(-np.polyfit(x, np.log(remainder), 1)[0])
    if return_amplitude:
        return k, omega, amp
    return k, omega


def eval_wave(profile: WaveProfile, xi):
    """Evaluate the profile anywhere: spline inside, asymptotics outside.

    Right of the grid the tail ``A (xi + k) e^{-xi}`` is used; left of it the
    gap ``1 - phi`` continues as ``e^{(sqrt 2 - 1) xi}``, so both seams are
    continuous and the value tends to 1.
    """
    x = np.asarray(xi, dtype=float)
    out = np.empty_like(x)
    inside = (x >= profile.xi_min) & (x <= profile.xi_max)
    right = x > profile.xi_max
    out[inside] = profile.spline()(x[inside])
    out[right] = profile.scaled_tail(x[right]) * np.exp(-x[right])
    left = x < profile.xi_min
    out[left] = 1.0 - (1.0 - profile.phi[0]) * np.exp(LEFT_RATE * (x[left] - profile.xi_min))
    # tabulated nodes are returned exactly
    node = np.searchsorted(profile.xi_grid, x[inside])
    node = np.clip(node, 0, profile.xi_grid.size - 1)
    hit = profile.xi_grid[node] == x[inside]
    vals = out[inside]
    vals[hit] = profile.phi[node[hit]]
    out[inside] = vals
    return float(out) if out.ndim == 0 else out


def _scaled_wave(profile: WaveProfile, x: float, zeta: float) -> float:
    """``exp(x) * phi(x + zeta)`` without overflow in the far tail."""
    xi = x + zeta
    if xi > profile.xi_max:
        return float(profile.scaled_tail(xi)) * math.exp(-zeta)
    return math.exp(x) * float(eval_wave(profile, xi))


@dataclass(frozen=True)
class MatchedWave:
    alpha: float
    gamma: float
    t: np.ndarray
    zeta_of_t: np.ndarray
    asymptotic_zeta: np.ndarray
    residual: np.ndarray


def asymptotic_shift(alpha: float, gamma: float, t, profile: WaveProfile):
    """Two-term expansion of the matching shift.

    With unit tail amplitude this is ``-log a - (log a - k) t**-gamma``.
    """
    t = np.asarray(t, dtype=float)
    zeta0 = math.log(profile.amplitude / alpha)
    return zeta0 + (zeta0 + profile.k_tail) * t ** (-gamma)


def match_shift(alpha: float, gamma: float, t: float, profile: WaveProfile,
                return_residual: bool = False):
    """Shift ``zeta`` so that ``exp(x) phi(x + zeta)`` matches ``alpha x exp(-x^2/4t)`` at ``x = t**gamma``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    if t < 2:
        raise ValueError("t must be at least 2")
    x = t**gamma
    target = alpha * x * math.exp(-(t ** (2 * gamma - 1)) / 4)

    def F(z):
        return _scaled_wave(profile, x, z) / target - 1.0

    z0 = math.log(profile.amplitude / alpha)
    lo, hi = z0 - 1.0, z0 + 1.0
    for _ in range(60):
        if F(lo) > 0 > F(hi):
            break
        lo -= 1.0
        hi += 1.0
    else:
        raise MatchError(f"no sign change bracketing the matching shift for alpha={alpha}")
    if not F(lo) > 0 > F(hi):
        raise MatchError(f"no sign change bracketing the matching shift for alpha={alpha}")
    zeta = brentq(F, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if return_residual:
        return zeta, abs(F(zeta))
    return zeta


def matched_wave(alpha: float, gamma: float, times, profile: WaveProfile) -> MatchedWave:
    times = np.asarray(times, dtype=float)
    out = [match_shift(alpha, gamma, t, profile, return_residual=True) for t in times]
    zeta = np.array([z for z, _ in out])
    resid = np.array([r for _, r in out])
    return MatchedWave(alpha=alpha, gamma=gamma, t=times, zeta_of_t=zeta,
                       asymptotic_zeta=asymptotic_shift(alpha, gamma, times, profile),
                       residual=resid)


def fd_residual(profile: WaveProfile) -> np.ndarray:
    """``-phi'' - 2 phi' - phi + phi**2`` by fourth-order central differences.

    Returns values at nodes ``2 .. n-3``.
    """
    p = profile.phi
    dx = profile.xi_grid[1] - profile.xi_grid[0]
    d2 = (-p[:-4] + 16 * p[1:-3] - 30 * p[2:-2] + 16 * p[3:-1] - p[4:]) / (12 * dx * dx)
    d1 = (p[:-4] - 8 * p[1:-3] + 8 * p[3:-1] - p[4:]) / (12 * dx)
    c = p[2:-2]
    return -d2 - 2 * d1 - c + c * c


# ---------------------------------------------------------------------------
# export

def save_profile(profile: WaveProfile, path) -> tuple[Path, Path]:
    """Write ``xi,phi`` CSV plus a JSON metadata sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xi", "phi"])
        for x, p in zip(profile.xi_grid, profile.phi):
            w.writerow([repr(float(x)), repr(float(p))])
    meta = path.with_suffix(".json")
    meta.write_text(json.dumps({
        "k_tail": profile.k_tail,
        "omega_fit": profile.omega_fit,
        "residual_norm": profile.residual_norm,
        "amplitude": profile.amplitude,
        "normalization": profile.normalization,
        "settings": profile.settings,
    }, indent=2, sort_keys=True))
    return path, meta


def load_profile(path) -> WaveProfile:
    path = Path(path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["xi", "phi"]:
        raise ValueError(f"{path}: expected header xi,phi")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    meta = json.loads(path.with_suffix(".json").read_text())
    return WaveProfile(xi_grid=data[:, 0], phi=data[:, 1], k_tail=meta["k_tail"],
                       omega_fit=meta["omega_fit"], residual_norm=meta["residual_norm"],
                       amplitude=meta["amplitude"], normalization=meta["normalization"],
                       settings=meta["settings"])
