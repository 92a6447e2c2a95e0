"""Fisher-KPP evolution in the lab frame and in the Bramson frame.

The equation ``u_t = D u_xx + c(t) u_x + f(u)`` is advanced by Strang
splitting: half a reaction step (exact for the quadratic nonlinearity), a
Crank-Nicolson step of the linear diffusion-drift operator, and another half
reaction step.  The drift is ``c = 0`` in the lab frame and
``c = 2 - 3/(2t)`` in the moving frame ``x -> x - 2t + (3/2) log t``.

Spatial derivatives use fourth-order central stencils (second order on the
two rows next to the Dirichlet boundaries).  Pulled fronts are governed by
their exponential leading edge, where a second-order stencil would shift the
discrete spreading speed by ``dx**2 / 12`` and the front position by that
amount times ``t``.

Step data is discontinuous, so the first ``startup`` time units run with a
monotone backward-Euler / three-point scheme before switching to
Crank-Nicolson.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import lapack

from .wave_profile import WaveProfile

FRAMES = ("lab", "moving")
GUARD = 10.0


class DomainError(RuntimeError):
    """The front reached a guard band; enlarge the domain."""


class StepUnderflowError(RuntimeError):
    """The adaptive step controller shrank the step below its floor."""


class LevelError(ValueError):
    """The requested level set is not attained by the field."""


class PreAsymptoticError(ValueError):
    """A Bramson fit cannot be trusted on the supplied trace."""


# ---------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 5 or not self.x_max > self.x_min:
            raise ValueError(f"degenerate grid {self}")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @classmethod
    def from_spacing(cls, x_min: float, x_max: float, dx: float) -> "Grid":
        n = int(round((x_max - x_min) / dx)) + 1
        return cls(x_min, x_min + (n - 1) * dx, n)

    def shifted(self, cells: int) -> "Grid":
        d = cells * self.dx
        return Grid(self.x_min + d, self.x_max + d, self.n)


@dataclass(frozen=True)
class ReactionFn:
    """Monostable reaction ``f`` normalized to ``f'(0) = 1``."""

    f: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    fprime0: float = 1.0

    @classmethod
    def quadratic(cls) -> "ReactionFn":
        return cls(f=lambda s: s - s * s, kind="quadratic")

    def g(self, s):
        """The deviation from linear growth, ``s - f(s)``."""
        return s - self.f(s)

    def flow(self, u: np.ndarray, h: float) -> np.ndarray:
        """Advance ``u' = f(u)`` by ``h``."""
        if self.kind == "quadratic":
            e = math.exp(h)
            return u * e / (1.0 + u * (e - 1.0))
        m = max(1, int(math.ceil(abs(h) / 0.05)))
        k = h / m
        for _ in range(m):
            k1 = self.f(u)
            k2 = self.f(u + 0.5 * k * k1)
            k3 = self.f(u + 0.5 * k * k2)
            k4 = self.f(u + k * k3)
            u = u + k / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return u

    def check(self, samples: int = 10001) -> float:
        """Verify the KPP hypotheses on a grid and return ``max g(s)/s**2``."""
        s = np.linspace(0.0, 1.0, samples)
        fs = self.f(s)
        if abs(fs[0]) > 1e-12 or abs(fs[-1]) > 1e-12:
            raise ValueError("reaction must vanish at 0 and 1")
        h = 1e-6
        fp0 = (self.f(np.array(h)) - self.f(np.array(0.0))) / h
        if abs(fp0 - 1.0) > 1e-4:
            raise ValueError(f"f'(0) = {fp0:.6f}, expected 1")
        fp = np.gradient(fs, s)
        if np.any(fp > 1.0 + 1e-6):
            raise ValueError("f'(s) exceeds f'(0) somewhere on [0, 1]")
        g = s - fs
        if np.any(g < -1e-12):
            raise ValueError("g(s) = s - f(s) must be nonnegative")
        return float(np.max(g[1:] / s[1:] ** 2))


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray
    t: float = 1.0
    frame: str = "lab"
    reaction: ReactionFn = field(default_factory=ReactionFn.quadratic)
    left_state: float = 1.0
    diffusion: float = 1.0
    right_state: float = 0.0

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if len(self.values) != self.grid.n:
            raise ValueError("values do not match the grid")
        if self.t < 1.0:
            raise ValueError("fields start at t >= 1")
        if self.frame == "moving" and self.diffusion != 1.0:
            raise ValueError("the Bramson frame is defined for unit diffusion")

    @property
    def x(self) -> np.ndarray:
        return self.grid.x


@dataclass(frozen=True)
class FrontTrace:
    level: float
    t: np.ndarray
    sigma: np.ndarray
    frame: str

    def __post_init__(self):
        if self.t.size and np.any(np.diff(self.t) <= 0):
            raise ValueError("trace times must be strictly increasing")
        if not np.all(np.isfinite(self.sigma)):
            raise ValueError("trace positions must be finite")

    def __len__(self):
        return int(self.t.size)


@dataclass(frozen=True)
class ShiftEstimate:
    x_inf: float
    c1: float
    stderr: dict
    window: tuple
    model: str
    residual_rms: float = 0.0
    coefficients: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StepControl:
    """Time-step policy.

    With ``tol=None`` steps are fixed at ``dt``.  Otherwise the step is chosen
    by step doubling so that the sup-norm local error stays below ``tol``.
    """

    dt: float = 0.02
    tol: Optional[float] = None
    dt_min: float = 1e-6
    dt_max: float = 0.5
    startup: float = 0.25

    def startup_dt(self) -> float:
        return min(self.dt, max(self.dt * self.dt, 2e-4))


# ---------------------------------------------------------------------------
# initial data

def init_data(spec, grid: Grid, frame: str = "lab", reaction: Optional[ReactionFn] = None,
              diffusion: float = 1.0) -> Field:
    """Build a Field at ``t = 1``.

    ``spec`` is one of ``("step", x1)``, ``("step", x1, x2)`` (linear ramp
    between), ``("bump", a, b)`` (indicator of ``[a, b]``) or a dict
    ``{"table": (xs, us)}`` interpolated onto the grid.
    """
    x = grid.x
    reaction = reaction or ReactionFn.quadratic()
    if isinstance(spec, dict) and "table" in spec:
        xs, us = (np.asarray(a, dtype=float) for a in spec["table"])
        if np.any(us < 0) or np.any(us > 1):
            raise ValueError("initial values must lie in [0, 1]")
        u = np.interp(x, xs, us, left=us[0], right=us[-1])
        left, right = float(us[0]), float(us[-1])
    else:
        kind, *args = spec
        if kind == "step":
            x1 = float(args[0])
            x2 = float(args[1]) if len(args) > 1 else x1
            if x2 < x1:
                raise ValueError("step data needs x1 <= x2")
            if x2 == x1:
                u = (x <= x1).astype(float)
            else:
                u = np.clip((x2 - x) / (x2 - x1), 0.0, 1.0)
            left, right = 1.0, 0.0
        elif kind == "bump":
            a, b = float(args[0]), float(args[1])
            u = ((x >= a) & (x <= b)).astype(float)
            left, right = 0.0, 0.0
        else:
            raise ValueError(f"unknown initial data kind {kind!r}")
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("initial values must lie in [0, 1]")
    return Field(grid=grid, values=u, t=1.0, frame=frame, reaction=reaction,
                 left_state=left, diffusion=diffusion, right_state=right)


# ---------------------------------------------------------------------------
# linear operator

def _drift(frame: str, t: float) -> float:
    return 0.0 if frame == "lab" else 2.0 - 1.5 / t


def _apply(u: np.ndarray, D: float, c: float, dx: float, high_order: bool) -> np.ndarray:
    """``D u_xx + c u_x`` at interior nodes ``1 .. n-2``."""
    out = np.empty(u.size - 2)
    if high_order:
        um2, um1, u0, up1, up2 = u[:-4], u[1:-3], u[2:-2], u[3:-1], u[4:]
        out[1:-1] = (D * (-um2 + 16 * um1 - 30 * u0 + 16 * up1 - up2) / (12 * dx * dx)
                     + c * (um2 - 8 * um1 + 8 * up1 - up2) / (12 * dx))
        ends = (0, -1)
    else:
        ends = slice(None)
    lo, mid, hi = u[:-2], u[1:-1], u[2:]
    low = D * (lo - 2 * mid + hi) / (dx * dx) + c * (hi - lo) / (2 * dx)
    if high_order:
        out[0], out[-1] = low[0], low[-1]
    else:
        out[:] = low
    return out


def _lhs_banded(m: int, D: float, c: float, dx: float, theta: float, high_order: bool) -> np.ndarray:
    """Banded storage of ``I - theta A`` on the interior unknowns (LAPACK gb layout)."""
    kl = ku = 2
    ab = np.zeros((2 * kl + ku + 1, m))
    row = kl + ku  # diagonal row in gbtrf storage

    def diag(offset, values):
        # element (i, i + offset) lives at ab[row - offset, i + offset]
        if offset >= 0:
            ab[row - offset, offset:] = values[: m - offset]
        else:
            ab[row - offset, : m + offset] = values[-offset:]

    if high_order:
        a2 = np.full(m, -D / (12 * dx * dx) + c / (12 * dx))     # coefficient of u_{i-2}
        a1 = np.full(m, 16 * D / (12 * dx * dx) - 8 * c / (12 * dx))
        a0 = np.full(m, -30 * D / (12 * dx * dx))
        b1 = np.full(m, 16 * D / (12 * dx * dx) + 8 * c / (12 * dx))
        b2 = np.full(m, -D / (12 * dx * dx) - c / (12 * dx))
        for k in (0, m - 1):
            a2[k] = b2[k] = 0.0
            a1[k] = D / (dx * dx) - c / (2 * dx)
            a0[k] = -2 * D / (dx * dx)
            b1[k] = D / (dx * dx) + c / (2 * dx)
    else:
        a2 = b2 = np.zeros(m)
        a1 = np.full(m, D / (dx * dx) - c / (2 * dx))
        a0 = np.full(m, -2 * D / (dx * dx))
        b1 = np.full(m, D / (dx * dx) + c / (2 * dx))
    # entry (i, i-2) is a2[i], stored on sub-diagonal -2 indexed by column i-2
    diag(0, 1.0 - theta * a0)
    diag(1, -theta * b1[:-1])
    diag(2, -theta * b2[:-2])
    ab[row + 1, : m - 1] = -theta * a1[1:]
    ab[row + 2, : m - 2] = -theta * a2[2:]
    return ab


class _LinearStepper:
    """Caches the LU factors of ``I - theta h A`` for a given drift."""

    def __init__(self, n: int, D: float, dx: float):
        self.m = n - 2
        self.D = D
        self.dx = dx
        self._key = None
        self._lu = None

    def factor(self, c: float, h: float, theta: float, high_order: bool):
        key = (c, h, theta, high_order)
        if key != self._key:
            ab = _lhs_banded(self.m, self.D, c, self.dx, theta * h, high_order)
            lu, piv, info = lapack.dgbtrf(ab, 2, 2)
            if info != 0:
                raise np.linalg.LinAlgError(f"banded factorization failed (info={info})")
            self._lu, self._piv, self._key = lu, piv, key
        return self._lu, self._piv

    def step(self, u: np.ndarray, c: float, h: float, theta: float, high_order: bool) -> np.ndarray:
        """theta-scheme step with the boundary values of ``u`` held fixed."""
        lu, piv = self.factor(c, h, theta, high_order)
        rhs = u[1:-1].copy()
        if theta < 1.0:
            rhs += (1.0 - theta) * h * _apply(u, self.D, c, self.dx, high_order)
        # boundary values enter the implicit part (first and last two rows only)
        left = np.zeros(6)
        left[0] = u[0]
        right = np.zeros(6)
        right[-1] = u[-1]
        rhs[:4] += theta * h * _apply(left, self.D, c, self.dx, high_order)
        rhs[-4:] += theta * h * _apply(right, self.D, c, self.dx, high_order)
        sol, info = lapack.dgbtrs(lu, 2, 2, rhs, piv)
        if info != 0:
            raise np.linalg.LinAlgError(f"banded solve failed (info={info})")
        out = u.copy()
        out[1:-1] = sol
        return out


def _split_step(u, t, h, frame, reaction, stepper, high_order):
    c = _drift(frame, t + 0.5 * h)
    if high_order:
        u = reaction.flow(u, 0.5 * h)
        u = stepper.step(u, c, h, 0.5, True)
        return reaction.flow(u, 0.5 * h)
    u = stepper.step(u, c, h, 1.0, False)
    return reaction.flow(u, h)


def front_position(field: Field, s: float = 0.5, side: str = "right") -> float:
    """Largest ``x`` with ``u(x) = s`` (smallest with ``side='left'``)."""
    if not 0.0 < s < 1.0:
        raise ValueError("level must lie in (0, 1)")
    u = field.values
    above = np.nonzero(u >= s)[0]
    if above.size == 0 or not np.any(u < s):
        raise LevelError(f"level {s} is not attained")
    x = field.grid.x
    if side == "right":
        j = above[-1]
        if j == u.size - 1:
            raise LevelError(f"level {s} has no crossing to the right")
        a, b = u[j], u[j + 1]
        return float(x[j] + (a - s) / (a - b) * (x[j + 1] - x[j]))
    j = above[0]
    if j == 0:
        raise LevelError(f"level {s} has no crossing to the left")
    a, b = u[j - 1], u[j]
    return float(x[j - 1] + (s - a) / (b - a) * (x[j] - x[j - 1]))


def _check_guard(field: Field, follow: bool) -> None:
    x0, x1 = field.grid.x_min, field.grid.x_max
    try:
        right = front_position(field, 0.5)
    except LevelError:
        return
    if right > x1 - GUARD:
        raise DomainError(f"front at {right:.2f} entered the right guard band of [{x0}, {x1}] at t={field.t:.3f}")
    if field.left_state < 0.5:
        left = front_position(field, 0.5, side="left")
        if left < x0 + GUARD:
            raise DomainError(f"front at {left:.2f} entered the left guard band at t={field.t:.3f}")
    elif right < x0 + GUARD and not follow:
        raise DomainError(f"front at {right:.2f} entered the left guard band at t={field.t:.3f}")


def _follow_shift(field: Field, anchor: float) -> Field:
    """Translate a lab-frame window by whole cells to keep the front near ``anchor``."""
    sigma = front_position(field, 0.5)
    cells = int((sigma - field.grid.x_min - anchor) / field.grid.dx)
    if cells <= 0:
        return field
    u = np.concatenate([field.values[cells:], np.full(cells, field.right_state)])
    return replace(field, grid=field.grid.shifted(cells), values=u)


def evolve(field: Field, t_end: float, ctrl: Optional[StepControl] = None,
           follow: Optional[float] = None, check_every: int = 20) -> Field:
    """Advance ``field`` to ``t_end``.

    ``follow`` (lab frame only) keeps the front about ``follow`` units to the
    right of the window's left edge by shifting the window by whole cells; the
    equation itself stays in the lab frame.
    """
    ctrl = ctrl or StepControl()
    if not t_end > field.t:
        if t_end == field.t:
            return field
        raise ValueError(f"t_end={t_end} precedes field time {field.t}")
    if follow is not None and field.frame != "lab":
        raise ValueError("window following is only meaningful in the lab frame")

    u = field.values.astype(float).copy()
    u[0], u[-1] = field.left_state, field.right_state
    t = float(field.t)
    stepper = _LinearStepper(field.grid.n, field.diffusion, field.grid.dx)
    reaction = field.reaction
    frame = field.frame
    t_start = t
    h = ctrl.dt
    steps = 0
    cur = field

    while t < t_end - 1e-12:
        in_startup = t < t_start + ctrl.startup - 1e-12 and t_start == 1.0
        if in_startup:
            h_try = min(ctrl.startup_dt(), t_start + ctrl.startup - t, t_end - t)
            u = _split_step(u, t, h_try, frame, reaction, stepper, high_order=False)
            t += h_try
        elif ctrl.tol is None:
            h_try = min(ctrl.dt, t_end - t)
            u = _split_step(u, t, h_try, frame, reaction, stepper, high_order=True)
            t += h_try
        else:
            h_try = min(h, t_end - t, ctrl.dt_max)
            while True:
                if h_try < ctrl.dt_min:
                    raise StepUnderflowError(f"step {h_try:.3e} below dt_min={ctrl.dt_min:.1e} at t={t:.4f}")
                coarse = _split_step(u, t, h_try, frame, reaction, stepper, True)
                half = _split_step(u, t, 0.5 * h_try, frame, reaction, stepper, True)
                fine = _split_step(half, t + 0.5 * h_try, 0.5 * h_try, frame, reaction, stepper, True)
                err = float(np.max(np.abs(fine - coarse)))
                if err <= ctrl.tol:
                    break
                h_try *= max(0.2, 0.9 * (ctrl.tol / err) ** (1.0 / 3.0))
            u = fine
            t += h_try
            grow = 2.0 if err == 0 else min(2.0, 0.9 * (ctrl.tol / err) ** (1.0 / 3.0))
            h = max(h_try * grow, ctrl.dt_min)
        steps += 1
        if steps % check_every == 0 or t >= t_end - 1e-12:
            cur = replace(cur, values=u, t=min(t, t_end) if abs(t - t_end) < 1e-9 else t)
            if follow is not None:
                cur = _follow_shift(cur, follow)
                u = cur.values.copy()
            _check_guard(cur, follow is not None)
    return replace(cur, values=u, t=float(t_end) if abs(t - t_end) < 1e-9 else t)


def record_trace(field: Field, s: float, checkpoints, ctrl: Optional[StepControl] = None,
                 follow: Optional[float] = None,
                 snapshot: Optional[Callable[[Field], None]] = None) -> FrontTrace:
    """Evolve through ``checkpoints`` and sample the level-``s`` front at each."""
    checkpoints = np.asarray(checkpoints, dtype=float)
    if checkpoints.size and np.any(np.diff(checkpoints) <= 0):
        raise ValueError("checkpoints must be strictly increasing")
    sig = []
    cur = field
    for tc in checkpoints:
        cur = evolve(cur, tc, ctrl, follow=follow)
        sig.append(front_position(cur, s))
        if snapshot is not None:
            snapshot(cur)
    return FrontTrace(level=s, t=checkpoints.copy(), sigma=np.array(sig), frame=field.frame)


def bramson_shift(t) -> np.ndarray:
    """Distance between the lab and Bramson frames, ``2t - (3/2) log t``."""
    t = np.asarray(t, dtype=float)
    return 2.0 * t - 1.5 * np.log(t)


# ---------------------------------------------------------------------------
# fits

def _ols(X: np.ndarray, y: np.ndarray):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(1, X.shape[0] - X.shape[1])
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0)), resid


def extract_xinf(trace: FrontTrace, profile: WaveProfile, tol: float = 0.05,
                 t_min: Optional[float] = None) -> ShiftEstimate:
    """Fit ``sigma(t) - phi^{-1}(s) = -y + b t^{-1/2}`` on a moving-frame trace.

    The returned ``x_inf`` follows the unit-amplitude convention, in which
    ``u(t, .) -> phi_*(. + x_inf)`` for the profile with tail ``(xi + k) e^{-xi}``;
    a profile with tail amplitude ``A`` is converted via ``x_inf = y - log A``.
    """
    if trace.frame != "moving":
        raise ValueError("extract_xinf needs a moving-frame trace")
    mask = np.ones(len(trace), bool) if t_min is None else trace.t >= t_min
    t, sig = trace.t[mask], trace.sigma[mask]
    if t.size < 10 or t[-1] / t[0] < 10.0 * (1 - 1e-9):
        raise PreAsymptoticError("need at least 10 samples spanning a decade of t")
    y = sig - profile.level_position(trace.level)
    X = np.column_stack([np.ones_like(t), t ** -0.5])
    coef, se, resid = _ols(X, y)
    rms = float(np.sqrt(np.mean(resid**2)))
    if rms > tol:
        raise PreAsymptoticError(f"fit residual {rms:.3e} exceeds {tol:.1e}")
    x_inf = -coef[0] - math.log(profile.amplitude)
    return ShiftEstimate(x_inf=float(x_inf), c1=1.5, stderr={"x_inf": float(se[0]), "b": float(se[1])},
                         window=(float(t[0]), float(t[-1])), model="const+t^-1/2",
                         residual_rms=rms, coefficients={"b": float(coef[1])})


def fit_log_coefficient(trace: FrontTrace, t_min: Optional[float] = None,
                        cond_max: float = 1e10):
    """Fit ``sigma = 2t - c1 log t + a + b t^{-1/2}``; returns ``(c1, stderr)``."""
    if trace.frame != "lab":
        raise ValueError("fit_log_coefficient needs a lab-frame trace")
    mask = np.ones(len(trace), bool) if t_min is None else trace.t >= t_min
    t, sig = trace.t[mask], trace.sigma[mask]
    if t.size < 4:
        raise PreAsymptoticError("need at least 4 samples")
    X = np.column_stack([-np.log(t), np.ones_like(t), t ** -0.5])
    # condition number of the column-normalized design
    Xn = X / np.linalg.norm(X, axis=0)
    if t[-1] / t[0] < 2.0 or np.linalg.cond(Xn) > cond_max:
        raise PreAsymptoticError("design matrix is ill-conditioned; widen the time window")
    coef, se, _ = _ols(X, sig - 2.0 * t)
    return float(coef[0]), float(se[0])


def boundary_limits(field: Field, band: float = GUARD) -> tuple[float, float]:
    """Mean ``|left_state - u|`` on the left guard band and mean ``|u|`` on the right one."""
    x = field.grid.x
    left = x <= field.grid.x_min + band
    right = x >= field.grid.x_max - band
    return (float(np.mean(np.abs(field.left_state - field.values[left]))),
            float(np.mean(np.abs(field.values[right]))))


def default_grid(frame: str, t_end: float, dx: float = 0.05, left: float = 60.0,
                 follow: bool = False) -> Grid:
    """Domain sized for a run to ``t_end``.

    The right margin is twelve diffusive lengths, enough for the leading edge
    ``x e^{-x} e^{-x^2/4t}`` to be resolved out to ``x/sqrt(t) = 12``.  A
    lab-frame window that does not follow the front must also hold the
    ``2 t`` travel, so it extends to ``2.5 t_end``.
    """
    margin = max(60.0, 12.0 * math.sqrt(t_end))
    if frame == "moving" or follow:
        return Grid.from_spacing(-left, margin, dx)
    return Grid.from_spacing(-left, max(margin, 2.5 * t_end), dx)
