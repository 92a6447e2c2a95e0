"""Binary branching Brownian motion by exact event-driven simulation.

Each particle diffuses with generator ``D d^2/dx^2`` and splits in two at
rate ``r``.  A replicate is simulated depth-first: a particle draws its
exponential lifetime, its position is sampled exactly at every checkpoint it
lives through, and at its death two children are pushed at its final
position.  Only per-checkpoint summaries (maximum, count, derivative
martingale) are kept.

For ``D = 1/2, r = 1`` (standard BBM) the tail ``P(M_t > x)`` solves
``v_t = v_xx / 2 + v - v^2`` with ``v(0, x) = 1{x < 0}``, the front moves at
``sqrt(2)`` and the derivative martingale is
``sum (sqrt(2) t - X) exp(sqrt(2)(X - sqrt(2) t))``.  In general the speed is
``c = 2 sqrt(D r)`` and the rate ``lam = sqrt(r / D)``.

Each replicate draws from its own PCG64 generator spawned from
``numpy.random.SeedSequence(seed)``, so results do not depend on how
replicates are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np


class ParticleCapError(RuntimeError):
    """A replicate exceeded the particle-count cap."""


@dataclass(frozen=True)
class BBMConfig:
    t_end: float
    replicates: int
    seed: int = 0
    branch_rate: float = 1.0
    diffusion: float = 0.5
    checkpoints: Optional[tuple] = None
    cap: int = 10**6
    track_z: bool = True

    def __post_init__(self):
        if not self.branch_rate > 0:
            raise ValueError("branch_rate must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.t_end < 0 or self.diffusion <= 0:
            raise ValueError("t_end must be nonnegative and diffusion positive")
        if math.exp(self.branch_rate * self.t_end) > self.cap:
            raise ParticleCapError(f"expected count e^{self.branch_rate * self.t_end:.2f} exceeds cap {self.cap}")

    @property
    def times(self) -> np.ndarray:
        ts = self.checkpoints if self.checkpoints is not None else (self.t_end,)
        ts = np.asarray(sorted(set(float(t) for t in ts)), dtype=float)
        if ts[0] < 0 or ts[-1] > self.t_end + 1e-12:
            raise ValueError("checkpoints must lie in [0, t_end]")
        return ts

    @property
    def speed(self) -> float:
        return 2.0 * math.sqrt(self.diffusion * self.branch_rate)

    @property
    def rate(self) -> float:
        return math.sqrt(self.branch_rate / self.diffusion)


@dataclass(frozen=True)
class BBMEnsemble:
    config: BBMConfig
    times: np.ndarray
    max: np.ndarray      # (replicates, checkpoints)
    count: np.ndarray
    Z: np.ndarray        # speed-consistent derivative martingale
    Z_speed2: np.ndarray  # sum (2t - X) e^{X - 2t}, whatever the diffusion

    def index(self, t: float) -> int:
        k = np.nonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))[0]
        if k.size == 0:
            raise KeyError(f"t={t} is not a checkpoint")
        return int(k[0])


# ---------------------------------------------------------------------------
# kernel

_OK, _CAP, _STACK = 0, 1, 2


@numba.njit(cache=True)
def _replicate(gen, times, rate, sigma2, c, lam, cap, track_z, stack, mx, cnt, z, z2):
    """Simulate one replicate into the row slices ``mx, cnt, z, z2``.

    ``stack`` holds pending siblings; its length bounds the number of branch
    events along any line of descent.  Returns ``_OK``, ``_CAP`` or ``_STACK``.
    """
    nt = times.size
    t_end = times[nt - 1]
    for k in range(nt):
        mx[k] = -np.inf
        cnt[k] = 0
        z[k] = 0.0
        z2[k] = 0.0
    size = stack.shape[0]
    stack[0, 0] = 0.0    # position
    stack[0, 1] = 0.0    # birth time
    stack[0, 2] = 0.0    # first checkpoint not yet passed
    top = 1
    while top > 0:
        top -= 1
        x = stack[top, 0]
        s = stack[top, 1]
        k = int(stack[top, 2])
        while True:
            end = s + gen.standard_exponential() / rate
            cur_t = s
            while k < nt and times[k] < end:
                dt = times[k] - cur_t
                if dt > 0.0:
                    x += math.sqrt(sigma2 * dt) * gen.standard_normal()
                cur_t = times[k]
                if x > mx[k]:
                    mx[k] = x
                cnt[k] += 1
                if track_z:
                    d = c * cur_t - x
                    z[k] += d * math.exp(lam * (x - c * cur_t))
                    d2 = 2.0 * cur_t - x
                    z2[k] += d2 * math.exp(x - 2.0 * cur_t)
                k += 1
            if end >= t_end:
                if cnt[nt - 1] > cap:
                    return _CAP
                break
            x += math.sqrt(sigma2 * (end - cur_t)) * gen.standard_normal()
            s = end
            if top == size:
                return _STACK
            stack[top, 0] = x
            stack[top, 1] = s
            stack[top, 2] = k
            top += 1
    return _OK


def replicate_seeds(seed: int, replicates: int):
    """Independent child seeds, one per replicate, spawned from ``SeedSequence(seed)``."""
    return np.random.SeedSequence(seed).spawn(replicates)


def simulate(config: BBMConfig) -> BBMEnsemble:
    times = config.times
    R = config.replicates
    nt = times.size
    mx = np.empty((R, nt))
    cnt = np.zeros((R, nt), dtype=np.int64)
    z = np.zeros((R, nt))
    z2 = np.zeros((R, nt))
    args = (config.branch_rate, 2.0 * config.diffusion, config.speed, config.rate, config.cap, config.track_z)
    stack = np.empty((64 + int(8 * config.branch_rate * config.t_end), 3))
    for r, child in enumerate(replicate_seeds(config.seed, R)):
        while True:
            gen = np.random.Generator(np.random.PCG64(child))
            status = _replicate(gen, times, *args, stack, mx[r], cnt[r], z[r], z2[r])
            if status != _STACK:
                break
            # rerun the same stream with room for a deeper genealogy
            stack = np.empty((2 * stack.shape[0], 3))
        if status == _CAP:
            raise ParticleCapError(f"replicate {r} exceeded {config.cap} particles")
    return BBMEnsemble(config=config, times=times, max=mx, count=cnt, Z=z, Z_speed2=z2)


# ---------------------------------------------------------------------------
# statistics

def max_cdf(ensemble: BBMEnsemble, t: float, x_grid, z: float = 1.96):
    """Empirical ``P(M_t > x)`` and its normal-approximation confidence half-width."""
    m = ensemble.max[:, ensemble.index(t)]
    x_grid = np.asarray(x_grid, dtype=float)
    srt = np.sort(m)
    n = srt.size
    p = 1.0 - np.searchsorted(srt, x_grid, side="right") / n
    hw = z * np.sqrt(p * (1.0 - p) / n)
    return p, hw


def derivative_martingale(ensemble: BBMEnsemble, t: float, form: str = "consistent") -> np.ndarray:
    """Per-replicate ``Z_t``; ``form='speed2'`` gives ``sum (2t - X) e^{X - 2t}``."""
    k = ensemble.index(t)
    if form == "consistent":
        return ensemble.Z[:, k].copy()
    if form == "speed2":
        return ensemble.Z_speed2[:, k].copy()
    raise ValueError(f"unknown form {form!r}")


def fit_median_curve(times, medians, speed: float = math.sqrt(2.0)):
    """Least-squares ``median - speed t = -c log t + a``; returns ``(c, a)``."""
    times = np.asarray(times, dtype=float)
    X = np.column_stack([-np.log(times), np.ones_like(times)])
    coef, *_ = np.linalg.lstsq(X, np.asarray(medians, dtype=float) - speed * times, rcond=None)
    return float(coef[0]), float(coef[1])


@dataclass(frozen=True)
class MedianFit:
    c: float
    const: float
    stderr: float
    medians: np.ndarray
    times: np.ndarray


def median_shift_fit(ensemble: BBMEnsemble, checkpoints: Sequence[float], bootstrap: int = 200,
                     seed: int = 12345, min_replicates: int = 200) -> MedianFit:
    """Fit ``median(M_t) = c* t - c log t + a`` with ``c* = 2 sqrt(D r)``; stderr by bootstrap."""
    cps = np.asarray(checkpoints, dtype=float)
    if cps.size < 4:
        raise ValueError("need at least four checkpoints")
    R = ensemble.max.shape[0]
    if R < min_replicates:
        raise ValueError(f"{R} replicates are too few for stable medians (need {min_replicates})")
    cols = [ensemble.index(t) for t in cps]
    M = ensemble.max[:, cols]
    med = np.median(M, axis=0)
    speed = ensemble.config.speed
    c, a = fit_median_curve(cps, med, speed)
    rng = np.random.default_rng(seed)
    cs = np.empty(bootstrap)
    for b in range(bootstrap):
        idx = rng.integers(0, R, R)
        cs[b] = fit_median_curve(cps, np.median(M[idx], axis=0), speed)[0]
    return MedianFit(c=c, const=a, stderr=float(np.std(cs, ddof=1)), medians=med, times=cps)


def geometric_pmf(n, t: float, rate: float = 1.0):
    """Yule-process count law ``P(N_t = n) = e^{-rt} (1 - e^{-rt})^{n-1}``."""
    p = math.exp(-rate * t)
    n = np.asarray(n)
    return p * (1.0 - p) ** (n - 1)
