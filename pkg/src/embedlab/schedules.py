"""Noise schedules, forward perturbation, Tweedie prediction, reverse steps.

Discrete timesteps are indexed 1..T with step 0 denoting clean data, so
``alpha_bar(0) == 1``.  The cumulative signal retention is

    alpha_bar_t = prod_{tau<=t} (1 - beta_tau),

and the forward marginal is  x_t = sqrt(alpha_bar_t) x_0
+ sqrt(1 - alpha_bar_t) eps.  Reverse-transition standard deviations follow
the posterior-variance convention  sigma_t^2 = beta_t (1 - alpha_bar_{t-1})
/ (1 - alpha_bar_t), which makes sigma_1 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray = field(default=None)
    sigmas: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a nonempty 1-D sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

        abars = self.alpha_bars
        if abars is None:
            abars = np.cumprod(1.0 - betas)
        abars = np.asarray(abars, dtype=np.float64)
        if abars.shape != betas.shape:
            raise ScheduleError("alpha_bars length must match betas")
        prev = np.concatenate(([1.0], abars[:-1]))
        if not np.allclose(abars, (1.0 - betas) * prev, rtol=1e-12, atol=0.0):
            raise ScheduleError("alpha_bars inconsistent with betas")
        if np.any(abars <= 0.0) or np.any(abars > 1.0) or np.any(np.diff(abars) >= 0.0):
            raise ScheduleError("alpha_bars must be strictly decreasing in (0, 1]")
        object.__setattr__(self, "alpha_bars", abars)

        sig = self.sigmas
        if sig is None:
            sig = np.sqrt(betas * (1.0 - prev) / (1.0 - abars))
        sig = np.asarray(sig, dtype=np.float64)
        if sig.shape != betas.shape or np.any(~np.isfinite(sig)) or np.any(sig < 0.0):
            raise ScheduleError("sigmas must be finite and nonnegative")
        object.__setattr__(self, "sigmas", sig)

    @property
    def T(self):
        return self.betas.size

    def _check_t(self, t, lo=1):
        t = int(t)
        if not (lo <= t <= self.T):
            raise ScheduleError(f"timestep {t} outside {lo}..{self.T}")
        return t

    def beta(self, t):
        return float(self.betas[self._check_t(t) - 1])

    def alpha_bar(self, t):
        t = self._check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t):
        return float(self.sigmas[self._check_t(t) - 1])


def make_schedule(T, kind, beta_lo, beta_hi=None):
    """Build a schedule with constant or linearly ramped betas."""
    T = int(T)
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0.0 < beta_lo < 1.0):
        raise ScheduleError("beta_lo must lie in (0, 1)")
    if kind == "constant":
        betas = np.full(T, float(beta_lo))
    elif kind == "linear":
        if beta_hi is None:
            raise ScheduleError("linear schedule needs beta_hi")
        if not (beta_lo <= beta_hi < 1.0):
            raise ScheduleError("need beta_lo <= beta_hi < 1")
        betas = np.linspace(float(beta_lo), float(beta_hi), T)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas=betas)


def default_schedule():
    """Desk default: T = 100, linear betas 1e-3 .. 0.12."""
    return make_schedule(100, "linear", 1e-3, 0.12)


def perturb(x0, t, noise, sched):
    """Forward marginal sample: sqrt(ab) x0 + sqrt(1 - ab) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ScheduleError("x0 and noise dimensions differ")
    ab = sched.alpha_bar(sched._check_t(t))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def tweedie_mean(x_t, c, t, model, sched):
    """Posterior-mean prediction of clean data from one score evaluation:

        (x_t + (1 - alpha_bar_t) * s(x_t, c, t)) / sqrt(alpha_bar_t)
    """
    t = sched._check_t(t)
    ab = sched.alpha_bar(t)
    s = model.score(x_t, c, t, sched)
    return (np.asarray(x_t, dtype=np.float64) + (1.0 - ab) * s) / np.sqrt(ab)


def step_alg1(x_t, score, t, sched):
    """Deterministic half-beta step: x + beta/2 * (x + score)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    b = sched.beta(t)
    return x_t + 0.5 * b * (x_t + score)


def step_ddpm(x_t, score, t, noise, sched):
    """Ancestral step: mean (x + beta*score)/sqrt(1-beta) plus sigma*noise."""
    x_t = np.asarray(x_t, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x_t.shape != noise.shape:
        raise ScheduleError("x_t and noise dimensions differ")
    t = sched._check_t(t)
    b = sched.beta(t)
    mean = (x_t + b * score) / np.sqrt(1.0 - b)
    return mean + sched.sigma(t) * noise


def step_ddim(x_t, x0_pred, t, t_prev, sched):
    """Deterministic (eta = 0) step to t_prev given a clean-data prediction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_pred = np.asarray(x0_pred, dtype=np.float64)
    t = sched._check_t(t)
    t_prev = sched._check_t(t_prev, lo=0)
    if t_prev >= t:
        raise ScheduleError("t_prev must precede t")
    ab_t = sched.alpha_bar(t)
    if ab_t >= 1.0:
        raise ScheduleError("degenerate noise estimate at alpha_bar = 1")
    ab_p = sched.alpha_bar(t_prev)
    eps_hat = (x_t - np.sqrt(ab_t) * x0_pred) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_p) * x0_pred + np.sqrt(1.0 - ab_p) * eps_hat
