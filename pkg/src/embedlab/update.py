"""Per-timestep conditioning-embedding updates.

The update moves the embedding from its origin by a fixed radius rho along
the normalized gradient of the time-lifted alignment h_t:

    c_hat = c_org + rho * g / ||g||,   g = grad_c h_t(x_t, c_org)

which is the maximizer of the first-order model of h_t over the rho-ball.
A zero gradient carries no information, so it leaves the origin unchanged.
When updates chain from the previous step's embedding, a squared-L2
regularizer toward the encoder embedding keeps the walk anchored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import evaluate, gradient
from .graphs import GraphCache


class UpdateError(ValueError):
    pass


@dataclass(frozen=True)
class DateConfig:
    rho: float = 0.5
    update_steps: frozenset = field(default_factory=frozenset)
    origin: str = "fresh"            # "fresh" | "previous"
    l2_weight: float = 0.1
    iters_per_update: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho > 0.0):
            raise UpdateError("rho must be finite and positive")
        if self.origin not in ("fresh", "previous"):
            raise UpdateError(f"unknown origin strategy {self.origin!r}")
        if self.l2_weight < 0.0:
            raise UpdateError("l2_weight must be >= 0")
        if self.iters_per_update < 1:
            raise UpdateError("iters_per_update must be >= 1")
        object.__setattr__(self, "update_steps", frozenset(int(t) for t in self.update_steps))


@dataclass(frozen=True)
class UpdateDirection:
    eps: np.ndarray        # the applied step; norm rho whenever grad_norm > 0
    grad_norm: float       # gradient norm before normalization


def grad_h_t_wrt_c(x_t, c, t, model, sched, h, y, cache=None):
    """Exact reverse-mode gradient of h(tweedie_mean(x_t, c, t); y) in c."""
    cache = cache or GraphCache()
    g = cache.h_t(model, h, y, t, sched)
    evaluate(g, {"x": np.asarray(x_t, dtype=np.float64),
                 "c": np.asarray(c, dtype=np.float64)})
    out = gradient(g, "c")
    if not np.all(np.isfinite(out)):
        raise UpdateError("non-finite embedding gradient")
    return out


def scaled_direction(grad, rho):
    """rho * grad / ||grad||, or zeros when the gradient vanishes."""
    grad = np.asarray(grad, dtype=np.float64)
    n = float(np.linalg.norm(grad))
    if n == 0.0:
        return np.zeros_like(grad), 0.0
    return rho * grad / n, n


def date_update(x_t, c_org, t, cfg, model, sched, h, y, c_encoder=None, cache=None):
    """One normalized-gradient embedding update at timestep t.

    Under the "previous" origin strategy the optimized objective is
    h_t(c) - l2_weight * ||c - c_encoder||^2, differentiated at the origin;
    under "fresh" the regularizer is inactive (the origin IS the encoder
    embedding).  Returns the updated embedding and the applied direction.
    """
    c_org = np.asarray(c_org, dtype=np.float64)
    grad = grad_h_t_wrt_c(x_t, c_org, t, model, sched, h, y, cache=cache)
    if cfg.origin == "previous" and cfg.l2_weight > 0.0:
        if c_encoder is None:
            raise UpdateError("previous-origin updates need the encoder embedding")
        grad = grad - 2.0 * cfg.l2_weight * (c_org - np.asarray(c_encoder, dtype=np.float64))
    eps, gnorm = scaled_direction(grad, cfg.rho)
    return c_org + eps, UpdateDirection(eps=eps, grad_norm=gnorm)


def build_update_schedule(T_steps, fraction, placement="uniform"):
    """Pick ceil(fraction * T) timesteps in 1..T according to a policy.

    uniform spreads them evenly; early / mid / late place a contiguous block
    in the corresponding third of the sampling trajectory, where "early"
    means early in sampling order (high t).
    """
    T_steps = int(T_steps)
    if not (0.0 <= fraction <= 1.0):
        raise UpdateError("fraction must lie in [0, 1]")
    if placement == "all":
        return frozenset(range(1, T_steps + 1))
    m = int(np.ceil(fraction * T_steps))
    if m == 0:
        return frozenset()
    if m > T_steps:
        m = T_steps
    if placement == "uniform":
        steps = np.unique(np.round(np.linspace(1, T_steps, m)).astype(int))
        return frozenset(int(s) for s in steps)
    if placement == "early":
        return frozenset(range(T_steps - m + 1, T_steps + 1))
    if placement == "late":
        return frozenset(range(1, m + 1))
    if placement == "mid":
        lo = (T_steps - m) // 2 + 1
        return frozenset(range(lo, lo + m))
    raise UpdateError(f"unknown placement {placement!r}")


def select_origin(strategy, c_prev, c_encoder):
    """Choose the update's base point; a missing previous embedding falls
    back to the encoder output."""
    if strategy == "fresh":
        return np.asarray(c_encoder, dtype=np.float64)
    if strategy == "previous":
        src = c_encoder if c_prev is None else c_prev
        return np.asarray(src, dtype=np.float64)
    raise UpdateError(f"unknown origin strategy {strategy!r}")


def multi_iter_update(x_t, c_org, t, cfg, model, sched, h, y, c_encoder=None, cache=None):
    """Repeated updates within one timestep, each re-anchored at the last
    output; one iteration reduces exactly to date_update."""
    c = np.asarray(c_org, dtype=np.float64)
    for _ in range(cfg.iters_per_update):
        c, _ = date_update(x_t, c, t, cfg, model, sched, h, y,
                           c_encoder=c_encoder, cache=cache)
    return c
