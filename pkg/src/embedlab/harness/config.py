"""Experiment configuration: JSON in, validated dataclasses out.

Loading is strict: unknown keys and duplicate keys are rejected with the
offending key path, and every range violation names the key that caused
it.  Serialization materializes all defaults, so load -> serialize -> load
is the identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..guidance import GuidanceConfig, GuidanceError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    T: int = 100
    kind: str = "linear"
    beta_lo: float = 1e-3
    beta_hi: float = 0.12


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "analytic"        # "analytic" | "learned"
    task_seed: int = 7            # seeds the analytic desk task (and prompts)
    checkpoint: str | None = None  # learned models load their net from here


@dataclass(frozen=True)
class HSpec:
    kind: str = "cosine"          # "cosine" | "quadratic" | "composite"
    seed: int = 0                 # seeds the cosine feature map
    feature_dim: int = 8
    sign: float = -1.0            # quadratic orientation; -1 peaks at the target
    weights: tuple = ()           # composite parts: ((kind, weight), ...)


@dataclass(frozen=True)
class DateSpec:
    rho: float = 0.5
    fraction: float = 0.1
    placement: str = "uniform"
    update_steps: tuple | None = None   # explicit steps override fraction/placement
    origin: str = "fresh"
    l2_weight: float = 0.1
    iters_per_update: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    prompt: int = 0
    sampler: str = "ddpm"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    date: DateSpec | None = field(default_factory=DateSpec)
    h: HSpec = field(default_factory=HSpec)
    n_samples: int = 16
    out_dir: str = "out"


def _reject_duplicates(pairs):
    seen = set()
    out = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r}")
        seen.add(k)
        out[k] = v
    return out


def _check_keys(d, allowed, path):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _section(d, name):
    v = d.get(name, {})
    _require(isinstance(v, dict), name, "must be an object")
    return v


def config_from_dict(raw):
    _check_keys(raw, ("seed", "schedule", "model", "prompt", "sampler",
                      "guidance", "date", "h", "n_samples", "out_dir"), "config")

    sd = _section(raw, "schedule")
    _check_keys(sd, ("T", "kind", "beta_lo", "beta_hi"), "schedule")
    schedule = ScheduleSpec(
        T=int(sd.get("T", 100)), kind=str(sd.get("kind", "linear")),
        beta_lo=float(sd.get("beta_lo", 1e-3)), beta_hi=float(sd.get("beta_hi", 0.12)))
    _require(schedule.T >= 1, "schedule.T", "must be >= 1")
    _require(schedule.kind in ("linear", "constant"), "schedule.kind",
             "must be 'linear' or 'constant'")
    _require(0.0 < schedule.beta_lo < 1.0, "schedule.beta_lo", "must lie in (0, 1)")
    _require(schedule.beta_lo <= schedule.beta_hi < 1.0, "schedule.beta_hi",
             "must lie in [beta_lo, 1)")

    md = _section(raw, "model")
    _check_keys(md, ("kind", "task_seed", "checkpoint"), "model")
    model = ModelSpec(kind=str(md.get("kind", "analytic")),
                      task_seed=int(md.get("task_seed", 7)),
                      checkpoint=md.get("checkpoint"))
    _require(model.kind in ("analytic", "learned"), "model.kind",
             "must be 'analytic' or 'learned'")
    if model.kind == "learned":
        _require(model.checkpoint is not None, "model.checkpoint",
                 "required for learned models")
        _require(os.path.exists(model.checkpoint), "model.checkpoint",
                 f"file not found: {model.checkpoint}")

    hd = _section(raw, "h")
    _check_keys(hd, ("kind", "seed", "feature_dim", "sign", "weights"), "h")
    weights = tuple((str(p["kind"]), float(p["weight"]))
                    for p in (hd.get("weights") or ()))
    h = HSpec(kind=str(hd.get("kind", "cosine")), seed=int(hd.get("seed", 0)),
              feature_dim=int(hd.get("feature_dim", 8)),
              sign=float(hd.get("sign", -1.0)), weights=weights)
    _require(h.kind in ("cosine", "quadratic", "composite"), "h.kind",
             "must be 'cosine', 'quadratic', or 'composite'")
    _require(h.sign in (-1.0, 1.0), "h.sign", "must be -1 or +1")
    if h.kind == "composite":
        _require(len(h.weights) > 0, "h.weights", "composite needs parts")
        for kind, _ in h.weights:
            _require(kind in ("cosine", "quadratic"), "h.weights",
                     f"unknown part kind {kind!r}")

    gd = _section(raw, "guidance")
    _check_keys(gd, ("kind", "w", "ablation_kind", "rho"), "guidance")
    try:
        guidance = GuidanceConfig(
            kind=str(gd.get("kind", "none")), w=float(gd.get("w", 2.0)),
            ablation_kind=gd.get("ablation_kind"),
            rho=None if gd.get("rho") is None else float(gd.get("rho")))
    except GuidanceError as exc:
        raise ConfigError(f"guidance: {exc}") from exc
    if guidance.kind in ("cfg", "cg", "ug"):
        _require(model.kind == "analytic", "guidance.kind",
                 "score-composition guidance needs the analytic model")

    # an absent date section means defaults; an explicit null disables updates
    date = None
    if "date" not in raw:
        date = DateSpec()
    elif raw["date"] is not None:
        dd = raw["date"]
        _require(isinstance(dd, dict), "date", "must be an object or null")
        _check_keys(dd, ("rho", "fraction", "placement", "update_steps",
                         "origin", "l2_weight", "iters_per_update"), "date")
        steps = dd.get("update_steps")
        if steps is not None:
            steps = tuple(sorted(int(s) for s in steps))
            _require(all(1 <= s <= schedule.T for s in steps), "date.update_steps",
                     f"steps must lie in 1..{schedule.T}")
        date = DateSpec(
            rho=float(dd.get("rho", 0.5)),
            fraction=float(dd.get("fraction", 0.1)),
            placement=str(dd.get("placement", "uniform")),
            update_steps=steps,
            origin=str(dd.get("origin", "fresh")),
            l2_weight=float(dd.get("l2_weight", 0.1)),
            iters_per_update=int(dd.get("iters_per_update", 1)))
        _require(np.isfinite(date.rho) and date.rho > 0.0, "date.rho",
                 "must be finite and positive")
        _require(0.0 <= date.fraction <= 1.0, "date.fraction", "must lie in [0, 1]")
        _require(date.placement in ("uniform", "early", "mid", "late", "all"),
                 "date.placement", "must be uniform/early/mid/late/all")
        _require(date.origin in ("fresh", "previous"), "date.origin",
                 "must be 'fresh' or 'previous'")
        _require(date.l2_weight >= 0.0, "date.l2_weight", "must be >= 0")
        _require(date.iters_per_update >= 1, "date.iters_per_update", "must be >= 1")

    if guidance.kind == "ablation":
        _require(date is not None, "guidance", "ablations need a date section "
                 "to supply the update schedule")

    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)), schedule=schedule, model=model,
        prompt=int(raw.get("prompt", 0)), sampler=str(raw.get("sampler", "ddpm")),
        guidance=guidance, date=date, h=h,
        n_samples=int(raw.get("n_samples", 16)),
        out_dir=str(raw.get("out_dir", "out")))
    _require(cfg.sampler in ("ddpm", "alg1", "ddim"), "sampler",
             "must be ddpm/alg1/ddim")
    _require(cfg.n_samples >= 1, "n_samples", "must be >= 1")
    _require(cfg.prompt >= 0, "prompt", "must be a nonnegative prompt id")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    _require(isinstance(raw, dict), "config", "top level must be an object")
    return config_from_dict(raw)


def config_to_dict(cfg):
    """All fields materialized, defaults included; loads back identically."""
    return {
        "seed": cfg.seed,
        "schedule": {"T": cfg.schedule.T, "kind": cfg.schedule.kind,
                     "beta_lo": cfg.schedule.beta_lo, "beta_hi": cfg.schedule.beta_hi},
        "model": {"kind": cfg.model.kind, "task_seed": cfg.model.task_seed,
                  "checkpoint": cfg.model.checkpoint},
        "prompt": cfg.prompt,
        "sampler": cfg.sampler,
        "guidance": {"kind": cfg.guidance.kind, "w": cfg.guidance.w,
                     "ablation_kind": cfg.guidance.ablation_kind,
                     "rho": cfg.guidance.rho},
        "date": None if cfg.date is None else {
            "rho": cfg.date.rho, "fraction": cfg.date.fraction,
            "placement": cfg.date.placement,
            "update_steps": None if cfg.date.update_steps is None
            else list(cfg.date.update_steps),
            "origin": cfg.date.origin, "l2_weight": cfg.date.l2_weight,
            "iters_per_update": cfg.date.iters_per_update},
        "h": {"kind": cfg.h.kind, "seed": cfg.h.seed,
              "feature_dim": cfg.h.feature_dim, "sign": cfg.h.sign,
              "weights": [{"kind": k, "weight": w} for k, w in cfg.h.weights]},
        "n_samples": cfg.n_samples,
        "out_dir": cfg.out_dir,
    }
