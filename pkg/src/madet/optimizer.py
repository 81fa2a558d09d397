"""Momentum SGD with exponential learning-rate decay, a scheduled momentum
ramp, and per-unit max-norm projection of fully connected weight rows.

Update rule per step t (grads are batch means):

    v_t = m_t * v_{t-1} - (1 - m_t) * eps_t * grad
    w_t = w_{t-1} + v_t
    rows with ||w||_2 > c rescaled to norm c   (flagged matrices only)

eps_t = eps0 * f**t. The momentum ramp comes in two flavours: "standard"
ramps m from m_i up to m_f over ramp_steps (the conventional schedule for
dropout training); "paper" starts at m_f and ramps toward m_i over the same
span, then jumps back to m_f. Both are frozen at m_f for t >= ramp_steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon0: float = 0.01
    decay_f: float = 0.9995
    m_i: float = 0.5
    m_f: float = 0.99
    ramp_steps: int = 20000
    max_norm_c: float = 3.0
    batch_size: int = 128
    momentum_ramp: str = "standard"

    def __post_init__(self):
        if self.epsilon0 <= 0:
            raise ValueError(f"epsilon0 must be > 0, got {self.epsilon0}")
        if not 0.0 < self.decay_f <= 1.0:
            raise ValueError(f"decay factor must be in (0,1], got {self.decay_f}")
        for name, m in (("m_i", self.m_i), ("m_f", self.m_f)):
            if not 0.0 <= m < 1.0:
                raise ValueError(f"{name} must be in [0,1), got {m}")
        if self.m_i > self.m_f:
            raise ValueError(f"m_i ({self.m_i}) must not exceed m_f ({self.m_f})")
        if self.ramp_steps < 1:
            raise ValueError(f"ramp_steps must be positive, got {self.ramp_steps}")
        if self.max_norm_c <= 0:
            raise ValueError(f"max_norm_c must be > 0, got {self.max_norm_c}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.momentum_ramp not in ("standard", "paper"):
            raise ValueError(
                f"momentum_ramp must be 'standard' or 'paper', got {self.momentum_ramp!r}")


def schedule(config: OptimizerConfig, t: int) -> tuple[float, float]:
    """Learning rate and momentum at step t. Pure function of (config, t)."""
    if t < 0:
        raise ValueError(f"step index must be >= 0, got {t}")
    eps = config.epsilon0 * config.decay_f ** t
    if t >= config.ramp_steps:
        m = config.m_f
    else:
        frac = t / config.ramp_steps
        if config.momentum_ramp == "standard":
            m = (1.0 - frac) * config.m_i + frac * config.m_f
        else:
            m = frac * config.m_i + (1.0 - frac) * config.m_f
    return eps, m


@dataclass
class OptimizerState:
    t: int = 0
    velocities: list = field(default_factory=list)


def maxnorm_project(weight_matrix: np.ndarray, c: float) -> np.ndarray:
    """Rescale rows (incoming weight vectors) with L2 norm above c onto the
    radius-c sphere; rows already within the ball are untouched."""
    w = np.asarray(weight_matrix, dtype=np.float64)
    flat = w.reshape(w.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.where(norms > c, c / np.maximum(norms, 1e-300), 1.0)
    return (flat * scale[:, None]).reshape(w.shape)


def step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray],
         config: OptimizerConfig, maxnorm_flags: list[bool] | None = None):
    """One in-place update of `params` from batch-mean `grads`.

    maxnorm_flags marks which parameter entries are fully connected weight
    matrices subject to the per-unit norm constraint. Returns (params, state).
    """
    if len(params) != len(grads):
        raise ShapeMismatchError(
            f"{len(params)} parameters but {len(grads)} gradients")
    if maxnorm_flags is None:
        maxnorm_flags = [False] * len(params)
    if not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    eps, m = schedule(config, state.t)
    for p, g, v, project in zip(params, grads, state.velocities,
                                maxnorm_flags, strict=True):
        if p.shape != g.shape:
            raise ShapeMismatchError(
                f"parameter shape {p.shape} != gradient shape {g.shape}")
        v *= m
        v -= (1.0 - m) * eps * g
        p += v
        if project:
            p[...] = maxnorm_project(p, config.max_norm_c)
    state.t += 1
    return params, state
