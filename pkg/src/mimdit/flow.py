"""Rectified-flow objective and explicit Euler sampler.

The flow interpolates x_t = t*x + (1-t)*z between noise (t=0) and data
(t=1); the training target is the path derivative x - z. Sampling
integrates the learned velocity field from t=0 to t=1 with uniform steps.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import TokenSequence
from .errors import DimensionError, NumericalFailureError, ParameterError


@dataclass(frozen=True)
class FlowState:
    x_t: TokenSequence
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ParameterError(f"flow time t={self.t} outside [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    """Uniform-grid Euler schedule on [0, 1]."""

    steps: int = 40

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"sampler steps must be >= 1, got {self.steps}")


def interpolate(x, z, t):
    """Point on the straight path between noise z (t=0) and data x (t=1)."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"interpolation time t={t} outside [0, 1]")
    if x.tokens.shape != z.tokens.shape:
        raise DimensionError(
            f"interpolation endpoints differ in shape: {x.tokens.shape} vs {z.tokens.shape}"
        )
    mixed = x.tokens * t + z.tokens * (1.0 - t)
    return FlowState(x_t=x.with_tokens(mixed), t=float(t))


def flow_loss(model, x, z_lq, z, t, **forward_kwargs):
    """Mean squared error between the predicted velocity and x - z."""
    state = interpolate(x, z, t)
    predicted = model.velocity(z_lq, state.x_t.tokens, state.t, **forward_kwargs)
    target = x.tokens - z.tokens
    diff = predicted - target
    return T.tensor_mean(diff * diff)


def euler_sample(velocity, z_lq, z, config):
    """Integrate dx/dt = velocity(z_lq, x, t) from t=0 to t=1 in `steps` steps.

    velocity is any callable (z_lq, x_t tensor, t) -> velocity tensor; states
    are detached between steps, so no gradient flows through sampling.
    """
    steps = config.steps
    dt = 1.0 / steps
    x = z.tokens.data.copy()
    for i in range(steps):
        t = i / steps
        v = velocity(z_lq, T.Tensor(x), t)
        x = x + dt * v.data
        if not np.all(np.isfinite(x)):
            raise NumericalFailureError(f"non-finite sample state at step {i}", step=i)
    return z.with_tokens(T.Tensor(x))
