"""Flow-matching primitives: linear interpolants and Euler ODE sampling.

The generative path from noise Y0 to data Y1 is the straight line
Y_t = (1 - t) * Y0 + t * Y1, whose velocity field is the constant Y1 - Y0.
A network that predicts the clean endpoint Y1 from (Y_t, t) induces the
velocity estimate v = (Y1_hat - Y_t) / (1 - t), which an explicit Euler
integrator follows from t=0 to t=1.  Self-conditioned training occasionally
rebuilds the interpolant from the model's own endpoint prediction so the
network cannot learn to copy Y_t near t=1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch

from .errors import ConfigError, DimensionError

DenoiseFn = Callable[[torch.Tensor, float], tuple[torch.Tensor, Any]]


def sample_noise(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    """Draw the flow source Y0 ~ N(0, I) with the given shape."""
    return torch.randn(*shape, generator=generator, dtype=dtype)


def sample_flow_time(
    generator: torch.Generator | None = None,
    schedule: str = "uniform",
    beta_params: tuple[float, float] = (1.0, 1.0),
    dtype=torch.float64,
) -> torch.Tensor:
    """Draw one flow time t in [0, 1) as a scalar tensor.

    Args:
        schedule: "uniform" (default) or "beta" with shape ``beta_params``.
    """
    if schedule == "uniform":
        return torch.rand((), generator=generator, dtype=dtype)
    if schedule == "beta":
        a, b = beta_params
        if a <= 0 or b <= 0:
            raise ConfigError(f"beta schedule needs positive shape parameters, got {beta_params}")
        # torch has no generator-seeded beta sampler; hand the draw to numpy,
        # seeded from the torch generator to keep one determinism root
        seed = int(torch.randint(0, 2**63 - 1, (), generator=generator))
        t = float(np.random.default_rng(seed).beta(a, b))
        return torch.tensor(min(t, 1.0 - 1e-12), dtype=dtype)
    raise ConfigError(f"unknown flow-time schedule {schedule!r}")


def interpolate(y0: torch.Tensor, y1: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Point and velocity of the straight-line path at flow time t.

    Args:
        y0: source (noise) tensor.
        y1: target (data) tensor, same shape as y0.
        t: flow time in [0, 1].

    Returns:
        (yt, vt) with yt = (1 - t) * y0 + t * y1 and vt = y1 - y0; the
        velocity of a linear path does not depend on t.
    """
    if y0.shape != y1.shape:
        raise DimensionError(f"interpolate endpoints must match, got {tuple(y0.shape)} vs {tuple(y1.shape)}")
    t = torch.as_tensor(t, dtype=y0.dtype, device=y0.device)
    return (1.0 - t) * y0 + t * y1, y1 - y0


def velocity_from_denoised(y1_hat: torch.Tensor, y_t: torch.Tensor, t) -> torch.Tensor:
    """Recover the path velocity implied by an endpoint prediction.

    On the linear path the remaining displacement is (1 - t) times the
    velocity, so v = (y1_hat - y_t) / (1 - t).

    Args:
        y1_hat: predicted clean endpoint.
        y_t: current state on the path, same shape.
        t: flow time, strictly below 1 (the Euler sampler uses t = n/steps,
            so 1 - t >= 1/steps by construction).

    Returns:
        Velocity estimate with the shape of y_t.
    """
    t_val = float(t)
    if t_val >= 1.0:
        raise ConfigError(f"velocity is undefined at t >= 1, got t={t_val}")
    t = torch.as_tensor(t, dtype=y_t.dtype, device=y_t.device)
    return (y1_hat - y_t) / (1.0 - t)


@dataclass
class SelfConditioningResult:
    """Input for the training forward pass, possibly self-conditioned.

    Attributes:
        y_t: interpolant to feed the (second) forward pass.
        first_denoised: endpoint prediction of the extra first pass, or None
            when the branch did not fire.  Kept with gradients so its loss
            can train the first pass too.
        first_payload: auxiliary outputs of the first pass (or None).
        fired: whether the self-conditioning branch ran.
    """

    y_t: torch.Tensor
    first_denoised: torch.Tensor | None
    first_payload: Any
    fired: bool


def self_conditioning_pass(
    denoise_fn: DenoiseFn,
    y0: torch.Tensor,
    y1: torch.Tensor,
    t,
    generator: torch.Generator | None = None,
    probability: float = 0.5,
) -> SelfConditioningResult:
    """Build the training input, re-noising the model's own guess half the time.

    With probability ``probability`` the model first denoises the ground-truth
    interpolant; the second-pass input is then rebuilt around the detached
    first-pass prediction, t * y1_hat + (1 - t) * y0.  Gradients never flow
    through the rebuilt input, but the returned first-pass outputs keep theirs
    so the caller can add their loss.  Otherwise the ground-truth interpolant
    passes through untouched.
    """
    if not (0.0 <= probability <= 1.0):
        raise ConfigError(f"self-conditioning probability must be in [0, 1], got {probability}")
    y_t, _ = interpolate(y0, y1, t)
    p_s = torch.rand((), generator=generator, dtype=y0.dtype)
    if float(p_s) >= probability:
        return SelfConditioningResult(y_t=y_t, first_denoised=None, first_payload=None, fired=False)
    y1_first, payload = denoise_fn(y_t, float(t))
    y_t_sc, _ = interpolate(y0, y1_first.detach(), t)
    return SelfConditioningResult(y_t=y_t_sc, first_denoised=y1_first, first_payload=payload, fired=True)


@dataclass
class FlowSampleResult:
    """Output of Euler sampling.

    Attributes:
        denoised: the endpoint prediction from the final integrator step;
            this is the sampler's output trajectory.
        state: the fully integrated state at t=1.  Algebraically equal to
            ``denoised`` (the last step advances by exactly 1 - t), so any
            gap is floating-point roundoff.
        payload: whatever extra output the denoiser returned on the final
            step (e.g. confidence and ranking scores).
        n_steps: number of Euler steps taken.
    """

    denoised: torch.Tensor
    state: torch.Tensor
    payload: Any
    n_steps: int


def ode_sample(denoise_fn: DenoiseFn, y0: torch.Tensor, steps: int) -> FlowSampleResult:
    """Integrate the sampling ODE from noise to data with explicit Euler.

    Runs ``steps`` uniform Euler steps over t in [0, 1).  Each step queries
    the denoiser at t = n / steps, converts its endpoint prediction into a
    velocity, and advances by 1 / steps.  With steps=1 the result is exactly
    the denoiser's prediction at (y0, t=0) -- the same tensor, no arithmetic
    applied.

    Args:
        denoise_fn: callable (y_t, t) -> (y1_hat, payload).
        y0: source sample, any shape.
        steps: number of Euler steps, >= 1.

    Returns:
        FlowSampleResult with the final endpoint prediction and payload.
    """
    if steps < 1:
        raise ConfigError(f"ode_sample needs steps >= 1, got {steps}")
    y = y0
    y1_hat, payload = y0, None
    for n in range(steps):
        t = n / steps
        y1_hat, payload = denoise_fn(y, t)
        v = velocity_from_denoised(y1_hat, y, t)
        y = y + v / steps
    return FlowSampleResult(denoised=y1_hat, state=y, payload=payload, n_steps=steps)
