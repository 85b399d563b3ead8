"""Pinned diffusion bridge: posterior sampling, score estimators, and the
probability-flow ODE.

The bridge runs between a clean data vector ``x0`` and a prior endpoint
``x1`` of the same dimension.  At time ``t`` the conditional law is Gaussian
with mean ``a*x0 + b*x1`` and isotropic variance ``cap_sigma2`` (see
:mod:`stereobridge.schedule` for the coefficients).  All operations are pure
functions of their arguments plus an explicitly passed noise draw; random
streams are owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, TimeGrid, beta_at, bridge_coefficients

# cap_sigma2 below this floor means we are numerically at an endpoint and
# score-like quantities would blow up; fail loudly instead.
VARIANCE_FLOOR = 1e-12


class NearEndpointError(ValueError):
    """Raised when the bridge variance is too close to zero to divide by."""


class DivergenceError(RuntimeError):
    """Raised when ODE integration produces a non-finite state."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at integration step {step} (t={t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class Endpoints:
    """The two pinned ends of the bridge: data ``x0`` and prior ``x1``.

    For stereo targets ``x0`` is the concatenation of the left and right
    channel vectors.
    """

    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        x1 = np.asarray(self.x1, dtype=np.float64)
        if x0.shape != x1.shape:
            raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
            raise ValueError("endpoints must be finite")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)


@dataclass(frozen=True)
class BridgeSample:
    """A state ``x`` on the bridge at time ``t``."""

    x: np.ndarray
    t: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("bridge state must be finite")
        object.__setattr__(self, "x", x)


def posterior_moments(ep: Endpoints, t, sched: NoiseSchedule):
    """Mean and variance of the bridge conditional at time t.

    Returns ``(mu_t, cap_sigma2)``; broadcasts over array-valued ``t`` with
    one trailing data axis.
    """
    a, b, cap_sigma2 = bridge_coefficients(sched, t)
    if np.ndim(a) == 0:
        mu = a * ep.x0 + b * ep.x1
    else:
        mu = np.asarray(a)[..., None] * ep.x0 + np.asarray(b)[..., None] * ep.x1
    return mu, cap_sigma2


def sample_posterior(ep: Endpoints, t: float, sched: NoiseSchedule, z: np.ndarray) -> BridgeSample:
    """Draw the bridge state ``a*x0 + b*x1 + sqrt(cap_sigma2) * z``.

    ``z`` is a standard-normal draw supplied by the caller; its shape must
    match the endpoints (a leading batch axis is allowed when the endpoints
    carry one).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != ep.x0.shape:
        raise ValueError(f"noise shape {z.shape} does not match endpoints {ep.x0.shape}")
    a, b, cap_sigma2 = bridge_coefficients(sched, t)
    x = a * ep.x0 + b * ep.x1 + np.sqrt(cap_sigma2) * z
    return BridgeSample(x=x, t=float(t))


def _checked_cap_sigma2(sched: NoiseSchedule, t) -> float:
    _, _, cap_sigma2 = bridge_coefficients(sched, t)
    if np.any(np.asarray(cap_sigma2) <= VARIANCE_FLOOR):
        raise NearEndpointError(
            f"bridge variance {cap_sigma2!r} at t={t!r} is at or below the "
            f"{VARIANCE_FLOOR:g} floor"
        )
    return cap_sigma2


def analytic_posterior_score(x_t: np.ndarray, ep: Endpoints, t: float, sched: NoiseSchedule) -> np.ndarray:
    """Gradient of the log-density of the bridge conditional at ``x_t``.

    This is the exact Gaussian score ``-(x_t - mu_t) / cap_sigma2`` and
    serves as the test oracle for the estimator below.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    cap_sigma2 = _checked_cap_sigma2(sched, t)
    mu, _ = posterior_moments(ep, t, sched)
    return -(x_t - mu) / cap_sigma2


def endpoint_score_estimate(x_t: np.ndarray, x1: np.ndarray, t: float, sched: NoiseSchedule) -> np.ndarray:
    """Single-sample score estimate ``-(x1 - x_t) / cap_sigma2``.

    Uses only the prior endpoint, so it is available at inference time when
    the data endpoint is unknown.  It is the one-draw form of the
    conditional expectation defining the marginal score.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    cap_sigma2 = _checked_cap_sigma2(sched, t)
    return -(x1 - x_t) / cap_sigma2


def pf_ode_drift(
    x_t: np.ndarray,
    x1: np.ndarray,
    t: float,
    sched: NoiseSchedule,
    base_drift=None,
    beta_squared: bool = True,
) -> np.ndarray:
    """Drift of the probability-flow ODE at ``(x_t, t)``.

    ``base_drift(x, t)`` defaults to zero, keeping the ODE affine in ``x``.
    ``beta_squared`` selects between a ``beta(t)^2`` factor (default) and
    plain ``beta(t)`` on the score term; both are exposed because the two
    conventions appear in the literature.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    cap_sigma2 = _checked_cap_sigma2(sched, t)
    rate = beta_at(sched, t)
    factor = rate * rate if beta_squared else rate
    drift = 0.5 * factor * (x1 - x_t) / cap_sigma2
    if base_drift is not None:
        drift = drift + np.asarray(base_drift(x_t, t), dtype=np.float64)
    return drift


def heun_integrate(drift_fn, x0: np.ndarray, t0: float, t1: float, steps: int) -> np.ndarray:
    """Second-order Heun integration of ``dx/dt = drift_fn(x, t)``.

    Integrates from ``t0`` to ``t1`` (either direction) in ``steps`` uniform
    steps.  Deterministic given its inputs; raises :class:`DivergenceError`
    with the offending step index if the state goes non-finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    h = (t1 - t0) / steps
    if h == 0.0:
        return x
    t = t0
    for i in range(steps):
        t_next = t0 + (i + 1) * (t1 - t0) / steps
        k1 = drift_fn(x, t)
        x_pred = x + h * k1
        k2 = drift_fn(x_pred, t_next)
        x = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(step=i, t=t_next)
        t = t_next
    return x


def integrate_pf_ode(
    start: BridgeSample,
    t_end: float,
    steps: int,
    x1: np.ndarray,
    sched: NoiseSchedule,
    base_drift=None,
    beta_squared: bool = True,
) -> BridgeSample:
    """Integrate the probability-flow ODE from ``start.t`` to ``t_end``."""
    if t_end == start.t:
        return start

    def drift(x, t):
        return pf_ode_drift(x, x1, t, sched, base_drift=base_drift, beta_squared=beta_squared)

    x = heun_integrate(drift, start.x, start.t, t_end, steps)
    return BridgeSample(x=x, t=float(t_end))


def coupled_pair(
    ep: Endpoints,
    n: int,
    grid: TimeGrid,
    sched: NoiseSchedule,
    z: np.ndarray,
):
    """Adjacent bridge states at ``t_n`` and ``t_{n+1}`` built from one draw.

    Sharing the Gaussian draw ``z`` couples the two states so they follow a
    single coherent trajectory, which is what the consistency objective
    regresses across.  Returns ``(sample_n, sample_np1)``.
    """
    if not (0 <= n < grid.n_steps):
        raise IndexError(f"pair index {n} out of range [0, {grid.n_steps})")
    t_lo = float(grid.nodes[n])
    t_hi = float(grid.nodes[n + 1])
    return (
        sample_posterior(ep, t_lo, sched, z),
        sample_posterior(ep, t_hi, sched, z),
    )
