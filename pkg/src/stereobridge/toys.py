"""Closed-form 2-D mixture problems for end-to-end training checks.

The toy mirrors the intended use of the bridge: the far endpoint x1 is a
noisy rendition of the clean point x0 (a stand-in for an upstream encoder
output), and the model learns to refine it.  Everything stays small enough
to verify analytically.  Because the coupling is Gaussian, the posterior
over the clean point given x1 is again a Gaussian mixture, so the density,
score, and transporting velocity field of the bridge state at any time are
available in closed form.  That gives a gold-standard reference sampler to
hold the learned one-step sampler against, plus an energy-distance gauge to
compare sample sets.

The training entry point wires toy data into the consistency trainer and
reports the bookkeeping the command line and the acceptance checks need:
per-step losses, wall-clock stamps, and self-consistency spread snapshots
taken early and at the end of the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import net
from .bridge import VARIANCE_FLOOR, heun_integrate
from .consistency import (
    ConsistencyModel,
    TrainItem,
    nfe_times,
    sample_multistep,
    sample_one_step,
    self_consistency_spread,
    train_step,
)
from .schedule import (
    NoiseSchedule,
    TimeGrid,
    accumulated_variances,
    beta_at,
    bridge_coefficients,
    make_grid,
)


# ---------------------------------------------------------------------------
# Data distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture with per-component scalar deviations."""

    means: np.ndarray    # (components, dim)
    sigmas: np.ndarray   # (components,)
    weights: np.ndarray  # (components,), positive, sums to one

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] == 0:
            raise ValueError(f"means must be (components, dim), got {means.shape}")
        k = means.shape[0]
        if sigmas.shape != (k,) or weights.shape != (k,):
            raise ValueError("sigmas and weights need one entry per component")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sigmas))):
            raise ValueError("mixture parameters must be finite")
        if np.any(sigmas < 0.0):
            raise ValueError("component deviations must be nonnegative")
        if np.any(weights <= 0.0) or abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to one")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "weights", weights)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.sigmas[comp, None] * z


def default_mixture() -> GaussianMixture:
    """Two well-separated components; the standard fixture for toy runs."""
    return GaussianMixture(
        means=np.array([[-2.0, 0.0], [2.0, 0.0]]),
        sigmas=np.array([0.5, 0.5]),
        weights=np.array([0.5, 0.5]),
    )


@dataclass(frozen=True)
class ToyProblem:
    """A mixture target coupled to a blurred observation of itself.

    The far endpoint is ``x1 = x0 + prior_sigma * noise`` — the toy analogue
    of an upstream representation that roughly locates the clean point but
    lacks its detail.  ``prior_sigma = 0`` degenerates to a pinned pair.
    """

    mixture: GaussianMixture
    prior_sigma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.prior_sigma) and self.prior_sigma >= 0.0):
            raise ValueError("prior_sigma must be finite and nonnegative")

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def draw_pairs(self, n: int, rng: np.random.Generator):
        """Coupled (x0, x1) endpoint arrays, each (n, dim)."""
        x0 = self.mixture.sample(n, rng)
        x1 = x0 + self.prior_sigma * rng.standard_normal(x0.shape)
        return x0, x1

    def draw_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Fresh far endpoints only, as seen at generation time."""
        _, x1 = self.draw_pairs(n, rng)
        return x1


def default_problem() -> ToyProblem:
    return ToyProblem(mixture=default_mixture(), prior_sigma=1.0)


def draw_training_items(problem: ToyProblem, n: int, rng: np.random.Generator):
    """Coupled endpoint pairs as training items.

    The far endpoint doubles as the conditioning vector so the denoiser
    sees it explicitly, mirroring how it is queried at sampling time.
    """
    x0, x1 = problem.draw_pairs(n, rng)
    return [TrainItem(x0=x0[i], x1=x1[i], cond=x1[i].copy()) for i in range(n)]


# ---------------------------------------------------------------------------
# Closed-form bridge marginal
# ---------------------------------------------------------------------------

def posterior_mixing(problem: ToyProblem, x1):
    """Mixture representation of the clean point given the far endpoint.

    Conjugate update per component j (all isotropic):

        weight_j(x1) ∝ w_j · N(x1; m_j, (σ_j² + σ_p²) I)
        mean_j(x1)   = (σ_p² m_j + σ_j² x1) / (σ_j² + σ_p²)
        var_j        = σ_j² σ_p² / (σ_j² + σ_p²)

    Returns ``(log_weights (n, k), means (n, k, dim), variances (k,))``.
    """
    mix = problem.mixture
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x1.shape[1] != mix.dim:
        raise ValueError(f"endpoints have dim {x1.shape[1]}, mixture has {mix.dim}")
    s2 = mix.sigmas ** 2
    p2 = problem.prior_sigma ** 2
    raw_total = s2 + p2
    total = np.maximum(raw_total, VARIANCE_FLOOR)
    diff = x1[:, None, :] - mix.means[None, :, :]
    log_like = -0.5 * mix.dim * np.log(2.0 * np.pi * total)[None, :] \
        - 0.5 * np.sum(diff * diff, axis=-1) / total[None, :]
    log_w = np.log(mix.weights)[None, :] + log_like
    log_w = log_w - logsumexp(log_w, axis=1, keepdims=True)
    conjugate = (p2 * mix.means[None, :, :] + s2[None, :, None] * x1[:, None, :]) \
        / total[None, :, None]
    # A zero-width component paired with zero prior noise pins the clean
    # point at the component mean; the conjugate ratio would return 0/floor.
    degenerate = np.broadcast_to(mix.means[None, :, :], conjugate.shape)
    means = np.where(raw_total[None, :, None] > 0.0, conjugate, degenerate)
    variances = s2 * p2 / total
    return log_w, means, variances


def _state_mixture(t, x1, problem, sched):
    """Log weights, means, and variances of the bridge-state mixture at t."""
    a, b, cap_sigma2 = bridge_coefficients(sched, float(t))
    log_w, post_means, post_vars = posterior_mixing(problem, x1)
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    means = a * post_means + b * x1[:, None, :]
    variances = np.maximum(a * a * post_vars + cap_sigma2, VARIANCE_FLOOR)
    return log_w, means, variances


def _component_logpdfs(x, t, x1, problem, sched):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != problem.dim:
        raise ValueError(f"points have dim {x.shape[1]}, mixture has {problem.dim}")
    log_w, means, variances = _state_mixture(t, x1, problem, sched)
    diff = x[:, None, :] - means
    ssq = np.sum(diff * diff, axis=-1)
    log_comp = (
        log_w
        - 0.5 * problem.dim * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * ssq / variances[None, :]
    )
    return log_comp, diff, variances


def bridge_marginal_logpdf(x, t, x1, problem: ToyProblem, sched: NoiseSchedule):
    """Log density of the bridge state with the clean endpoint integrated out.

    The clean point is mixed over its posterior given ``x1``, so component j
    of the state mixture has mean a·mean_j(x1) + b·x1 and isotropic variance
    a²·var_j + Σ².  ``x`` may be a vector or a (n, dim) batch; ``x1``
    broadcasts against it.
    """
    squeeze = np.asarray(x).ndim == 1
    log_comp, _, _ = _component_logpdfs(x, t, x1, problem, sched)
    out = logsumexp(log_comp, axis=1)
    return float(out[0]) if squeeze else out


def bridge_marginal_score(x, t, x1, problem: ToyProblem, sched: NoiseSchedule):
    """Gradient of :func:`bridge_marginal_logpdf` in the state argument.

    Computed through component responsibilities rather than by
    differentiating the log density numerically, so tests can play the two
    routes against each other.
    """
    squeeze = np.asarray(x).ndim == 1
    log_comp, diff, variances = _component_logpdfs(x, t, x1, problem, sched)
    log_resp = log_comp - logsumexp(log_comp, axis=1, keepdims=True)
    resp = np.exp(log_resp)
    score = -np.sum(resp[:, :, None] * diff / variances[None, :, None], axis=1)
    return score[0] if squeeze else score


def sample_bridge_marginal(t, x1, problem: ToyProblem, sched: NoiseSchedule,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw exact bridge states at time t, one per row of ``x1``."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    log_w, means, variances = _state_mixture(t, x1, problem, sched)
    cum = np.cumsum(np.exp(log_w), axis=1)
    u = rng.random((x1.shape[0], 1))
    comp = np.minimum((u > cum).sum(axis=1), problem.mixture.n_components - 1)
    rows = np.arange(x1.shape[0])
    centers = means[rows, comp]
    scales = np.sqrt(variances[comp])
    return centers + scales[:, None] * rng.standard_normal(x1.shape)


# ---------------------------------------------------------------------------
# Reference ODE sampler
# ---------------------------------------------------------------------------

def marginal_ode_drift(x, t, x1, problem: ToyProblem, sched: NoiseSchedule):
    """Velocity field whose flow preserves the bridge marginals over time.

    The bridge toward x1 follows dx = β(t)(x1 − x)/σ̄² dt + √β(t) dW
    regardless of which clean point it started from; only the initial
    distribution differs.  The deterministic flow with the same time
    marginals therefore subtracts half the squared diffusion times the
    marginal score:

        v(x, t) = β(t)(x1 − x)/σ̄²(t) − β(t)/2 · ∇log q_t(x | x1).
    """
    beta = float(beta_at(sched, float(t)))
    _, sigma_bar2 = accumulated_variances(sched, float(t))
    sigma_bar2 = max(float(sigma_bar2), VARIANCE_FLOOR)
    score = bridge_marginal_score(x, t, x1, problem, sched)
    return beta * (x1 - x) / sigma_bar2 - 0.5 * beta * score


def oracle_ode_sample(
    problem: ToyProblem,
    x1: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    t_start: float = 0.999,
    t_end: float = 0.001,
    steps: int = 256,
) -> np.ndarray:
    """Reference sampler: exact start marginal plus marginal-score flow.

    Draws the bridge state at ``t_start`` in closed form and integrates
    :func:`marginal_ode_drift` down to ``t_end`` with the shared
    second-order integrator.  Only analytic quantities enter, making this a
    gold-standard baseline for learned samplers.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    start = sample_bridge_marginal(t_start, x1, problem, sched, rng)

    def drift(x, t):
        return marginal_ode_drift(x, t, x1, problem, sched)

    return heun_integrate(drift, start, float(t_start), float(t_end), int(steps))


# ---------------------------------------------------------------------------
# Sample-set comparison
# ---------------------------------------------------------------------------

def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Energy distance between two sample sets (U-statistic, clipped at 0).

    Estimates E(X, Y)² = 2·E‖X − Y‖ − E‖X − X′‖ − E‖Y − Y′‖ with the
    within-sample means taken over distinct pairs, then takes the square
    root; the population quantity is a metric between distributions and is
    zero iff they agree.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"sample dims differ: {x.shape[1]} vs {y.shape[1]}")
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("need at least two points per sample set")
    cross = float(cdist(x, y).sum()) / (n * m)
    within_x = float(cdist(x, x).sum()) / (n * (n - 1))
    within_y = float(cdist(y, y).sum()) / (m * (m - 1))
    return float(np.sqrt(max(2.0 * cross - within_x - within_y, 0.0)))


# ---------------------------------------------------------------------------
# End-to-end training run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTrainResult:
    """Outcome of one toy training run."""

    model: ConsistencyModel
    losses: np.ndarray       # (steps,) pre-update loss per step
    wall_ms: np.ndarray      # (steps,) cumulative wall clock after each step
    spread_probe: float      # mean self-consistency spread at probe_step
    spread_final: float      # same probes, measured after the last step
    probe_step: int
    wall_s: float


def run_toy_training(
    problem: ToyProblem | None = None,
    *,
    steps: int = 5000,
    batch_size: int = 16,
    seed: int = 21,
    sched: NoiseSchedule | None = None,
    grid: TimeGrid | None = None,
    hidden: int = 192,
    depth: int = 4,
    time_embed_dim: int = 32,
    sigma_data: float = 1.0,
    lr: float = 3e-3,
    final_lr: float = 1e-5,
    flat_fraction: float = 0.6,
    adam_beta2: float = 0.99,
    ema_decay: float = 0.8,
    probe_step: int = 100,
    n_probe_items: int = 1,
    step_callback=None,
) -> ToyTrainResult:
    """Train the consistency denoiser on a toy problem end to end.

    The defaults are the reference recipe used by the command line and the
    acceptance checks; they were tuned so a short CPU run reaches one-step
    sample quality close to the analytic reference sampler.  The learning
    rate holds at ``lr`` for the first ``flat_fraction`` of the run and then
    ramps linearly down to ``final_lr``.

    Deterministic for a fixed argument set: one generator seeded from
    ``seed`` drives initialization, data, grid-index, and noise draws, and a
    separate fixed stream supplies the spread probes so the snapshots at
    ``probe_step`` and at the end measure the same trajectories (one fixed
    item's shared-noise trajectory by default).

    ``step_callback(step, model, loss, wall_ms)`` fires after every
    optimizer step (steps are 1-based); a trainer failure propagates after
    the callback has seen the last completed step, so callers can retain
    their most recent good state.
    """
    if problem is None:
        problem = default_problem()
    if sched is None:
        sched = NoiseSchedule()
    if grid is None:
        grid = make_grid(12)
    if steps < 1:
        raise ValueError("steps must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if not 1 <= probe_step <= steps:
        raise ValueError(f"probe_step {probe_step} must fall inside the run")
    if not 0.0 < flat_fraction <= 1.0:
        raise ValueError("flat_fraction must lie in (0, 1]")

    rng = np.random.default_rng(seed)
    params = net.init_denoiser(
        rng,
        data_dim=problem.dim,
        cond_dim=problem.dim,
        hidden=hidden,
        depth=depth,
        time_embed_dim=time_embed_dim,
    )
    model = ConsistencyModel(
        online=params,
        target=net.ema_from(params, decay=ema_decay),
        sched=sched,
        grid=grid,
        sigma_data=sigma_data,
    )
    opt = net.init_adam(params, lr=lr, beta2=adam_beta2)

    probe_rng = np.random.default_rng((seed, 0x534E4150))
    probe_items = draw_training_items(problem, n_probe_items, probe_rng)
    probe_noise = [probe_rng.standard_normal(problem.dim) for _ in probe_items]

    def probe(m: ConsistencyModel) -> float:
        spreads = [
            self_consistency_spread(m, item, z)
            for item, z in zip(probe_items, probe_noise)
        ]
        return float(np.mean(spreads))

    losses = np.zeros(steps)
    wall_ms = np.zeros(steps)
    spread_probe = np.nan
    t_begin = time.perf_counter()
    for step in range(1, steps + 1):
        frac = (step - 1) / max(steps - 1, 1)
        if frac < flat_fraction or flat_fraction >= 1.0:
            cur_lr = lr
        else:
            cur_lr = lr + (final_lr - lr) * (frac - flat_fraction) / (1.0 - flat_fraction)
        opt = replace(opt, lr=cur_lr)
        items = draw_training_items(problem, batch_size, rng)
        model, opt, loss = train_step(model, items, opt, rng)
        losses[step - 1] = loss
        wall_ms[step - 1] = 1e3 * (time.perf_counter() - t_begin)
        if step_callback is not None:
            step_callback(step, model, loss, float(wall_ms[step - 1]))
        if step == probe_step:
            spread_probe = probe(model)
    spread_final = probe(model)
    return ToyTrainResult(
        model=model,
        losses=losses,
        wall_ms=wall_ms,
        spread_probe=float(spread_probe),
        spread_final=spread_final,
        probe_step=probe_step,
        wall_s=time.perf_counter() - t_begin,
    )


def toy_sample(model: ConsistencyModel, problem: ToyProblem, n: int,
               rng: np.random.Generator, nfe: int = 1) -> np.ndarray:
    """Generate ``n`` points from fresh far endpoints.

    ``nfe`` = 1 uses the single-evaluation sampler; larger budgets spread
    their calls over the grid via :func:`nfe_times`.  The far endpoint is
    passed as conditioning, matching training.
    """
    x1 = problem.draw_prior(n, rng)
    if nfe == 1:
        z = rng.standard_normal(x1.shape)
        return sample_one_step(model, x1, x1, z)
    times = nfe_times(model.grid, nfe)
    return sample_multistep(model, x1, x1, times, rng)
