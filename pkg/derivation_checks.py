"""
Closed-form checks of the identities the guided sampler relies on, evaluated on one dimensional
Gaussian data with a linear property. Every check runs the production kernels (energy_loss,
cfg_combine, score_from_x0, posterior_coeffs) against analytic expressions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from diffusion import score_from_x0
from errors import InvalidRangeError
from guidance import cfg_combine, energy_loss
from schedule import build_schedule, posterior_coeffs

logger = logging.getLogger(__name__)

TOLERANCE = 1e-10
CFG_TOLERANCE = 1e-12
GRID_POINTS = 101


def toy_schedule(T=1000):
    # beta_min large enough that 1 - alpha_bar_1 does not amplify rounding
    return build_schedule(T, 1e-4, 2e-2, 6.0)


@dataclass(frozen=True)
class ToyGaussianWorld:
    """
    Data x0 ~ N(mu0, sigma0^2), property y(x) = a x + b observed with noise sigma_y.
    """

    mu0: float = 0.0
    sigma0: float = 1.0
    a: float = 1.0
    b: float = 0.0
    sigma_y: float = 1.0
    sched: object = field(default_factory=toy_schedule)

    def __post_init__(self):
        if self.sigma0 <= 0 or self.sigma_y <= 0:
            raise InvalidRangeError("sigma0 and sigma_y must be > 0")

    def marginal(self, t):
        """Mean and variance of x_t."""

        alpha_bar = float(self.sched.alpha_bar[t])
        return math.sqrt(alpha_bar) * self.mu0, alpha_bar * self.sigma0**2 + 1.0 - alpha_bar

    def score(self, x, t):
        mean, var = self.marginal(t)
        return -(x - mean) / var

    def optimal_x0(self, x, t):
        """E[x0 | x_t]."""

        alpha_bar = float(self.sched.alpha_bar[t])
        mean, var = self.marginal(t)
        return self.mu0 + math.sqrt(alpha_bar) * self.sigma0**2 / var * (x - mean)

    def conditional_score(self, x, t, c, s=1.0):
        """Score of P(x_t) P(y = c | x_t)^s, a Gaussian in closed form."""

        mean, var = self.marginal(t)
        precision = 1.0 / var + s * self.a**2 / self.sigma_y**2
        post_mean = (mean / var + s * self.a * (c - self.b) / self.sigma_y**2) / precision
        return -precision * (x - post_mean)

    def grid(self, t):
        mean, var = self.marginal(t)
        return np.linspace(mean - 4 * math.sqrt(var), mean + 4 * math.sqrt(var), GRID_POINTS)


def check_conditional_score_identity(world, t, c, s):
    """
    Largest deviation between the guided score grad log P(x_t) - S grad (y - c)^2 with
    S = s / (2 sigma_y^2) and the analytic conditional score.
    """

    x = world.grid(t)
    scale = s / (2.0 * world.sigma_y**2)
    _, dloss = energy_loss(world.a * x + world.b, c, "gaussian")
    guided = world.score(x, t) - scale * dloss * world.a
    return float(np.max(np.abs(guided - world.conditional_score(x, t, c, s))))


def check_cfg_identity(world, t, s, c=-2.0):
    """Largest deviation between (1 - s) u + s k and u + s (k - u) for the toy scores."""

    x = world.grid(t)
    uncond = world.score(x, t)
    cond = world.conditional_score(x, t, c)
    combined = cfg_combine(uncond, cond, s)
    return float(np.max(np.abs(combined - (uncond + s * (cond - uncond)))))


def check_x0_parameterization(world, t):
    """Largest deviation between the x0 parameterized score at the optimal x0_hat and the true score."""

    x = world.grid(t)
    alpha_bar = float(world.sched.alpha_bar[t])
    implied = score_from_x0(x, world.optimal_x0(x, t), alpha_bar)
    return float(np.max(np.abs(implied - world.score(x, t))))


def check_posterior_mean(world, t, x0=0.7):
    """
    Largest deviation between c0 x0 + ct x_t and the precision weighted Bayes combination of
    q(x_{t-1} | x0) and q(x_t | x_{t-1}).
    """

    sched = world.sched
    x = world.grid(t)
    c0, ct, _ = posterior_coeffs(sched, t)
    prior_var = 1.0 - float(sched.alpha_bar[t - 1])
    if prior_var == 0.0:
        bayes = np.full_like(x, x0)
    else:
        alpha, beta = float(sched.alpha[t]), float(sched.beta[t])
        precision = 1.0 / prior_var + alpha / beta
        bayes = (math.sqrt(float(sched.alpha_bar[t - 1])) * x0 / prior_var + math.sqrt(alpha) * x / beta) / precision
    return float(np.max(np.abs(c0 * x0 + ct * x - bayes)))


class CheckResult(NamedTuple):
    name: str
    world: int
    t: int
    deviation: float
    passed: bool


def random_world(rng, sched):
    return ToyGaussianWorld(
        mu0=rng.uniform(-2, 2),
        sigma0=rng.uniform(0.5, 2.0),
        a=rng.uniform(-2, 2),
        b=rng.uniform(-1, 1),
        sigma_y=rng.uniform(0.5, 2.0),
        sched=sched,
    )


def run_identity_suite(n_worlds=5, seed=0, T=1000):
    """
    Run every check for n_worlds random worlds at t in {1, T/4, T/2, T}.

    Returns
    -------
    list of CheckResult
    """

    rng = np.random.default_rng(seed)
    sched = toy_schedule(T)
    steps = sorted({1, max(1, T // 4), max(1, T // 2), T})
    results = []
    for index in range(n_worlds):
        world = random_world(rng, sched)
        c = rng.uniform(-3, 3)
        s = rng.uniform(0, 2)
        for t in steps:
            checks = [
                ("conditional_score", check_conditional_score_identity(world, t, c, s), TOLERANCE),
                ("cfg", check_cfg_identity(world, t, s, c), CFG_TOLERANCE),
                ("x0_parameterization", check_x0_parameterization(world, t), TOLERANCE),
                ("posterior_mean", check_posterior_mean(world, t), TOLERANCE),
            ]
            for name, deviation, tol in checks:
                results.append(CheckResult(name, index, t, deviation, deviation <= tol))
    failed = [r for r in results if not r.passed]
    logger.info("identity suite: %d checks, %d failed", len(results), len(failed))
    return results
