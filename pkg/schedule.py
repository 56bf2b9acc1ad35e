"""
This module owns the diffusion time discretization: the sigmoid beta schedule and the
per-step coefficients used by forward perturbation and reverse sampling.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidRangeError


class ScheduleConfig(BaseModel):
    """Schedule section of the run config."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    T: int = Field(1000, ge=1)
    beta_min: float = 1e-7
    beta_max: float = 2e-2
    steepness: float = 6.0


class PosteriorCoeffs(NamedTuple):
    c0: float
    ct: float
    beta_tilde: float


def _readonly(array):
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Precomputed schedule. All arrays have length T+1 and are indexed by the step t,
    index 0 holds the convention alpha_bar[0] = 1 (beta[0] = 0).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    c0: np.ndarray
    ct: np.ndarray
    beta_tilde: np.ndarray

    def check_step(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside [1, {self.T}]")


def _logistic(z):
    return 1.0 / (1.0 + math.exp(-z))


def build_schedule(T, beta_min, beta_max, steepness):
    """
    Build the sigmoid schedule beta[t] = beta_min + (beta_max - beta_min) * logistic(steepness * (2t/T - 1)).

    Parameters
    ----------
    T : int
        Number of diffusion steps.
    beta_min, beta_max : float
        Bounds of the variance increments, 0 < beta_min <= beta_max < 1.
    steepness : float
        Slope of the logistic curve, > 0.

    Returns
    -------
    NoiseSchedule
        Immutable schedule with posterior coefficients for every step.

    Raises
    ------
    InvalidRangeError
        If any bound is violated.
    """

    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRangeError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if steepness <= 0:
        raise InvalidRangeError(f"steepness must be > 0, got {steepness}")

    beta = np.zeros(T + 1)
    alpha = np.ones(T + 1)
    alpha_bar = np.ones(T + 1)
    for t in range(1, T + 1):
        beta[t] = beta_min + (beta_max - beta_min) * _logistic(steepness * (2.0 * t / T - 1.0))
        alpha[t] = 1.0 - beta[t]
        alpha_bar[t] = alpha[t] * alpha_bar[t - 1]

    c0 = np.zeros(T + 1)
    ct = np.zeros(T + 1)
    beta_tilde = np.zeros(T + 1)
    for t in range(1, T + 1):
        one_minus_bar = 1.0 - alpha_bar[t]
        c0[t] = math.sqrt(alpha_bar[t - 1]) * beta[t] / one_minus_bar
        ct[t] = math.sqrt(alpha[t]) * (1.0 - alpha_bar[t - 1]) / one_minus_bar
        beta_tilde[t] = (1.0 - alpha_bar[t - 1]) / one_minus_bar * beta[t]

    return NoiseSchedule(
        T=T,
        beta=_readonly(beta),
        alpha=_readonly(alpha),
        alpha_bar=_readonly(alpha_bar),
        c0=_readonly(c0),
        ct=_readonly(ct),
        beta_tilde=_readonly(beta_tilde),
    )


def schedule_from_config(cfg):
    return build_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.steepness)


def posterior_coeffs(sched, t):
    """
    Coefficients of the Gaussian posterior q(x_{t-1} | x_t, x_0).

    Parameters
    ----------
    sched : NoiseSchedule
    t : int
        Step index, 1 <= t <= T.

    Returns
    -------
    PosteriorCoeffs
        (c0, ct, beta_tilde) so that the posterior mean is c0 * x0 + ct * x_t.

    Raises
    ------
    IndexError
        If t is out of range.
    """

    sched.check_step(t)
    return PosteriorCoeffs(float(sched.c0[t]), float(sched.ct[t]), float(sched.beta_tilde[t]))
