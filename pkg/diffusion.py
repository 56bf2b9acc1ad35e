"""
Forward perturbation and reverse step kernels for ligand coordinates (Gaussian) and atom types
(categorical). All kernels take their noise explicitly; NoiseStream hands out the draws of one
chain in a fixed order so runs replay exactly per (seed, chain id).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from errors import DegenerateDistributionError
from schedule import posterior_coeffs

DTYPE = torch.float64


class NoiseStream:
    """
    Random draws of one sampling chain or training run.

    Parameters
    ----------
    seed : int
        Run seed.
    *ids : int
        Stream identifiers (pocket index, chain index, ...), mixed into the seed.
    """

    def __init__(self, seed, *ids):
        state = np.random.SeedSequence([int(seed), *map(int, ids)]).generate_state(2, np.uint32)
        self.seed = (int(state[0]) << 31) ^ int(state[1])
        self.generator = torch.Generator().manual_seed(self.seed)

    def normal(self, *shape):
        return torch.randn(*shape, generator=self.generator, dtype=DTYPE)

    def coords(self, n):
        """Standard normal N x 3 draw used for coordinate noise."""

        return self.normal(n, 3)

    def uniform(self, *shape):
        return torch.rand(*shape, generator=self.generator, dtype=DTYPE)

    def gumbel(self, *shape):
        u = self.uniform(*shape).clamp_min(torch.finfo(DTYPE).tiny)
        return -torch.log(-torch.log(u))

    def randint(self, low, high):
        """Integer uniform on [low, high]."""

        return int(torch.randint(low, high + 1, (1,), generator=self.generator).item())

    def bernoulli(self, p):
        return bool(self.uniform(1).item() < p)

    def randperm(self, n):
        return torch.randperm(n, generator=self.generator).tolist()

    def numpy_rng(self):
        return np.random.default_rng(int(torch.randint(0, 2**62, (1,), generator=self.generator).item()))


@dataclass
class DiffusionState:
    x_t: torch.Tensor
    v_t: torch.Tensor
    t: int


def perturb_coords(x0, sched, t, noise):
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise."""

    sched.check_step(t)
    alpha_bar = float(sched.alpha_bar[t])
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * noise


def type_marginal(v0, alpha_bar):
    """Forward type marginal c = alpha_bar * v0 + (1 - alpha_bar) / K."""

    return alpha_bar * v0 + (1.0 - alpha_bar) / v0.shape[-1]


def gumbel_max(log_probs, gumbel):
    """One-hot rows of argmax(gumbel + log_probs)."""

    index = torch.argmax(gumbel + log_probs, dim=-1)
    return F.one_hot(index, log_probs.shape[-1]).to(DTYPE)


def perturb_types(v0, sched, t, gumbel):
    """
    Sample v_t from the forward type marginal with the Gumbel-max trick.

    Parameters
    ----------
    v0 : torch.Tensor
        N x K one-hot clean types.
    sched : NoiseSchedule
    t : int
        1 <= t <= T.
    gumbel : torch.Tensor
        N x K Gumbel(0, 1) draws.

    Returns
    -------
    torch.Tensor
        N x K one-hot v_t. Where the marginal is exactly v0 the true class always wins, since
        log 0 = -inf off-class.
    """

    sched.check_step(t)
    return gumbel_max(torch.log(type_marginal(v0, float(sched.alpha_bar[t]))), gumbel)


def posterior_from(v_t, v0_hat, alpha, alpha_bar_prev):
    """Normalized categorical posterior for explicit alpha_t and alpha_bar_{t-1}."""

    k = v_t.shape[-1]
    c = (alpha * v_t + (1.0 - alpha) / k) * (alpha_bar_prev * v0_hat + (1.0 - alpha_bar_prev) / k)
    total = c.sum(dim=-1, keepdim=True)
    if bool((total <= 0).any()):
        raise DegenerateDistributionError("categorical posterior has zero mass")
    return c / total


def categorical_posterior(v_t, v0_hat, sched, t):
    """
    Reverse type posterior q(v_{t-1} | v_t, v0_hat).

    Parameters
    ----------
    v_t : torch.Tensor
        N x K one-hot current types.
    v0_hat : torch.Tensor
        N x K predicted clean types on the simplex.
    sched : NoiseSchedule
    t : int

    Returns
    -------
    torch.Tensor
        N x K rows summing to 1.

    Raises
    ------
    DegenerateDistributionError
        If a row has zero unnormalized mass.
    """

    sched.check_step(t)
    return posterior_from(v_t, v0_hat, float(sched.alpha[t]), float(sched.alpha_bar[t - 1]))


def posterior_mean(x_t, x0_hat, sched, t):
    c0, ct, _ = posterior_coeffs(sched, t)
    return c0 * x0_hat + ct * x_t


def reverse_coord_step(x_t, x0_hat, sched, t, noise, guidance_disp):
    """
    One ancestral step x_{t-1} = c0 * x0_hat + ct * x_t - guidance_disp + sqrt(beta_tilde) * noise.

    guidance_disp already carries the scale and the clipping, zeros for unguided sampling.
    """

    c0, ct, beta_tilde = posterior_coeffs(sched, t)
    return c0 * x0_hat + ct * x_t - guidance_disp + math.sqrt(beta_tilde) * noise


def init_state(n, k, stream, T):
    """
    Initial noise of a chain: x_T ~ N(0, I) and v_T uniform over the K types.

    Parameters
    ----------
    n : int
        Atom count, >= 1.
    k : int
        Vocabulary size.
    stream : NoiseStream
    T : int
        Schedule length, stored as the state step.

    Returns
    -------
    DiffusionState
    """

    x = stream.coords(n)
    v = gumbel_max(torch.zeros(n, k, dtype=DTYPE), stream.gumbel(n, k))
    return DiffusionState(x, v, T)


def score_from_x0(x_t, x0_hat, alpha_bar):
    """Score of the noisy marginal in x0 parameterization: -(x_t - sqrt(alpha_bar) x0_hat) / (1 - alpha_bar)."""

    return -(x_t - math.sqrt(alpha_bar) * x0_hat) / (1.0 - alpha_bar)


def decode_types(prob, mode, gumbel):
    """
    Turn the reverse type posterior into one-hot v_{t-1}.

    Parameters
    ----------
    prob : torch.Tensor
        N x K posterior rows.
    mode : str
        "argmax" keeps the most likely class, "stochastic" samples from prob.
    gumbel : torch.Tensor
        N x K Gumbel draws, used only by the stochastic mode.
    """

    if mode == "stochastic":
        return gumbel_max(torch.log(prob), gumbel)
    return F.one_hot(torch.argmax(prob, dim=-1), prob.shape[-1]).to(DTYPE)
