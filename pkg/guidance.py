"""
Guided sampling. Classifier guidance shifts every reverse posterior mean by the clipped,
scaled gradient of a property loss; classifier-free guidance mixes conditional and null
condition predictions of one denoiser; multi-constraint guidance weights affinity, QED and SA.
"""

import logging
import math
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from diffusion import (
    DiffusionState,
    categorical_posterior,
    decode_types,
    init_state,
    posterior_mean,
    reverse_coord_step,
)
from errors import ConfigError, InvalidRangeError, NonFiniteError
from molsys import MoleculeCloud, center_complex
from net import DTYPE, PocketTensors, regress, score_forward

logger = logging.getLogger(__name__)

# affinity channel rescaling so kcal/mol values land near [0, 1]
AFFINITY_SCALE = -1.0 / 12.0

MODES = ("none", "classifier", "classifier_free", "multi_constraint", "conditional")


class GuidanceConfig(BaseModel):
    """Guidance section of the run config."""

    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")

    mode: Literal["none", "classifier", "classifier_free", "multi_constraint", "conditional"] = "none"
    s: float = Field(0.0, ge=0.0)
    target_deltaG: float = -16.0
    targets_multi: tuple[float, float, float] = (-16.0, 1.0, 1.0)
    weights_multi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    clip: float = Field(1.0, gt=0.0)
    clip_mode: Literal["elementwise", "norm"] = "elementwise"
    loss_kind: Literal["gaussian", "exponential"] = "gaussian"
    grad_path: Literal["approx_identity", "full_chain"] = "approx_identity"
    classify_on: Literal["x0_hat", "x_t"] = "x0_hat"
    classifier_types: Literal["onehot", "simplex"] = "onehot"
    stop_at_step: Optional[int] = Field(None, ge=1)
    type_sampling: Literal["argmax", "stochastic"] = "argmax"
    null_condition: Literal["mask", "sentinel"] = "mask"
    # valid labels rescale to g_norm >= 0, so a negative sentinel never collides with a target
    null_sentinel: float = Field(-1.0, lt=0.0)
    check_identities: bool = False

    @model_validator(mode="after")
    def _check_weights(self):
        if any(w < 0 for w in self.weights_multi):
            raise ValueError("weights_multi must be nonnegative")
        return self

    @property
    def uses_classifier(self):
        return self.mode in ("classifier", "multi_constraint")

    @property
    def uses_condition(self):
        return self.mode in ("classifier_free", "conditional")


def _sign(value):
    if isinstance(value, torch.Tensor):
        return torch.sign(value)
    return float(np.sign(value))


def energy_loss(y, c, kind):
    """
    Energy of a property prediction with respect to its target.

    Parameters
    ----------
    y : float or torch.Tensor
        Prediction.
    c : float
        Target.
    kind : str
        "gaussian" gives the squared error, "exponential" the absolute error.

    Returns
    -------
    value
        Loss value.
    derivative
        d value / d y; the subgradient at y = c is 0.
    """

    diff = y - c
    if kind == "gaussian":
        return diff * diff, 2 * diff
    if kind == "exponential":
        return abs(diff), _sign(diff)
    raise InvalidRangeError(f"unknown loss kind {kind}")


def multi_loss(y, targets, weights, kind):
    """
    Weighted sum of per-channel energies for (affinity_scaled, qed, sa).

    Returns
    -------
    value
        sum_k w_k L(y_k, target_k).
    grad
        Per-channel weighted derivatives (array or tensor of length 3).
    """

    value = 0.0
    grads = []
    for k in range(3):
        v, g = energy_loss(y[k], targets[k], kind)
        value = value + weights[k] * v
        grads.append(weights[k] * g)
    if isinstance(y, torch.Tensor):
        return value, torch.stack([torch.as_tensor(g, dtype=DTYPE) for g in grads])
    return value, np.array(grads, dtype=np.float64)


def clip_elementwise(d, clip):
    """Clamp every component of d to [-clip, clip]."""

    if isinstance(d, torch.Tensor):
        return torch.clamp(d, -clip, clip)
    return np.clip(d, -clip, clip)


def clip_norm(d, clip):
    """Rescale rows of d whose Euclidean norm exceeds clip."""

    norms = torch.linalg.norm(d, dim=-1, keepdim=True)
    return d * torch.clamp(clip / torch.clamp_min(norms, torch.finfo(DTYPE).tiny), max=1.0)


def cfg_combine(x0_uncond, x0_cond, s):
    """Classifier-free combination (1 - s) * x0_uncond + s * x0_cond."""

    return (1 - s) * x0_uncond + s * x0_cond


def scaled_targets(cfg):
    """Multi-constraint targets with the affinity channel rescaled like the regressor output."""

    deltaG, qed, sa = cfg.targets_multi
    return (deltaG * AFFINITY_SCALE, qed, sa)


def guidance_loss(cfg):
    """Scalar loss of the regressor output tensor used for classifier guidance."""

    if cfg.mode == "multi_constraint":
        targets = scaled_targets(cfg)
        return lambda y: multi_loss(y, targets, cfg.weights_multi, cfg.loss_kind)[0]
    return lambda y: energy_loss(y[0], cfg.target_deltaG, cfg.loss_kind)[0]


def _classifier_types(v0_hat, cfg):
    if cfg.classifier_types == "simplex":
        return v0_hat
    return decode_types(v0_hat, "argmax", None)


def guidance_displacement(classifier, pocket, state, x0_hat, v0_hat, sched, t, cfg, x0_fn=None):
    """
    Classifier guidance term subtracted from the reverse posterior mean.

    Parameters
    ----------
    classifier : ParameterSet or callable regressor
    pocket : PocketTensors
        Centered pocket.
    state : DiffusionState
        Current noisy ligand.
    x0_hat : torch.Tensor
        Denoiser prediction for the current step.
    v0_hat : torch.Tensor
        Predicted clean types on the simplex.
    sched : NoiseSchedule
    t : int
    cfg : GuidanceConfig
    x0_fn : callable or None
        Maps x_t to x0_hat with autograd enabled, needed by grad_path = full_chain.

    Returns
    -------
    torch.Tensor
        N x 3 displacement clip((beta_t / sqrt(alpha_t)) * s * grad).

    Raises
    ------
    NonFiniteError
        If the gradient is not finite.
    """

    loss = guidance_loss(cfg)
    if cfg.classify_on == "x_t":
        x_in = state.x_t.detach().clone().requires_grad_(True)
        value = loss(regress(classifier, x_in, state.v_t, pocket))
        leaf = x_in
    elif cfg.grad_path == "full_chain":
        if x0_fn is None:
            raise ConfigError("full_chain guidance needs the denoiser")
        leaf = state.x_t.detach().clone().requires_grad_(True)
        value = loss(regress(classifier, x0_fn(leaf), _classifier_types(v0_hat, cfg), pocket))
    else:
        # Jacobian of x0_hat with respect to x_t taken as identity
        leaf = x0_hat.detach().clone().requires_grad_(True)
        value = loss(regress(classifier, leaf, _classifier_types(v0_hat, cfg), pocket))

    if value.requires_grad:
        (grad,) = torch.autograd.grad(value, leaf, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(state.x_t)
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f"non-finite guidance gradient at step {t}", step=t)

    term = (float(sched.beta[t]) / math.sqrt(float(sched.alpha[t]))) * cfg.s * grad.detach()
    disp = clip_norm(term, cfg.clip) if cfg.clip_mode == "norm" else clip_elementwise(term, cfg.clip)
    # normalizes negative zeros
    return disp + 0.0


def condition_vector(deltaG):
    """Denoiser condition channels (g_norm, mask) for a target binding energy."""

    return torch.tensor([deltaG * AFFINITY_SCALE, 1.0], dtype=DTYPE)


def null_condition(cfg):
    if cfg.null_condition == "sentinel":
        return torch.tensor([cfg.null_sentinel, 1.0], dtype=DTYPE)
    return torch.zeros(2, dtype=DTYPE)


def _denoiser_channels(denoiser):
    config = getattr(denoiser, "config", None)
    if config is not None:
        return config.cond_channels
    return getattr(denoiser, "cond_channels", 0)


def check_models(denoiser, classifier, cfg):
    """
    Validate the model combination for a guidance mode.

    Raises
    ------
    ConfigError
        If a classifier is missing or superfluous, or the denoiser lacks condition channels.
    """

    if cfg.uses_classifier and classifier is None:
        raise ConfigError(f"mode {cfg.mode} needs a classifier")
    if not cfg.uses_classifier and classifier is not None:
        raise ConfigError(f"mode {cfg.mode} does not use a classifier")
    if cfg.uses_condition and _denoiser_channels(denoiser) != 2:
        raise ConfigError(f"mode {cfg.mode} needs a denoiser trained with condition channels")


def sample_guided(denoiser, classifier, pocket, n_atoms, sched, cfg, stream, on_step=None):
    """
    Generate one ligand for a pocket with the configured guidance.

    Parameters
    ----------
    denoiser : ParameterSet or callable denoiser
    classifier : ParameterSet, callable regressor or None
        Required iff the mode is classifier or multi_constraint.
    pocket : PocketCloud
        Pocket in its original frame.
    n_atoms : int
        Ligand size.
    sched : NoiseSchedule
    cfg : GuidanceConfig
    stream : NoiseStream
        Noise of this chain. Every step draws coordinate noise and Gumbel noise, in that order.
    on_step : callable or None
        Called with each DiffusionState (centered frame), starting with the initial noise.

    Returns
    -------
    MoleculeCloud
        Ligand at t = 0, or at the step where stop_at_step ends the loop, moved back into the
        pocket frame.

    Raises
    ------
    ConfigError
        If the model combination does not fit the mode.
    NonFiniteError
        If coordinates become non-finite.
    """

    check_models(denoiser, classifier, cfg)
    centered, _, offset = center_complex(pocket)
    pocket_t = PocketTensors.from_cloud(centered)
    k = len(pocket.elements)
    T = sched.T
    steps = T if cfg.stop_at_step is None else min(cfg.stop_at_step, T)

    has_channels = _denoiser_channels(denoiser) == 2
    cond = condition_vector(cfg.target_deltaG) if has_channels else None
    null = null_condition(cfg) if has_channels else None

    def predict(x_t, v_t, t, condition):
        return score_forward(denoiser, x_t, v_t, t, pocket_t, condition, num_steps=T)

    state = init_state(n_atoms, k, stream, T)
    if on_step is not None:
        on_step(state)

    with torch.no_grad():
        for t in range(T, T - steps, -1):
            if cfg.mode == "classifier_free":
                x0_u, logits_u = predict(state.x_t, state.v_t, t, null)
                x0_c, logits_c = predict(state.x_t, state.v_t, t, cond)
                x0_hat = cfg_combine(x0_u, x0_c, cfg.s)
                logits = cfg_combine(logits_u, logits_c, cfg.s)
            else:
                x0_hat, logits = predict(state.x_t, state.v_t, t, cond if cfg.mode == "conditional" else null)
            v0_hat = torch.softmax(logits, dim=-1)

            if cfg.uses_classifier:
                def x0_fn(x_t, v_t=state.v_t, t=t):
                    return predict(x_t, v_t, t, null)[0]

                with torch.enable_grad():
                    disp = guidance_displacement(
                        classifier, pocket_t, state, x0_hat, v0_hat, sched, t, cfg, x0_fn=x0_fn
                    )
            else:
                disp = torch.zeros_like(state.x_t)

            noise = stream.coords(n_atoms)
            gumbel = stream.gumbel(n_atoms, k)
            x_prev = reverse_coord_step(state.x_t, x0_hat, sched, t, noise, disp)
            if cfg.check_identities:
                guided = reverse_coord_step(state.x_t, x0_hat, sched, t, torch.zeros_like(noise), disp)
                if not torch.equal(guided, posterior_mean(state.x_t, x0_hat, sched, t) - disp):
                    raise NonFiniteError(f"guided mean identity broken at step {t}", step=t)
            if not torch.isfinite(x_prev).all():
                raise NonFiniteError(f"non-finite coordinates at step {t}", step=t)

            prob = categorical_posterior(state.v_t, v0_hat, sched, t)
            v_prev = decode_types(prob, cfg.type_sampling, gumbel)
            state = DiffusionState(x_prev, v_prev, t - 1)
            if on_step is not None:
                on_step(state)

    return MoleculeCloud(state.x_t.numpy() + offset, state.v_t.numpy(), pocket.elements)
