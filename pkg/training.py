"""
Training loops: the property regressor with loss masking of invalid binding labels, the
unconditional diffusion objective and the classifier-free variant with condition dropout.
"""

import hashlib
import logging
from typing import Literal, NamedTuple

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.optim.lr_scheduler import ReduceLROnPlateau
from tqdm import tqdm

from diffusion import NoiseStream, categorical_posterior, perturb_coords, perturb_types
from errors import ConfigError, DivergenceError
from guidance import AFFINITY_SCALE, condition_vector
from molsys import center_complex
from net import DTYPE, ParameterSet, PocketTensors, build_network, module_gradient, regress, score_forward

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """Training section of the run config."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(5e-4, gt=0.0)
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    weight_decay: float = Field(0.0, ge=0.0)
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    lr_min: float = 1e-6
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    p_unconditional: float = Field(0.1, ge=0.0, le=1.0)
    kl_weight: float = 100.0
    classifier_noise_mode: Literal["clean_x0", "noisy_xt"] = "clean_x0"
    loss_kind: Literal["mse", "mae"] = "mse"
    weights_multi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 0


class LogRow(NamedTuple):
    epoch: int
    split: str
    loss: float
    lr: float


class Example(NamedTuple):
    pocket: PocketTensors
    x: torch.Tensor
    v: torch.Tensor
    labels: tuple


def classifier_loss(pred, truth_deltaG):
    """
    Masked squared error of a predicted binding energy.

    Parameters
    ----------
    pred : float or torch.Tensor
    truth_deltaG : float
        Label in kcal/mol; positive labels are invalid.

    Returns
    -------
    float or torch.Tensor
        (pred - truth)^2, or exactly 0 without gradient when truth > 0.
    """

    if truth_deltaG > 0:
        return torch.zeros_like(pred).detach() if isinstance(pred, torch.Tensor) else 0.0
    return (pred - truth_deltaG) ** 2


def regression_loss(y, labels, train_cfg):
    """
    Loss of a regressor output against the labels of one record. Single output heads use
    classifier_loss; three output heads weight (affinity, qed, sa) with the affinity channel
    rescaled on both sides and masked when invalid.
    """

    if y.shape[0] == 1:
        return classifier_loss(y[0], labels[0])
    deltaG, qed, sa = labels
    targets = (deltaG * AFFINITY_SCALE, qed, sa)

    def err(a, b):
        return (a - b) ** 2 if train_cfg.loss_kind == "mse" else torch.abs(a - b)

    total = torch.zeros((), dtype=DTYPE)
    for k in range(3):
        if k == 0 and deltaG > 0:
            continue
        total = total + train_cfg.weights_multi[k] * err(y[k], targets[k])
    return total


def is_validation(index, fraction):
    """Deterministic split of record indices by hash."""

    digest = hashlib.blake2b(str(index).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2**64 < fraction


def split_indices(n, fraction):
    val = [i for i in range(n) if is_validation(i, fraction)]
    train = [i for i in range(n) if not is_validation(i, fraction)]
    if not train:
        train, val = val, []
    return train, val


def to_example(record):
    pocket, ligand, _ = center_complex(record.pocket, record.ligand)
    return Example(
        PocketTensors.from_cloud(pocket),
        torch.tensor(ligand.x, dtype=DTYPE),
        torch.tensor(ligand.v, dtype=DTYPE),
        tuple(record.labels),
    )


def make_optimizer(module, train_cfg):
    """Adam with a plateau scheduler on the validation loss."""

    optimizer = torch.optim.Adam(
        module.parameters(),
        lr=train_cfg.lr,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        weight_decay=train_cfg.weight_decay,
    )
    scheduler = ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=train_cfg.plateau_factor,
        patience=train_cfg.plateau_patience,
        min_lr=train_cfg.lr_min,
    )
    return optimizer, scheduler


def _assign_grad(module, flat):
    offset = 0
    for p in module.parameters():
        n = p.numel()
        p.grad = flat[offset:offset + n].view_as(p).clone()
        offset += n


def _current_lr(optimizer):
    return float(optimizer.param_groups[0]["lr"])


def _batches(order, size):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _check_finite(value, epoch, split):
    if not torch.isfinite(torch.as_tensor(value)):
        raise DivergenceError(f"{split} loss became non-finite in epoch {epoch}")


def batch_gradient(module, examples, train_cfg):
    """
    Mean gradient over the examples that carry a loss.

    Returns
    -------
    torch.Tensor or None
        Flat gradient divided by the number of contributing examples, None if all are masked.
    """

    contributing = []

    def loss(mod, example):
        value = regression_loss(regress(mod, example.x, example.v, example.pocket), example.labels, train_cfg)
        contributing.append(bool(value.requires_grad))
        return value

    grad = module_gradient(module, examples, loss)
    n_valid = sum(contributing)
    if n_valid == 0:
        return None
    return grad / n_valid


def regression_eval(module, examples, train_cfg):
    """Mean loss over examples with a valid label, nan when there are none."""

    values = []
    with torch.no_grad():
        for example in examples:
            if example.labels[0] > 0 and _out_dim(module) == 1:
                continue
            y = regress(module, example.x, example.v, example.pocket)
            values.append(float(regression_loss(y, example.labels, train_cfg)))
    return sum(values) / len(values) if values else float("nan")


def _out_dim(module):
    return module.head[-1].out_features


def _noisy(example, sched, stream):
    t = stream.randint(1, sched.T)
    x_t = perturb_coords(example.x, sched, t, stream.coords(example.x.shape[0]))
    return example._replace(x=x_t)


def train_classifier(dataset, net_cfg, train_cfg, stream=None, sched=None):
    """
    Fit the property regressor with Adam and masked losses.

    Parameters
    ----------
    dataset : list of ComplexRecord
    net_cfg : NetConfig
        Regressor config; out_dim 3 trains the multi-constraint head.
    train_cfg : TrainConfig
    stream : NoiseStream or None
        Shuffling and perturbation noise, derived from train_cfg.seed if omitted.
    sched : NoiseSchedule or None
        Required when classifier_noise_mode is noisy_xt.

    Returns
    -------
    ParameterSet
        Final parameters.
    list of LogRow
        Per-epoch train and validation losses.

    Raises
    ------
    ConfigError
        If the dataset is empty or a noisy mode lacks a schedule.
    DivergenceError
        If a loss becomes non-finite.
    """

    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    if net_cfg.role != "regressor":
        raise ConfigError("train_classifier needs a regressor config")
    noisy = train_cfg.classifier_noise_mode == "noisy_xt"
    if noisy and sched is None:
        raise ConfigError("noisy_xt classifier training needs a schedule")
    stream = stream or NoiseStream(train_cfg.seed, 0)

    examples = [to_example(r) for r in dataset]
    train_idx, val_idx = split_indices(len(examples), train_cfg.val_fraction)
    module = build_network(net_cfg, seed=train_cfg.seed).requires_grad_(True)
    optimizer, scheduler = make_optimizer(module, train_cfg)
    log = []

    for epoch in tqdm(range(train_cfg.epochs), desc="classifier", disable=None):
        order = [train_idx[i] for i in stream.randperm(len(train_idx))]
        for chunk in _batches(order, train_cfg.batch_size):
            batch = [examples[i] for i in chunk]
            if noisy:
                batch = [_noisy(e, sched, stream) for e in batch]
            grad = batch_gradient(module, batch, train_cfg)
            if grad is None:
                continue
            optimizer.zero_grad()
            _assign_grad(module, grad)
            optimizer.step()

        train_loss = regression_eval(module, [examples[i] for i in train_idx], train_cfg)
        val_loss = regression_eval(module, [examples[i] for i in val_idx], train_cfg)
        for split, value in (("train", train_loss), ("val", val_loss)):
            if value == value:
                _check_finite(value, epoch, split)
        log.append(LogRow(epoch, "train", train_loss, _current_lr(optimizer)))
        if val_idx:
            log.append(LogRow(epoch, "val", val_loss, _current_lr(optimizer)))
        monitor = val_loss if val_loss == val_loss else train_loss
        if monitor == monitor:
            scheduler.step(monitor)
        logger.info("classifier epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)

    return ParameterSet.from_module(net_cfg, module), log


def draw_condition(labels, condition_mode, p_unconditional, stream, null):
    """
    Condition channels for one training example. With condition_mode cfg the condition is
    replaced by the null condition with probability p_unconditional, and always for masked labels.
    """

    if condition_mode == "off":
        return None
    dropped = stream.bernoulli(p_unconditional)
    if dropped or labels[0] > 0:
        return null
    return condition_vector(labels[0])


def kl_categorical(p, q):
    """Row-summed KL(p || q) with 0 log 0 = 0."""

    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(-1)


def diffusion_loss(batch, denoiser, sched, stream, kl_weight, condition_mode="off", p_unconditional=0.1, null=None):
    """
    Denoising objective averaged over a batch.

    Parameters
    ----------
    batch : list of Example
        Centered complexes.
    denoiser : ParameterSet, ScoreNet or callable denoiser
    sched : NoiseSchedule
    stream : NoiseStream
        Per example draws: t, coordinate noise, Gumbel noise, then the dropout coin.
    kl_weight : float
        Weight of the type KL term.
    condition_mode : str
        "off" for an unconditional denoiser, "cfg" for condition dropout training.
    p_unconditional : float
    null : torch.Tensor or None
        Null condition channels, zeros by default.

    Returns
    -------
    torch.Tensor
        Mean over the batch of per-atom MSE(x0, x0_hat) + kl_weight * mean per-atom
        KL(q(v_t, v0) || q(v_t, v0_hat)).
    """

    if null is None:
        null = torch.zeros(2, dtype=DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for example in batch:
        n, k = example.v.shape
        t = stream.randint(1, sched.T)
        x_t = perturb_coords(example.x, sched, t, stream.coords(n))
        v_t = perturb_types(example.v, sched, t, stream.gumbel(n, k))
        cond = draw_condition(example.labels, condition_mode, p_unconditional, stream, null)
        x0_hat, logits = score_forward(denoiser, x_t, v_t, t, example.pocket, cond, num_steps=sched.T)
        mse = ((example.x - x0_hat) ** 2).sum(-1).mean()
        true_post = categorical_posterior(v_t, example.v, sched, t)
        pred_post = categorical_posterior(v_t, torch.softmax(logits, dim=-1), sched, t)
        total = total + mse + kl_weight * kl_categorical(true_post, pred_post).mean()
    return total / max(len(batch), 1)


def train_diffusion(dataset, net_cfg, train_cfg, sched, stream=None, condition_mode="off", null=None):
    """
    Train a denoiser.

    Parameters
    ----------
    dataset : list of ComplexRecord
    net_cfg : NetConfig
        Denoiser config; cond_channels must be 2 exactly when condition_mode is cfg.
    train_cfg : TrainConfig
    sched : NoiseSchedule
    stream : NoiseStream or None
    condition_mode : str
        "off" or "cfg".
    null : torch.Tensor or None
        Null condition channels substituted on dropout, zeros by default. Sampling must use the
        same null condition.

    Returns
    -------
    ParameterSet
    list of LogRow

    Raises
    ------
    ConfigError
        If config and condition mode disagree or the dataset is empty.
    DivergenceError
        If the loss becomes non-finite.
    """

    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    if net_cfg.role != "denoiser":
        raise ConfigError("train_diffusion needs a denoiser config")
    if (condition_mode == "cfg") != (net_cfg.cond_channels == 2):
        raise ConfigError("condition channels must be 2 exactly for cfg training")
    stream = stream or NoiseStream(train_cfg.seed, 1)

    examples = [to_example(r) for r in dataset]
    train_idx, val_idx = split_indices(len(examples), train_cfg.val_fraction)
    module = build_network(net_cfg, seed=train_cfg.seed).requires_grad_(True)
    optimizer, scheduler = make_optimizer(module, train_cfg)
    log = []

    def run_loss(batch, noise):
        return diffusion_loss(
            batch, module, sched, noise, train_cfg.kl_weight, condition_mode, train_cfg.p_unconditional, null
        )

    for epoch in tqdm(range(train_cfg.epochs), desc="diffusion", disable=None):
        order = [train_idx[i] for i in stream.randperm(len(train_idx))]
        losses = []
        for chunk in _batches(order, train_cfg.batch_size):
            loss = run_loss([examples[i] for i in chunk], stream)
            _check_finite(loss.detach(), epoch, "train")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()) * len(chunk))
        train_loss = sum(losses) / len(order)
        log.append(LogRow(epoch, "train", train_loss, _current_lr(optimizer)))

        monitor = train_loss
        if val_idx:
            with torch.no_grad():
                # fixed noise so validation losses are comparable across epochs
                val_loss = float(run_loss([examples[i] for i in val_idx], NoiseStream(train_cfg.seed, 2)))
            _check_finite(val_loss, epoch, "val")
            log.append(LogRow(epoch, "val", val_loss, _current_lr(optimizer)))
            monitor = val_loss
        scheduler.step(monitor)
        logger.info("diffusion epoch %d train %.4f", epoch, train_loss)

    return ParameterSet.from_module(net_cfg, module), log


def train_cfg_diffusion(dataset, net_cfg, train_cfg, sched, stream=None, null=None):
    """Classifier-free training: train_diffusion with condition dropout."""

    if train_cfg.p_unconditional == 0:
        logger.warning("p_unconditional is 0, the null condition path stays untrained")
    return train_diffusion(dataset, net_cfg, train_cfg, sched, stream, condition_mode="cfg", null=null)
