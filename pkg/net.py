"""
Small E(3)-equivariant message passing network. The same layer type serves as the diffusion
denoiser (predicting x0_hat and type logits) and as the scalar property regressor used for
guidance. Parameters travel as a flat float64 vector (ParameterSet) and are turned into a
torch module on demand.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from errors import InvalidRangeError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
# radial basis for edge distances, Angstrom
RBF_CENTERS = torch.linspace(0.0, 10.0, 16, dtype=DTYPE)
RBF_GAMMA = 1.0 / (2 * (10.0 / 15) ** 2)


class NetConfig(BaseModel):
    """Architecture of a denoiser or regressor network."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    role: Literal["denoiser", "regressor"] = "denoiser"
    layers: int = Field(4, ge=1)
    hidden_dim: int = Field(64, ge=4)
    k_nn: int = Field(8, ge=1)
    heads: int = Field(1, ge=1)  # unused by the pooling head
    cond_channels: Literal[0, 2] = 0
    out_dim: int = Field(1, ge=1)
    num_types: int = Field(4, ge=1)


class PocketTensors(NamedTuple):
    x: torch.Tensor
    v: torch.Tensor

    @classmethod
    def from_cloud(cls, pocket):
        return cls(torch.tensor(pocket.x, dtype=DTYPE), torch.tensor(pocket.v, dtype=DTYPE))


def as_pocket(pocket):
    return pocket if isinstance(pocket, PocketTensors) else PocketTensors.from_cloud(pocket)


def as_tensor(values):
    if isinstance(values, torch.Tensor):
        return values
    return torch.tensor(np.asarray(values), dtype=DTYPE)


def knn_neighbors(x_lig, x_all, k_nn):
    """
    Nearest neighbors of every ligand atom in the joint cloud (ligand rows first).

    Parameters
    ----------
    x_lig : torch.Tensor
        N x 3 ligand coordinates.
    x_all : torch.Tensor
        (N + N_p) x 3 joint coordinates, the first N rows are the ligand.
    k_nn : int
        Requested neighbor count.

    Returns
    -------
    torch.Tensor
        N x min(k_nn, N + N_p - 1) long tensor of neighbor indices, ties broken by index.
    """

    n_lig, n_all = x_lig.shape[0], x_all.shape[0]
    k = min(k_nn, n_all - 1)
    with torch.no_grad():
        diff = x_lig[:, None, :] - x_all[None, :, :]
        d2 = (diff * diff).sum(-1)
        idx = torch.arange(n_lig)
        d2[idx, idx] = float("inf")
        order = torch.argsort(d2, dim=1, stable=True)
    return order[:, :k]


def _rbf(d):
    return torch.exp(-RBF_GAMMA * (d[..., None] - RBF_CENTERS) ** 2)


class EquivariantLayer(nn.Module):
    """
    EGNN layer acting on ligand atoms. Messages come from the k nearest atoms of the joint
    cloud; pocket atoms keep their features and coordinates.
    """

    def __init__(self, hidden_dim):
        super().__init__()
        n_rbf = RBF_CENTERS.shape[0]
        self.edge_mlp = nn.Sequential(
            nn.Linear(2 * hidden_dim + n_rbf, hidden_dim), nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.SiLU(),
        )
        self.node_mlp = nn.Sequential(
            nn.Linear(2 * hidden_dim, hidden_dim), nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )
        coord_out = nn.Linear(hidden_dim, 1, bias=False)
        nn.init.zeros_(coord_out.weight)
        self.coord_mlp = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.SiLU(), coord_out)

    def forward(self, h, x, neighbors, n_lig):
        k = max(neighbors.shape[1], 1)
        h_i, x_i = h[:n_lig], x[:n_lig]
        h_j, x_j = h[neighbors], x[neighbors]
        diff = x_i[:, None, :] - x_j
        dist = torch.sqrt((diff * diff).sum(-1))
        m = self.edge_mlp(torch.cat([h_i[:, None, :].expand_as(h_j), h_j, _rbf(dist)], dim=-1))
        # dense N x k layout keeps the reduction order fixed
        shift = (diff / (dist[..., None] + 1.0) * self.coord_mlp(m)).sum(1) / k
        x_new = x_i + shift
        h_new = h_i + self.node_mlp(torch.cat([h_i, m.sum(1) / k], dim=-1))
        return torch.cat([h_new, h[n_lig:]]), torch.cat([x_new, x[n_lig:]])


class _Backbone(nn.Module):
    def __init__(self, cfg, in_dim):
        super().__init__()
        self.num_types = cfg.num_types
        self.k_nn = cfg.k_nn
        self.embed = nn.Linear(in_dim, cfg.hidden_dim)
        self.layers = nn.ModuleList(EquivariantLayer(cfg.hidden_dim) for _ in range(cfg.layers))

    def run(self, feats_lig, feats_pocket, x_lig, x_pocket):
        n_lig = x_lig.shape[0]
        x = torch.cat([x_lig, x_pocket])
        h = self.embed(torch.cat([feats_lig, feats_pocket]))
        neighbors = knn_neighbors(x_lig, x, self.k_nn)
        for index, layer in enumerate(self.layers):
            h, x = layer(h, x, neighbors, n_lig)
            if not (torch.isfinite(h).all() and torch.isfinite(x).all()):
                raise NonFiniteError(f"non-finite activations in layer {index}", layer=index)
        return h[:n_lig], x[:n_lig]


class ScoreNet(_Backbone):
    """Denoiser: (x_t, v_t, t, pocket, condition) -> (x0_hat, v0_logits)."""

    def __init__(self, cfg):
        super().__init__(cfg, cfg.num_types + 2 + cfg.cond_channels)
        self.cond_channels = cfg.cond_channels
        self.type_head = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.SiLU(), nn.Linear(cfg.hidden_dim, cfg.num_types)
        )

    def forward(self, x_t, v_t, t_frac, pocket, cond=None):
        n, n_p = x_t.shape[0], pocket.x.shape[0]
        time_lig = torch.full((n, 1), t_frac, dtype=DTYPE)
        time_pocket = torch.full((n_p, 1), t_frac, dtype=DTYPE)
        lig = [v_t, time_lig, torch.ones(n, 1, dtype=DTYPE)]
        poc = [pocket.v, time_pocket, torch.zeros(n_p, 1, dtype=DTYPE)]
        if self.cond_channels:
            lig.append(cond.expand(n, -1))
            poc.append(cond.expand(n_p, -1))
        h, x = self.run(torch.cat(lig, dim=1), torch.cat(poc, dim=1), x_t, pocket.x)
        return x, self.type_head(h)


class RegressorNet(_Backbone):
    """Property regressor: mean-pooled ligand features -> out_dim scalars."""

    def __init__(self, cfg):
        super().__init__(cfg, cfg.num_types + 1)
        self.head = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.SiLU(), nn.Linear(cfg.hidden_dim, cfg.out_dim)
        )

    def forward(self, x_lig, v_lig, pocket):
        n, n_p = x_lig.shape[0], pocket.x.shape[0]
        lig = torch.cat([v_lig, torch.ones(n, 1, dtype=DTYPE)], dim=1)
        poc = torch.cat([pocket.v, torch.zeros(n_p, 1, dtype=DTYPE)], dim=1)
        h, _ = self.run(lig, poc, x_lig, pocket.x)
        return self.head(h.mean(0))


def build_network(cfg, seed=0):
    """
    Instantiate the torch module for a config with deterministic initialization.

    Parameters
    ----------
    cfg : NetConfig
    seed : int
        Seed of the weight initialization; the global torch RNG is left untouched.

    Returns
    -------
    nn.Module
        ScoreNet or RegressorNet in float64.
    """

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ScoreNet(cfg) if cfg.role == "denoiser" else RegressorNet(cfg)
    return module.to(DTYPE)


def module_layout(module):
    return tuple((name, tuple(p.shape)) for name, p in module.named_parameters())


@dataclass(frozen=True)
class ParameterSet:
    """
    All weights of one network as a flat float64 vector plus the config that fixes the layout.
    """

    config: NetConfig
    flat: np.ndarray

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(flat)):
            raise InvalidRangeError("parameters must be finite")
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if flat.shape[0] != expected:
            raise ShapeMismatchError(f"expected {expected} parameters, got {flat.shape[0]}")
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    @classmethod
    def initialize(cls, config, seed=0):
        return cls.from_module(config, build_network(config, seed))

    @classmethod
    def from_module(cls, config, module):
        with torch.no_grad():
            flat = parameters_to_vector(module.parameters()).detach().numpy().copy()
        return cls(config, flat)

    @cached_property
    def layout(self):
        return module_layout(build_network(self.config))

    @property
    def layout_hash(self):
        return hashlib.sha256(json.dumps(self.layout).encode()).hexdigest()

    @property
    def content_hash(self):
        digest = hashlib.sha256(self.config.model_dump_json().encode())
        digest.update(self.flat.astype("<f8").tobytes())
        return digest.hexdigest()

    def build(self, trainable=False):
        """Fresh torch module holding these weights."""

        module = build_network(self.config)
        with torch.no_grad():
            vector_to_parameters(torch.tensor(self.flat, dtype=DTYPE), module.parameters())
        module.requires_grad_(trainable)
        return module

    @cached_property
    def module(self):
        return self.build(trainable=False)


def _module(net):
    return net.module if isinstance(net, ParameterSet) else net


def _check_types(v, num_types, what):
    if v.ndim != 2 or v.shape[1] != num_types:
        raise ShapeMismatchError(f"{what} types must be N x {num_types}, got {tuple(v.shape)}")


def score_forward(params, x_t, v_t, t, pocket, cond=None, *, num_steps):
    """
    Denoiser prediction of the clean ligand.

    Parameters
    ----------
    params : ParameterSet or ScoreNet
    x_t : torch.Tensor
        N x 3 noisy coordinates.
    v_t : torch.Tensor
        N x K types on the simplex.
    t : int
        Step in [1, num_steps], embedded as t / num_steps.
    pocket : PocketCloud or PocketTensors
    cond : torch.Tensor or None
        Two channels (g_norm, mask), required iff the network has cond_channels = 2.
    num_steps : int
        Schedule length T.

    Returns
    -------
    torch.Tensor
        x0_hat, N x 3.
    torch.Tensor
        v0 logits, N x K.

    Raises
    ------
    ShapeMismatchError
        If shapes or the presence of cond do not match the config.
    """

    module = _module(params)
    pocket = as_pocket(pocket)
    x_t, v_t = as_tensor(x_t), as_tensor(v_t)
    num_types = getattr(module, "num_types", v_t.shape[-1])
    if x_t.ndim != 2 or x_t.shape[1] != 3 or v_t.shape[0] != x_t.shape[0]:
        raise ShapeMismatchError(f"x_t must be N x 3 matching v_t, got {tuple(x_t.shape)}")
    _check_types(v_t, num_types, "ligand")
    _check_types(pocket.v, num_types, "pocket")
    if (cond is not None) != bool(getattr(module, "cond_channels", 0)):
        raise ShapeMismatchError("condition must be given iff the denoiser has condition channels")
    if cond is not None:
        cond = as_tensor(cond).reshape(1, 2)
    return module(x_t, v_t, t / num_steps, pocket, cond)


def regress(params, x_lig, v_lig, pocket):
    """Tensor level regressor call, see regressor_forward."""

    module = _module(params)
    pocket = as_pocket(pocket)
    x_lig, v_lig = as_tensor(x_lig), as_tensor(v_lig)
    num_types = getattr(module, "num_types", v_lig.shape[-1])
    if x_lig.ndim != 2 or x_lig.shape[1] != 3 or v_lig.shape[0] != x_lig.shape[0]:
        raise ShapeMismatchError(f"ligand coordinates must be N x 3 matching types, got {tuple(x_lig.shape)}")
    _check_types(v_lig, num_types, "ligand")
    _check_types(pocket.v, num_types, "pocket")
    return module(x_lig, v_lig, pocket)


def regressor_forward(params, pocket, molecule):
    """
    Predicted properties of a complex.

    Parameters
    ----------
    params : ParameterSet
    pocket : PocketCloud
    molecule : MoleculeCloud

    Returns
    -------
    np.ndarray
        Length out_dim; (affinity_scaled, qed, sa) for the multi-constraint head.
    """

    with torch.no_grad():
        y = regress(params, molecule.x, molecule.v, pocket)
    return y.numpy().copy()


def input_gradient(params, pocket, molecule, loss):
    """
    Exact reverse-mode gradient of loss(regressor(P, M)) with respect to ligand coordinates.

    Parameters
    ----------
    params : ParameterSet
    pocket : PocketCloud
    molecule : MoleculeCloud
    loss : callable
        Maps the output tensor y to a scalar tensor.

    Returns
    -------
    np.ndarray
        N x 3 gradient.
    """

    x = torch.tensor(molecule.x, dtype=DTYPE, requires_grad=True)
    value = loss(regress(params, x, molecule.v, pocket))
    if not value.requires_grad:
        return np.zeros_like(molecule.x)
    (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        return np.zeros_like(molecule.x)
    return grad.numpy().copy()


def module_gradient(module, batch, loss):
    """
    Sum of per-example parameter gradients, reduced in batch index order.

    Parameters
    ----------
    module : nn.Module
        Module with trainable parameters.
    batch : sequence
        Examples handed one by one to loss.
    loss : callable
        loss(module, example) -> scalar tensor. Examples whose loss does not require a
        gradient contribute nothing.

    Returns
    -------
    torch.Tensor
        Flat gradient vector.

    Raises
    ------
    NonFiniteError
        If any gradient entry is not finite.
    """

    params = [p for p in module.parameters()]
    total = torch.zeros(sum(p.numel() for p in params), dtype=DTYPE)
    for example in batch:
        value = loss(module, example)
        if not value.requires_grad:
            continue
        grads = torch.autograd.grad(value, params, allow_unused=True)
        flat = torch.cat([
            (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
        ])
        total = total + flat
    if not torch.isfinite(total).all():
        raise NonFiniteError("non-finite parameter gradient")
    return total


def param_gradient(params, batch, loss):
    """
    Exact gradient of the summed per-example loss with respect to every parameter.

    Parameters
    ----------
    params : ParameterSet
    batch : sequence
    loss : callable
        loss(module, example) -> scalar tensor.

    Returns
    -------
    np.ndarray
        Flat gradient in the ParameterSet layout.
    """

    return module_gradient(params.build(trainable=True), batch, loss).numpy().copy()
