import math

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import perturbed, random_rotation
from diffusion import DiffusionState, NoiseStream
from errors import ConfigError
from guidance import (
    AFFINITY_SCALE,
    GuidanceConfig,
    cfg_combine,
    check_models,
    clip_elementwise,
    clip_norm,
    condition_vector,
    energy_loss,
    guidance_displacement,
    multi_loss,
    null_condition,
    sample_guided,
)
from metrics import clash_score
from molsys import MoleculeCloud, PocketCloud
from net import DTYPE, PocketTensors
from oracle import pseudo_affinity
from schedule import build_schedule


class ShrinkDenoiser:
    """x0_hat = x_t / 2 with uniform type logits."""

    num_types = 4
    cond_channels = 0

    def __call__(self, x_t, v_t, t_frac, pocket, cond=None):
        return x_t / 2, torch.zeros_like(v_t)


class LinearRegressor:
    """Predicts the sum of the ligand x coordinates on every output channel."""

    num_types = 4

    def __init__(self, out_dim=1):
        self.out_dim = out_dim

    def __call__(self, x_lig, v_lig, pocket):
        return x_lig[:, 0].sum().repeat(self.out_dim)


class RotatedStream(NoiseStream):
    """Replays a stream with every coordinate draw rotated."""

    def __init__(self, seed, *ids, rotation):
        super().__init__(seed, *ids)
        self.rotation = torch.tensor(rotation, dtype=DTYPE)

    def coords(self, n):
        return super().coords(n) @ self.rotation.T


@pytest.fixture
def sched():
    return build_schedule(12, 1e-7, 0.2, 6.0)


def _state(rng, n=3):
    return DiffusionState(torch.tensor(rng.normal(size=(n, 3))), torch.eye(4, dtype=DTYPE)[:n], 5)


def test_energy_losses():
    assert energy_loss(-10.0, -16.0, "gaussian") == (36.0, 12.0)
    assert energy_loss(-10.0, -16.0, "exponential") == (6.0, 1.0)
    assert energy_loss(-16.0, -16.0, "exponential") == (0.0, 0.0)


def test_multi_loss_weights_channels():
    value, grad = multi_loss(np.array([1.0, 0.5, 0.2]), (1.5, 1.0, 1.0), (1.0, 2.0, 0.0), "gaussian")
    assert value == pytest.approx(0.25 + 2 * 0.25)
    assert np.allclose(grad, [-1.0, -2.0, 0.0])


def test_clipping():
    d = torch.tensor([[3.0, -0.5, 0.0], [0.0, 0.0, -4.0]], dtype=DTYPE)
    assert torch.equal(clip_elementwise(d, 1.0), torch.tensor([[1.0, -0.5, 0.0], [0.0, 0.0, -1.0]], dtype=DTYPE))
    norms = torch.linalg.norm(clip_norm(d, 1.0), dim=-1)
    assert torch.allclose(norms, torch.ones(2, dtype=DTYPE))


def test_cfg_combine_endpoints():
    u, c = torch.tensor([1.0, -2.0]), torch.tensor([3.0, 5.0])
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    assert torch.equal(cfg_combine(u, c, 1.0), c)
    assert torch.allclose(cfg_combine(u, c, 3.0), u + 3.0 * (c - u))


def test_condition_channels():
    assert torch.allclose(condition_vector(-12.0), torch.tensor([1.0, 1.0], dtype=DTYPE))
    assert torch.equal(null_condition(GuidanceConfig()), torch.zeros(2, dtype=DTYPE))
    sentinel = GuidanceConfig(null_condition="sentinel")
    assert torch.equal(null_condition(sentinel), torch.tensor([-1.0, 1.0], dtype=DTYPE))
    with pytest.raises(ValueError):
        GuidanceConfig(null_condition="sentinel", null_sentinel=0.5)


def test_displacement_follows_the_loss_gradient(pocket, sched, rng):
    state = _state(rng)
    x0_hat = state.x_t / 2
    cfg = GuidanceConfig(mode="classifier", s=0.5, target_deltaG=-16.0, clip=1e6)
    t = 5
    disp = guidance_displacement(LinearRegressor(), PocketTensors.from_cloud(pocket), state, x0_hat, state.v_t, sched,
                                 t, cfg)
    y = float(x0_hat[:, 0].sum())
    coef = sched.beta[t] / math.sqrt(sched.alpha[t]) * 0.5
    expected = torch.zeros(3, 3, dtype=DTYPE)
    expected[:, 0] = coef * 2 * (y + 16.0)
    assert torch.allclose(disp, expected, rtol=1e-12)


def test_displacement_is_clipped(pocket, sched, rng):
    state = _state(rng)
    cfg = GuidanceConfig(mode="classifier", s=1e5, clip=1.0)
    disp = guidance_displacement(LinearRegressor(), PocketTensors.from_cloud(pocket), state, state.x_t, state.v_t,
                                 sched, 5, cfg)
    assert torch.all(disp.abs() <= 1.0)
    assert torch.equal(disp[:, 0], torch.ones(3, dtype=DTYPE))


def test_zero_scale_gives_positive_zero(pocket, sched, rng):
    state = _state(rng)
    cfg = GuidanceConfig(mode="classifier", s=0.0)
    disp = guidance_displacement(LinearRegressor(), PocketTensors.from_cloud(pocket), state, state.x_t, state.v_t,
                                 sched, 5, cfg)
    assert not torch.any(torch.signbit(disp))


def test_full_chain_scales_by_the_denoiser_jacobian(pocket, sched, rng):
    state = _state(rng)
    base = dict(mode="classifier", s=0.5, clip=1e6)
    pocket_t = PocketTensors.from_cloud(pocket)
    approx = guidance_displacement(LinearRegressor(), pocket_t, state, state.x_t / 2, state.v_t, sched, 5,
                                   GuidanceConfig(**base))
    chain = guidance_displacement(LinearRegressor(), pocket_t, state, state.x_t / 2, state.v_t, sched, 5,
                                  GuidanceConfig(grad_path="full_chain", **base), x0_fn=lambda x: x / 2)
    assert torch.allclose(chain, approx / 2, rtol=1e-12)


def test_multi_constraint_uses_scaled_affinity_target(pocket, sched, rng):
    state = _state(rng)
    cfg = GuidanceConfig(mode="multi_constraint", s=1.0, clip=1e6, targets_multi=(-12.0, 0.0, 0.0),
                         weights_multi=(1.0, 0.0, 0.0))
    disp = guidance_displacement(LinearRegressor(3), PocketTensors.from_cloud(pocket), state, state.x_t, state.v_t,
                                 sched, 5, cfg)
    y = float(state.x_t[:, 0].sum())
    coef = sched.beta[5] / math.sqrt(sched.alpha[5])
    assert torch.allclose(disp[:, 0], torch.full((3,), coef * 2 * (y - (-12.0 * AFFINITY_SCALE)), dtype=DTYPE))


def test_check_models(denoiser_params, cfg_denoiser_params, regressor_params):
    with pytest.raises(ConfigError):
        check_models(denoiser_params, None, GuidanceConfig(mode="classifier"))
    with pytest.raises(ConfigError):
        check_models(denoiser_params, regressor_params, GuidanceConfig(mode="none"))
    with pytest.raises(ConfigError):
        check_models(denoiser_params, None, GuidanceConfig(mode="classifier_free"))
    check_models(cfg_denoiser_params, None, GuidanceConfig(mode="classifier_free"))


def test_stop_at_step_limits_the_chain(pocket, sched):
    states = []
    cfg = GuidanceConfig(stop_at_step=4)
    sample_guided(ShrinkDenoiser(), None, pocket, 3, sched, cfg, NoiseStream(0), on_step=states.append)
    assert [s.t for s in states] == [12, 11, 10, 9, 8]


def test_sample_returns_to_the_pocket_frame(pocket, sched):
    molecule = sample_guided(ShrinkDenoiser(), None, pocket, 5, sched, GuidanceConfig(), NoiseStream(1))
    assert molecule.n_atoms == 5
    assert molecule.is_one_hot
    assert np.linalg.norm(molecule.x.mean(axis=0) - pocket.center) < 3.0


def test_zero_scale_classifier_guidance_equals_unguided(denoiser_params, regressor_params, pocket, sched):
    denoiser = perturbed(denoiser_params)
    unguided = sample_guided(denoiser, None, pocket, 4, sched, GuidanceConfig(), NoiseStream(9, 0, 0))
    guided = sample_guided(denoiser, regressor_params, pocket, 4, sched, GuidanceConfig(mode="classifier", s=0.0),
                           NoiseStream(9, 0, 0))
    assert np.array_equal(unguided.x, guided.x)
    assert np.array_equal(unguided.v, guided.v)


def test_guidance_with_identity_check(denoiser_params, regressor_params, pocket, sched):
    cfg = GuidanceConfig(mode="classifier", s=20.0, check_identities=True)
    molecule = sample_guided(perturbed(denoiser_params), perturbed(regressor_params), pocket, 4, sched, cfg,
                             NoiseStream(2))
    assert np.all(np.isfinite(molecule.x))


def test_cfg_reductions(cfg_denoiser_params, pocket, sched):
    denoiser = perturbed(cfg_denoiser_params)

    def run(**kwargs):
        return sample_guided(denoiser, None, pocket, 4, sched, GuidanceConfig(**kwargs), NoiseStream(4, 1, 2))

    conditional = run(mode="conditional")
    unconditional = run(mode="none")
    assert np.array_equal(run(mode="classifier_free", s=1.0).x, conditional.x)
    assert np.array_equal(run(mode="classifier_free", s=0.0).x, unconditional.x)
    assert not np.array_equal(conditional.x, unconditional.x)


def test_guided_pipeline_is_se3_consistent(denoiser_params, regressor_params, pocket, sched, rng):
    denoiser, classifier = perturbed(denoiser_params), perturbed(regressor_params, seed=1)
    R, shift = random_rotation(rng), rng.normal(size=3)
    moved = PocketCloud(pocket.x @ R.T + shift, pocket.v, pocket.elements)
    cfg = GuidanceConfig(mode="classifier", s=30.0, clip=1e3, clip_mode="norm")
    base = sample_guided(denoiser, classifier, pocket, 4, sched, cfg, NoiseStream(6))
    turned = sample_guided(denoiser, classifier, moved, 4, sched, cfg, RotatedStream(6, rotation=R))
    assert np.array_equal(base.v, turned.v)
    assert np.max(np.abs(base.x @ R.T + shift - turned.x)) <= 1e-6


class IdentityDenoiser:
    """x0_hat = x_t with uniform type logits, so guidance displacements accumulate."""

    num_types = 4
    cond_channels = 0

    def __call__(self, x_t, v_t, t_frac, pocket, cond=None):
        return x_t.clone(), torch.zeros_like(v_t)


class _OracleEnergy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, pocket, types):
        energy, grad = pseudo_affinity(pocket, MoleculeCloud(x.detach().numpy(), types))
        ctx.save_for_backward(torch.tensor(grad, dtype=DTYPE))
        return torch.tensor([energy], dtype=DTYPE)

    @staticmethod
    def backward(ctx, out_grad):
        (grad,) = ctx.saved_tensors
        return out_grad[0] * grad, None, None


class OracleRegressor:
    """Regressor that returns the exact binding energy of the oracle."""

    num_types = 4

    def __call__(self, x_lig, v_lig, pocket):
        cloud = PocketCloud(pocket.x.detach().numpy(), pocket.v.detach().numpy())
        return _OracleEnergy.apply(x_lig, cloud, v_lig.detach().numpy())


@pytest.fixture(scope="module")
def oracle_sweep(small_dataset):
    """Binding energies and clash counts per guidance scale, chains paired by their noise stream."""

    sched = build_schedule(12, 1e-7, 0.2, 6.0)
    pockets = [record.pocket for record in small_dataset]
    sweep = {}
    for s in (0.0, 0.05, 0.2):
        # a target far below any reachable energy makes the loss gradient a pure descent direction
        cfg = GuidanceConfig(mode="classifier", s=s, target_deltaG=-100.0)
        energies, clashes = [], []
        for index, pocket in enumerate(pockets):
            for chain in range(20):
                mol = sample_guided(IdentityDenoiser(), OracleRegressor(), pocket, 6, sched, cfg,
                                    NoiseStream(11, index, chain))
                energies.append(pseudo_affinity(pocket, mol)[0])
                clashes.append(clash_score(pocket, mol))
        sweep[s] = (np.array(energies), np.array(clashes))
    return sweep


def test_guidance_lowers_the_binding_energy(oracle_sweep):
    unguided, _ = oracle_sweep[0.0]
    guided, _ = oracle_sweep[0.2]
    assert stats.ttest_rel(guided, unguided, alternative="less").pvalue < 0.01
    means = [oracle_sweep[s][0].mean() for s in (0.0, 0.05, 0.2)]
    assert means[0] >= means[1] >= means[2]


def test_guidance_shifts_the_whole_energy_distribution(oracle_sweep):
    unguided, _ = oracle_sweep[0.0]
    guided, _ = oracle_sweep[0.2]
    # guided CDF above the unguided one means lower energies
    assert stats.ks_2samp(guided, unguided, alternative="greater").pvalue < 0.01


def test_guidance_does_not_add_clashes(oracle_sweep):
    _, unguided = oracle_sweep[0.0]
    _, guided = oracle_sweep[0.2]
    assert guided.mean() <= unguided.mean()
