import math

import numpy as np
import pytest

from conftest import random_rotation
from errors import InvalidRangeError
from molsys import MoleculeCloud, PocketCloud
from oracle import (
    GAS_CONSTANT,
    OracleParams,
    deltaG_from_K,
    generate_dataset,
    pair_energy,
    pseudo_affinity,
    qed_proxy,
    sa_proxy,
    size_desirability,
)


def test_deltaG_from_micromolar_K():
    assert deltaG_from_K(1e-6, 298.15) == pytest.approx(-8.186, abs=0.005)
    assert deltaG_from_K(1e-6, 298.15) == pytest.approx(GAS_CONSTANT * 298.15 * math.log(1e-6), rel=1e-15)
    assert deltaG_from_K(1.0) == 0.0
    with pytest.raises(InvalidRangeError):
        deltaG_from_K(0.0)


def test_pair_energy_shape():
    value, _ = pair_energy(np.array([-1.0, 0.0, 3.0, 20.0]))
    # overlap is repulsive, contact is attractive, far away is flat
    assert value[0] > 0
    assert value[1] < 0
    assert value[2] < 0
    assert abs(value[3]) < 1e-12


def test_pair_energy_derivative():
    s = np.linspace(-1.5, 6.0, 41) + 1e-3
    _, deriv = pair_energy(s)
    h = 1e-6
    numeric = (pair_energy(s + h)[0] - pair_energy(s - h)[0]) / (2 * h)
    assert np.allclose(deriv, numeric, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_affinity_gradient_matches_finite_differences(pocket, seed):
    rng = np.random.default_rng(seed)
    x = pocket.center + rng.normal(scale=1.5, size=(5, 3))
    molecule = MoleculeCloud.from_symbols(["C", "N", "O", "C", "S"], x)
    _, grad = pseudo_affinity(pocket, molecule)
    h = 1e-6
    numeric = np.zeros_like(grad)
    for i in range(5):
        for d in range(3):
            step = np.zeros_like(x)
            step[i, d] = h
            up = pseudo_affinity(pocket, molecule.with_coords(x + step))[0]
            down = pseudo_affinity(pocket, molecule.with_coords(x - step))[0]
            numeric[i, d] = (up - down) / (2 * h)
    assert np.max(np.abs(grad - numeric)) <= 1e-6 * max(1.0, np.max(np.abs(numeric)))


def test_affinity_is_rigid_motion_invariant(pocket, ligand_in_pocket, rng):
    R, shift = random_rotation(rng), rng.normal(size=3)
    moved_pocket = PocketCloud(pocket.x @ R.T + shift, pocket.v)
    moved_ligand = ligand_in_pocket.with_coords(ligand_in_pocket.x @ R.T + shift)
    a, grad = pseudo_affinity(pocket, ligand_in_pocket)
    b, grad_moved = pseudo_affinity(moved_pocket, moved_ligand)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-12)
    assert np.allclose(grad @ R.T, grad_moved, atol=1e-10)


def test_far_ligand_scores_zero(pocket):
    far = MoleculeCloud.from_symbols(["C"], [pocket.center + np.array([50.0, 0.0, 0.0])])
    energy, grad = pseudo_affinity(pocket, far)
    assert energy == 0.0
    assert np.all(grad == 0.0)


def test_empty_pocket_scores_zero(ethanol):
    empty = PocketCloud(np.zeros((0, 3)), np.zeros((0, 4)))
    energy, _ = pseudo_affinity(empty, ethanol)
    assert energy == 0.0


def test_affinity_scale_is_applied(pocket, ligand_in_pocket):
    base, _ = pseudo_affinity(pocket, ligand_in_pocket)
    doubled_scale = OracleParams(affinity_scale=2 * OracleParams().affinity_scale)
    doubled, _ = pseudo_affinity(pocket, ligand_in_pocket, doubled_scale)
    assert doubled == pytest.approx(2 * base)


def test_proxies_are_bounded(ethanol, ligand_in_pocket):
    for molecule in (ethanol, ligand_in_pocket):
        assert 0.0 <= qed_proxy(molecule) <= 1.0
        assert 0.0 < sa_proxy(molecule) <= 1.0
    assert sa_proxy(ethanol) == 1.0
    assert size_desirability(1) == 0.0
    assert size_desirability(25) == 1.0


def test_dataset_is_seeded_and_thread_independent(small_gen_config):
    a = generate_dataset(3, 4, small_gen_config, threads=1)
    b = generate_dataset(3, 4, small_gen_config, threads=3)
    assert [r.record_id for r in a] == ["rec00000", "rec00001", "rec00002", "rec00003"]
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.ligand.x, rb.ligand.x)
        assert np.array_equal(ra.pocket.x, rb.pocket.x)
        assert ra.labels == rb.labels


def test_dataset_labels_match_the_oracle(small_dataset, small_gen_config):
    for record in small_dataset:
        assert small_gen_config.n_ligand_min <= record.ligand.n_atoms <= small_gen_config.n_ligand_max
        assert record.labels.deltaG == pseudo_affinity(record.pocket, record.ligand)[0]
        assert record.labels.qed == qed_proxy(record.ligand)
        assert 0.0 <= record.labels.sa <= 1.0


def test_dataset_rejects_empty_request():
    with pytest.raises(InvalidRangeError):
        generate_dataset(0, 0)


def test_default_labels_land_in_the_kcal_range():
    records = generate_dataset(0, 300)
    deltaG = np.array([r.labels.deltaG for r in records])
    assert -12.0 <= np.median(deltaG) <= -2.0
    assert np.mean(deltaG < 0) >= 0.95
    assert 0.01 <= np.mean(deltaG > 0) <= 0.03
