"""
Synthetic ground truth. A differentiable scoring function with the gauss/gauss/repulsion shape of
empirical docking scores, cheap drug-likeness and accessibility proxies, the Kd to binding free
energy conversion and a generator for labeled pocket-ligand complexes.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.transform import Rotation

from errors import InvalidRangeError
from graph_handler import bond_graph, branching_statistics
from molsys import (
    COVALENT_RADII,
    DEFAULT_ELEMENTS,
    MAX_VALENCE,
    ComplexRecord,
    Labels,
    MoleculeCloud,
    PocketCloud,
    quantize_coords,
)

logger = logging.getLogger(__name__)

# gas constant in kcal / (mol K)
GAS_CONSTANT = 1.98720425864e-3
ROOM_TEMPERATURE = 298.15

# xs van der Waals radii in Angstrom
VDW_RADII = {"C": 1.9, "N": 1.8, "O": 1.7, "F": 1.5, "P": 2.1, "S": 2.0, "Cl": 1.8}


class OracleParams(BaseModel):
    """Oracle section of the run config."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    w_gauss1: float = -0.035
    w_gauss2: float = -0.005
    w_repulsion: float = 0.84
    vdw_radii: dict[str, float] = Field(default_factory=lambda: dict(VDW_RADII))
    cutoff: float = Field(8.0, gt=0.0)
    taper_width: float = Field(1.0, gt=0.0)
    affinity_scale: float = Field(30.0, gt=0.0)

    @field_validator("vdw_radii")
    @classmethod
    def _positive_radii(cls, radii):
        if any(r <= 0 for r in radii.values()):
            raise ValueError("van der Waals radii must be positive")
        return radii


def _radii(symbols, params):
    return np.array([params.vdw_radii[s] for s in symbols])


def _taper(d, cutoff, width):
    """C1 smoothstep from 1 at cutoff - width to 0 at cutoff, with its derivative."""

    u = np.clip((cutoff - d) / width, 0.0, 1.0)
    value = u * u * (3.0 - 2.0 * u)
    inside = (u > 0.0) & (u < 1.0)
    deriv = np.where(inside, -6.0 * u * (1.0 - u) / width, 0.0)
    return value, deriv


def pair_energy(s, weights=None, params=None):
    """
    Unscaled pair term of a surface distance and its derivative.

    Parameters
    ----------
    s : np.ndarray
        Surface distances d - (R_i + R_j).
    weights : tuple or None
        (w_gauss1, w_gauss2, w_repulsion); taken from params if omitted.
    params : OracleParams or None
    """

    if weights is None:
        params = params or OracleParams()
        weights = (params.w_gauss1, params.w_gauss2, params.w_repulsion)
    w1, w2, w_rep = weights
    g1 = np.exp(-(s / 0.5) ** 2)
    g2 = np.exp(-((s - 3.0) / 2.0) ** 2)
    overlap = s < 0
    value = w1 * g1 + w2 * g2 + w_rep * np.where(overlap, s * s, 0.0)
    deriv = w1 * g1 * (-8.0 * s) + w2 * g2 * (-(s - 3.0) / 2.0) + w_rep * np.where(overlap, 2.0 * s, 0.0)
    return value, deriv


def interaction_energy(pocket, molecule, params, weights=None):
    """
    Tapered pair sum over ligand-pocket pairs inside the cutoff, before scaling to kcal/mol.

    Returns
    -------
    float
        Energy.
    np.ndarray
        N x 3 gradient with respect to ligand coordinates.
    """

    grad = np.zeros_like(molecule.x)
    if pocket.n_atoms == 0:
        return 0.0, grad
    diff = molecule.x[:, None, :] - pocket.x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    reach = _radii(molecule.symbols, params)[:, None] + _radii(pocket.symbols, params)[None, :]
    s = d - reach
    f, df = pair_energy(s, weights, params)
    taper, dtaper = _taper(d, params.cutoff, params.taper_width)
    within = d < params.cutoff
    energy = float(np.sum(np.where(within, taper * f, 0.0)))
    dd = np.where(within, dtaper * f + taper * df, 0.0)
    unit = np.divide(diff, d[..., None], out=np.zeros_like(diff), where=d[..., None] > 0)
    grad = np.sum(dd[..., None] * unit, axis=1)
    return energy, grad


def pseudo_affinity(pocket, molecule, params=None):
    """
    Vina shaped binding energy of a ligand in a pocket.

    Parameters
    ----------
    pocket : PocketCloud
    molecule : MoleculeCloud
    params : OracleParams or None

    Returns
    -------
    float
        Binding energy in kcal/mol, more negative binds better.
    np.ndarray
        N x 3 exact gradient with respect to ligand coordinates.
    """

    params = params or OracleParams()
    energy, grad = interaction_energy(pocket, molecule, params)
    return params.affinity_scale * energy, params.affinity_scale * grad


def _smoothstep(u):
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def size_desirability(n):
    """0 for a single atom, rising to 1 at 20 atoms, flat to 30, then decaying."""

    if n <= 30:
        return _smoothstep((n - 1) / 19.0)
    return math.exp(-(((n - 30) / 15.0) ** 2))


def heteroatom_desirability(fraction):
    return 0.3 + 0.7 * math.exp(-(((fraction - 0.25) / 0.15) ** 2))


def qed_proxy(molecule):
    """Drug-likeness proxy in [0, 1] from atom count and heteroatom fraction."""

    symbols = molecule.symbols
    fraction = sum(1 for s in symbols if s != "C") / len(symbols)
    return math.sqrt(size_desirability(len(symbols)) * heteroatom_desirability(fraction))


def sa_proxy(molecule):
    """Accessibility proxy in [0, 1]; 1 for unbranched, acyclic, connected graphs."""

    stats = branching_statistics(bond_graph(molecule))
    complexity = 4.0 * stats["branch_fraction"] + 0.5 * stats["rings"] + 0.5 * (stats["components"] - 1)
    return 1.0 / (1.0 + complexity)


def deltaG_from_K(K, T=ROOM_TEMPERATURE):
    """
    Binding free energy R T ln K of a dissociation constant.

    Parameters
    ----------
    K : float
        Dissociation constant in mol/L, > 0.
    T : float
        Temperature in Kelvin, > 0.

    Returns
    -------
    float
        kcal/mol.

    Raises
    ------
    InvalidRangeError
        If K <= 0 or T <= 0.
    """

    if K <= 0 or T <= 0:
        raise InvalidRangeError(f"need K > 0 and T > 0, got K={K}, T={T}")
    return GAS_CONSTANT * T * math.log(K)


class GenConfig(BaseModel):
    """Synthetic dataset generator settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    elements: tuple[str, ...] = DEFAULT_ELEMENTS
    n_ligand_min: int = Field(8, ge=1)
    n_ligand_max: int = 30
    n_pocket_min: int = Field(30, ge=1)
    n_pocket_max: int = 80
    pocket_gap: float = 4.2
    shell_thickness: float = 2.0
    cap_fraction: float = Field(0.75, gt=0.0, le=1.0)
    pocket_density: float = 0.08
    max_het_fraction: float = 0.6
    clash_fraction: float = Field(0.02, ge=0.0, le=1.0)
    relax_steps: int = 60
    relax_step_size: float = 0.05
    max_attempts: int = 20
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class RelaxationFailed(Exception):
    pass


def _ligand_symbols(n, elements, rng, cfg):
    het_p = rng.uniform(0.0, cfg.max_het_fraction)
    hetero = [e for e in elements if e != "C"] or ["C"]
    return ["C" if rng.random() >= het_p else hetero[rng.integers(len(hetero))] for _ in range(n)]


def _grow_tree(symbols, rng, tries=50):
    """Place atoms one by one on a random tree with covalent bond lengths and clear nonbonded gaps."""

    n = len(symbols)
    radii = np.array([COVALENT_RADII[s] for s in symbols])
    x = np.zeros((n, 3))
    degree = np.zeros(n, dtype=int)
    chain_bias = rng.uniform()
    for i in range(1, n):
        placed = False
        for _ in range(tries):
            open_atoms = [j for j in range(i) if degree[j] < MAX_VALENCE[symbols[j]]]
            if not open_atoms:
                break
            if rng.uniform() < chain_bias and degree[i - 1] < MAX_VALENCE[symbols[i - 1]]:
                parent = i - 1
            else:
                parent = open_atoms[rng.integers(len(open_atoms))]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            candidate = x[parent] + (radii[parent] + radii[i]) * direction
            others = [j for j in range(i) if j != parent]
            if others:
                gaps = np.linalg.norm(x[others] - candidate, axis=1) - (radii[others] + radii[i])
                if np.any(gaps < 0.6):
                    continue
            x[i] = candidate
            degree[i] += 1
            degree[parent] += 1
            placed = True
            break
        if not placed:
            raise RelaxationFailed(f"could not place atom {i}")
    return x - x.mean(axis=0)


def _pocket_shell(radius, cfg, rng):
    area = 4.0 * math.pi * radius * radius * cfg.cap_fraction
    n_p = int(np.clip(round(area * cfg.pocket_density), cfg.n_pocket_min, cfg.n_pocket_max))
    cos_theta = rng.uniform(1.0 - 2.0 * cfg.cap_fraction, 1.0, size=n_p)
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n_p)
    r = rng.uniform(radius, radius + cfg.shell_thickness, size=n_p)
    sin_theta = np.sqrt(1.0 - cos_theta**2)
    x = np.stack([r * sin_theta * np.cos(phi), r * sin_theta * np.sin(phi), r * cos_theta], axis=1)
    weights = np.array([{"C": 0.6, "N": 0.15, "O": 0.2, "S": 0.05}.get(e, 0.05) for e in cfg.elements])
    symbols = [cfg.elements[i] for i in rng.choice(len(cfg.elements), size=n_p, p=weights / weights.sum())]
    return symbols, x


def _relax(pocket, ligand, params, cfg):
    """Rigid translation of the ligand down the repulsion gradient until no pair overlaps."""

    repulsion_only = (0.0, 0.0, params.w_repulsion)
    for _ in range(cfg.relax_steps):
        energy, grad = interaction_energy(pocket, ligand, params, repulsion_only)
        if energy <= 1e-6:
            return ligand
        shift = grad.sum(axis=0)
        norm = np.linalg.norm(shift)
        ligand = ligand.with_coords(ligand.x - cfg.relax_step_size * shift / max(norm, 1.0))
    energy, _ = interaction_energy(pocket, ligand, params, repulsion_only)
    if energy > 1e-6:
        raise RelaxationFailed("ligand still overlaps the pocket")
    return ligand


def _sample_complex(record_id, rng, cfg, params):
    n = int(rng.integers(cfg.n_ligand_min, cfg.n_ligand_max + 1))
    symbols = _ligand_symbols(n, cfg.elements, rng, cfg)
    x = _grow_tree(symbols, rng)
    ligand = MoleculeCloud.from_symbols(symbols, x, cfg.elements)
    radius = float(np.max(np.linalg.norm(x, axis=1)))
    pocket_symbols, pocket_x = _pocket_shell(radius + cfg.pocket_gap, cfg, rng)
    pocket = PocketCloud.from_symbols(pocket_symbols, pocket_x, cfg.elements)
    ligand = _relax(pocket, ligand, params, cfg)
    if rng.uniform() < cfg.clash_fraction:
        # ligand center on a pocket atom gives a positive binding energy
        target = pocket.x[rng.integers(pocket.n_atoms)]
        ligand = ligand.with_coords(ligand.x - ligand.x.mean(axis=0) + target)

    rotation = Rotation.random(random_state=rng).as_matrix()
    offset = rng.uniform(-10.0, 10.0, size=3)
    pocket = PocketCloud(quantize_coords(pocket.x @ rotation.T + offset), pocket.v, cfg.elements)
    ligand = MoleculeCloud(quantize_coords(ligand.x @ rotation.T + offset), ligand.v, cfg.elements)
    deltaG, _ = pseudo_affinity(pocket, ligand, params)
    labels = Labels(deltaG, qed_proxy(ligand), sa_proxy(ligand))
    return ComplexRecord(record_id, pocket, ligand, labels)


def generate_record(index, seed_seq, cfg, params):
    """One record from its own RNG substream, resampling after failed relaxations."""

    rng = np.random.default_rng(seed_seq)
    record_id = f"rec{index:05d}"
    for attempt in range(cfg.max_attempts):
        try:
            return _sample_complex(record_id, rng, cfg, params)
        except RelaxationFailed as e:
            logger.info("%s attempt %d skipped: %s", record_id, attempt, e)
    raise InvalidRangeError(f"{record_id}: no valid complex after {cfg.max_attempts} attempts")


def generate_dataset(seed, n_complexes, gen_cfg=None, params=None, threads=1):
    """
    Generate labeled synthetic complexes.

    Parameters
    ----------
    seed : int
    n_complexes : int
        Number of records, >= 1.
    gen_cfg : GenConfig or None
    params : OracleParams or None
    threads : int
        Worker threads; the result does not depend on it.

    Returns
    -------
    list of ComplexRecord
        Records rec00000, rec00001, ... in index order.

    Raises
    ------
    InvalidRangeError
        If n_complexes < 1 or a record cannot be generated.
    """

    if n_complexes < 1:
        raise InvalidRangeError(f"n_complexes must be >= 1, got {n_complexes}")
    gen_cfg = gen_cfg or GenConfig()
    params = params or OracleParams()
    children = np.random.SeedSequence(seed).spawn(n_complexes)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(lambda i: generate_record(i, children[i], gen_cfg, params), range(n_complexes)))
    masked = sum(r.is_masked for r in records)
    logger.info("generated %d complexes, %d with positive binding energy", len(records), masked)
    return records
