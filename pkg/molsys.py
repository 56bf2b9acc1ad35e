"""
Domain types for pockets, ligands and labeled complexes, plus the geometric preprocessing
used before sampling: center-of-mass shift, atom-count prior and bond inference.
"""

import functools
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from errors import EmptyPocketError, InvalidRangeError, ShapeMismatchError

DEFAULT_ELEMENTS = ("C", "N", "O", "S")
FULL_ELEMENTS = ("C", "N", "O", "F", "P", "S", "Cl")

# Cordero covalent radii in Angstrom
COVALENT_RADII = {"C": 0.76, "N": 0.71, "O": 0.66, "F": 0.57, "P": 1.07, "S": 1.05, "Cl": 1.02}
MAX_VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1, "P": 5, "S": 6, "Cl": 1}

SINGLE = "single"
SHORT = "short"
# single bond lengths of an element pair spread around their covalent sum with this sd, Angstrom
BOND_LENGTH_SD = 0.08
# bonds below this quantile of their element pair length distribution are binned as short
SHORT_BOND_QUANTILE = 0.1


def _frozen_array(values, ndim, name):
    array = np.array(values, dtype=np.float64)
    if array.ndim != ndim:
        raise ShapeMismatchError(f"{name} must have {ndim} dimensions, got shape {array.shape}")
    array.flags.writeable = False
    return array


def _check_cloud(x, v, elements, what):
    if x.shape[1:] != (3,):
        raise ShapeMismatchError(f"{what} coordinates must be N x 3, got {x.shape}")
    if v.shape != (x.shape[0], len(elements)):
        raise ShapeMismatchError(f"{what} types must be N x {len(elements)}, got {v.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidRangeError(f"{what} coordinates must be finite")
    if v.size and (np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-9)):
        raise InvalidRangeError(f"{what} type rows must lie on the simplex")


def one_hot(indices, k):
    """One-hot encode an integer array into float rows of width k."""

    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.shape[0], k))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def encode_symbols(symbols, elements):
    """Map element symbols to one-hot rows over the vocabulary."""

    index = {e: i for i, e in enumerate(elements)}
    try:
        return one_hot([index[s] for s in symbols], len(elements))
    except KeyError as e:
        raise InvalidRangeError(f"element {e.args[0]} not in vocabulary {elements}") from None


@dataclass(frozen=True)
class MoleculeCloud:
    """
    Ligand as a point cloud. x is N x 3 in Angstrom, v is N x K with rows on the simplex
    (one-hot for finished molecules).
    """

    x: np.ndarray
    v: np.ndarray
    elements: tuple = DEFAULT_ELEMENTS

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen_array(self.x, 2, "x"))
        object.__setattr__(self, "v", _frozen_array(self.v, 2, "v"))
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.x.shape[0] < 1:
            raise InvalidRangeError("a molecule needs at least one atom")
        _check_cloud(self.x, self.v, self.elements, "ligand")

    @classmethod
    def from_symbols(cls, symbols, x, elements=DEFAULT_ELEMENTS):
        return cls(np.asarray(x, dtype=np.float64), encode_symbols(symbols, elements), elements)

    @property
    def n_atoms(self):
        return self.x.shape[0]

    @property
    def is_one_hot(self):
        return bool(np.all((self.v == 0.0) | (self.v == 1.0)))

    @property
    def symbols(self):
        return [self.elements[i] for i in np.argmax(self.v, axis=1)]

    def with_coords(self, x):
        return MoleculeCloud(x, self.v, self.elements)


@dataclass(frozen=True)
class PocketCloud:
    """Protein pocket as a point cloud. Never mutated by sampling."""

    x: np.ndarray
    v: np.ndarray
    elements: tuple = DEFAULT_ELEMENTS
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen_array(self.x, 2, "x_p"))
        object.__setattr__(self, "v", _frozen_array(self.v, 2, "v_p"))
        object.__setattr__(self, "elements", tuple(self.elements))
        _check_cloud(self.x, self.v, self.elements, "pocket")

    @classmethod
    def from_symbols(cls, symbols, x, elements=DEFAULT_ELEMENTS):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return cls(x, encode_symbols(symbols, elements).reshape(x.shape[0], len(elements)), elements)

    @property
    def n_atoms(self):
        return self.x.shape[0]

    @property
    def symbols(self):
        return [self.elements[i] for i in np.argmax(self.v, axis=1)]

    @property
    def center(self):
        if self.n_atoms == 0:
            raise EmptyPocketError("pocket has no atoms")
        return self.x.mean(axis=0)

    @property
    def radius(self):
        """Largest atom distance from the pocket center of mass."""

        return float(np.max(np.linalg.norm(self.x - self.center, axis=1)))

    def translated(self, offset):
        return PocketCloud(self.x - offset, self.v, self.elements, self.frozen)


class Labels(NamedTuple):
    deltaG: float
    qed: float
    sa: float


@dataclass(frozen=True)
class ComplexRecord:
    record_id: str
    pocket: PocketCloud
    ligand: MoleculeCloud
    labels: Labels

    def __post_init__(self):
        if not all(np.isfinite(self.labels)):
            raise InvalidRangeError(f"labels of {self.record_id} must be finite")

    @property
    def is_masked(self):
        """Positive binding energy marks an invalid label."""

        return self.labels.deltaG > 0


def center_complex(pocket, ligand=None):
    """
    Translate pocket and ligand so the pocket center of mass (uniform weights) sits at the origin.

    Parameters
    ----------
    pocket : PocketCloud
    ligand : MoleculeCloud or None

    Returns
    -------
    PocketCloud
        Centered pocket.
    MoleculeCloud or None
        Ligand moved by the same offset.
    np.ndarray
        The offset (pocket center of mass before the shift).

    Raises
    ------
    EmptyPocketError
        If the pocket has no atoms.
    """

    offset = pocket.center
    moved_ligand = None if ligand is None else ligand.with_coords(ligand.x - offset)
    return pocket.translated(offset), moved_ligand, offset


@dataclass(frozen=True)
class AtomCountPrior:
    """
    Histogram of ligand atom counts binned by pocket radius. probs[b, n - n_min] is the
    probability of n atoms for radii in [radius_edges[b], radius_edges[b+1]).
    """

    radius_edges: np.ndarray
    probs: np.ndarray
    n_min: int
    n_max: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        edges = np.asarray(self.radius_edges, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != edges.shape[0] - 1 or probs.shape[0] == 0:
            raise ShapeMismatchError("need one count distribution per radius bin")
        if probs.shape[1] != self.n_max - self.n_min + 1 or self.n_min < 1:
            raise ShapeMismatchError("count support does not match [n_min, n_max]")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidRangeError("every bin distribution must sum to 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "radius_edges", edges)

    @classmethod
    def point_mass(cls, n):
        return cls(np.array([0.0, np.inf]), np.ones((1, 1)), n, n)

    @classmethod
    def fit(cls, records, bin_width=1.0):
        """
        Fit the prior from records. Empty bins borrow the pooled distribution.

        Parameters
        ----------
        records : list of ComplexRecord
        bin_width : float
            Width of the radius bins in Angstrom.
        """

        radii = np.array([r.pocket.radius for r in records])
        counts = np.array([r.ligand.n_atoms for r in records])
        n_min, n_max = int(counts.min()), int(counts.max())
        lo = np.floor(radii.min() / bin_width) * bin_width
        n_bins = max(1, int(np.ceil((radii.max() - lo) / bin_width + 1e-12)))
        edges = lo + bin_width * np.arange(n_bins + 1)
        pooled = np.bincount(counts - n_min, minlength=n_max - n_min + 1).astype(np.float64)
        probs = np.zeros((n_bins, n_max - n_min + 1))
        bins = np.clip(np.searchsorted(edges, radii, side="right") - 1, 0, n_bins - 1)
        for b in range(n_bins):
            hist = np.bincount(counts[bins == b] - n_min, minlength=n_max - n_min + 1).astype(np.float64)
            if hist.sum() == 0:
                hist = pooled
            probs[b] = hist / hist.sum()
        return cls(edges, probs, n_min, n_max)

    def bin_index(self, radius):
        """Bin for a radius, radii outside the edges fall back to the nearest bin."""

        b = int(np.searchsorted(self.radius_edges, radius, side="right")) - 1
        return min(max(b, 0), self.probs.shape[0] - 1)

    def to_json(self):
        return json.dumps({
            "radius_edges": [float(e) if np.isfinite(e) else None for e in self.radius_edges],
            "probs": self.probs.tolist(),
            "n_min": self.n_min,
            "n_max": self.n_max,
        })

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        edges = [np.inf if e is None else e for e in data["radius_edges"]]
        return cls(np.array(edges), np.array(data["probs"]), data["n_min"], data["n_max"])


def sample_atom_count(prior, pocket, rng):
    """
    Draw a ligand size from the bin matching the pocket radius.

    Parameters
    ----------
    prior : AtomCountPrior
    pocket : PocketCloud
    rng : np.random.Generator

    Returns
    -------
    int
        Atom count clamped to [n_min, n_max].
    """

    dist = prior.probs[prior.bin_index(pocket.radius)]
    n = prior.n_min + int(rng.choice(dist.shape[0], p=dist))
    return min(max(n, prior.n_min), prior.n_max)


def pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@functools.lru_cache(maxsize=None)
def short_bond_cutoff(a, b, quantile=SHORT_BOND_QUANTILE):
    """Length below which an a-b bond is binned as short: a quantile of the pair length distribution."""

    return float(norm.ppf(quantile, loc=COVALENT_RADII[a] + COVALENT_RADII[b], scale=BOND_LENGTH_SD))


def infer_bonds(molecule, tolerance=0.4):
    """
    Distance based bond perception with a fixed covalent radius table.

    Parameters
    ----------
    molecule : MoleculeCloud
    tolerance : float
        Slack in Angstrom added to the covalent radius sum.

    Returns
    -------
    list of tuple
        Sorted (i, j, order_bin) with i < j and order_bin in {"single", "short"}, see
        short_bond_cutoff.
    """

    symbols = molecule.symbols
    radii = np.array([COVALENT_RADII[s] for s in symbols])
    ref = radii[:, None] + radii[None, :]
    dist = pairwise_distances(molecule.x, molecule.x)
    bonded = dist < ref + tolerance
    bonds = []
    for i, j in zip(*np.nonzero(np.triu(bonded, k=1))):
        order = SHORT if dist[i, j] < short_bond_cutoff(symbols[i], symbols[j]) else SINGLE
        bonds.append((int(i), int(j), order))
    return bonds


def quantize_coords(x, decimals=6):
    """Round coordinates through their fixed-point text form so files reload bit-exactly."""

    x = np.asarray(x, dtype=np.float64)
    return np.array([float(f"{value:.{decimals}f}") for value in x.reshape(-1)]).reshape(x.shape)
