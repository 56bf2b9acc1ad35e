"""
This module handles the evaluation of generated ligands: fingerprint diversity, specificity,
bond geometry divergences, steric clashes, structural validity and the statistical comparison
of a guided run against a baseline run.
"""

import hashlib
import logging
import re
from itertools import combinations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from errors import EmptyHistogramError, InvalidRangeError, ShapeMismatchError
from graph_handler import bond_angles, bond_graph, bond_lengths, pairs_within_hops
from molsys import MAX_VALENCE, pairwise_distances
from oracle import pseudo_affinity, qed_proxy, sa_proxy

logger = logging.getLogger(__name__)

# Bondi van der Waals radii in Angstrom
BONDI_RADII = {"C": 1.70, "N": 1.55, "O": 1.52, "F": 1.47, "P": 1.80, "S": 1.80, "Cl": 1.75}

LENGTH_RANGE = (0.0, 3.0)
LENGTH_BIN = 0.02
ANGLE_RANGE = (0.0, 180.0)
ANGLE_BIN = 2.0


class EvalConfig(BaseModel):
    """Evaluation section of the run config."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    fingerprint_width: int = Field(1024, ge=8)
    bond_tolerance: float = 0.4
    clash_tolerance: float = 0.5
    clash_exclude_hops: int = Field(1, ge=1)
    top_m: int = Field(10, ge=1)
    n_off_targets: int = Field(5, ge=1)
    length_patterns: tuple[str, ...] = ("CC", "CN", "CO")
    angle_patterns: tuple[str, ...] = ("CCC", "CCO", "CNC")
    seed: int = 0


def _bucket(feature, width):
    digest = hashlib.blake2b(repr(feature).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % width


def fingerprint(molecule, width=1024, tolerance=0.4):
    """
    Hashed bit vector of bonded element pairs with a 0.1 Angstrom distance bin and bonded
    angle triples with a 10 degree bin.

    Parameters
    ----------
    molecule : MoleculeCloud
    width : int
        Number of bits.
    tolerance : float
        Bond inference slack.

    Returns
    -------
    np.ndarray
        Boolean vector of length width; all False for a molecule without bonds.
    """

    G = bond_graph(molecule, tolerance)
    bits = np.zeros(width, dtype=bool)
    for pair, length in bond_lengths(G):
        bits[_bucket(("bond", pair, int(length / 0.1)), width)] = True
    for triple, angle in bond_angles(G, molecule.x):
        bits[_bucket(("angle", triple, int(angle / 10.0)), width)] = True
    return bits


def tanimoto(a, b):
    """|a and b| / |a or b|, 1 when both are empty."""

    if a.shape != b.shape:
        raise ShapeMismatchError(f"fingerprint widths differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def diversity(mols, width=1024):
    """
    Mean of 1 - tanimoto over all unordered pairs.

    Parameters
    ----------
    mols : list
        MoleculeCloud objects or precomputed fingerprints.
    width : int

    Raises
    ------
    InvalidRangeError
        If fewer than two molecules are given.
    """

    if len(mols) < 2:
        raise InvalidRangeError("diversity is undefined for fewer than two molecules")
    fps = [m if isinstance(m, np.ndarray) else fingerprint(m, width) for m in mols]
    dissimilarities = [1.0 - tanimoto(a, b) for a, b in combinations(fps, 2)]
    return float(np.mean(dissimilarities))


def place_in(molecule, pocket):
    """Rigidly move a ligand so its center of mass sits on the pocket center of mass."""

    return molecule.with_coords(molecule.x - molecule.x.mean(axis=0) + pocket.center)


def default_scorer(params=None):
    return lambda pocket, molecule: pseudo_affinity(pocket, molecule, params)[0]


def random_off_pockets(pockets, n_off, rng):
    """
    Sampler of off-target pockets: for a pocket id, n_off other pockets drawn without replacement.

    Parameters
    ----------
    pockets : dict
        Pocket id to PocketCloud.
    n_off : int
    rng : np.random.Generator
    """

    ids = sorted(pockets)

    def sample(pocket_id):
        others = [i for i in ids if i != pocket_id]
        picked = rng.choice(len(others), size=min(n_off, len(others)), replace=False)
        return [pockets[others[i]] for i in sorted(picked)]

    return sample


def top_ligands(pocket, ligands, scorer, m=10):
    """The m ligands with the lowest on-target score."""

    scores = [scorer(pocket, lig) for lig in ligands]
    order = np.argsort(scores, kind="stable")[:m]
    return [ligands[i] for i in order]


def specificity_score(per_pocket_top, off_pockets, scorer):
    """
    Mean gap between on-target and off-target binding energies.

    Parameters
    ----------
    per_pocket_top : dict
        Pocket id to (PocketCloud, list of top ligands).
    off_pockets : callable
        Pocket id to list of off-target PocketCloud.
    scorer : callable
        (pocket, molecule) -> binding energy in kcal/mol.

    Returns
    -------
    float
        Mean over pockets of the mean (on - off) over ligands and valid off-target placements,
        more negative is more specific; nan if no pocket has a valid placement. Off-target scores
        that tie the on-target score always count, so a constant scorer gives exactly 0.
    """

    per_pocket = []
    for pocket_id in sorted(per_pocket_top):
        pocket, ligands = per_pocket_top[pocket_id]
        targets = off_pockets(pocket_id)
        gaps = []
        for ligand in ligands:
            on = scorer(pocket, ligand)
            for off_pocket in targets:
                off = scorer(off_pocket, place_in(ligand, off_pocket))
                # positive off-target scores count as failed placements
                if off >= 0 and off != on:
                    continue
                gaps.append(on - off)
        if not gaps:
            logger.warning("pocket %s has no valid off-target placement, skipped", pocket_id)
            continue
        per_pocket.append(float(np.mean(gaps)))
    if not per_pocket:
        return float("nan")
    return float(np.mean(per_pocket))


def jsd(p, q):
    """
    Base-2 Jensen-Shannon divergence of two histograms on the same bins.

    Raises
    ------
    ShapeMismatchError
        If the binnings differ.
    EmptyHistogramError
        If a histogram has no mass.
    """

    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"histograms have different bins: {p.shape} vs {q.shape}")
    if p.sum() <= 0 or q.sum() <= 0:
        raise EmptyHistogramError("cannot normalize an empty histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = (p + q) / 2
    value = 0.5 * stats.entropy(p, m, base=2) + 0.5 * stats.entropy(q, m, base=2)
    return float(min(max(value, 0.0), 1.0))


def parse_pattern(pattern):
    """Element tuple from "CCO" style strings; tuples pass through."""

    if isinstance(pattern, str):
        return tuple(re.findall(r"[A-Z][a-z]?", pattern))
    return tuple(pattern)


def _length_key(pattern):
    return tuple(sorted(parse_pattern(pattern)))


def _angle_key(pattern):
    a, center, b = parse_pattern(pattern)
    return (min(a, b), center, max(a, b))


def length_edges():
    return np.linspace(*LENGTH_RANGE, int(round((LENGTH_RANGE[1] - LENGTH_RANGE[0]) / LENGTH_BIN)) + 1)


def angle_edges():
    return np.linspace(*ANGLE_RANGE, int(round((ANGLE_RANGE[1] - ANGLE_RANGE[0]) / ANGLE_BIN)) + 1)


def _histogram(values, edges, what):
    counts, _ = np.histogram(values, bins=edges)
    if counts.sum() == 0:
        raise EmptyHistogramError(f"no {what} fall into the histogram range")
    return counts.astype(np.float64)


def bond_length_hist(mols, pair_filter=None, tolerance=0.4):
    """
    Bond lengths binned from 0 to 3 Angstrom at 0.02 Angstrom.

    Parameters
    ----------
    mols : list of MoleculeCloud
    pair_filter : str, tuple or None
        Element pair such as "CC" or ("C", "N"); None keeps every bond.

    Raises
    ------
    EmptyHistogramError
        If no bond matches.
    """

    key = None if pair_filter is None else _length_key(pair_filter)
    values = [length for m in mols for pair, length in bond_lengths(bond_graph(m, tolerance))
              if key is None or pair == key]
    return _histogram(values, length_edges(), f"{pair_filter} bonds")


def bond_angle_hist(mols, triple_filter=None, tolerance=0.4):
    """Bond angles binned from 0 to 180 degrees at 2 degrees; the filter center is the middle element."""

    key = None if triple_filter is None else _angle_key(triple_filter)
    values = []
    for m in mols:
        for triple, angle in bond_angles(bond_graph(m, tolerance), m.x):
            if key is None or triple == key:
                values.append(angle)
    return _histogram(values, angle_edges(), f"{triple_filter} angles")


def _vdw(symbols):
    return np.array([BONDI_RADII[s] for s in symbols])


def clash_score(pocket, molecule, tolerance=0.5, exclude_hops=1, bond_tolerance=0.4):
    """
    Number of atom pairs closer than the sum of their van der Waals radii minus tolerance.

    Ligand-pocket pairs always count; ligand-ligand pairs within exclude_hops bonds of each other
    are skipped.

    Parameters
    ----------
    pocket : PocketCloud
    molecule : MoleculeCloud
    tolerance : float
    exclude_hops : int
        1 skips only directly bonded pairs.

    Returns
    -------
    int
    """

    lig_r = _vdw(molecule.symbols)
    count = 0
    if pocket.n_atoms:
        limit = lig_r[:, None] + _vdw(pocket.symbols)[None, :] - tolerance
        count += int(np.count_nonzero(pairwise_distances(molecule.x, pocket.x) < limit))
    excluded = pairs_within_hops(bond_graph(molecule, bond_tolerance), exclude_hops)
    d = pairwise_distances(molecule.x, molecule.x)
    limit = lig_r[:, None] + lig_r[None, :] - tolerance
    for i, j in zip(*np.nonzero(np.triu(d < limit, k=1))):
        if (int(i), int(j)) not in excluded:
            count += 1
    return count


def validity(molecule, tolerance=0.4):
    """Valence rule: no atom exceeds its maximal valence and molecules with N >= 2 have a bond."""

    G = bond_graph(molecule, tolerance)
    if molecule.n_atoms >= 2 and G.number_of_edges() == 0:
        return False
    return all(G.degree(i) <= MAX_VALENCE[G.nodes[i]["element"]] for i in G.nodes)


def molecule_row(record_id, pocket_id, pocket, molecule, cfg, params=None):
    """Per-molecule metrics row."""

    return {
        "id": record_id,
        "pocket": pocket_id,
        "pseudo_affinity": pseudo_affinity(pocket, molecule, params)[0],
        "qed": qed_proxy(molecule),
        "sa": sa_proxy(molecule),
        "clash": clash_score(pocket, molecule, cfg.clash_tolerance, cfg.clash_exclude_hops, cfg.bond_tolerance),
        "valid": validity(molecule, cfg.bond_tolerance),
    }


def summarize(rows, keys=("pseudo_affinity", "qed", "sa", "clash")):
    return {
        key: {"mean": float(np.mean([r[key] for r in rows])), "median": float(np.median([r[key] for r in rows]))}
        for key in keys
    }


def geometry_histograms(mols, cfg):
    """Histograms per configured pattern, None where no bond matches."""

    hists = {}
    for pattern in cfg.length_patterns:
        try:
            hists[f"length_{pattern}"] = bond_length_hist(mols, pattern, cfg.bond_tolerance)
        except EmptyHistogramError:
            hists[f"length_{pattern}"] = None
    for pattern in cfg.angle_patterns:
        try:
            hists[f"angle_{pattern}"] = bond_angle_hist(mols, pattern, cfg.bond_tolerance)
        except EmptyHistogramError:
            hists[f"angle_{pattern}"] = None
    return hists


def evaluate_samples(samples, pockets, reference, cfg, params=None):
    """
    Full evaluation of a sampled run.

    Parameters
    ----------
    samples : list of tuple
        (molecule id, pocket id, MoleculeCloud).
    pockets : dict
        Pocket id to PocketCloud.
    reference : list of MoleculeCloud
        Molecules the bond geometry is compared against.
    cfg : EvalConfig
    params : OracleParams or None

    Returns
    -------
    list of dict
        Per-molecule rows.
    dict
        Aggregate report: metric summaries, validity, diversity, specificity, JSD per pattern.
    dict
        Histogram name to (sample counts, reference counts), either may be None.
    """

    rows = [molecule_row(mid, pid, pockets[pid], mol, cfg, params) for mid, pid, mol in samples]
    by_pocket = {}
    for _, pid, mol in samples:
        by_pocket.setdefault(pid, []).append(mol)

    per_pocket_div = [diversity(mols, cfg.fingerprint_width) for mols in by_pocket.values() if len(mols) >= 2]
    scorer = default_scorer(params)
    top = {pid: (pockets[pid], top_ligands(pockets[pid], mols, scorer, cfg.top_m)) for pid, mols in by_pocket.items()}
    if len(pockets) > 1:
        sampler = random_off_pockets(pockets, cfg.n_off_targets, np.random.default_rng(cfg.seed))
        specificity = specificity_score(top, sampler, scorer)
    else:
        specificity = None

    sample_hists = geometry_histograms([mol for _, _, mol in samples], cfg)
    reference_hists = geometry_histograms(reference, cfg)
    divergences = {}
    for name, counts in sample_hists.items():
        ref = reference_hists[name]
        divergences[name] = None if counts is None or ref is None else jsd(counts, ref)

    report = {
        "n_molecules": len(rows),
        "summary": summarize(rows) if rows else {},
        "validity": float(np.mean([r["valid"] for r in rows])) if rows else None,
        "diversity": float(np.mean(per_pocket_div)) if per_pocket_div else None,
        "specificity": specificity,
        "jsd": divergences,
    }
    hists = {name: (sample_hists[name], reference_hists[name]) for name in sample_hists}
    return rows, report, hists


def pocket_means(rows, key):
    means = {}
    for row in rows:
        means.setdefault(row["pocket"], []).append(row[key])
    return {pid: float(np.mean(values)) for pid, values in means.items()}


def compare_runs(guided_rows, baseline_rows):
    """
    Statistical comparison of a guided run against a baseline on the same pockets.

    Returns
    -------
    dict
        Paired one-sided Wilcoxon p-value on per-pocket mean affinity, one-sided KS p-value on
        the affinity distributions, and a one-sided sign test p-value on per-pocket mean clashes.
    """

    guided_aff = pocket_means(guided_rows, "pseudo_affinity")
    base_aff = pocket_means(baseline_rows, "pseudo_affinity")
    shared = sorted(set(guided_aff) & set(base_aff))
    if not shared:
        raise InvalidRangeError("runs share no pocket")

    g = np.array([guided_aff[p] for p in shared])
    b = np.array([base_aff[p] for p in shared])
    wilcoxon_p = float(stats.wilcoxon(g, b, alternative="less").pvalue) if np.any(g != b) else 1.0
    # the guided CDF lies above the baseline CDF when guided affinities are lower
    ks = stats.ks_2samp(
        [r["pseudo_affinity"] for r in guided_rows], [r["pseudo_affinity"] for r in baseline_rows], alternative="greater"
    )

    guided_clash = pocket_means(guided_rows, "clash")
    base_clash = pocket_means(baseline_rows, "clash")
    diffs = [guided_clash[p] - base_clash[p] for p in shared]
    nonzero = [d for d in diffs if d != 0]
    if nonzero:
        sign_p = float(stats.binomtest(sum(d < 0 for d in nonzero), len(nonzero), 0.5, alternative="greater").pvalue)
    else:
        sign_p = 1.0

    return {
        "pockets": len(shared),
        "mean_affinity_guided": float(g.mean()),
        "mean_affinity_baseline": float(b.mean()),
        "wilcoxon_p": wilcoxon_p,
        "ks_p": float(ks.pvalue),
        "mean_clash_guided": float(np.mean([guided_clash[p] for p in shared])),
        "mean_clash_baseline": float(np.mean([base_clash[p] for p in shared])),
        "sign_test_p": sign_p,
    }
