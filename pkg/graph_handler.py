"""
This module handles the bond graphs of ligands and related helper functions.
Graphs are networkx graphs whose nodes are atom indices and whose edges are inferred bonds.
"""

import networkx as nx
import numpy as np

from molsys import infer_bonds


def bond_graph(molecule, tolerance=0.4):
    """
    Builds the bond graph of a ligand. Every atom becomes a node with its element as attribute,
    every inferred bond becomes an edge with its length and order bin.

    Parameters
    ----------
    molecule : MoleculeCloud
        Ligand whose bonds should be perceived.
    tolerance : float
        Slack in Angstrom passed to infer_bonds.

    Returns
    -------
    nx.Graph
        Bond graph with node attribute element and edge attributes length and order.
    """

    G = nx.Graph()
    for i, symbol in enumerate(molecule.symbols):
        G.add_node(i, element=symbol)
    for i, j, order in infer_bonds(molecule, tolerance):
        length = float(np.linalg.norm(molecule.x[i] - molecule.x[j]))
        G.add_edge(i, j, length=length, order=order)
    return G


def _pair_key(a, b):
    return tuple(sorted((a, b)))


def bond_lengths(G):
    """
    Collects all bond lengths with their element pair.

    Parameters
    ----------
    G : nx.Graph
        Bond graph from bond_graph.

    Returns
    -------
    list of tuple
        (element pair sorted alphabetically, length in Angstrom) per bond, in edge order.
    """

    rows = []
    for u, v, data in sorted(G.edges(data=True)):
        rows.append((_pair_key(G.nodes[u]["element"], G.nodes[v]["element"]), data["length"]))
    return rows


def bond_angles(G, coords):
    """
    Collects every bonded angle i-center-k of the graph.

    Parameters
    ----------
    G : nx.Graph
        Bond graph from bond_graph.
    coords : np.ndarray
        N x 3 coordinates of the atoms.

    Returns
    -------
    list of tuple
        (element triple with the center in the middle and the ends sorted, angle in degrees).
    """

    rows = []
    for center in sorted(G.nodes):
        neighbors = sorted(G.neighbors(center))
        # every unordered pair of neighbors forms one angle
        for a in range(len(neighbors) - 1):
            for b in range(a + 1, len(neighbors)):
                i, k = neighbors[a], neighbors[b]
                u = coords[i] - coords[center]
                w = coords[k] - coords[center]
                cos = np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w))
                angle = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
                ends = _pair_key(G.nodes[i]["element"], G.nodes[k]["element"])
                rows.append(((ends[0], G.nodes[center]["element"], ends[1]), angle))
    return rows


def pairs_within_hops(G, hops):
    """
    Set of atom pairs (i < j) connected by a path of at most `hops` bonds.

    Parameters
    ----------
    G : nx.Graph
        Bond graph from bond_graph.
    hops : int
        Maximum topological distance.

    Returns
    -------
    set of tuple
    """

    pairs = set()
    if hops < 1:
        return pairs
    for source, lengths in nx.all_pairs_shortest_path_length(G, cutoff=hops):
        for target, dist in lengths.items():
            if source < target and dist >= 1:
                pairs.add((source, target))
    return pairs


def branching_statistics(G):
    """
    Graph statistics used by the synthetic accessibility proxy.

    Parameters
    ----------
    G : nx.Graph
        Bond graph from bond_graph.

    Returns
    -------
    dict
        branch_fraction (share of atoms with three or more bonds), rings (cycle basis size)
        and components (number of connected fragments).
    """

    n = G.number_of_nodes()
    branch_points = sum(1 for _, degree in G.degree() if degree >= 3)
    return {
        "branch_fraction": branch_points / n if n else 0.0,
        "rings": len(nx.cycle_basis(G)),
        "components": nx.number_connected_components(G),
    }
