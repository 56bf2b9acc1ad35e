"""
This module handles the plotly figures written by the evaluation command: bond geometry
histograms of sampled against reference molecules and per-molecule metric distributions.
"""

import plotly.graph_objects as go


def build_layout(kind, title):
    """
    Builds a figure layout dictionary.
    Length, angle and metric histograms share a base and differ in their axis settings.

    Parameters
    ----------
    kind : str
        One of 'length', 'angle' or 'metric'.
    title : str
        Figure title.

    Returns
    -------
    dict
        Layout arguments for go.Figure.update_layout.
    """

    layout = {'title': title, 'template': 'plotly_white', 'barmode': 'overlay', 'bargap': 0.0}

    if kind == 'length':
        layout.update({'xaxis_title': 'bond length (Angstrom)', 'yaxis_title': 'density', 'xaxis_range': [0.0, 3.0]})

    elif kind == 'angle':
        layout.update({'xaxis_title': 'bond angle (degree)', 'yaxis_title': 'density', 'xaxis_range': [0.0, 180.0]})

    elif kind == 'metric':
        layout.update({'xaxis_title': title, 'yaxis_title': 'count'})

    return layout


def _density(counts):
    total = counts.sum()
    return counts / total if total else counts


def histogram_figure(name, edges, sample_counts, reference_counts):
    """
    Overlay of the sampled and reference histograms of one bond pattern.

    Parameters
    ----------
    name : str
        Histogram name such as 'length_CC' or 'angle_CCC'.
    edges : np.ndarray
        Bin edges.
    sample_counts, reference_counts : np.ndarray or None
        Counts per bin; None leaves the trace out.

    Returns
    -------
    go.Figure
    """

    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig = go.Figure()
    for label, counts in (('sampled', sample_counts), ('reference', reference_counts)):
        if counts is not None:
            fig.add_trace(go.Bar(x=centers, y=_density(counts), width=width, name=label, opacity=0.6))
    fig.update_layout(**build_layout(name.split('_', 1)[0], name))
    return fig


def metric_figure(name, values, baseline=None):
    """Histogram of one per-molecule metric, with the baseline run overlaid if given."""

    fig = go.Figure()
    fig.add_trace(go.Histogram(x=values, name='sampled', opacity=0.6))
    if baseline is not None:
        fig.add_trace(go.Histogram(x=baseline, name='baseline', opacity=0.6))
    fig.update_layout(**build_layout('metric', name))
    return fig


def write_figure(fig, path, name):
    fig.write_html(path, include_plotlyjs='cdn', div_id=name)
