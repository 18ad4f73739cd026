"""Shared constructors and comparisons for the test suite."""

import numpy as np

from fewha.config import DmConfig, GuideStar, LayerConfig, SystemGeometry, WfsConfig


def small_geometry(n_subap=4, order_j=3, heights=(0.0,), stars=None, **kw) -> SystemGeometry:
    """Hand-built single-WFS geometry for targeted tests."""
    stars = stars or (GuideStar("NGS", (0.0, 0.0)),)
    n_l = len(heights)
    strengths = [1.0 / n_l] * n_l
    strengths[-1] = 1.0 - sum(strengths[:-1])
    kw.setdefault("regularization_alpha", 1e-2)
    kw.setdefault("eval_grid_n", 1)
    return SystemGeometry(
        telescope_diameter=kw.pop("telescope_diameter", 4.0),
        central_obstruction_fraction=kw.pop("central_obstruction_fraction", 0.0),
        wfs_list=tuple(WfsConfig(n_subap, 0.01) for _ in stars),
        guide_stars=tuple(stars),
        layers=tuple(LayerConfig(h, order_j, s) for h, s in zip(heights, strengths)),
        dms=tuple(DmConfig(n_subap + 1, h) for h in heights),
        **kw,
    )


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    return np.linalg.norm(a - b) / nb if nb > 0 else np.linalg.norm(a)

