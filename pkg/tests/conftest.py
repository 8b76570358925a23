"""Shared fixtures: reference models and density builders."""

import numpy as np
import pytest

from solab import (BoxGrid, Contraction, ExpandingMap, GridDensity, SkewModel,
                   TrigForcing)


@pytest.fixture(scope="session")
def fat2():
    """Baseline: doubling base, fat fiber (N |det C| = 1.2 > 1)."""
    return SkewModel(ExpandingMap(2), Contraction(0.6),
                     TrigForcing.cosine(1, 0.1), s=0.1)


@pytest.fixture(scope="session")
def zero_forcing():
    """f = 0 control on the same box (no ACIP; everything collapses
    onto y = 0).  k0 is pinned to the baseline's so grids match."""
    return SkewModel(ExpandingMap(2), Contraction(0.6),
                     TrigForcing.zero(1, 1), s=0.1, k0=0.275)


@pytest.fixture(scope="session")
def planar3():
    """u = 2 model: diag(3,3) base, one contracting fiber."""
    return SkewModel(ExpandingMap([[3, 0], [0, 3]]), Contraction(0.5),
                     TrigForcing.cosine((1, 0), 0.08, d=1), s=0.0)


def smooth_density(model, nx, ny, seed=0, y_frac=0.8):
    """Random trig-in-x times wall-vanishing bump-in-y density.

    The y factor is supported in |y| < y_frac * K0, so spectral guards
    pass; x harmonics up to 4 with random coefficients.
    """
    rng = np.random.default_rng(seed)
    grid = BoxGrid.for_model(model, nx, ny)
    xc = [(np.arange(n) + 0.5) / n for n in grid.nx]
    yc = [-model.k0 + (np.arange(n) + 0.5) * w
          for n, w in zip(grid.ny, grid.y_width)]
    mesh = np.meshgrid(*(xc + yc), indexing="ij")
    vals = np.ones(grid.shape)
    for ax in range(grid.u):
        part = np.ones_like(mesh[ax])
        for k in range(1, 5):
            a, b = rng.normal(scale=1.0 / k, size=2)
            part += a * np.cos(2 * np.pi * k * mesh[ax]) \
                + b * np.sin(2 * np.pi * k * mesh[ax])
        vals = vals * (1.2 + 0.5 * np.tanh(part))     # strictly positive
    for j in range(grid.d):
        y = mesh[grid.u + j]
        a = y_frac * model.k0
        vals = vals * np.where(np.abs(y) < a,
                               np.cos(np.pi * y / (2.0 * a)) ** 2, 0.0)
    return GridDensity(grid, (vals * grid.cell_volume).ravel())


def bump_start(model, grid, width_frac=0.6):
    """Uniform-in-x, cosine-bump-in-y start density (normalized)."""
    _, y = grid.centers()
    vals = np.ones(grid.n_cells)
    for k in range(grid.d):
        a = width_frac * grid.k0
        vals *= np.where(np.abs(y[:, k]) < a,
                         np.cos(np.pi * y[:, k] / (2.0 * a)) ** 2, 0.0)
    return GridDensity(grid, vals * grid.cell_volume).normalized()
