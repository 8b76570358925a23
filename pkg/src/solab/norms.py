"""Sobolev and leaf-pairing norms for grid densities.

Densities live on T^u x [-K0, K0]^d.  For the fractional Sobolev norm
the y block is embedded in a periodic box [-Y, Y]^d with Y = K0(1+pad)
so the transform

    phi_hat(xi, eta) = integral of phi * exp(-2 pi i (<xi,x> + <eta,y>))

becomes an FFT over the frequency lattices xi in Z^u and eta in
(1/(2Y)) Z^d (cycles per unit, matching the 2 pi i kernel), and

    |phi|_{H^s}^2 = sum |phi_hat|^2 (1 + |xi|^2 + |eta|^2)^s

with the counting measure weighted by 1/prod(2Y_j).  Periodization is
only valid when the density actually vanishes near the y walls; a
boundary-mass guard rejects densities that would alias.

Three further tools: a difference-quotient form of the same norm
(double-integral kernel |w|^{-(u+d+2 sigma)}, equivalent up to a
constant that is recorded, never assumed); finite-dictionary lower
bounds for the leaf-pairing norm

    |h|_rho^dagger = sup integral phi(y) d_x^alpha d_y^beta h(psi(y), y) dy

over admissible leaves psi (affine here, slope <= k1 = 1/(2 alpha0))
and C^{|alpha|+|beta|}-normalized tests phi; and a Lasota-Yorke ratio
tracker recording |L^n phi|_{H^s} alongside the dagger lower bounds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .model import SkewModel
from .transfer import BoxGrid, GridDensity, UlamOperator


class BoundaryMassError(ValueError):
    """Density carries too much mass at the y walls to periodize."""


# ---------------------------------------------------------------------------
# Fourier H^s
# ---------------------------------------------------------------------------

def _boundary_fraction(density: GridDensity) -> float:
    """Fraction of |mass| in the outermost y layer (any y axis)."""
    grid = density.grid
    arr = np.abs(density.mass.reshape(grid.shape))
    total = arr.sum()
    if total == 0.0:
        return 0.0
    worst = 0.0
    for k in range(grid.d):
        ax = grid.u + k
        sl = [slice(None)] * arr.ndim
        sl[ax] = np.array([0, grid.shape[ax] - 1])
        worst = max(worst, float(arr[tuple(sl)].sum()) / total)
    return worst


class SpectralGrid:
    """FFT-ready periodization of a GridDensity with padded y axes.

    Each y axis gains ``round(pad * ny / 2)`` zero cells per side, so
    the periodic box half-width is Y = K0 + n_side * h_y (= K0 (1+pad)
    when ny is divisible); frequencies are integers on the x axes and
    k/(2Y) on the y axes.  At s = 0 the norm reproduces the quadrature
    L2 norm of the piecewise-constant density exactly (discrete
    Parseval), which anchors the normalization.
    """

    def __init__(self, density: GridDensity, pad: float = 0.5,
                 boundary_tol: float = 1e-8):
        grid = density.grid
        frac = _boundary_fraction(density)
        if frac > boundary_tol:
            raise BoundaryMassError(
                f"y-boundary band holds {frac:.3e} of the mass "
                f"(> {boundary_tol:.1e}); enlarge K0 or the grid")
        self.grid = grid
        self.pad = float(pad)
        self.boundary_fraction = frac

        mass = density.mass.reshape(grid.shape)
        pad_spec = [(0, 0)] * grid.u
        self.half_widths: list[float] = []
        for k in range(grid.d):
            n_side = int(round(0.5 * self.pad * grid.ny[k]))
            pad_spec.append((n_side, n_side))
            self.half_widths.append(grid.k0 + n_side * grid.y_width[k])
        self.padded = np.pad(mass, pad_spec)
        self._fft = np.fft.fftn(self.padded)
        self._power = np.abs(self._fft) ** 2

        # squared frequency magnitude, built by broadcasting per axis
        shape = self.padded.shape
        sq = np.zeros(shape)
        for ax in range(grid.u):
            xi = np.fft.fftfreq(shape[ax], d=1.0 / shape[ax])
            sq = sq + (xi ** 2).reshape(
                (1,) * ax + (-1,) + (1,) * (len(shape) - ax - 1))
        for k in range(grid.d):
            ax = grid.u + k
            eta = np.fft.fftfreq(shape[ax], d=grid.y_width[k])
            sq = sq + (eta ** 2).reshape(
                (1,) * ax + (-1,) + (1,) * (len(shape) - ax - 1))
        self._freq_sq = sq
        self._measure = 1.0 / float(np.prod([2.0 * y for y in self.half_widths]))

    def norm(self, s: float) -> float:
        """The H^s norm of the piecewise-constant density."""
        total = float((self._power * (1.0 + self._freq_sq) ** s).sum())
        return math.sqrt(self._measure * total)


def sobolev_norm(density: GridDensity, s: float, pad: float = 0.5,
                 boundary_tol: float = 1e-8) -> float:
    """Fourier-weighted H^s norm of a grid density (see SpectralGrid)."""
    return SpectralGrid(density, pad=pad, boundary_tol=boundary_tol).norm(s)


def l2_norm(density: GridDensity) -> float:
    """Quadrature L2 norm of the piecewise-constant density."""
    return math.sqrt(float((density.mass ** 2).sum()) / density.grid.cell_volume)


# ---------------------------------------------------------------------------
# difference-quotient form
# ---------------------------------------------------------------------------

def _shifted_diff_sq(arr: np.ndarray, offset: tuple[int, ...], u: int) -> float:
    """sum over z of |arr(z + offset) - arr(z)|^2 with periodic x axes and
    zero extension on the (already padded) y axes."""
    shifted = arr
    for ax, off in enumerate(offset):
        if off == 0:
            continue
        if ax < u:
            shifted = np.roll(shifted, -off, axis=ax)
        else:
            moved = np.zeros_like(shifted)
            src = [slice(None)] * arr.ndim
            dst = [slice(None)] * arr.ndim
            if off > 0:
                src[ax] = slice(off, None)
                dst[ax] = slice(None, -off)
            else:
                src[ax] = slice(None, off)
                dst[ax] = slice(-off, None)
            moved[tuple(dst)] = shifted[tuple(src)]
            shifted = moved
    return float(((shifted - arr) ** 2).sum())


def sobolev_norm_dq(density: GridDensity, s: float, pad: float = 0.5,
                    boundary_tol: float = 1e-8, cutoff: int = 8) -> float:
    """Difference-quotient H^s norm for non-integer s in (0, 2).

    Discretizes |phi|_{L2}^2 + c int int |D phi(z+w) - D phi(z)|^2
    / |w|^{u+d+2 sigma} dz dw (D = identity for s < 1; first
    differences for 1 < s < 2, with the H^1 part added), the offsets w
    ranging over grid vectors with sup-norm at most ``cutoff`` cells.
    Equivalent to the Fourier norm only up to a constant; callers must
    record the empirical ratio rather than assume 1.
    """
    s = float(s)
    if not (0.0 < s < 2.0) or s == 1.0:
        raise ValueError(
            "difference-quotient form needs non-integer s in (0, 2); "
            "use sobolev_norm for integer s")
    spect = SpectralGrid(density, pad=pad, boundary_tol=boundary_tol)
    grid = density.grid
    cell = grid.cell_volume
    values = spect.padded / cell                     # density values, padded
    u, d = grid.u, grid.d
    dim = u + d
    steps = [1.0 / n for n in grid.nx] + list(grid.y_width)

    if s < 1.0:
        sigma = s
        fields = [values]
        base_sq = float((values ** 2).sum()) * cell
    else:
        sigma = s - 1.0
        fields = []
        grad_sq = 0.0
        for ax in range(dim):
            diff = (np.roll(values, -1, axis=ax) - values) / steps[ax]
            if ax >= u:   # one-sided difference leaving the support: drop wrap
                sl = [slice(None)] * values.ndim
                sl[ax] = -1
                diff[tuple(sl)] = 0.0
            fields.append(diff)
            grad_sq += float((diff ** 2).sum()) * cell
        base_sq = float((values ** 2).sum()) * cell + grad_sq

    dq = 0.0
    offsets = itertools.product(range(-cutoff, cutoff + 1), repeat=dim)
    for off in offsets:
        if all(o == 0 for o in off):
            continue
        w_phys = math.sqrt(sum((o * h) ** 2 for o, h in zip(off, steps)))
        kern = w_phys ** (dim + 2.0 * sigma)
        for g in fields:
            dq += _shifted_diff_sq(g, off, u) * cell * cell / kern
    return math.sqrt(base_sq + dq)


# ---------------------------------------------------------------------------
# leaf dictionary and dagger lower bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineLeaf:
    """psi(y) = anchor + slope @ y on y in [-K0, K0]^d (x mod 1)."""

    anchor: tuple[float, ...]
    slope: tuple[tuple[float, ...], ...]     # (u, d)

    def matrix(self) -> np.ndarray:
        return np.asarray(self.slope, dtype=np.float64)

    def eval(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.mod(np.asarray(self.anchor) + y @ self.matrix().T, 1.0)


class TestProfile:
    """Tensor-product test function with exact C^j normalization data.

    ``kind="plateau"``: raised-cosine plateau per axis (1 on |t| <= w K0,
    cosine falloff over the remaining band); derivative sup known in
    closed form, valid through C^1.  ``kind="mode"``: cos(k pi y /
    (2 K0)) per axis, valid through any order with C^j norm
    max(1, a^j), a = k pi/(2 K0).
    """

    def __init__(self, kind: str, k0: float, params: tuple):
        self.kind = kind
        self.k0 = float(k0)
        self.params = params
        if kind == "plateau":
            (w,) = params
            if not (0.0 < w < 1.0):
                raise ValueError("plateau fraction must be in (0, 1)")
            self.max_order = 1
        elif kind == "mode":
            (k,) = params
            self.max_order = None        # any order
        else:
            raise ValueError(f"unknown test profile kind {kind!r}")

    def _profile(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "plateau":
            (w,) = self.params
            edge = w * self.k0
            delta = self.k0 - edge
            out = np.zeros_like(t)
            a = np.abs(t)
            out[a <= edge] = 1.0
            band = (a > edge) & (a < self.k0)
            out[band] = 0.5 * (1.0 + np.cos(np.pi * (a[band] - edge) / delta))
            return out
        (k,) = self.params
        return np.cos(k * np.pi * t / (2.0 * self.k0))

    def c_norm(self, order: int) -> float:
        """Exact C^order norm of the d-fold tensor product (sup over
        mixed partials of total order <= order; profiles have sup 1 so
        the worst case loads the full order on one axis)."""
        if self.kind == "plateau":
            if order > 1:
                raise ValueError("plateau tests are only C^1")
            (w,) = self.params
            delta = self.k0 * (1.0 - w)
            return 1.0 if order == 0 else max(1.0, 0.5 * np.pi / delta)
        (k,) = self.params
        a = k * np.pi / (2.0 * self.k0)
        return max(1.0, a ** order)

    def eval(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        vals = self._profile(y[..., 0])
        for k in range(1, y.shape[-1]):
            vals = vals * self._profile(y[..., k])
        return vals


@dataclass
class LeafDictionary:
    """Finite families of admissible leaves and normalized tests.

    Lower bounds computed from it are certified only up to quadrature:
    every leaf satisfies the slope bound |A| <= k1 and stays inside the
    extended rectangle of its cell; every test divided by its exact
    C^j norm is admissible for order-j pairings.
    """

    leaves: list[AffineLeaf]
    tests: list[TestProfile]
    k0: float
    k1: float
    r: int
    n_quad: int = 257

    def quad_points(self, d: int) -> tuple[np.ndarray, float]:
        """Midpoint quadrature nodes on [-K0, K0]^d and the cell weight."""
        n = self.n_quad
        axis = -self.k0 + (np.arange(n) + 0.5) * (2.0 * self.k0 / n)
        if d == 1:
            pts = axis.reshape(-1, 1)
        else:
            mesh = np.meshgrid(*([axis] * d), indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return pts, (2.0 * self.k0 / n) ** d


def default_dictionary(model: SkewModel, partition=None, n_leaves: int = 8,
                       seed: int = 0, n_quad: int = 257) -> LeafDictionary:
    """Vertical-ish affine leaves through spread anchors plus a standard
    test battery (widening plateaus and low modes).

    Slopes are drawn up to the cone bound k1 = 1/(2 alpha0) (capped for
    f = 0, where the cone is unconstrained); anchors are deterministic
    low-discrepancy points of the torus.
    """
    k1 = math.inf if model.alpha0 == 0.0 else 0.5 / model.alpha0
    slope_cap = min(k1, 1.0)
    rng = np.random.default_rng(seed)
    leaves = []
    golden = 0.6180339887498949
    for i in range(n_leaves):
        anchor = np.mod(0.5 + golden * np.arange(1, model.u + 1) * (i + 1), 1.0)
        if i == 0:
            a = np.zeros((model.u, model.d))     # exactly vertical fiber
        else:
            a = rng.uniform(-1.0, 1.0, (model.u, model.d))
            norm = np.linalg.norm(a, 2)
            if norm > 0:
                a = a * (slope_cap * rng.uniform(0.2, 1.0) / norm)
        leaves.append(AffineLeaf(tuple(anchor), tuple(map(tuple, a))))
    tests = [TestProfile("plateau", model.k0, (w,))
             for w in (0.25, 0.5, 0.8, 0.95, 0.99)]
    tests += [TestProfile("mode", model.k0, (k,)) for k in (1, 2, 3)]
    return LeafDictionary(leaves=leaves, tests=tests, k0=model.k0, k1=k1,
                          r=model.r, n_quad=n_quad)


class MollifiedDensity:
    """Gaussian-mollified C^infinity interpolant of a grid density.

    Mollification multiplies the padded spectrum by
    exp(-2 pi^2 sigma_ax^2 |freq|^2) with sigma_ax = width_cells * h_ax;
    mixed derivatives come from (2 pi i freq)^order multipliers and are
    interpolated linearly off the grid.
    """

    def __init__(self, density: GridDensity, width_cells: float = 2.0,
                 pad: float = 0.5, boundary_tol: float = 1e-8):
        self.width_cells = float(width_cells)
        self.spectral = SpectralGrid(density, pad=pad,
                                     boundary_tol=boundary_tol)
        grid = density.grid
        self.grid = grid
        shape = self.spectral.padded.shape
        values_hat = np.fft.fftn(self.spectral.padded / grid.cell_volume)
        steps = [1.0 / n for n in grid.nx] + list(grid.y_width)
        mult = np.ones(shape)
        self._freqs = []
        for ax, n in enumerate(shape):
            fr = np.fft.fftfreq(n, d=steps[ax])
            self._freqs.append(fr)
            sigma = self.width_cells * steps[ax]
            damp = np.exp(-2.0 * (np.pi * sigma) ** 2 * fr ** 2)
            mult = mult * damp.reshape(
                (1,) * ax + (-1,) + (1,) * (len(shape) - ax - 1))
        self._hat = values_hat * mult
        self._axes = []
        for ax, n in enumerate(shape):
            h = steps[ax]
            lo = 0.0 if ax < grid.u else -self.spectral.half_widths[ax - grid.u]
            self._axes.append(lo + (np.arange(n) + 0.5) * h)
        self._cache: dict[tuple, RegularGridInterpolator] = {}

    def _interpolator(self, alpha: tuple[int, ...],
                      beta: tuple[int, ...]) -> RegularGridInterpolator:
        key = (tuple(alpha), tuple(beta))
        if key in self._cache:
            return self._cache[key]
        hat = self._hat
        order = list(alpha) + list(beta)
        shape = hat.shape
        for ax, j in enumerate(order):
            if j == 0:
                continue
            factor = 2.0 * np.pi * 1j * self._freqs[ax]
            hat = hat * (factor ** j).reshape(
                (1,) * ax + (-1,) + (1,) * (len(shape) - ax - 1))
        field = np.real(np.fft.ifftn(hat))
        # wrap the x axes by one sample so interpolation can cross 1 -> 0
        axes = [a.copy() for a in self._axes]
        for ax in range(self.grid.u):
            field = np.concatenate([field, field.take([0], axis=ax)], axis=ax)
            axes[ax] = np.append(axes[ax], axes[ax][0] + 1.0)
        interp = RegularGridInterpolator(axes, field, method="linear",
                                         bounds_error=False, fill_value=0.0)
        self._cache[key] = interp
        return interp

    def eval_deriv(self, alpha, beta, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(d/dx)^alpha (d/dy)^beta of the mollified density at points."""
        x = np.mod(np.asarray(x, dtype=np.float64), 1.0)
        y = np.asarray(y, dtype=np.float64)
        pts = np.concatenate([x, y], axis=-1)
        # keep x in the wrapped chart [first center, first center + 1)
        for ax in range(self.grid.u):
            lo = self._axes[ax][0]
            pts[..., ax] = lo + np.mod(pts[..., ax] - lo, 1.0)
        return self._interpolator(tuple(alpha), tuple(beta))(pts)


def _multi_indices(dims: int, total: int):
    """All multi-indices over `dims` axes with |index| == total."""
    if dims == 0:
        if total == 0:
            yield ()
        return
    for head in range(total + 1):
        for rest in _multi_indices(dims - 1, total - head):
            yield (head,) + rest


@dataclass(frozen=True)
class DaggerLowerBound:
    """Best pairing found in the dictionary (a lower bound of the norm)."""

    value: float
    rho: int
    leaf_index: int
    test_index: int
    alpha: tuple[int, ...]
    beta: tuple[int, ...]
    mollify_width: float

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "rho": self.rho,
            "leaf_index": self.leaf_index,
            "test_index": self.test_index,
            "alpha": list(self.alpha),
            "beta": list(self.beta),
            "mollify_width": self.mollify_width,
        }


def dagger_norm_lower(h, rho: int, dictionary: LeafDictionary,
                      mollify_width: float = 2.0) -> DaggerLowerBound:
    """Finite-dictionary lower bound for the leaf-pairing norm at order rho.

    ``h`` may be a GridDensity (mollified first, width in cells
    recorded), a MollifiedDensity, or any object with an
    ``eval_deriv(alpha, beta, x, y)`` method (used as-is, e.g. closed
    forms in tests).  The result is the max over leaves, admissible
    multi-indices |alpha| + |beta| <= rho, and C^j-normalized tests of
    the absolute pairing integral (midpoint quadrature).
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rho > dictionary.r - 1:
        raise ValueError(
            f"rho = {rho} exceeds r - 1 = {dictionary.r - 1}; the pairing "
            f"norm scale is only defined below the smoothness of f")
    if isinstance(h, GridDensity):
        h = MollifiedDensity(h, width_cells=mollify_width)
        width = mollify_width
    elif isinstance(h, MollifiedDensity):
        width = h.width_cells
    else:
        width = 0.0
    if not hasattr(h, "eval_deriv"):
        raise TypeError("h must expose eval_deriv(alpha, beta, x, y)")

    d = len(dictionary.leaves[0].slope[0]) if dictionary.leaves else 0
    y_pts, weight = dictionary.quad_points(d)
    best = None
    for order in range(rho + 1):
        usable = [(j, t) for j, t in enumerate(dictionary.tests)
                  if t.max_order is None or order <= t.max_order]
        test_vals = [(j, t.eval(y_pts) / t.c_norm(order)) for j, t in usable]
        u_dims = len(dictionary.leaves[0].anchor) if dictionary.leaves else 0
        for a_total in range(order + 1):
            for alpha in _multi_indices(u_dims, a_total):
                for beta in _multi_indices(d, order - a_total):
                    for li, leaf in enumerate(dictionary.leaves):
                        x_pts = leaf.eval(y_pts)
                        g = h.eval_deriv(alpha, beta, x_pts, y_pts)
                        for j, phi in test_vals:
                            val = abs(float((phi * g).sum()) * weight)
                            if best is None or val > best.value:
                                best = DaggerLowerBound(
                                    val, rho, li, j, alpha, beta, width)
    if best is None:
        raise ValueError("dictionary has no leaves or tests")
    return best


# ---------------------------------------------------------------------------
# Lasota-Yorke ratio tracking
# ---------------------------------------------------------------------------

@dataclass
class NormReport:
    """Observed norm decay of operator iterates (no constants claimed)."""

    s: float
    rho: int
    resolution: tuple[int, ...]
    mollify_width: float
    steps: list[int] = field(default_factory=list)
    h_norms: list[float] = field(default_factory=list)
    dagger_lbs: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    fitted_ratio: float = math.nan
    fixed_point_ratio: float = math.nan

    def as_dict(self) -> dict:
        return {
            "s": self.s,
            "rho": self.rho,
            "resolution": list(self.resolution),
            "mollify_width": self.mollify_width,
            "steps": self.steps,
            "h_norms": self.h_norms,
            "dagger_lbs": self.dagger_lbs,
            "ratios": self.ratios,
            "fitted_ratio": self.fitted_ratio,
            "fixed_point_ratio": self.fixed_point_ratio,
        }

    def rows(self) -> list[tuple]:
        out = []
        for i, n in enumerate(self.steps):
            ratio = self.ratios[i - 1] if i >= 1 else math.nan
            dag = self.dagger_lbs[i] if i < len(self.dagger_lbs) else math.nan
            out.append((n, self.h_norms[i], dag, ratio))
        return out


def ly_ratio_track(model: SkewModel, operator: UlamOperator,
                   phi0: GridDensity, s: float, rho: int, n_max: int,
                   dictionary: LeafDictionary | None = None,
                   pad: float = 0.5, boundary_tol: float = 1e-8,
                   mollify_width: float = 2.0,
                   dagger_every: int = 1) -> NormReport:
    """Track H^s norms and dagger lower bounds along operator iterates.

    Iterates phi0 through the Ulam matrix (mass-normalized), recording
    the H^s norm at every step, the dictionary lower bound every
    ``dagger_every`` steps, stepwise norm ratios, and a fitted
    asymptotic ratio (geometric mean over the trailing quarter).  Only
    observed factors are reported; the inequality constants of the
    underlying theory are non-constructive.
    """
    if dictionary is None:
        dictionary = default_dictionary(model)
    report = NormReport(s=float(s), rho=int(rho),
                        resolution=operator.grid.shape,
                        mollify_width=float(mollify_width))
    dens = phi0.normalized()
    for n in range(n_max + 1):
        norm = sobolev_norm(dens, s, pad=pad, boundary_tol=boundary_tol)
        report.steps.append(n)
        report.h_norms.append(norm)
        if n % dagger_every == 0:
            lb = dagger_norm_lower(dens, rho, dictionary,
                                   mollify_width=mollify_width)
            report.dagger_lbs.append(lb.value)
        else:
            report.dagger_lbs.append(math.nan)
        if n == n_max:
            break
        dens = GridDensity(operator.grid, operator.apply(dens.mass))
        dens = dens.normalized()
    report.ratios = [b / a for a, b in zip(report.h_norms, report.h_norms[1:])]
    tail = max(3, len(report.ratios) // 4)
    if report.ratios:
        logs = np.log(np.asarray(report.ratios[-tail:]))
        report.fitted_ratio = float(np.exp(logs.mean()))
        report.fixed_point_ratio = report.ratios[-1]
    return report
