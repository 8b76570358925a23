"""Fractional Sobolev norms, dagger lower bounds, iterate tracking."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from solab import (
    BoxGrid,
    GridDensity,
    build_ulam,
    srb_density_ulam,
)
from solab.norms import (
    AffineLeaf,
    BoundaryMassError,
    LeafDictionary,
    MollifiedDensity,
    TestProfile as Profile,
    dagger_norm_lower,
    default_dictionary,
    l2_norm,
    ly_ratio_track,
    sobolev_norm,
    sobolev_norm_dq,
)


def _bump_density(model, nx, ny, seed=0, y_frac=0.7):
    """Random trig-in-x density with compact support in y."""
    rng = np.random.default_rng(seed)
    g = BoxGrid.for_model(model, nx, ny)
    xc, yc = g.centers()
    a, b = rng.uniform(-0.5, 0.5, 2)
    fx = 1.2 + a * np.cos(2 * np.pi * xc[:, 0]) + b * np.sin(4 * np.pi * xc[:, 0])
    half = y_frac * model.k0
    fy = np.where(np.abs(yc[:, 0]) < half,
                  np.cos(0.5 * np.pi * yc[:, 0] / half) ** 2, 0.0)
    return GridDensity(g, fx * fy * g.cell_volume)


class TestFourierNorm:
    def test_parseval_at_s_zero(self, fat2):
        for seed in range(5):
            h = _bump_density(fat2, 48, 48, seed=seed)
            assert sobolev_norm(h, 0.0) == pytest.approx(
                l2_norm(h), rel=1e-12)

    def test_monotone_in_s(self, fat2):
        h = _bump_density(fat2, 64, 64, seed=3)
        norms = [sobolev_norm(h, s) for s in (0.0, 0.1, 0.5, 1.0, 1.5)]
        assert all(a < b for a, b in zip(norms, norms[1:]))

    def test_homogeneous(self, fat2):
        h = _bump_density(fat2, 32, 32, seed=1)
        doubled = GridDensity(h.grid, 2.0 * h.mass)
        for s in (0.0, 0.4, 1.2):
            assert sobolev_norm(doubled, s) == pytest.approx(
                2.0 * sobolev_norm(h, s), rel=1e-14)

    def test_two_mode_closed_form(self, fat2):
        # phi = cos(2 pi x) exp(-y^2 / 2 sigma^2): the x transform is two
        # unit-frequency lines, so the squared norm reduces to a 1-d
        # integral of the Gaussian transform against (2 + eta^2)^s
        sig = 0.04
        g = BoxGrid.for_model(fat2, 128, 128)
        xc, yc = g.centers()
        vals = np.cos(2 * np.pi * xc[:, 0]) * np.exp(-yc[:, 0] ** 2 / (2 * sig ** 2))
        h = GridDensity(g, vals * g.cell_volume)
        for s in (0.15, 0.7):
            num = sobolev_norm(h, s)
            integrand = lambda eta: (sig * math.sqrt(2 * math.pi) *
                                     math.exp(-2 * math.pi ** 2 * sig ** 2
                                              * eta ** 2)) ** 2 \
                * (2 + eta ** 2) ** s
            integral, _ = quad(integrand, -np.inf, np.inf)
            assert num == pytest.approx(math.sqrt(0.5 * integral), rel=1e-4)

    def test_interpolation_inequality(self, fat2):
        # (1+k^2)^t <= eps (1+k^2)^s + C(eps) pointwise gives
        # |phi|_{H^t}^2 <= eps |phi|_{H^s}^2 + C(eps) |phi|_{L2}^2
        s, t = 0.8, 0.3
        lam = np.linspace(1.0, 1e6, 200001)
        for eps in (0.5, 0.1, 0.01):
            c_eps = float(np.max(lam ** t - eps * lam ** s))
            for seed in (11, 12, 13):
                h = _bump_density(fat2, 48, 48, seed=seed)
                lhs = sobolev_norm(h, t) ** 2
                rhs = (eps * sobolev_norm(h, s) ** 2
                       + c_eps * l2_norm(h) ** 2)
                assert lhs <= rhs * (1 + 1e-10)

    def test_zero_density(self, fat2):
        g = BoxGrid.for_model(fat2, 16, 16)
        z = GridDensity(g, np.zeros(g.n_cells))
        assert sobolev_norm(z, 0.7) == 0.0
        assert sobolev_norm_dq(z, 0.7) == 0.0

    def test_boundary_guard(self, fat2):
        g = BoxGrid.for_model(fat2, 16, 16)
        mass = np.full(g.n_cells, 1.0 / g.n_cells)   # touches the walls
        h = GridDensity(g, mass)
        with pytest.raises(BoundaryMassError):
            sobolev_norm(h, 0.5)
        # loosening the guard admits the same density
        assert sobolev_norm(h, 0.5, boundary_tol=1.0) > 0.0


class TestDifferenceQuotient:
    def test_matches_quadruple_loop_oracle(self, fat2):
        h = _bump_density(fat2, 12, 12, seed=4)
        grid = h.grid
        cell = grid.cell_volume
        hx, hy = 1.0 / grid.nx[0], grid.y_width[0]
        n_side = round(0.5 * 0.5 * grid.ny[0])
        cutoff = 4
        for s in (0.35, 1.35):
            v = np.pad(h.values(), [(0, 0), (n_side, n_side)])
            if s < 1:
                fields, sigma = [v], s
                base = (v ** 2).sum() * cell
            else:
                dx = (np.roll(v, -1, axis=0) - v) / hx
                dy = (np.roll(v, -1, axis=1) - v) / hy
                dy[:, -1] = 0.0
                fields, sigma = [dx, dy], s - 1.0
                base = ((v ** 2).sum() + (dx ** 2).sum()
                        + (dy ** 2).sum()) * cell
            nx, nyp = v.shape
            dq = 0.0
            for ox in range(-cutoff, cutoff + 1):
                for oy in range(-cutoff, cutoff + 1):
                    if ox == 0 and oy == 0:
                        continue
                    w = math.sqrt((ox * hx) ** 2 + (oy * hy) ** 2)
                    kern = w ** (2 + 2 * sigma)
                    for f in fields:
                        acc = 0.0
                        for i in range(nx):
                            for j in range(nyp):
                                jj = j + oy
                                tgt = (f[(i + ox) % nx, jj]
                                       if 0 <= jj < nyp else 0.0)
                                acc += (tgt - f[i, j]) ** 2
                        dq += acc * cell * cell / kern
            oracle = math.sqrt(base + dq)
            assert sobolev_norm_dq(h, s, cutoff=cutoff) == pytest.approx(
                oracle, rel=1e-12)

    def test_rejects_integer_and_out_of_range(self, fat2):
        h = _bump_density(fat2, 8, 8)
        for bad in (0.0, 1.0, 2.0, -0.3, 2.5):
            with pytest.raises(ValueError):
                sobolev_norm_dq(h, bad)

    def test_equivalence_ratio_stable_under_refinement(self, fat2):
        # the Fourier/difference-quotient ratio is an equivalence
        # constant: it must stabilize as the grid refines with the
        # physical offset window held fixed (cutoff doubled with cells)
        def ratio(nx, cutoff, s):
            h = _bump_density(fat2, nx, nx, seed=6)
            return sobolev_norm(h, s) ** 2 / sobolev_norm_dq(
                h, s, cutoff=cutoff) ** 2
        for s in (0.15, 0.5):
            k_coarse = ratio(64, 8, s)
            k_fine = ratio(128, 16, s)
            assert 0.9 <= k_fine / k_coarse <= 1.1


class TestProfiles:
    def test_plateau_exact_norms(self, fat2):
        k0 = fat2.k0
        for w in (0.3, 0.5, 0.8):
            prof = Profile("plateau", k0, (w,))
            delta = (1 - w) * k0
            assert prof.c_norm(0) == pytest.approx(1.0)
            assert prof.c_norm(1) == pytest.approx(max(1.0, np.pi / (2 * delta)))
            with pytest.raises(ValueError):
                prof.c_norm(2)

    def test_mode_exact_norms(self, fat2):
        k0 = fat2.k0
        for k in (1, 2, 3):
            prof = Profile("mode", k0, (k,))
            a = k * np.pi / (2 * k0)
            for j in range(4):
                assert prof.c_norm(j) == pytest.approx(max(1.0, a ** j))

    def test_plateau_support_and_range(self, fat2):
        k0 = fat2.k0
        prof = Profile("plateau", k0, (0.5,))
        y = np.linspace(-k0, k0, 401)[:, None]
        vals = prof.eval(y)
        inner = np.abs(y[:, 0]) <= 0.5 * k0
        np.testing.assert_allclose(vals[inner], 1.0)
        assert vals.min() >= 0.0 and vals.max() == pytest.approx(1.0)
        assert abs(vals[0]) <= 1e-12 and abs(vals[-1]) <= 1e-12


class TestDaggerLowerBound:
    def _closed_form_h(self, k0):
        class H:
            def eval_deriv(self, alpha, beta, x, y):
                i, j = alpha[0], beta[0]
                tx = {0: 1 + 0.5 * np.sin(2 * np.pi * x[..., 0]),
                      1: np.pi * np.cos(2 * np.pi * x[..., 0])}[i]
                ty = {0: k0 ** 2 - y[..., 0] ** 2,
                      1: -2 * y[..., 0],
                      2: -2.0 * np.ones_like(y[..., 0])}[j]
                return tx * ty
        return H()

    def _small_dictionary(self, k0):
        leaves = (AffineLeaf((0.2,), ((0.0,),)), AffineLeaf((0.6,), ((0.3,),)))
        tests = (Profile("plateau", k0, (0.6,)), Profile("mode", k0, (1,)))
        return LeafDictionary(leaves=leaves, tests=tests, k0=k0, k1=1.0,
                              r=2, n_quad=257)

    def test_matches_manual_sweep(self, fat2):
        k0 = fat2.k0
        h = self._closed_form_h(k0)
        d = self._small_dictionary(k0)
        lb = dagger_norm_lower(h, rho=1, dictionary=d)
        assert lb.value == pytest.approx(0.03825188813288528, rel=1e-12)
        assert lb.mollify_width == 0.0

        # independent replication of the sweep with midpoint quadrature
        t = (np.arange(257) + 0.5) / 257 * 2 * k0 - k0
        wq = 2 * k0 / 257
        best = 0.0
        for leaf in d.leaves:
            ys = t[:, None]
            xs = np.mod(np.array(leaf.anchor)[None, :]
                        + ys @ np.array(leaf.slope).T, 1.0)
            for prof in d.tests:
                max_ord = 1 if prof.kind == "plateau" else 10
                for order in range(2):
                    if order > max_ord:
                        continue
                    for i in range(order + 1):
                        j = order - i
                        vals = h.eval_deriv((i,), (j,), xs, ys)
                        integ = abs((vals * prof.eval(ys)).sum() * wq)
                        best = max(best, integ / prof.c_norm(order))
        assert lb.value == pytest.approx(best, rel=1e-14)

    def test_monotone_in_rho_and_dictionary(self, fat2):
        k0 = fat2.k0
        h = self._closed_form_h(k0)
        d = self._small_dictionary(k0)
        lb0 = dagger_norm_lower(h, rho=0, dictionary=d)
        lb1 = dagger_norm_lower(h, rho=1, dictionary=d)
        assert lb1.value >= lb0.value
        bigger = LeafDictionary(
            leaves=d.leaves + (AffineLeaf((0.9,), ((-0.5,),)),),
            tests=d.tests, k0=k0, k1=1.0, r=2, n_quad=257)
        assert dagger_norm_lower(h, rho=1, dictionary=bigger).value >= lb1.value

    def test_rho_guards(self, fat2):
        h = self._closed_form_h(fat2.k0)
        d = self._small_dictionary(fat2.k0)
        with pytest.raises(ValueError):
            dagger_norm_lower(h, rho=2, dictionary=d)   # rho > r - 1
        with pytest.raises(ValueError):
            dagger_norm_lower(h, rho=-1, dictionary=d)

    def test_grid_density_route(self, fat2):
        h = _bump_density(fat2, 64, 64, seed=2)
        d = default_dictionary(fat2)
        lb = dagger_norm_lower(h, rho=1, dictionary=d, mollify_width=2.0)
        assert lb.value > 0.0
        assert lb.mollify_width == 2.0
        assert 0 <= lb.leaf_index < len(d.leaves)

    def test_default_dictionary_structure(self, fat2):
        d = default_dictionary(fat2, n_leaves=8)
        assert len(d.leaves) == 8
        # the first leaf is exactly vertical; slopes obey the cap
        assert d.leaves[0].slope == ((0.0,),)
        cap = min(1.0 / (2.0 * fat2.alpha0), 1.0)
        for leaf in d.leaves:
            assert abs(leaf.slope[0][0]) <= cap + 1e-12
        anchors = [leaf.anchor[0] for leaf in d.leaves]
        assert len(set(round(a, 9) for a in anchors)) == 8
        kinds = {p.kind for p in d.tests}
        assert kinds == {"plateau", "mode"}


class TestMollifiedDensity:
    def test_zeroth_derivative_tracks_values(self, fat2):
        h = _bump_density(fat2, 96, 96, seed=8)
        mol = MollifiedDensity(h, width_cells=1.0)
        g = h.grid
        xc, yc = g.centers()
        v = mol.eval_deriv((0,), (0,), xc, yc)
        dense = h.values().ravel()
        keep = dense > dense.max() * 0.1
        rel = np.abs(v[keep] - dense[keep]) / dense.max()
        assert rel.max() <= 0.05

    def test_first_derivative_matches_finite_difference(self, fat2):
        h = _bump_density(fat2, 96, 96, seed=9)
        mol = MollifiedDensity(h, width_cells=2.0)
        x = np.full((41, 1), 0.37)
        y = np.linspace(-0.5 * fat2.k0, 0.5 * fat2.k0, 41)[:, None]
        dy = mol.eval_deriv((0,), (1,), x, y)
        # step over two cells so the difference sees the smooth field,
        # not the kinks of the piecewise-linear interpolant
        eps = 2.0 * h.grid.y_width[0]
        fd = (mol.eval_deriv((0,), (0,), x, y + eps)
              - mol.eval_deriv((0,), (0,), x, y - eps)) / (2 * eps)
        scale = np.abs(dy).max()
        assert np.abs(dy - fd).max() <= 0.05 * scale


class TestIterateTracking:
    def test_fixed_point_ratios_are_one(self, fat2):
        g = BoxGrid.for_model(fat2, 64, 64)
        op = build_ulam(fat2, g)
        fp = srb_density_ulam(op)
        rep = ly_ratio_track(fat2, op, fp.density, s=0.15, rho=1, n_max=5,
                             dagger_every=2)
        assert all(abs(r - 1.0) <= 0.02 for r in rep.ratios)
        assert rep.fixed_point_ratio == pytest.approx(1.0, abs=0.02)
        assert rep.fitted_ratio == pytest.approx(1.0, abs=0.02)

    def test_report_rows_and_thinning(self, fat2):
        g = BoxGrid.for_model(fat2, 48, 48)
        op = build_ulam(fat2, g)
        fp = srb_density_ulam(op)
        rep = ly_ratio_track(fat2, op, fp.density, s=0.15, rho=1, n_max=6,
                             dagger_every=3)
        rows = rep.rows()
        assert len(rows) == len(rep.steps) == 7         # steps 0..n_max
        # dagger bounds are computed every third step only
        present = [i for i, v in enumerate(rep.dagger_lbs) if not math.isnan(v)]
        assert present == [0, 3, 6]
        assert rep.resolution == (48, 48)
        d = rep.as_dict()
        assert d["s"] == 0.15 and d["rho"] == 1
