"""Acceptance gate: twelve end-to-end checks, one printed line each.

Each test prints a single ``[nn] PASS/FAIL`` summary line (visible with
``pytest tests/test_acceptance.py -v -s``) and then asserts the same
conditions, so the module doubles as a hard gate.  Tolerances are stated
inline; frozen reference numbers were archived from the first validated
run.  Wall-clock budgets are asserted too — they are generous, but a
check that blows its budget is a regression worth failing on.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from conftest import bump_start, smooth_density
from solab import (
    BoxGrid,
    Contraction,
    ExpandingMap,
    GridDensity,
    SkewModel,
    TrigForcing,
    WordTable,
    build_partition,
    build_ulam,
    certify_pair,
    smallest_dth_singular,
    srb_density_ulam,
    srb_histogram_mc,
    tau_upper_bound,
)
from solab.cli import main
from solab.experiments import Observable, fit_decay, measure_correlations
from solab.norms import l2_norm, ly_ratio_track, sobolev_norm
from solab.transfer import apply_L_exact
from solab.transversality import NON_TRANSVERSAL, TRANSVERSAL


def _report(num, ok, label, detail):
    print(f"[{num:02d}] {'PASS' if ok else 'FAIL'}  {label}: {detail}")


def _mixed6():
    """Model with a genuinely mixed verdict population at q = 2."""
    return SkewModel(ExpandingMap(6), Contraction(0.25),
                     TrigForcing.cosine(1, 0.02), s=0.0)


def test_01_condition_arithmetic(fat2):
    t0 = time.perf_counter()
    s = fat2.s_star()
    residual = abs(1.2 * 0.6 ** (2 * s) - 1.0)
    elapsed = time.perf_counter() - t0
    ok = residual <= 1e-10 and abs(s - 0.1784) <= 1e-4 and elapsed < 1.0
    _report(1, ok, "condition arithmetic",
            f"s*={s:.12f} residual={residual:.1e} ({elapsed:.3f}s)")
    assert residual <= 1e-10
    assert abs(s - 0.1784) <= 1e-4
    assert elapsed < 1.0


def _maximin_subspace_sampler(a, seed):
    """Lower estimate of the d-th singular value via Courant-Fischer.

    max over d-dim subspaces V of min over unit v in V of |Av|, taken
    over a coarse batch of random subspaces and then sharpened by
    annealed perturbation of the incumbent.  Every candidate value is a
    true minimum over its subspace, so the estimate approaches the
    target from below.
    """
    d, u = a.shape
    gram = a.T @ a
    if d == u:
        return math.sqrt(max(np.linalg.eigvalsh(gram)[0], 0.0))
    rng = np.random.default_rng(seed)

    def min_gain(qs):
        m = np.einsum("bud,uv,bve->bde", qs, gram, qs)
        return np.linalg.eigvalsh(m)[:, 0]

    q0, _ = np.linalg.qr(rng.standard_normal((3000, u, d)))
    vals = min_gain(q0)
    i = int(np.argmax(vals))
    best_q, best = q0[i], vals[i]
    for step in range(25):
        scale = 0.5 * 0.75 ** step
        qp, _ = np.linalg.qr(best_q[None]
                             + scale * rng.standard_normal((200, u, d)))
        v = min_gain(qp)
        i = int(np.argmax(v))
        if v[i] > best:
            best_q, best = qp[i], v[i]
    return math.sqrt(max(best, 0.0))


def test_02_smallest_singular_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_svd = worst_over = worst_under = 0.0
    for i in range(100):
        d = int(rng.integers(1, 5))
        u = int(rng.integers(d, 5))
        a = rng.standard_normal((d, u))
        exact = smallest_dth_singular(a)
        svd = np.linalg.svd(a, compute_uv=False)[d - 1]
        sampled = _maximin_subspace_sampler(a, seed=i)
        worst_svd = max(worst_svd, abs(exact - svd))
        worst_over = max(worst_over, sampled - exact)
        worst_under = max(worst_under, exact - sampled)
    elapsed = time.perf_counter() - t0
    ok = (worst_svd <= 1e-8 and worst_over <= 1e-10
          and worst_under <= 1e-2 and elapsed < 10)
    _report(2, ok, "m(A) oracle equivalence",
            f"svd={worst_svd:.1e} over={worst_over:.1e} "
            f"under={worst_under:.1e} ({elapsed:.1f}s)")
    assert worst_svd <= 1e-8
    # the sampler is one-sided: exact up to eigvalsh/svd roundoff above,
    # within 1e-2 below
    assert worst_over <= 1e-10
    assert worst_under <= 1e-2
    assert elapsed < 10


def test_03_trivial_forcing_tau(zero_forcing, fat2):
    t0 = time.perf_counter()
    reports = []
    taus = {}
    for q in (1, 2, 3):
        rep = tau_upper_bound(zero_forcing, q, [1])
        taus[q] = rep.tau_upper
        reports.append(rep)
    margins_negative = all(r.margin < 0.0 for r in reports)
    reports.append(tau_upper_bound(fat2, 2, [1]))
    reports.append(tau_upper_bound(_mixed6(), 2, [1]))
    floor_ok = all(r.tau_upper >= 1 for r in reports)
    elapsed = time.perf_counter() - t0
    ok = (taus == {1: 2, 2: 4, 3: 8} and margins_negative and floor_ok
          and elapsed < 10)
    _report(3, ok, "trivial-forcing tau",
            f"tau={taus} all margins<0: {margins_negative} "
            f"tau>=1: {floor_ok} ({elapsed:.1f}s)")
    assert taus == {1: 2, 2: 4, 3: 8}
    assert margins_negative       # certification must fail for f = 0
    assert floor_ok
    assert elapsed < 10


def test_04_certifier_soundness(fat2):
    # a transversal verdict carries a Lipschitz safety margin, so it may
    # never be contradicted on a ten-fold finer grid (which contains all
    # coarse nodes); the mixed model guarantees the check is not vacuous
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    flips = 0
    transversal_seen = 0
    for model, n_cases, q_hi in ((fat2, 50, 3), (_mixed6(), 25, 2)):
        part = build_partition(model.E, 0.45)
        for _ in range(n_cases):
            q = int(rng.integers(1, q_hi + 1))
            c = int(rng.integers(part.n_cells))
            words = list(WordTable(part, q, target=c))
            ia, ib = rng.integers(len(words), size=2)
            coarse = certify_pair(model, part, c, words[ia], words[ib],
                                  n_grid=33, max_refinements=0)
            fine = certify_pair(model, part, c, words[ia], words[ib],
                                n_grid=321, max_refinements=0)
            if coarse.verdict == TRANSVERSAL:
                transversal_seen += 1
                if fine.verdict == NON_TRANSVERSAL:
                    flips += 1
    elapsed = time.perf_counter() - t0
    ok = flips == 0 and transversal_seen > 0 and elapsed < 120
    _report(4, ok, "certifier soundness",
            f"75 cases, {transversal_seen} transversal, {flips} flips "
            f"at mesh/10 ({elapsed:.1f}s)")
    assert flips == 0
    assert transversal_seen > 0
    assert elapsed < 120


def test_05_transfer_duality(fat2):
    t0 = time.perf_counter()
    g = BoxGrid.for_model(fat2, 128, 128)
    xc, yc = g.centers()
    vol = g.cell_volume
    K = fat2.k0
    xn, yn = fat2.step(xc, yc)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        a, b, c, m = rng.uniform(-1, 1, 4)
        k = int(rng.integers(1, 4))

        def phi(xs, ys, a=a, k=k):
            # compact support in the box is what makes the identity exact
            bump = np.where(np.abs(ys[..., 0]) <= K,
                            np.cos(0.5 * np.pi * ys[..., 0] / K) ** 2, 0.0)
            return (1 + 0.5 * a * np.cos(2 * np.pi * k * xs[..., 0])) * bump

        def psi(xs, ys, b=b, c=c, m=m):
            return (b * np.sin(2 * np.pi * xs[..., 0]) + c) * ys[..., 0] / K + m

        lhs = (apply_L_exact(fat2, phi, xc, yc) * psi(xc, yc)).sum() * vol
        rhs = (phi(xc, yc) * psi(xn, yn)).sum() * vol
        worst = max(worst, abs(lhs - rhs))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    _report(5, ok, "transfer duality",
            f"max |<L phi,psi> - <phi,psi o T>| = {worst:.1e} "
            f"over 20 pairs ({elapsed:.1f}s)")
    assert worst <= 1e-4
    assert elapsed < 60


def test_06_ulam_conservation_256(fat2):
    t0 = time.perf_counter()
    g = BoxGrid.for_model(fat2, 256, 256)
    op = build_ulam(fat2, g)
    sums = op.column_sums()
    interior = g.interior_mask(fat2)
    col_dev = float(np.abs(sums[interior] - 1.0).max())
    fp = srb_density_ulam(op)
    mass_dev = abs(fp.density.total_mass - 1.0)
    elapsed = time.perf_counter() - t0
    ok = (col_dev <= 1e-10 and fp.residual <= 1e-8 and mass_dev <= 1e-10
          and elapsed < 120)
    _report(6, ok, "Ulam conservation at 256x256",
            f"colsum dev={col_dev:.1e} residual={fp.residual:.1e} "
            f"mass dev={mass_dev:.1e} ({elapsed:.1f}s)")
    assert col_dev <= 1e-10
    assert fp.residual <= 1e-8
    assert mass_dev <= 1e-10
    assert elapsed < 120


def test_07_estimator_agreement(fat2):
    # 128x128 row uses 1e7 orbit samples (1e5 orbits x 100 steps),
    # burn-in 1e3; doublings of both resolution and sample count must
    # shrink the TV distance monotonically
    t0 = time.perf_counter()
    schedule = ((32, 25_000, 50), (64, 50_000, 50),
                (128, 100_000, 100), (256, 200_000, 100))
    tvs = []
    for res, orbits, olen in schedule:
        g = BoxGrid.for_model(fat2, res, res)
        fp = srb_density_ulam(build_ulam(fat2, g))
        mc = srb_histogram_mc(fat2, g, n_orbits=orbits, burn_in=1000,
                              orbit_len=olen, seed=0)
        tvs.append(fp.density.tv_distance(mc))
    monotone = all(tvs[i + 1] < tvs[i] for i in range(3))
    elapsed = time.perf_counter() - t0
    ok = tvs[2] <= 0.1 and monotone and elapsed < 600
    _report(7, ok, "Ulam vs MC agreement",
            "TV=" + "/".join(f"{t:.4f}" for t in tvs)
            + f" monotone={monotone} ({elapsed:.0f}s)")
    assert tvs[2] <= 0.1
    assert monotone
    assert elapsed < 600


def test_08_singular_vs_plateau(zero_forcing, fat2):
    t0 = time.perf_counter()
    sups = {}
    norms20 = {}
    for res in (32, 64, 128):
        g = BoxGrid.for_model(zero_forcing, res, res)
        op = build_ulam(zero_forcing, g)
        mass = GridDensity.uniform(g).mass.copy()
        for _ in range(25):
            mass = op.apply(mass)
            mass /= mass.sum()
        sups[res] = GridDensity(g, mass).sup_density()
        track = ly_ratio_track(zero_forcing, op, bump_start(zero_forcing, g),
                               s=0.15, rho=1, n_max=20, dagger_every=50)
        norms20[res] = track.h_norms[-1]
    sup_ratios = (sups[64] / sups[32], sups[128] / sups[64])
    grows = norms20[32] < norms20[64] < norms20[128]
    g64 = BoxGrid.for_model(fat2, 64, 64)
    flat = ly_ratio_track(fat2, build_ulam(fat2, g64), bump_start(fat2, g64),
                          s=0.15, rho=1, n_max=40, dagger_every=50)
    plateau = max(flat.h_norms[20:41]) / flat.h_norms[20]
    elapsed = time.perf_counter() - t0
    ok = (min(sup_ratios) >= 1.8 and grows and plateau <= 1.1
          and elapsed < 600)
    _report(8, ok, "singular control",
            f"sup x{sup_ratios[0]:.2f}/x{sup_ratios[1]:.2f} per doubling, "
            f"H^0.15(n=20)={norms20[32]:.2f}<{norms20[64]:.2f}"
            f"<{norms20[128]:.2f}, plateau ratio={plateau:.3f} "
            f"({elapsed:.0f}s)")
    assert min(sup_ratios) >= 1.8       # no ACIP: sup tracks resolution
    assert grows                        # f = 0 iterates are not H^s-bounded
    assert plateau <= 1.1               # fat2 iterates are
    assert elapsed < 600


def test_09_parseval_and_monotonicity(fat2):
    t0 = time.perf_counter()
    s_values = (0.0, 0.15, 0.35, 0.6, 1.0)
    worst = 0.0
    monotone = True
    for i in range(20):
        h = smooth_density(fat2, 64, 64, seed=i)
        worst = max(worst, abs(sobolev_norm(h, 0.0) - l2_norm(h)))
        norms = [sobolev_norm(h, s) for s in s_values]
        monotone = monotone and all(norms[j + 1] >= norms[j]
                                    for j in range(len(norms) - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and monotone and elapsed < 60
    _report(9, ok, "Parseval / H^s monotone",
            f"max |H^0 - L2| = {worst:.1e}, monotone in s: {monotone} "
            f"({elapsed:.1f}s)")
    assert worst <= 1e-8
    assert monotone
    assert elapsed < 60


def test_10_doubling_correlation_noise(zero_forcing):
    # with f = 0 and phi = psi = cos(2 pi x) every true correlation at
    # lag n >= 1 vanishes exactly, so the estimates must sit inside
    # their own 3-sigma band; 40 batches keep the sigma estimate tight
    t0 = time.perf_counter()
    phi = Observable.from_block({"cos": [0.0, 1.0], "sin": [], "axis": 0,
                                 "y_kind": "poly", "y_params": [1.0],
                                 "y_axis": 0})
    table = measure_correlations(zero_forcing, phi, phi, n_max=30,
                                 n_orbits=80_000, orbit_len=80,
                                 burn_in=500, n_batches=40, seed=3)
    ratios = [abs(c) / s for n, c, s
              in zip(table.ns, table.values, table.sigmas) if n >= 1]
    elapsed = time.perf_counter() - t0
    ok = max(ratios) <= 3.0 and elapsed < 120
    _report(10, ok, "doubling-map correlation oracle",
            f"max |C_n|/sigma = {max(ratios):.2f} over n=1..30 "
            f"({elapsed:.1f}s)")
    assert max(ratios) <= 3.0
    assert elapsed < 120


def test_11_decay_fit_stability(fat2):
    t0 = time.perf_counter()
    phi = Observable.from_block({"cos": [1.0], "sin": [], "axis": 0,
                                 "y_kind": "poly", "y_params": [0.0, 1.0],
                                 "y_axis": 0})
    fits = []
    for seed in (0, 1):
        table = measure_correlations(fat2, phi, phi, n_max=30,
                                     n_orbits=50_000, orbit_len=80,
                                     burn_in=500, n_batches=10, seed=seed)
        fits.append(fit_decay(table))
    delta = abs(fits[0].zeta_hat - fits[1].zeta_hat)
    in_range = all(0.0 < f.zeta_hat < 1.0 for f in fits)
    r2_ok = all(f.r_squared >= 0.9 for f in fits)
    elapsed = time.perf_counter() - t0
    ok = in_range and r2_ok and delta <= 0.05 and elapsed < 600
    _report(11, ok, "decay-rate fit",
            f"zeta={fits[0].zeta_hat:.4f}/{fits[1].zeta_hat:.4f} "
            f"R2={fits[0].r_squared:.4f}/{fits[1].r_squared:.4f} "
            f"seed delta={delta:.4f} ({elapsed:.0f}s)")
    assert in_range
    assert r2_ok
    assert delta <= 0.05
    assert elapsed < 600


GATE_CONFIG = """
[model]
expanding = 2
contraction = 0.6
forcing = "cosine"
amplitude = 0.1
frequency = 1
s = 0.1

[certify]
q = 2
p_list = [1]

[density]
nx = 32
ny = 32
mc_orbits = 5000
mc_orbit_len = 30
mc_burn_in = 150

[sobolev]
nx = 32
ny = 32
s_values = [0.15]
n_max = 8
dagger_every = 4

[decay]
n_max = 15
n_orbits = 5000
orbit_len = 30
burn_in = 150

[decay.phi]
cos = [1.0]
y_params = [0.0, 1.0]

[decay.psi]
cos = [1.0]
y_params = [0.0, 1.0]

[scan]
amplitudes = [0.0]
q = 1
n_seeds = 1
"""


def test_12_determinism(tmp_path):
    # manifest.json is the only file allowed to differ between reruns
    # (it records wall-clock timestamps); every numeric output must be
    # byte-identical
    t0 = time.perf_counter()
    cfg = tmp_path / "gate.toml"
    cfg.write_text(GATE_CONFIG)

    def run(command, tag):
        out = tmp_path / f"{command}-{tag}"
        code = main([command, "--config", str(cfg), "--out", str(out)])
        hashes = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                  for p in out.iterdir() if p.is_file()}
        del hashes["manifest.json"]
        return code, hashes

    stable = True
    codes = {}
    for command in ("certify", "density", "sobolev", "decay", "scan"):
        code_a, first = run(command, "a")
        code_b, second = run(command, "b")
        codes[command] = code_a
        stable = (stable and code_a == code_b and first == second
                  and len(first) >= 2)
    elapsed = time.perf_counter() - t0
    ok = stable and elapsed < 120
    _report(12, ok, "determinism",
            f"5 commands rerun, outputs hash-identical: {stable}, "
            f"exit codes {codes} ({elapsed:.0f}s)")
    assert stable
    assert elapsed < 120
