"""Certified transversality of inverse-branch leaves.

Two branch words a, b in I^q(c) are *transversal on c* when

    m(DS_c(x, a) - DS_c(y, b)) > 3 theta^q alpha0

for every pair x, y in the closure of R_*(c), where m(A) is the d-th
largest singular value of the d x u matrix A (the sup over d-planes W of
the infimum of |Av| over unit v in W).  tau(q) counts, for the worst
target rectangle and worst word a, how many b fail this; the decay
machinery needs tau(q) to grow subexponentially in q.

The "for all x, y" quantifier is discharged on a finite grid plus an
exact modulus-of-continuity correction: f is a trigonometric polynomial,
so sup_x |d/dx DS_c| <= B_2 * sum_i |C|^{i-1} |E^{-i}|^2 is a closed
form, and Weyl's inequality turns a grid minimum of m into a certified
minimum over the rectangle.  Three verdicts result:

* ``transversal``      - grid minimum minus the Lipschitz correction
                         still exceeds the threshold (certified);
* ``non-transversal``  - some sample point violates the strict
                         inequality (exact witness);
* ``undecided``        - the margin band; refined by halving the mesh
                         up to a configured floor, then reported as is.

Undecided pairs count as non-transversal in tau upper bounds, keeping
the bound sound.  tau's min over all p >= 1 is truncated to a finite
p list, again sound for upper bounds.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coding import LeafEval, MarkovPartition, Word, WordTable, build_partition
from .model import Contraction, ExpandingMap, SkewModel, TrigForcing

TRANSVERSAL = "transversal"
NON_TRANSVERSAL = "non-transversal"
UNDECIDED = "undecided"

#: multiplier in the separation threshold 3 theta^q alpha0
THRESHOLD_COEFF = 3.0

#: default t-grid points per axis, keyed by torus dimension u
_DEFAULT_GRID = {1: 33, 2: 9, 3: 5}

#: cap on entries of a pairwise difference tensor processed at once
_BLOCK_ENTRIES = 4_000_000


def smallest_dth_singular(a: np.ndarray) -> np.ndarray | float:
    """m(A): the d-th largest singular value of a d x u matrix (batched).

    Equals sup over d-dimensional subspaces W of min_{v in W, |v|=1} |Av|.
    For d = 1 this is just the row norm.  Batches over leading axes.

    Parameters
    ----------
    a : array (..., d, u) with d <= u.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError("expected a matrix with shape (..., d, u)")
    d, u = a.shape[-2], a.shape[-1]
    if d > u:
        raise ValueError(f"m(A) needs d <= u, got d={d}, u={u}")
    vals = np.linalg.svd(a, compute_uv=False)[..., d - 1]
    return float(vals) if vals.ndim == 0 else vals


def separation_threshold(model: SkewModel, q: int) -> float:
    """The scale 3 theta^q alpha0 that transversal leaves must clear."""
    return THRESHOLD_COEFF * model.theta ** q * model.alpha0


def leaf_lipschitz(model: SkewModel, q: int) -> float:
    """Global bound on |d/dx DS_c(x, a)| for any word of length q.

    Each branch term C^{i-1} Df(z_i) E^{-i} moves at rate at most
    B_2 |C|^{i-1} |E^{-i}|^2 (one factor E^{-i} from dz_i/dx, one from
    the right slot), so the sum is a closed-form Lipschitz constant in
    the operator norm, valid on every rectangle.
    """
    b2 = model.f.sup_derivative_bound(2)
    total = 0.0
    for i in range(1, q + 1):
        e_inv = np.linalg.norm(model.E.matrix_power_inverse(i), 2)
        total += model.lam_hi ** (i - 1) * e_inv * e_inv
    return b2 * total


def _t_grid(u: int, n: int) -> np.ndarray:
    """Uniform n^u grid on the closed extended square [-1, 2]^u."""
    axis = np.linspace(-1.0, 2.0, n)
    pts = np.stack(np.meshgrid(*([axis] * u), indexing="ij"), axis=-1)
    return pts.reshape(-1, u)


def _cover_radius(partition: MarkovPartition, n: int) -> float:
    """Euclidean covering radius of the image of the t-grid in x-space.

    The t-mesh is 3/(n-1) per axis, so every point of R_*(c) is within
    E^{-m} applied to a box of half-width delta/2 of a sample.
    """
    delta = 3.0 / (n - 1)
    u = partition.dim
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=u)))
    radii = np.linalg.norm((0.5 * delta) * corners @ partition._inv_m.T, axis=1)
    return float(radii.max())


def _pairwise_min_m(ds_rows: np.ndarray, ds_col: np.ndarray, d: int) -> np.ndarray:
    """min over (x, y) of m(DS_b(x) - DS_a(y)) for a block of words b.

    ds_rows : (k, G, d, u) stacked leaf derivatives; ds_col : (G, d, u).
    Returns the (k,) certified-at-sample minima.
    """
    k, g = ds_rows.shape[0], ds_rows.shape[1]
    u = ds_rows.shape[-1]
    out = np.empty(k)
    rows_per_block = max(1, _BLOCK_ENTRIES // max(1, g * g * d * u))
    for i0 in range(0, k, rows_per_block):
        blk = ds_rows[i0:i0 + rows_per_block]
        diff = blk[:, :, None, :, :] - ds_col[None, None, :, :, :]
        if d == 1:
            vals = np.linalg.norm(diff[..., 0, :], axis=-1)
        else:
            vals = np.linalg.svd(diff, compute_uv=False)[..., d - 1]
        out[i0:i0 + rows_per_block] = vals.min(axis=(1, 2))
    return out


class BudgetExceededError(ValueError):
    """The requested pair sweep does not fit in the evaluation budget."""


@dataclass(frozen=True)
class PairCertificate:
    """Outcome of certifying one pair of branch words on one rectangle.

    ``margin`` is the certified distance to the threshold: for a
    transversal verdict it is (grid min - Lipschitz correction) minus
    3 theta^q alpha0 and is strictly positive; for non-transversal it is
    the (nonpositive) gap at the witnessing sample; undecided margins
    straddle the correction band.
    """

    target: int
    word_a: tuple[int, ...]
    word_b: tuple[int, ...]
    q: int
    verdict: str
    margin: float
    threshold: float
    sampled_min: float
    lipschitz: float
    cover_radius: float
    n_grid: int
    refinements: int

    def as_dict(self) -> dict:
        return {
            "target": self.target,
            "word_a": list(self.word_a),
            "word_b": list(self.word_b),
            "q": self.q,
            "verdict": self.verdict,
            "margin": self.margin,
            "threshold": self.threshold,
            "sampled_min": self.sampled_min,
            "lipschitz": self.lipschitz,
            "cover_radius": self.cover_radius,
            "n_grid": self.n_grid,
            "refinements": self.refinements,
        }


def _default_grid(u: int) -> int:
    return _DEFAULT_GRID.get(u, 4)


def certify_pair(model: SkewModel, partition: MarkovPartition, target: int,
                 word_a: Word, word_b: Word, q: int | None = None,
                 n_grid: int | None = None,
                 max_refinements: int = 3) -> PairCertificate:
    """Certify transversality of two branch words over one rectangle.

    Samples m(DS_c(x, a) - DS_c(y, b)) on a product grid over the closed
    extended rectangle, then classifies:

    * any sample <= threshold is an exact witness of failure of the
      strict inequality (non-transversal);
    * grid min - 2 L h > threshold certifies the inequality everywhere
      (h the covering radius, L the exact Lipschitz bound);
    * otherwise the mesh is halved until the floor, then undecided.

    A margin of exactly zero stays undecided (the inequality is strict).
    """
    if word_a.n != word_b.n:
        raise ValueError("words must have equal length")
    if q is not None and q != word_a.n:
        raise ValueError(f"q = {q} does not match word length {word_a.n}")
    q = word_a.n
    thr = separation_threshold(model, q)
    lip = leaf_lipschitz(model, q)
    n = int(n_grid) if n_grid is not None else _default_grid(model.u)
    if n < 2:
        raise ValueError("grid needs at least 2 points per axis")

    if word_a.letters == word_b.letters:
        # x = y collapses the difference to the zero map: exact witness.
        return PairCertificate(target, word_a.letters, word_b.letters, q,
                               NON_TRANSVERSAL, -thr, thr, 0.0, lip,
                               _cover_radius(partition, n), n, 0)

    leaf_a = LeafEval(model, partition, target, word_a)
    leaf_b = LeafEval(model, partition, target, word_b)
    verdict, margin, smin, h = UNDECIDED, 0.0, math.inf, math.nan
    refinements = 0
    for step in range(max_refinements + 1):
        grid = _t_grid(model.u, n)
        ds_a = leaf_a.DS(grid)
        ds_b = leaf_b.DS(grid)
        smin = float(_pairwise_min_m(ds_b[None], ds_a, model.d)[0])
        h = _cover_radius(partition, n)
        refinements = step
        if smin <= thr:
            verdict, margin = NON_TRANSVERSAL, smin - thr
            break
        certified = smin - 2.0 * lip * h
        margin = certified - thr
        if certified > thr:
            verdict = TRANSVERSAL
            break
        if step < max_refinements:
            n = 2 * (n - 1) + 1
    return PairCertificate(target, word_a.letters, word_b.letters, q,
                           verdict, margin, thr, smin, lip, h, n, refinements)


@dataclass(frozen=True)
class TransversalityReport:
    """Sound upper bounds on tau(q) from a finite list of depths p.

    ``counts[i]`` is, at depth ``p_values[i]``, the worst-case number of
    words b that are non-transversal-or-undecided against some fixed a
    (the self pair always counts, so every entry is >= 1).  tau_upper is
    the min over depths; growth is log(tau_upper)/q; margin is
    q log(|det E||det C| m(C)^{2s}) - log tau_upper at the model's s.
    """

    q: int
    s: float
    gamma: float
    p_values: tuple[int, ...]
    counts: tuple[int, ...]
    levels: tuple[int, ...]
    tau_upper: int
    growth: float
    margin: float
    budget_limited: bool
    pairs_evaluated: int
    undecided_pairs: int
    n_grid: int
    max_refinements: int
    threshold: float
    lipschitz: float

    def as_dict(self) -> dict:
        return {
            "q": self.q,
            "s": self.s,
            "gamma": self.gamma,
            "p_values": list(self.p_values),
            "counts": list(self.counts),
            "levels": list(self.levels),
            "tau_upper": self.tau_upper,
            "growth": self.growth,
            "margin": self.margin,
            "budget_limited": self.budget_limited,
            "pairs_evaluated": self.pairs_evaluated,
            "undecided_pairs": self.undecided_pairs,
            "n_grid": self.n_grid,
            "max_refinements": self.max_refinements,
            "threshold": self.threshold,
            "lipschitz": self.lipschitz,
        }


def _resolve_target(model: SkewModel, part: MarkovPartition, target: int,
                    q: int, thr: float, lip: float, n0: int,
                    max_refinements: int) -> tuple[int, int, int]:
    """Worst non-transversal count over words a in I^q(target).

    Returns (count, pairs_evaluated, undecided) with undecided pairs
    counted as non-transversal.
    """
    words = list(WordTable(part, q, target=target))
    b_count = len(words)
    leaves = [LeafEval(model, part, target, w) for w in words]
    # status: 0 unknown, 1 transversal, 2 non-transversal-or-witnessed
    status = np.zeros((b_count, b_count), dtype=np.int8)
    np.fill_diagonal(status, 2)

    n = n0
    ds_cache: dict[int, np.ndarray] = {}
    for step in range(max_refinements + 1):
        grid = _t_grid(model.u, n)
        h = _cover_radius(part, n)
        corr = 2.0 * lip * h
        needed = np.flatnonzero((status == 0).any(axis=1))
        ds_cache = {int(i): leaves[i].DS(grid) for i in needed}
        for a in needed:
            pending = np.flatnonzero(status[a] == 0)
            pending = pending[pending > a]
            if pending.size == 0:
                continue
            rows = np.stack([ds_cache[int(b)] for b in pending])
            smin = _pairwise_min_m(rows, ds_cache[int(a)], model.d)
            witness = smin <= thr
            cleared = (smin - corr) > thr
            for b, w, c in zip(pending, witness, cleared):
                val = 2 if w else (1 if c else 0)
                if val:
                    status[a, b] = status[b, a] = val
        if not (status == 0).any():
            break
        n = 2 * (n - 1) + 1

    undecided = int((status == 0).sum()) // 2
    counts = b_count - (status == 1).sum(axis=1)
    pairs = b_count * (b_count - 1) // 2
    return int(counts.max()), pairs, undecided


def tau_upper_bound(model: SkewModel, q: int, p_list,
                    gamma: float = 0.45, n_grid: int | None = None,
                    max_refinements: int = 2,
                    pair_budget: int = 5_000_000,
                    threads: int | None = None) -> TransversalityReport:
    """Sound upper bound for tau(q) over a finite list of depths p.

    For each p the targets are the rectangles of the refinement at level
    m + p - 1 (m the base level for diameter gamma); every pair of the
    N^q branch words into each target is certified, with undecided
    counted as non-transversal.  The report's tau_upper is the min over
    the depths that fit in ``pair_budget``; if some p had to be skipped
    the report is flagged budget-limited (still a sound upper bound).
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    p_values = sorted(set(int(p) for p in p_list))
    if not p_values or p_values[0] < 1:
        raise ValueError("p_list must contain integers >= 1")
    base = build_partition(model.E, gamma)
    thr = separation_threshold(model, q)
    lip = leaf_lipschitz(model, q)
    n0 = int(n_grid) if n_grid is not None else _default_grid(model.u)

    counts: list[int] = []
    levels: list[int] = []
    done_p: list[int] = []
    pairs_evaluated = 0
    undecided_total = 0
    budget_limited = False
    for p in p_values:
        level = base.word_length + p - 1
        n_cells = model.N ** level
        projected = n_cells * (model.N ** q) ** 2
        if pairs_evaluated + projected > pair_budget:
            budget_limited = True
            break
        part = (base if p == 1
                else MarkovPartition(model.E, level, base.gamma))

        def work(c: int) -> tuple[int, int, int]:
            return _resolve_target(model, part, c, q, thr, lip, n0,
                                   max_refinements)

        if threads and threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, range(part.n_cells)))
        else:
            results = [work(c) for c in range(part.n_cells)]
        worst = max(r[0] for r in results)
        pairs_evaluated += sum(r[1] for r in results)
        undecided_total += sum(r[2] for r in results)
        counts.append(int(worst))
        levels.append(level)
        done_p.append(p)

    if not done_p:
        raise BudgetExceededError(
            f"pair budget {pair_budget} is too small for any requested p")
    tau_upper = min(counts)
    growth = math.log(tau_upper) / q
    margin = _condition_margin(model, q, tau_upper, model.s)
    return TransversalityReport(
        q=q, s=model.s, gamma=gamma, p_values=tuple(done_p),
        counts=tuple(counts), levels=tuple(levels), tau_upper=int(tau_upper),
        growth=growth, margin=margin, budget_limited=budget_limited,
        pairs_evaluated=pairs_evaluated, undecided_pairs=undecided_total,
        n_grid=n0, max_refinements=max_refinements, threshold=thr,
        lipschitz=lip)


def _condition_margin(model: SkewModel, q: int, tau_upper: float,
                      s: float) -> float:
    rate = model.det_DT * model.lam_lo ** (2.0 * s)
    return q * math.log(rate) - math.log(tau_upper)


def condition_margin(model: SkewModel, report: TransversalityReport,
                     s: float | None = None) -> float:
    """q log(|det E||det C| m(C)^{2s}) - log tau_ub(q).

    A positive value is the computable part of the contraction
    hypothesis for the Sobolev-norm inequality at exponent s (the
    pairing constant B_1 is non-constructive and deliberately omitted;
    see the report fields for the same margin at the model's own s).
    """
    return _condition_margin(model, report.q, report.tau_upper,
                             model.s if s is None else float(s))


def norm_clause_margin(expanding: ExpandingMap, contraction: Contraction) -> float:
    """Margin of the admissibility clause |C| < m(E) |det E|^{-1/(u-d+1)}."""
    u, d = expanding.dim, contraction.dim
    bound = expanding.mu_lo / expanding.degree ** (1.0 / (u - d + 1))
    return float(bound - contraction.lam_hi)


def random_f_scan(expanding: ExpandingMap, contraction: Contraction,
                  amplitudes, q: int, n_seeds: int = 20, seed: int = 0,
                  max_freq: int = 3, r: int = 2, s: float = 0.0,
                  p_list=(1, 2), gamma: float = 0.45,
                  n_grid: int | None = None, max_refinements: int = 2,
                  pair_budget: int = 5_000_000,
                  threads: int | None = None) -> list[dict]:
    """Empirical tau/margin distribution over random forcing terms.

    For each amplitude in the grid and each of ``n_seeds`` independent
    draws, samples a random trigonometric polynomial with that total
    derivative weight, bounds tau(q), and records the condition margin.
    Amplitude zero reproduces the degenerate f = 0 row (tau = N^q).
    """
    clause = norm_clause_margin(expanding, contraction)
    if clause <= 0.0:
        raise ValueError(
            f"contraction violates the norm admissibility clause "
            f"(margin {clause:.6g} <= 0)")
    rows: list[dict] = []
    master = np.random.default_rng(seed)
    for amplitude in amplitudes:
        amplitude = float(amplitude)
        for j in range(n_seeds):
            draw = int(master.integers(0, 2 ** 63 - 1))
            if amplitude == 0.0:
                forcing = TrigForcing.zero(expanding.dim, contraction.dim, r=r)
            else:
                forcing = TrigForcing.random(
                    expanding.dim, contraction.dim, max_freq, amplitude,
                    rng=np.random.default_rng(draw), r=r)
            model = SkewModel(expanding, contraction, forcing, s=s)
            report = tau_upper_bound(
                model, q, p_list, gamma=gamma, n_grid=n_grid,
                max_refinements=max_refinements, pair_budget=pair_budget,
                threads=threads)
            rows.append({
                "amplitude": amplitude,
                "seed_index": j,
                "draw": draw,
                "q": q,
                "tau_upper": report.tau_upper,
                "growth": report.growth,
                "margin": report.margin,
                "undecided_pairs": report.undecided_pairs,
                "budget_limited": report.budget_limited,
                "certified": bool(report.margin > 0.0
                                  and not report.budget_limited),
            })
    return rows
