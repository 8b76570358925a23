"""Markov coding of the expanding base map and leaf-map evaluation.

The base partition of T^u consists of the N = |det E| coset cells
E^{-1}([0,1)^u + k), one per representative k of Z^u / E Z^u.  Every cell
maps onto the whole torus under E, so the base symbolic dynamics is a full
shift on N symbols.  Refining p times by pullback gives cells indexed by
base digit words (w_1, ..., w_m), m = p + 1, realised as affine atoms

    cell(w) = E^{-m}([0,1)^u + v_w) mod 1,   v_w = sum_i E^{i-1} k_{w_i}.

Words are written deepest-first: w_m is the base cell containing a point y
of the atom, w_1 the base cell of E^{m-1} y.  All combinatorics reduce to
exact integer arithmetic on the lattice vectors v_w.

Words over the refined alphabet obey the de Bruijn overlap rule
tail_{m-1}(a_i) = head_{m-1}(a_{i+1}); a length-n refined word corresponds
to a composite base word of length m + n - 1 (the first letter's digits
followed by the last digit of each subsequent letter).  The branch words
targeting a cell c ("I^n(c)") are exactly those whose first letter starts
with c's trailing m-1 digits; they biject with plain digit tuples
(b_1, ..., b_n), giving |I^n(c)| = N^n.

Leaf maps: for a target cell c and branch word a of length n, the inverse
branches z_i(x) = E^{-i}_{c,a}(x) are affine in the cell coordinate
t in [0,1)^u (x = E^{-m}(t + v_c) mod 1) and extend to the tripled box
t in [-1,2]^u covering R_*(c), the cell plus its adjacent cells.  The leaf
displacement and its derivatives are then finite exactly-evaluated sums

    S_c(x, a)   = sum_{i=1..n} C^{i-1} f(z_i(x)),
    D^j S_c(x,a) = sum_i C^{i-1} D^j f(z_i(x)) (E^{-i})^{tensor j}.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import ExpandingMap, SkewModel

__all__ = [
    "MarkovPartition",
    "Word",
    "WordTable",
    "LeafEval",
    "build_partition",
    "enumerate_words",
    "preimage_point",
    "eval_S",
    "eval_S_inf",
    "eval_DS",
]


def _corner_box(mat: np.ndarray, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise bounds of {mat @ t + offset : t in [0,1]^u}."""
    u = mat.shape[1]
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=u)))
    pts = corners @ mat.T + offset
    return pts.min(axis=0), pts.max(axis=0)


class MarkovPartition:
    """Level-m refinement of the coset-cell partition for an expanding map.

    Cells are the N^m affine atoms E^{-m}([0,1)^u + v_w) mod 1 indexed by
    digit words w in {0..N-1}^m (lexicographic order).  Only the integer
    lattice vectors v_w are materialised; all geometry is derived from them.
    """

    def __init__(self, expanding: ExpandingMap, word_length: int, gamma: float):
        self.E = expanding
        self.gamma = float(gamma)
        self.word_length = int(word_length)       # m: base digits per cell
        self.level = self.word_length - 1         # refinement depth
        self.base_size = expanding.degree         # N
        self.dim = expanding.dim
        m, u, N = self.word_length, self.dim, self.base_size
        self.n_cells = N ** m

        # E^{i} as exact integer matrices, i = 0..m
        powers = [np.eye(u, dtype=np.int64)]
        for _ in range(m):
            powers.append(self.E.matrix @ powers[-1])
        self._int_powers = powers

        # cell_words[c] = digit word of cell c; cell_lattice[c] = v_w
        words = np.array(list(itertools.product(range(N), repeat=m)), dtype=np.int64)
        reps = expanding.coset_representatives   # (N, u)
        v = np.zeros((self.n_cells, u), dtype=np.int64)
        for i in range(m):
            v += reps[words[:, i]] @ powers[i].T
        self.cell_words = words
        self.cell_lattice = v

        self._inv_m = np.linalg.matrix_power(self.E.inverse, m)
        sign_corners = np.array(list(itertools.product((-1.0, 1.0), repeat=u)))
        self.cell_diameter = float(np.max(np.linalg.norm(sign_corners @ self._inv_m.T, axis=1)))
        self.r_star_diameter = 3.0 * self.cell_diameter
        self.cell_volume = 1.0 / self.n_cells

        self._word_index = {tuple(w): i for i, w in enumerate(words.tolist())}
        self._neighbor_cache: dict[int, np.ndarray] = {}

    # -- digit/lattice arithmetic -------------------------------------------

    def lattice_of_digits(self, digits: Sequence[int]) -> np.ndarray:
        """v_w = sum_i E^{i-1} k_{w_i} for an arbitrary-length digit word."""
        reps = self.E.coset_representatives
        u = self.dim
        v = np.zeros(u, dtype=np.int64)
        p = np.eye(u, dtype=np.int64)
        for d in digits:
            v = v + p @ reps[int(d)]
            p = self.E.matrix @ p
        return v

    def reduce_lattice(self, w: np.ndarray) -> tuple[int, ...]:
        """Digit word of w modulo E^m Z^u (m digits, deepest-first order)."""
        adj, det = self.E.adjugate, self.E.det
        reps = self.E.coset_representatives
        key2idx = {tuple(k): i for i, k in enumerate(reps.tolist())}
        digits = []
        cur = np.asarray(w, dtype=np.int64).copy()
        for _ in range(self.word_length):
            key = tuple((adj @ cur) % det)
            # residue key -> representative index (same key arithmetic)
            idx = None
            for j, k in enumerate(reps):
                if tuple((adj @ k) % det) == key:
                    idx = j
                    break
            if idx is None:  # pragma: no cover - reps form a complete residue system
                raise RuntimeError("lattice reduction failed")
            digits.append(idx)
            diff = cur - reps[idx]
            nxt = adj @ diff
            if np.any(nxt % det != 0):  # pragma: no cover
                raise RuntimeError("inexact lattice division")
            cur = nxt // det
        return tuple(digits)

    def cell_index_of_digits(self, digits: Sequence[int]) -> int:
        return self._word_index[tuple(int(d) for d in digits)]

    # -- geometry ------------------------------------------------------------

    def point_from_t(self, cell: int, t: np.ndarray, mod: bool = True) -> np.ndarray:
        """x(t) = E^{-m}(t + v_cell); t of shape (..., u)."""
        t = np.asarray(t, dtype=np.float64)
        pt = (t + self.cell_lattice[cell]) @ self._inv_m.T
        return np.mod(pt, 1.0) if mod else pt

    def barycenter(self, cell: int) -> np.ndarray:
        return self.point_from_t(cell, np.full(self.dim, 0.5))

    def t_coordinate(self, cell: int, x: np.ndarray) -> np.ndarray | None:
        """Solve x = E^{-m}(t + v_cell) mod 1 for t in [0,1)^u, else None."""
        return _solve_t(self._int_powers[self.word_length], self.cell_lattice[cell],
                        np.asarray(x, dtype=np.float64))

    def locate(self, x: np.ndarray) -> int:
        """Index of the cell whose half-open atom contains x.

        The canonical atoms E^{-m}(F + v) tile a fundamental domain of R^u,
        so x belongs to exactly one atom modulo Z^u; boundary points get the
        smallest containing cell index.  Exact test: t = E^m(x + g) - v in
        [0,1)^u for some integer shift g from a precomputed search box."""
        x = np.mod(np.asarray(x, dtype=np.float64).reshape(self.dim), 1.0)
        e_m = self._int_powers[self.word_length].astype(np.float64)
        hits = []
        for g in self._locate_shifts:
            t = e_m @ (x + g) - self.cell_lattice  # (n_cells, u)
            ok = np.all((t >= 0.0) & (t < 1.0), axis=1)
            idx = np.nonzero(ok)[0]
            if idx.size:
                hits.append(int(idx[0]))
        if not hits:  # pragma: no cover - atoms cover the torus
            raise RuntimeError(f"no cell found for point {x}")
        return min(hits)

    @property
    def _locate_shifts(self) -> np.ndarray:
        """Integer g candidates: the canonical atoms lie in a bounded region;
        any torus representative differs from an atom point by such a g."""
        cached = getattr(self, "_locate_shift_arr", None)
        if cached is not None:
            return cached
        anchors = self.cell_lattice.astype(np.float64) @ self._inv_m.T
        blo, bhi = _corner_box(self._inv_m, np.zeros(self.dim))
        lo = anchors.min(axis=0) + blo
        hi = anchors.max(axis=0) + bhi
        glo = np.floor(lo - 1.0).astype(int)
        ghi = np.ceil(hi + 1.0).astype(int)
        arr = np.array(list(itertools.product(
            *(range(a, b + 1) for a, b in zip(glo, ghi)))), dtype=np.float64)
        self._locate_shift_arr = arr
        return arr

    def neighbors(self, cell: int) -> np.ndarray:
        """Indices of cells whose closure touches cell's closure (including
        itself): lattice test v' = v + delta mod E^m Z^u, delta in {-1,0,1}^u."""
        cached = self._neighbor_cache.get(cell)
        if cached is not None:
            return cached
        out = set()
        v = self.cell_lattice[cell]
        for delta in itertools.product((-1, 0, 1), repeat=self.dim):
            w = v + np.asarray(delta, dtype=np.int64)
            out.add(self._word_index[self.reduce_lattice(w)])
        res = np.array(sorted(out), dtype=np.int64)
        self._neighbor_cache[cell] = res
        return res

    def r_star_points(self, cell: int, t: np.ndarray, mod: bool = True) -> np.ndarray:
        """Points of R_*(cell) = E^{-m}([-1,2]^u + v) for t in [-1,2]^u."""
        return self.point_from_t(cell, t, mod=mod)

    def __repr__(self) -> str:  # pragma: no cover
        return (f"MarkovPartition(N={self.base_size}, m={self.word_length}, "
                f"cells={self.n_cells}, diam={self.cell_diameter:.4g})")


def _solve_t(e_pow: np.ndarray, v: np.ndarray, x: np.ndarray) -> np.ndarray | None:
    """t in [0,1)^u with x = E^{-m}(t + v) mod 1, i.e. t = E^m(x + g) - v."""
    u = e_pow.shape[0]
    xf = np.mod(x.reshape(u), 1.0)
    inv = np.linalg.inv(e_pow.astype(np.float64))
    lo, hi = _corner_box(inv, inv @ (v.astype(np.float64)) - xf)
    glo = np.floor(lo - 1e-9).astype(int)
    ghi = np.ceil(hi + 1e-9).astype(int)
    for g in itertools.product(*(range(a, b + 1) for a, b in zip(glo, ghi))):
        t = e_pow.astype(np.float64) @ (xf + np.asarray(g, dtype=np.float64)) - v
        if np.all(t >= -1e-12) and np.all(t < 1.0 - 1e-12):
            return np.clip(t, 0.0, None)
    # retry accepting the closed upper face (grid points sitting on a seam)
    for g in itertools.product(*(range(a, b + 1) for a, b in zip(glo, ghi))):
        t = e_pow.astype(np.float64) @ (xf + np.asarray(g, dtype=np.float64)) - v
        if np.all(t >= -1e-12) and np.all(t <= 1.0 + 1e-12):
            return np.clip(t, 0.0, 1.0)
    return None


def build_partition(expanding, target_diameter: float, max_level: int = 12,
                    max_cells: int = 2_000_000) -> MarkovPartition:
    """Refine the coset-cell partition until every cell has diameter below
    `target_diameter` (gamma).

    Parameters
    ----------
    expanding : ExpandingMap or SkewModel
    target_diameter : float
        gamma in (0, 1/2).
    """
    if isinstance(expanding, SkewModel):
        expanding = expanding.E
    if not isinstance(expanding, ExpandingMap):
        raise TypeError("expected an ExpandingMap or SkewModel")
    gamma = float(target_diameter)
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"target diameter must lie in (0, 1), got {gamma}")
    u = expanding.dim
    sign_corners = np.array(list(itertools.product((-1.0, 1.0), repeat=u)))
    for m in range(1, max_level + 2):
        if expanding.degree ** m > max_cells:
            raise RuntimeError(
                f"diameter {gamma} needs more than {max_cells} cells")
        inv_m = np.linalg.matrix_power(expanding.inverse, m)
        diam = float(np.max(np.linalg.norm(sign_corners @ inv_m.T, axis=1)))
        if diam < gamma:
            return MarkovPartition(expanding, m, gamma)
    raise RuntimeError(
        f"diameter {gamma} not reached within {max_level} refinements")


@dataclass(frozen=True)
class Word:
    """Admissible word over the refined alphabet, deepest letter last."""

    letters: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.letters)

    def __len__(self) -> int:
        return len(self.letters)


def _check_word(partition: MarkovPartition, word: Word) -> None:
    m = partition.word_length
    for i in range(word.n - 1):
        a = partition.cell_words[word.letters[i]]
        b = partition.cell_words[word.letters[i + 1]]
        if m > 1 and not np.array_equal(a[1:], b[:-1]):
            raise ValueError(f"word not admissible at position {i}: "
                             f"tail({tuple(a)}) != head({tuple(b)})")


def composite_digits(partition: MarkovPartition, word: Word) -> tuple[int, ...]:
    """Base digit word of length m + n - 1 realising the refined word."""
    _check_word(partition, word)
    digits = list(partition.cell_words[word.letters[0]])
    for c in word.letters[1:]:
        digits.append(int(partition.cell_words[c][-1]))
    return tuple(digits)


class WordTable:
    """Iterator over I^n (all admissible words) or I^n(c) (words branching
    into cell c); counts follow the full-shift de Bruijn structure."""

    def __init__(self, partition: MarkovPartition, n: int, target: int | None = None):
        if n < 1:
            raise ValueError("word length must be >= 1")
        self.partition = partition
        self.n = int(n)
        self.target = target
        N = partition.base_size
        if target is None:
            self.count = partition.n_cells * N ** (self.n - 1)
        else:
            if not (0 <= target < partition.n_cells):
                raise ValueError(f"no such cell {target}")
            self.count = N ** self.n

    def __len__(self) -> int:
        return self.count

    def _first_letters(self) -> Iterator[int]:
        p = self.partition
        N = p.base_size
        if self.target is None:
            yield from range(p.n_cells)
        else:
            # first letter must start with the target's trailing m-1 digits
            tail = tuple(p.cell_words[self.target][1:])
            for b in range(N):
                yield p.cell_index_of_digits(tail + (b,))

    def __iter__(self) -> Iterator[Word]:
        p = self.partition
        N, m = p.base_size, p.word_length
        mod = N ** (m - 1)

        def extend(prefix: list[int], k: int) -> Iterator[Word]:
            if k == self.n:
                yield Word(tuple(prefix))
                return
            last = prefix[-1]
            base = (last % mod) * N
            for b in range(N):
                prefix.append(base + b)
                yield from extend(prefix, k + 1)
                prefix.pop()

        for first in self._first_letters():
            yield from extend([first], 1)


def enumerate_words(partition: MarkovPartition, n: int,
                    target: int | None = None) -> WordTable:
    """Words of length n over the refined alphabet; with `target` set, only
    the branches whose image under E^n covers cell `target`."""
    return WordTable(partition, n, target)


def branch_word(partition: MarkovPartition, target: int,
                digits: Sequence[int]) -> Word:
    """The unique word in I^n(target) with new base digits (b_1..b_n)."""
    p = partition
    N, m = p.base_size, p.word_length
    mod = N ** (m - 1)
    tail = tuple(p.cell_words[target][1:])
    letters = [p.cell_index_of_digits(tail + (int(digits[0]),))]
    for b in digits[1:]:
        letters.append((letters[-1] % mod) * N + int(b))
    return Word(tuple(letters))


def branch_digits(partition: MarkovPartition, word: Word) -> tuple[int, ...]:
    """Inverse of branch_word: the last base digit of each letter."""
    return tuple(int(partition.cell_words[c][-1]) for c in word.letters)


# -- plain (unextended) branch evaluation -----------------------------------

def _domain_data(partition: MarkovPartition, word: Word):
    """(level, v_domain, composite digits) for the branch domain D(a) =
    E^n(R(a)), the level-(m-1) atom given by the first letter's leading
    digits."""
    _check_word(partition, word)
    m = partition.word_length
    head = tuple(partition.cell_words[word.letters[0]][:-1])
    v_dom = partition.lattice_of_digits(head)
    comp = composite_digits(partition, word)
    return m - 1, v_dom, comp


def _branch_chain(partition: MarkovPartition, word: Word, x: np.ndarray):
    """t-coordinate of x in D(a) plus the partial lattice vectors of the
    composite word; raises if x lies outside the branch domain."""
    lvl, v_dom, comp = _domain_data(partition, word)
    u = partition.dim
    e_pow = np.eye(u, dtype=np.int64)
    for _ in range(lvl):
        e_pow = partition.E.matrix @ e_pow
    t = _solve_t(e_pow, v_dom, np.asarray(x, dtype=np.float64))
    if t is None:
        raise ValueError("point is outside the domain of the word")
    return t, comp


def preimage_point(partition: MarkovPartition, x: np.ndarray, word: Word) -> np.ndarray:
    """The point a(x) in R(a) with E^n(a(x)) = x (branch preimage).

    The composite base word has length m + n - 1 = (m-1) + n, which is the
    total lift level below the branch domain D(a)."""
    t, comp = _branch_chain(partition, word, x)
    v = partition.lattice_of_digits(comp)
    inv = np.linalg.matrix_power(partition.E.inverse, len(comp))
    return np.mod(inv @ (t + v), 1.0)


def _chain_points(partition: MarkovPartition, word: Word, x: np.ndarray) -> np.ndarray:
    """[a]_i(x) = E^{n-i}(a(x)) for i = 1..n, shape (n, u); exact lattice
    arithmetic, one linear solve per depth."""
    t, comp = _branch_chain(partition, word, x)
    m = partition.word_length
    n = word.n
    pts = np.empty((n, partition.dim))
    v = partition.lattice_of_digits(comp[:m - 1])
    # accumulate digits m-1+1 .. m-1+n of the composite word
    u = partition.dim
    e_pow = np.eye(u, dtype=np.int64)
    for _ in range(m - 1):
        e_pow = partition.E.matrix @ e_pow
    for i in range(1, n + 1):
        d = comp[m - 1 + i - 1]
        v = v + e_pow @ partition.E.coset_representatives[d]
        e_pow = partition.E.matrix @ e_pow
        inv = np.linalg.matrix_power(partition.E.inverse, m - 1 + i)
        pts[i - 1] = np.mod(inv @ (t + v), 1.0)
    return pts


def eval_S(model: SkewModel, partition: MarkovPartition, x: np.ndarray,
           word: Word) -> np.ndarray:
    """S(x, a) = sum_{i=1..n} C^{i-1} f([a]_i(x)) for x in D(a)."""
    pts = _chain_points(partition, word, x)
    vals = model.f.eval(pts)                      # (n, d)
    out = np.zeros(model.d)
    cpow = np.eye(model.d)
    for i in range(word.n):
        out += cpow @ vals[i]
        cpow = model.C.matrix @ cpow
    return out


def eval_S_inf(model: SkewModel, partition: MarkovPartition, x: np.ndarray,
               word: Word, tail_tol: float) -> tuple[np.ndarray, float]:
    """Truncated infinite-word sum: value plus certified tail bound
    norm(C)^n * sup|f| / (1 - norm(C)); the prefix must already satisfy
    bound <= tail_tol."""
    bound = model.lam_hi ** word.n * model.f_sup / (1.0 - model.lam_hi)
    if bound > tail_tol:
        raise ValueError(
            f"word of length {word.n} leaves tail bound {bound:.3g} > {tail_tol:.3g}; "
            "supply a longer prefix")
    return eval_S(model, partition, x, word), bound


# -- extended leaf evaluation over R_*(c) ------------------------------------

class LeafEval:
    """Affinely extended inverse branches and leaf sums over R_*(c).

    For target cell c and branch word a in I^n(c) the branch points are, in
    the target's t-coordinate (x = E^{-m}(t + v_c) mod 1, t in [-1,2]^u over
    R_*(c)),

        z_i(t) = E^{-(m+i)} (t + v_c + E^m V_i),   V_i = sum_{j<=i} E^{j-1} k_{b_j},

    where (b_1..b_n) are the branch digits of a.  The z_i are evaluated
    without reduction mod 1 (f is periodic, so values are unaffected): on
    the connected lift box the extension is affine and globally Lipschitz,
    which the certification grid relies on.
    """

    def __init__(self, model: SkewModel, partition: MarkovPartition,
                 target: int, word: Word):
        p = partition
        m = p.word_length
        if not (0 <= target < p.n_cells):
            raise ValueError(f"no such cell {target}")
        tail = tuple(p.cell_words[target][1:])
        head = tuple(p.cell_words[word.letters[0]][:-1])
        if m > 1 and head != tail:
            raise ValueError("word does not branch into the target cell")
        _check_word(p, word)
        self.model = model
        self.partition = p
        self.target = int(target)
        self.word = word
        self.n = word.n
        digits = branch_digits(p, word)

        u = p.dim
        reps = p.E.coset_representatives
        e_m = p._int_powers[m]
        v_c = p.cell_lattice[target]
        offs = np.empty((self.n, u))
        mats = np.empty((self.n, u, u))
        v_ext = np.zeros(u, dtype=np.int64)
        e_pow = np.eye(u, dtype=np.int64)
        for i in range(1, self.n + 1):
            v_ext = v_ext + e_pow @ reps[digits[i - 1]]
            e_pow = p.E.matrix @ e_pow
            inv = np.linalg.matrix_power(p.E.inverse, m + i)
            mats[i - 1] = inv
            offs[i - 1] = inv @ (v_c + e_m @ v_ext).astype(np.float64)
        self._mats = mats          # (n, u, u): E^{-(m+i)}
        self._offs = offs          # (n, u)
        # derivative push-forwards dz_i/dx = E^{-i}
        self._dmats = np.stack([np.linalg.matrix_power(p.E.inverse, i)
                                for i in range(1, self.n + 1)])
        cpows = [np.eye(model.d)]
        for _ in range(self.n - 1):
            cpows.append(model.C.matrix @ cpows[-1])
        self._cpows = np.stack(cpows)             # (n, d, d): C^{i-1}

    # t handling -------------------------------------------------------------

    def t_of_x(self, x: np.ndarray) -> np.ndarray:
        """t-coordinate of a point of the target cell proper."""
        t = self.partition.t_coordinate(self.target, x)
        if t is None:
            raise ValueError("point is outside the target cell")
        return t

    def branch_points(self, t: np.ndarray) -> np.ndarray:
        """z_i(t) for t of shape (..., u): returns (n, ..., u), unreduced."""
        t = np.asarray(t, dtype=np.float64)
        return np.einsum("iuv,...v->i...u", self._mats, t) + \
            self._offs.reshape((self.n,) + (1,) * (t.ndim - 1) + (self.partition.dim,))

    def point(self, t: np.ndarray) -> np.ndarray:
        """a(x(t)) as a torus point (the deepest branch point)."""
        return np.mod(self.branch_points(np.asarray(t))[-1], 1.0)

    def S(self, t: np.ndarray) -> np.ndarray:
        """S_c(x(t), a) for t of shape (..., u); returns (..., d)."""
        z = self.branch_points(t)                        # (n, ..., u)
        vals = self.model.f.eval(z)                      # (n, ..., d)
        return np.einsum("ide,i...e->...d", self._cpows, vals)

    def DS(self, t: np.ndarray, order: int = 1) -> np.ndarray:
        """D^j S_c(x(t), a): shape (..., d, u, ..., u) with j trailing u-axes.

        Chain rule through the affine branches: D^j[f(z_i(x))] is D^j f(z_i)
        with every derivative slot contracted against dz_i/dx = E^{-i}."""
        if order < 1:
            raise ValueError("derivative order must be >= 1")
        if order > self.model.r:
            raise ValueError(f"derivative order {order} exceeds r = {self.model.r}")
        z = self.branch_points(t)                        # (n, ..., u)
        out = None
        for i in range(self.n):
            ti = self.model.f.deriv_tensor(z[i], order)  # (..., d, u^j)
            for ax in range(order):
                pos = ti.ndim - order + ax
                ti = np.moveaxis(
                    np.tensordot(ti, self._dmats[i], axes=([pos], [0])), -1, pos)
            # apply C^{i-1} on the d-axis (just before the u-axes block)
            ti = np.moveaxis(ti, -(order + 1), -1)
            ti = ti @ self._cpows[i].T
            ti = np.moveaxis(ti, -1, -(order + 1))
            out = ti if out is None else out + ti
        return out

    def round_trip_error(self, t: np.ndarray) -> float:
        """max_i distance(E^i z_i(t) mod 1, x(t) mod 1) over the batch (the
        z_i are the branch preimages of x under E^i)."""
        p = self.partition
        x = p.point_from_t(self.target, t)
        z = self.branch_points(t)
        err = 0.0
        for i in range(self.n):
            fwd = z[i] @ np.linalg.matrix_power(
                p.E.matrix.astype(np.float64), i + 1).T
            d = np.abs(np.mod(fwd - x + 0.5, 1.0) - 0.5)
            err = max(err, float(d.max()))
        return err


def eval_DS(model: SkewModel, partition: MarkovPartition, x: np.ndarray,
            word: Word, target: int, order: int = 1) -> np.ndarray:
    """Derivative tensor of the extended leaf map at a point of the target
    cell (use LeafEval directly for t-space batches over all of R_*(c))."""
    leaf = LeafEval(model, partition, target, word)
    t = leaf.t_of_x(x)
    return leaf.DS(t, order=order)
