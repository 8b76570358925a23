"""Skew-product endomorphisms of the solid torus.

This module defines the map family

    T(x, y) = (E x mod 1,  C y + f(x)),    x in T^u = R^u/Z^u,  y in R^d,

where E is a u-by-u integer matrix, expanding in the sense that all its
singular values exceed 1 (so the induced torus endomorphism is a local
diffeomorphism of degree N = |det E|), C is an invertible d-by-d contraction
(``norm(C) < 1``), and the fibre forcing f is a real trigonometric polynomial.
Restricting f to trigonometric polynomials keeps every derivative, sup-norm
and Lipschitz constant exactly computable, which the certification layers
rely on.

All iteration happens inside the trapping slab D = T^u x [-K0, K0]^d with
K0 >= sup|f| / (1 - norm(C)); then T(D) is contained in D and the attractor
is the nested intersection of the forward images of D.

Derived constants used throughout the package::

    N      = |det E|                     (degree)
    mu_lo  = 1 / norm(E^-1)              (weakest expansion)
    mu_hi  = norm(E)                     (strongest expansion)
    lam_lo = 1 / norm(C^-1)  = m(C)      (weakest contraction)
    lam_hi = norm(C)                     (strongest contraction)
    theta  = lam_hi / mu_lo  < 1
    alpha0 = C^r-norm(f) / (1 - lam_hi)  (leaf-derivative bound)
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import svdvals

__all__ = [
    "ExpandingMap",
    "Contraction",
    "TrigForcing",
    "SkewModel",
    "ConditionReport",
    "eval_T",
    "preimages",
    "check_conditions",
    "deriv_f",
]

_TWO_PI = 2.0 * np.pi


def _as_int_matrix(matrix) -> np.ndarray:
    m = np.asarray(matrix)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    mi = np.rint(m).astype(np.int64)
    if not np.array_equal(mi, m.astype(np.float64)):
        raise ValueError("expanding map must have integer entries")
    return mi


def _integer_adjugate(m: np.ndarray, det: int) -> np.ndarray:
    """Exact integer adjugate, verified by adj @ m == det * I."""
    adj = np.rint(det * np.linalg.inv(m)).astype(np.int64)
    if not np.array_equal(adj @ m, det * np.eye(m.shape[0], dtype=np.int64)):
        raise RuntimeError("adjugate round-off failed; matrix entries too large")
    return adj


class ExpandingMap:
    """Linear expanding endomorphism of the torus T^u, given by its integer lift.

    Parameters
    ----------
    matrix : array_like
        u x u integer matrix (a scalar is accepted for u = 1).  All singular
        values must exceed 1 and ``|det| >= 2``.
    """

    def __init__(self, matrix):
        self.matrix = _as_int_matrix(matrix)
        self.dim = self.matrix.shape[0]
        sv = svdvals(self.matrix.astype(np.float64))
        if sv[-1] <= 1.0:
            raise ValueError(
                f"map is not expanding: smallest singular value {sv[-1]:.6g} <= 1"
            )
        det = int(round(float(np.linalg.det(self.matrix))))
        if abs(det) < 2:
            raise ValueError(f"degree |det E| = {abs(det)} < 2")
        self.det = det
        self.degree = abs(det)
        self.mu_hi = float(sv[0])          # norm(E)
        self.mu_lo = float(sv[-1])         # 1 / norm(E^-1)
        self.inverse = np.linalg.inv(self.matrix.astype(np.float64))
        self.adjugate = _integer_adjugate(self.matrix, det)
        self._coset_reps = self._enumerate_coset_representatives()

    def _enumerate_coset_representatives(self) -> np.ndarray:
        """Representatives k of Z^u / E Z^u with E^{-1} k in [0,1)^u, sorted.

        Exact integer arithmetic: E^{-1} k = (adj(E) k) / det, so the
        half-open box test is a pair of integer comparisons.
        """
        u = self.dim
        corners = np.array(list(itertools.product((0, 1), repeat=u)), dtype=np.int64)
        images = corners @ self.matrix.T
        lo = images.min(axis=0) - 1
        hi = images.max(axis=0) + 1
        reps = []
        for k in itertools.product(*(range(int(a), int(b) + 1) for a, b in zip(lo, hi))):
            kv = np.asarray(k, dtype=np.int64)
            w = self.adjugate @ kv
            if self.det > 0:
                inside = np.all(w >= 0) and np.all(w < self.det)
            else:
                inside = np.all(w <= 0) and np.all(w > self.det)
            if inside:
                reps.append(kv)
        reps.sort(key=tuple)
        out = np.array(reps, dtype=np.int64)
        if out.shape[0] != self.degree:
            raise RuntimeError(
                f"coset enumeration found {out.shape[0]} representatives, "
                f"expected {self.degree}"
            )
        return out

    @property
    def coset_representatives(self) -> np.ndarray:
        """(N, u) integer array, lexicographically sorted."""
        return self._coset_reps

    def apply(self, x: np.ndarray) -> np.ndarray:
        """E x mod 1 for x of shape (..., u)."""
        x = np.asarray(x, dtype=np.float64)
        return np.mod(x @ self.matrix.T.astype(np.float64), 1.0)

    def matrix_power_inverse(self, i: int) -> np.ndarray:
        """E^{-i} as a float matrix."""
        return np.linalg.matrix_power(self.inverse, i)

    def __repr__(self) -> str:  # pragma: no cover
        return f"ExpandingMap({self.matrix.tolist()})"


class Contraction:
    """Invertible linear contraction of R^d (operator norm < 1)."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        sv = svdvals(m)
        if sv[-1] <= 0.0:
            raise ValueError("contraction must be invertible")
        if sv[0] >= 1.0:
            raise ValueError(f"norm(C) = {sv[0]:.6g} >= 1, not a contraction")
        self.matrix = m
        self.dim = m.shape[0]
        self.lam_hi = float(sv[0])    # norm(C)
        self.lam_lo = float(sv[-1])   # m(C) = 1/norm(C^-1)
        self.det = float(np.linalg.det(m))
        self.inverse = np.linalg.inv(m)

    def apply(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return y @ self.matrix.T

    def power(self, i: int) -> np.ndarray:
        return np.linalg.matrix_power(self.matrix, i)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Contraction({self.matrix.tolist()})"


class TrigForcing:
    """Real trigonometric polynomial f : T^u -> R^d.

    Stored as a finite frequency table {k in Z^u : c_k in C^d} with Hermitian
    symmetry c_{-k} = conj(c_k), so that

        f(x) = sum_k c_k exp(2 pi i <k, x>)

    is real valued.  Every partial derivative is again a trig polynomial and
    is evaluated exactly; sup-norms of derivatives are bounded by the l1
    coefficient sum  B_j = sum_k |c_k| (2 pi |k|)^j,  which is attained for
    single-frequency forcings and is an upper bound in general.

    Parameters
    ----------
    coeffs : mapping
        Frequency vector (length-u tuple of ints) -> length-d complex array.
        Both halves of each Hermitian pair must be present and consistent;
        the zero frequency, if present, must be real.
    r : int
        Smoothness order the C^r-norm bookkeeping is certified for (>= 2).
    """

    def __init__(self, coeffs: Mapping[tuple, Sequence[complex]], u: int, d: int, r: int = 2):
        if r < 2:
            raise ValueError("smoothness order r must be >= 2")
        self.u = int(u)
        self.d = int(d)
        self.r = int(r)
        freqs = []
        cvecs = []
        table = {}
        for k, c in coeffs.items():
            kv = tuple(int(t) for t in np.atleast_1d(np.asarray(k, dtype=np.int64)))
            if len(kv) != self.u:
                raise ValueError(f"frequency {kv} has wrong dimension (u={self.u})")
            cv = np.atleast_1d(np.asarray(c, dtype=np.complex128))
            if cv.shape != (self.d,):
                raise ValueError(f"coefficient for {kv} has wrong shape {cv.shape}")
            if np.all(cv == 0):
                continue
            table[kv] = cv
        for kv, cv in table.items():
            neg = tuple(-t for t in kv)
            if kv == neg:  # zero frequency
                if np.max(np.abs(cv.imag)) > 0:
                    raise ValueError("zero-frequency coefficient must be real")
            else:
                if neg not in table or not np.allclose(table[neg], np.conj(cv), rtol=0, atol=0):
                    raise ValueError(
                        f"Hermitian symmetry violated at frequency {kv}: "
                        "c(-k) must equal conj(c(k)) exactly"
                    )
            freqs.append(kv)
            cvecs.append(cv)
        if freqs:
            order = sorted(range(len(freqs)), key=lambda i: freqs[i])
            self.freqs = np.array([freqs[i] for i in order], dtype=np.int64)
            self.cvecs = np.array([cvecs[i] for i in order], dtype=np.complex128)
        else:
            self.freqs = np.zeros((0, self.u), dtype=np.int64)
            self.cvecs = np.zeros((0, self.d), dtype=np.complex128)

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, u: int, d: int, r: int = 2) -> "TrigForcing":
        return cls({}, u=u, d=d, r=r)

    @classmethod
    def cosine(cls, freq, amplitude, u: int | None = None, d: int | None = None,
               r: int = 2) -> "TrigForcing":
        """f(x) = amplitude * cos(2 pi <freq, x>), amplitude a vector in R^d."""
        kv = tuple(int(t) for t in np.atleast_1d(freq))
        amp = np.atleast_1d(np.asarray(amplitude, dtype=np.float64))
        u = len(kv) if u is None else u
        d = amp.shape[0] if d is None else d
        half = amp.astype(np.complex128) / 2.0
        neg = tuple(-t for t in kv)
        if kv == neg:
            return cls({kv: amp.astype(np.complex128)}, u=u, d=d, r=r)
        return cls({kv: half, neg: np.conj(half)}, u=u, d=d, r=r)

    @classmethod
    def random(cls, u: int, d: int, max_freq: int, amplitude: float,
               rng: np.random.Generator, r: int = 2) -> "TrigForcing":
        """Random forcing with sup-norm bound exactly `amplitude`.

        Frequencies range over the box |k_i| <= max_freq (k != 0, one
        representative per Hermitian pair); coefficients are complex
        Gaussian, then rescaled so the l1 bound B_0 equals `amplitude`.
        """
        if amplitude == 0.0:
            return cls.zero(u, d, r=r)
        half = []
        for k in itertools.product(range(-max_freq, max_freq + 1), repeat=u):
            if k == (0,) * u:
                continue
            if k < tuple(-t for t in k):  # canonical representative per pair
                half.append(k)
        coeffs = {}
        total = 0.0
        draws = {}
        for k in half:
            c = rng.standard_normal(d) + 1j * rng.standard_normal(d)
            draws[k] = c
            total += 2.0 * float(np.linalg.norm(c))
        scale = amplitude / total
        for k, c in draws.items():
            coeffs[k] = c * scale
            coeffs[tuple(-t for t in k)] = np.conj(c) * scale
        return cls(coeffs, u=u, d=d, r=r)

    # -- evaluation --------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return self.freqs.shape[0] == 0

    def eval(self, x: np.ndarray) -> np.ndarray:
        """f(x) for x of shape (..., u); returns shape (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        if self.is_zero:
            return np.zeros(x.shape[:-1] + (self.d,))
        phase = np.exp(_TWO_PI * 1j * (x @ self.freqs.T.astype(np.float64)))
        return np.real(phase @ self.cvecs)

    def deriv(self, x: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
        """Exact partial derivative d^alpha f, |alpha| <= r enforced by callers."""
        alpha = np.asarray(alpha, dtype=np.int64)
        if alpha.shape != (self.u,) or np.any(alpha < 0):
            raise ValueError(f"bad multi-index {alpha} for u={self.u}")
        x = np.asarray(x, dtype=np.float64)
        if self.is_zero:
            return np.zeros(x.shape[:-1] + (self.d,))
        j = int(alpha.sum())
        kpow = np.prod(self.freqs.astype(np.float64) ** alpha, axis=1)
        coeff = self.cvecs * ((_TWO_PI * 1j) ** j * kpow)[:, None]
        phase = np.exp(_TWO_PI * 1j * (x @ self.freqs.T.astype(np.float64)))
        return np.real(phase @ coeff)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Df(x) of shape (..., d, u)."""
        x = np.asarray(x, dtype=np.float64)
        if self.is_zero:
            return np.zeros(x.shape[:-1] + (self.d, self.u))
        phase = np.exp(_TWO_PI * 1j * (x @ self.freqs.T.astype(np.float64)))
        # (m, d, u) per-frequency Jacobian coefficients
        jac_c = (_TWO_PI * 1j) * self.cvecs[:, :, None] * self.freqs[:, None, :]
        return np.real(np.einsum("...m,mdu->...du", phase, jac_c))

    def deriv_tensor(self, x: np.ndarray, order: int) -> np.ndarray:
        """Full derivative tensor D^j f(x): shape (..., d, u, ..., u) with j
        trailing u-axes; order 0 returns f itself."""
        if order == 0:
            return self.eval(x)
        x = np.asarray(x, dtype=np.float64)
        if self.is_zero:
            return np.zeros(x.shape[:-1] + (self.d,) + (self.u,) * order)
        phase = np.exp(_TWO_PI * 1j * (x @ self.freqs.T.astype(np.float64)))
        m = self.freqs.shape[0]
        outer = np.ones((m, 1))
        for _ in range(order):
            outer = outer[:, :, None] * self.freqs[:, None, :]
            outer = outer.reshape(m, -1)
        tens_c = ((_TWO_PI * 1j) ** order) * self.cvecs[:, :, None] * outer[:, None, :]
        flat = np.real(np.einsum("...m,mdk->...dk", phase, tens_c))
        return flat.reshape(x.shape[:-1] + (self.d,) + (self.u,) * order)

    # -- norms -------------------------------------------------------------

    def sup_derivative_bound(self, order: int) -> float:
        """l1 coefficient bound B_j >= sup_x norm(D^j f(x)) (exact for a
        single frequency pair)."""
        if self.is_zero:
            return 0.0
        knorm = np.linalg.norm(self.freqs.astype(np.float64), axis=1)
        cnorm = np.linalg.norm(self.cvecs, axis=1)
        return float(np.sum(cnorm * (_TWO_PI * knorm) ** order))

    @property
    def sup_norm(self) -> float:
        return self.sup_derivative_bound(0)

    def c_r_norm(self) -> float:
        """max_{0<=j<=r} B_j."""
        return max(self.sup_derivative_bound(j) for j in range(self.r + 1))

    def __repr__(self) -> str:  # pragma: no cover
        return f"TrigForcing(u={self.u}, d={self.d}, r={self.r}, n_freq={len(self.freqs)})"


@dataclass(frozen=True)
class ConditionReport:
    """Numeric margins for the standing inequalities at Sobolev index s.

    volume_margin  = log(|det E| |det C| m(C)^{2s})          (> 0 required)
    norm_margin    = mu_lo / N^{1/(u-d+1)} - norm(C)          (> 0 required)
    smooth_margin  = r - ((u+d)/2 + 1) - s                    (> 0 required)
    s_star         = the index where the volume margin hits zero.
    """

    s: float
    s_star: float
    volume_ok: bool
    volume_margin: float
    norm_ok: bool
    norm_margin: float
    smooth_ok: bool
    smooth_margin: float

    @property
    def all_ok(self) -> bool:
        return self.volume_ok and self.norm_ok and self.smooth_ok

    def as_dict(self) -> dict:
        return {
            "s": self.s,
            "s_star": self.s_star,
            "volume_ok": self.volume_ok,
            "volume_margin": self.volume_margin,
            "norm_ok": self.norm_ok,
            "norm_margin": self.norm_margin,
            "smooth_ok": self.smooth_ok,
            "smooth_margin": self.smooth_margin,
            "all_ok": self.all_ok,
        }


class SkewModel:
    """The full skew product T(x,y) = (E x, C y + f(x)) with derived constants.

    Parameters
    ----------
    expanding : ExpandingMap
    contraction : Contraction
    forcing : TrigForcing
    s : float
        Sobolev index the regularity bookkeeping targets.
    k0_margin : float
        Relative slack above sup|f| / (1 - norm(C)) for the trapping
        half-thickness K0 (default 10%, making T(D) a strict subset of D).
    k0 : float, optional
        Explicit half-thickness override; must itself satisfy the trapping
        inequality norm(C)*K0 + sup|f| <= K0.  Needed e.g. for f = 0, where
        the formula degenerates to K0 = 0.
    """

    def __init__(self, expanding: ExpandingMap, contraction: Contraction,
                 forcing: TrigForcing, s: float = 0.0,
                 k0_margin: float = 0.1, k0: float | None = None):
        if forcing.u != expanding.dim or forcing.d != contraction.dim:
            raise ValueError("forcing dimensions do not match E and C")
        if expanding.dim < contraction.dim:
            raise ValueError(f"need u >= d >= 1, got u={expanding.dim}, d={contraction.dim}")
        self.E = expanding
        self.C = contraction
        self.f = forcing
        self.s = float(s)
        self.k0_margin = float(k0_margin)

        self.u = expanding.dim
        self.d = contraction.dim
        self.N = expanding.degree
        self.mu_lo = expanding.mu_lo
        self.mu_hi = expanding.mu_hi
        self.lam_lo = contraction.lam_lo
        self.lam_hi = contraction.lam_hi
        self.theta = self.lam_hi / self.mu_lo
        if self.theta >= 1.0:
            raise ValueError(f"theta = norm(C)*norm(E^-1) = {self.theta:.6g} >= 1")
        self.r = forcing.r
        self.c_r_norm = forcing.c_r_norm()
        self.f_sup = forcing.sup_norm
        self.alpha0 = self.c_r_norm / (1.0 - self.lam_hi)

        base_k0 = self.f_sup / (1.0 - self.lam_hi)
        if k0 is None:
            self.k0 = base_k0 * (1.0 + self.k0_margin)
        else:
            self.k0 = float(k0)
        if self.lam_hi * self.k0 + self.f_sup > self.k0 + 1e-15:
            raise ValueError(
                f"K0 = {self.k0:.6g} does not trap: norm(C)*K0 + sup|f| "
                f"= {self.lam_hi * self.k0 + self.f_sup:.6g} > K0"
            )
        self.det_DT = self.N * abs(self.C.det)

    # -- dynamics ----------------------------------------------------------

    def step(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One application of T on batched points: x (..., u), y (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.E.apply(x), self.C.apply(y) + self.f.eval(x)

    def preimage_points(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All N preimages of a single point (x, y).

        Returns (N, u) and (N, d) arrays ordered by the lexicographic coset
        representative order: x' = E^{-1}(x + k) mod 1, y' = C^{-1}(y - f(x')).
        """
        x = np.asarray(x, dtype=np.float64).reshape(self.u)
        y = np.asarray(y, dtype=np.float64).reshape(self.d)
        lifts = x[None, :] + self.E.coset_representatives.astype(np.float64)
        xprev = np.mod(lifts @ self.E.inverse.T, 1.0)
        yprev = (y[None, :] - self.f.eval(xprev)) @ self.C.inverse.T
        return xprev, yprev

    def in_trapping_region(self, y: np.ndarray) -> np.ndarray:
        return np.all(np.abs(np.asarray(y)) <= self.k0 + 1e-12, axis=-1)

    # -- condition arithmetic ----------------------------------------------

    def s_star(self) -> float:
        """The index where |det E||det C| m(C)^{2s} crosses 1 (+inf if the
        product already exceeds 1 for every s, which cannot happen for a
        strict contraction unless |det E||det C| <= 1 makes it negative)."""
        vol = self.N * abs(self.C.det)
        return float(np.log(vol) / (2.0 * np.log(1.0 / self.lam_lo)))

    def check_conditions(self) -> ConditionReport:
        vol = self.N * abs(self.C.det)
        volume_margin = float(np.log(vol) + 2.0 * self.s * np.log(self.lam_lo))
        norm_bound = self.mu_lo / self.N ** (1.0 / (self.u - self.d + 1))
        norm_margin = float(norm_bound - self.lam_hi)
        smooth_margin = float(self.r - ((self.u + self.d) / 2.0 + 1.0) - self.s)
        return ConditionReport(
            s=self.s,
            s_star=self.s_star(),
            volume_ok=volume_margin > 0.0,
            volume_margin=volume_margin,
            norm_ok=norm_margin > 0.0,
            norm_margin=norm_margin,
            smooth_ok=smooth_margin > 0.0,
            smooth_margin=smooth_margin,
        )

    def describe(self) -> dict:
        """Plain-dict summary used by reports and manifests."""
        return {
            "u": self.u,
            "d": self.d,
            "expanding": self.E.matrix.tolist(),
            "contraction": self.C.matrix.tolist(),
            "forcing_freqs": self.f.freqs.tolist(),
            "forcing_coeffs_re": self.f.cvecs.real.tolist(),
            "forcing_coeffs_im": self.f.cvecs.imag.tolist(),
            "r": self.r,
            "s": self.s,
            "degree": self.N,
            "mu_lo": self.mu_lo,
            "mu_hi": self.mu_hi,
            "lam_lo": self.lam_lo,
            "lam_hi": self.lam_hi,
            "theta": self.theta,
            "alpha0": self.alpha0,
            "k0": self.k0,
            "f_sup": self.f_sup,
            "c_r_norm": self.c_r_norm,
        }

    def __repr__(self) -> str:  # pragma: no cover
        return (f"SkewModel(u={self.u}, d={self.d}, N={self.N}, "
                f"theta={self.theta:.4g}, alpha0={self.alpha0:.4g}, k0={self.k0:.4g})")


# -- module-level op aliases (functional style) ----------------------------

def eval_T(model: SkewModel, point: tuple) -> tuple[np.ndarray, np.ndarray]:
    """T(x, y) for a single point given as a pair of arrays."""
    x, y = point
    xn, yn = model.step(np.asarray(x, dtype=np.float64).reshape(model.u),
                        np.asarray(y, dtype=np.float64).reshape(model.d))
    return xn, yn


def preimages(model: SkewModel, point: tuple) -> list[tuple[np.ndarray, np.ndarray]]:
    """All N preimages of `point` as a list of (x, y) pairs."""
    x, y = point
    xp, yp = model.preimage_points(x, y)
    return [(xp[i], yp[i]) for i in range(xp.shape[0])]


def check_conditions(model: SkewModel) -> ConditionReport:
    return model.check_conditions()


def deriv_f(model: SkewModel, x: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    """Exact d^alpha f(x); rejects |alpha| > r."""
    alpha = np.asarray(alpha, dtype=np.int64)
    if int(alpha.sum()) > model.r:
        raise ValueError(f"derivative order {int(alpha.sum())} exceeds r = {model.r}")
    return model.f.deriv(x, alpha)
