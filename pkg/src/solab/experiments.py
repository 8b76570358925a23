"""Experiment drivers: the five subcommands and their persistence.

Each ``cmd_*`` function takes a resolved ExperimentConfig, writes its
reports (JSON), tables (CSV), and density arrays (flat float64 ``.bin``
with a JSON header) into the output directory, then writes a manifest
recording the config hash, per-stage wall-clock, and a SHA-256
inventory of every output file.  Numeric outputs carry no timestamps,
so reruns with the same config and seeds are hash-identical; only the
manifest's clock fields differ.

Correlations C_n = <phi (psi o T^n)> - <phi><psi> are estimated by
ensemble time averages; the decay rate is fitted on log |C_n| over the
window that ends where the signal first drops below the batch noise
floor.  The theoretical rate interval

    zeta in ( max{ |E^-1|^{1/nu}, sqrt(tau_q^{1/q} / (|det DT| m(C)^{2s})) }, 1 )

with nu = sum_{j=rho1+1}^{rho0} 1/j (rho0 = r-1, rho1 = 0 here) is
evaluated from the certified tau upper bound.  The constant B1 that
multiplies tau in the second entry is non-constructive and omitted;
every report carries the ``b1_omitted`` flag, and the interval may be
empty (lower endpoint >= 1), which is reported, not hidden.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .model import SkewModel, check_conditions
from .norms import BoundaryMassError, default_dictionary, ly_ratio_track
from .transfer import (BoxGrid, GridDensity, ORBIT_JITTER, build_ulam,
                       srb_density_ulam, srb_histogram_mc)
from .transversality import (BudgetExceededError, condition_margin,
                             random_f_scan, tau_upper_bound)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_BUDGET = 3
EXIT_GUARD = 4
EXIT_NOT_CERTIFIED = 5


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observable:
    """Separable observable: trig polynomial in one x coordinate times a
    polynomial or raised-cosine bump in one y coordinate.

    value = [ sum_k cos_k cos(2 pi k x_a) + sum_k sin_k sin(2 pi k x_a) ]
            * g(y_b),  g = polyval(y_params) or bump of half-width
            y_params[0].
    """

    cos: tuple[float, ...] = (0.0, 1.0)
    sin: tuple[float, ...] = ()
    axis: int = 0
    y_kind: str = "poly"
    y_params: tuple[float, ...] = (1.0,)
    y_axis: int = 0

    @classmethod
    def from_block(cls, block: dict) -> "Observable":
        return cls(cos=tuple(block["cos"]), sin=tuple(block["sin"]),
                   axis=block["axis"], y_kind=block["y_kind"],
                   y_params=tuple(block["y_params"]), y_axis=block["y_axis"])

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        t = np.asarray(x)[..., self.axis]
        val = np.zeros_like(t)
        for k, c in enumerate(self.cos):
            if c != 0.0:
                val = val + c * np.cos(2.0 * np.pi * k * t)
        for k, c in enumerate(self.sin, start=1):
            if c != 0.0:
                val = val + c * np.sin(2.0 * np.pi * k * t)
        w = np.asarray(y)[..., self.y_axis]
        if self.y_kind == "poly":
            g = np.polynomial.polynomial.polyval(w, np.asarray(self.y_params))
        elif self.y_kind == "bump":
            a = float(self.y_params[0])
            g = np.where(np.abs(w) < a,
                         np.cos(np.pi * w / (2.0 * a)) ** 2, 0.0)
        else:
            raise ValueError(f"unknown y_kind {self.y_kind!r}")
        return val * g

    def as_dict(self) -> dict:
        return {"cos": list(self.cos), "sin": list(self.sin),
                "axis": self.axis, "y_kind": self.y_kind,
                "y_params": list(self.y_params), "y_axis": self.y_axis}


# ---------------------------------------------------------------------------
# correlation measurement and decay fitting
# ---------------------------------------------------------------------------

@dataclass
class CorrelationTable:
    """Ensemble estimates of C_n with batch standard errors."""

    ns: list[int]
    values: list[float]
    sigmas: list[float]
    n_orbits: int
    orbit_len: int
    burn_in: int
    n_batches: int
    seed: int

    def as_dict(self) -> dict:
        return {
            "ns": self.ns, "values": self.values, "sigmas": self.sigmas,
            "n_orbits": self.n_orbits, "orbit_len": self.orbit_len,
            "burn_in": self.burn_in, "n_batches": self.n_batches,
            "seed": self.seed,
        }


def measure_correlations(model: SkewModel, phi: Observable, psi: Observable,
                         n_max: int, n_orbits: int = 50_000,
                         orbit_len: int = 80, burn_in: int = 500,
                         n_batches: int = 10, seed: int = 0,
                         ) -> CorrelationTable:
    """Estimate C_n = <phi (psi o T^n)> - <phi><psi> for n = 0..n_max.

    An ensemble of orbits (x0 uniform, y0 = 0) is burned in, then
    phi/psi are recorded along ``orbit_len`` steps; lag-n products are
    averaged over both time and ensemble.  The ensemble is split into
    batches; the reported value is the batch mean and sigma the
    standard error across batches, which also defines the noise floor
    used by the fit.
    """
    if orbit_len <= n_max:
        raise ValueError("orbit_len must exceed n_max")
    rng = np.random.default_rng(seed)
    x = rng.random((n_orbits, model.u))
    y = np.zeros((n_orbits, model.d))
    C = model.C.matrix

    def advance(x, y):
        fx = model.f.eval(x)
        y = y @ C.T + fx
        x = model.E.apply(x)
        x = np.mod(x + ORBIT_JITTER * (rng.random(x.shape) - 0.5), 1.0)
        return x, y

    for _ in range(burn_in):
        x, y = advance(x, y)
    phis = np.empty((orbit_len, n_orbits))
    psis = np.empty((orbit_len, n_orbits))
    for t in range(orbit_len):
        phis[t] = phi(x, y)
        psis[t] = psi(x, y)
        if t < orbit_len - 1:
            x, y = advance(x, y)

    bounds = np.linspace(0, n_orbits, n_batches + 1).astype(int)
    ns = list(range(n_max + 1))
    per_batch = np.empty((n_batches, n_max + 1))
    for b in range(n_batches):
        sl = slice(bounds[b], bounds[b + 1])
        P, Q = phis[:, sl], psis[:, sl]
        mp, mq = P.mean(), Q.mean()
        for n in ns:
            prod = (P[: orbit_len - n] * Q[n:]).mean()
            per_batch[b, n] = prod - mp * mq
    values = per_batch.mean(axis=0)
    sigmas = per_batch.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return CorrelationTable(ns=ns, values=values.tolist(),
                            sigmas=sigmas.tolist(), n_orbits=n_orbits,
                            orbit_len=orbit_len, burn_in=burn_in,
                            n_batches=n_batches, seed=seed)


class FitRefusedError(ValueError):
    """Too few points above the noise floor to fit a decay rate."""


@dataclass(frozen=True)
class DecayFit:
    """Least-squares fit of log |C_n| over the usable window."""

    zeta_hat: float
    log_k: float
    r_squared: float
    window: tuple[int, int]
    n_used: int

    def as_dict(self) -> dict:
        return {"zeta_hat": self.zeta_hat, "log_k": self.log_k,
                "r_squared": self.r_squared, "window": list(self.window),
                "n_used": self.n_used}


def fit_decay(table: CorrelationTable, floor_mult: float = 3.0,
              min_points: int = 5) -> DecayFit:
    """Fit |C_n| ~ K zeta^n on the window before the noise floor.

    Points n >= 1 are usable while |C_n| > floor_mult * sigma_n; the
    window ends at the first violation.  Fewer than ``min_points``
    usable points refuses the fit (FitRefusedError) rather than
    returning a rate fitted to noise.
    """
    usable = []
    for n, c, s in zip(table.ns, table.values, table.sigmas):
        if n == 0:
            continue
        if abs(c) <= floor_mult * s or c == 0.0:
            break
        usable.append((n, abs(c)))
    if len(usable) < min_points:
        raise FitRefusedError(
            f"only {len(usable)} points above the noise floor "
            f"(need {min_points}); increase orbits or shorten n_max")
    ns = np.array([n for n, _ in usable], dtype=float)
    logs = np.log([c for _, c in usable])
    slope, intercept = np.polyfit(ns, logs, 1)
    pred = slope * ns + intercept
    ss_res = float(((logs - pred) ** 2).sum())
    ss_tot = float(((logs - logs.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return DecayFit(zeta_hat=float(np.exp(slope)), log_k=float(intercept),
                    r_squared=r2, window=(int(ns[0]), int(ns[-1])),
                    n_used=len(usable))


@dataclass(frozen=True)
class ZetaInterval:
    """Theoretical decay-rate interval (B1 omitted, flagged).

    lower = max( |E^-1|^{1/nu},
                 sqrt( tau^{1/q} / (|det DT| m(C)^{2s}) ) ),
    nu = sum_{j=rho1+1}^{rho0} 1/j.  The interval is (lower, 1); when
    lower >= 1 it is empty, which the report states explicitly.
    """

    lower: float
    upper: float
    empty: bool
    nu: float
    rho0: int
    rho1: int
    inverse_branch_term: float
    transversality_term: float
    tau_upper: int
    q: int
    b1_omitted: bool = True

    def as_dict(self) -> dict:
        return {
            "lower": self.lower, "upper": self.upper, "empty": self.empty,
            "nu": self.nu, "rho0": self.rho0, "rho1": self.rho1,
            "inverse_branch_term": self.inverse_branch_term,
            "transversality_term": self.transversality_term,
            "tau_upper": self.tau_upper, "q": self.q,
            "b1_omitted": self.b1_omitted,
        }


def zeta_interval(model: SkewModel, tau_upper: int, q: int,
                  rho0: int | None = None, rho1: int = 0) -> ZetaInterval:
    """Decay-rate interval implied by a tau upper bound at block length q."""
    if rho0 is None:
        rho0 = model.r - 1
    if not 0 <= rho1 < rho0:
        raise ValueError("need 0 <= rho1 < rho0")
    nu = sum(1.0 / j for j in range(rho1 + 1, rho0 + 1))
    inv_norm = 1.0 / model.mu_lo                    # |E^{-1}|
    branch = inv_norm ** (1.0 / nu)
    trans = math.sqrt(tau_upper ** (1.0 / q)
                      / (model.det_DT * model.lam_lo ** (2.0 * model.s)))
    lower = max(branch, trans)
    return ZetaInterval(lower=lower, upper=1.0, empty=lower >= 1.0, nu=nu,
                        rho0=rho0, rho1=rho1, inverse_branch_term=branch,
                        transversality_term=trans, tau_upper=int(tau_upper),
                        q=q)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2,
                               allow_nan=True, default=float) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_density(base: Path, density: GridDensity, label: str) -> list[Path]:
    """Write mass as flat float64 (C order) plus a JSON header."""
    grid = density.grid
    bin_path = base.with_suffix(".bin")
    arr = np.ascontiguousarray(density.mass, dtype=np.float64)
    bin_path.write_bytes(arr.tobytes())
    header = {
        "label": label, "dtype": "float64", "order": "C",
        "shape": list(grid.shape), "nx": list(grid.nx), "ny": list(grid.ny),
        "k0": grid.k0, "total_mass": density.total_mass,
    }
    json_path = base.with_suffix(".json")
    write_json(json_path, header)
    return [bin_path, json_path]


class RunWriter:
    """Collects outputs and stage timings, then writes the manifest.

    The manifest inventory lists the SHA-256 of every file the run
    wrote (itself excluded), so reruns can be compared file-by-file;
    timestamps live only here.
    """

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.stages: list[dict] = []
        self.files: list[Path] = []
        self.started = time.time()
        self._stage_name: str | None = None
        self._stage_t0 = 0.0

    def start(self, name: str) -> None:
        self.finish_stage()
        self._stage_name = name
        self._stage_t0 = time.time()

    def finish_stage(self) -> None:
        if self._stage_name is not None:
            self.stages.append({"name": self._stage_name,
                                "seconds": time.time() - self._stage_t0})
            self._stage_name = None

    def add(self, *paths: Path) -> None:
        self.files.extend(paths)

    def json(self, name: str, obj) -> None:
        path = self.out / name
        write_json(path, obj)
        self.add(path)

    def csv(self, name: str, header: list[str], rows) -> None:
        path = self.out / name
        write_csv(path, header, rows)
        self.add(path)

    def density(self, name: str, density: GridDensity, label: str) -> None:
        self.add(*write_density(self.out / name, density, label))

    def close(self, exit_code: int) -> None:
        self.finish_stage()
        inventory = {}
        for path in sorted(set(self.files)):
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            inventory[path.name] = digest
        manifest = {
            "command": self.command,
            "config_sha256": self.cfg.sha256(),
            "config": self.cfg.raw,
            "config_source": self.cfg.source,
            "exit_code": exit_code,
            "started": self.started,
            "finished": time.time(),
            "stages": self.stages,
            "outputs": inventory,
        }
        write_json(self.out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# subcommand drivers
# ---------------------------------------------------------------------------

def _start_density(model: SkewModel, grid: BoxGrid,
                   width_frac: float = 0.6) -> GridDensity:
    """Normalized start density: uniform in x, raised-cosine bump in y
    (vanishes at the walls, so spectral guards pass at step zero)."""
    _, y = grid.centers()
    vals = np.ones(grid.n_cells)
    for k in range(grid.d):
        a = width_frac * grid.k0
        vals *= np.where(np.abs(y[:, k]) < a,
                         np.cos(np.pi * y[:, k] / (2.0 * a)) ** 2, 0.0)
    return GridDensity(grid, vals * grid.cell_volume).normalized()


def cmd_certify(cfg: ExperimentConfig) -> int:
    """Check the standing inequalities, then bound tau and the margin."""
    model = cfg.model
    block = cfg.block("certify")
    writer = RunWriter(cfg, "certify")
    writer.start("conditions")
    conditions = check_conditions(model)
    writer.json("conditions.json", conditions.as_dict())
    if not conditions.volume_ok:
        # the volume clause bounds the certifiable margin above by zero
        # regardless of tau, so no word enumeration can help
        writer.json("certify_report.json", {
            "certified": False, "refusal": "volume clause fails at this s",
            "conditions": conditions.as_dict(), "tau_computed": False,
        })
        writer.close(EXIT_NOT_CERTIFIED)
        return EXIT_NOT_CERTIFIED

    writer.start("tau_upper_bound")
    threads = cfg.threads if cfg.threads > 0 else None
    try:
        report = tau_upper_bound(model, block["q"], block["p_list"],
                                 gamma=block["gamma"], n_grid=block["n_grid"],
                                 max_refinements=block["max_refinements"],
                                 pair_budget=block["pair_budget"],
                                 threads=threads)
    except BudgetExceededError as exc:
        writer.json("certify_report.json", {
            "certified": False, "refusal": str(exc),
            "conditions": conditions.as_dict(), "tau_computed": False,
            "budget_limited": True,
        })
        writer.close(EXIT_BUDGET)
        return EXIT_BUDGET
    margin = condition_margin(model, report)
    certified = margin > 0.0 and not report.budget_limited
    writer.start("write")
    writer.json("transversality.json", report.as_dict())
    writer.csv("tau_table.csv", ["p", "level", "tau_upper"],
               list(zip(report.p_values, report.levels, report.counts)))
    writer.json("certify_report.json", {
        "certified": certified, "margin": margin,
        "tau_upper": report.tau_upper, "q": report.q, "s": model.s,
        "budget_limited": report.budget_limited,
        "conditions": conditions.as_dict(),
        "tau_computed": True,
    })
    if certified:
        code = EXIT_OK
    elif report.budget_limited:
        code = EXIT_BUDGET
    else:
        code = EXIT_NOT_CERTIFIED
    writer.close(code)
    return code


def cmd_density(cfg: ExperimentConfig) -> int:
    """Run both density estimators and report their TV distance."""
    model = cfg.model
    block = cfg.block("density")
    writer = RunWriter(cfg, "density")
    writer.start("ulam_build")
    grid = BoxGrid.for_model(model, block["nx"], block["ny"])
    operator = build_ulam(model, grid, samples_per_cell=block["samples_per_cell"],
                          method=block["method"], seed=block["seed"],
                          leak_tol=block["leak_tol"])
    writer.start("ulam_fixed_point")
    fixed = srb_density_ulam(operator, tol=block["tol"],
                             max_iters=block["max_iters"])
    writer.start("mc_histogram")
    mc = srb_histogram_mc(model, grid, n_orbits=block["mc_orbits"],
                          burn_in=block["mc_burn_in"],
                          orbit_len=block["mc_orbit_len"],
                          seed=block["seed"])
    writer.start("write")
    tv = fixed.density.tv_distance(mc)
    mc_degenerate = (not math.isfinite(mc.total_mass)
                     or mc.total_mass < 0.5)
    interior = grid.interior_mask(model)
    leak = operator.leak
    summary = {
        "tv_distance": tv,
        "ulam": fixed.as_dict(),
        "ulam_method": operator.method,
        "max_interior_leak": float(np.abs(leak[interior]).max())
                             if interior.any() else 0.0,
        "operator_flagged": operator.flagged,
        "mc_total_mass": mc.total_mass,
        "mc_degenerate": mc_degenerate,
        "ulam_sup_density": fixed.density.sup_density(),
        "mc_sup_density": mc.sup_density(),
        "grid": {"nx": list(grid.nx), "ny": list(grid.ny), "k0": grid.k0},
    }
    writer.density("ulam_density", fixed.density, "ulam_fixed_point")
    writer.density("mc_density", mc, "mc_histogram")
    writer.csv("x_marginal.csv", ["cell", "ulam", "mc"],
               [(i, a, b) for i, (a, b) in enumerate(
                   zip(fixed.density.x_marginal(), mc.x_marginal()))])
    writer.json("density_summary.json", summary)
    code = EXIT_GUARD if (operator.flagged or mc_degenerate) else EXIT_OK
    writer.close(code)
    return code


def cmd_sobolev(cfg: ExperimentConfig) -> int:
    """Track H^s norms of operator iterates over an s-grid."""
    model = cfg.model
    block = cfg.block("sobolev")
    writer = RunWriter(cfg, "sobolev")
    writer.start("ulam_build")
    grid = BoxGrid.for_model(model, block["nx"], block["ny"])
    operator = build_ulam(model, grid)
    phi0 = _start_density(model, grid, block["start_width"])
    dictionary = default_dictionary(model)
    reports = []
    plateau = {}
    try:
        for s in block["s_values"]:
            writer.start(f"track_s_{s}")
            rep = ly_ratio_track(model, operator, phi0, s=s,
                                 rho=block["rho"], n_max=block["n_max"],
                                 dictionary=dictionary, pad=block["pad"],
                                 boundary_tol=block["boundary_tol"],
                                 mollify_width=block["mollify_width"],
                                 dagger_every=block["dagger_every"])
            reports.append(rep)
            w = min(block["plateau_window"], len(rep.h_norms) - 1)
            tail = rep.h_norms[w:]
            plateau[str(s)] = {
                "window_start": w,
                "max_over_start": max(tail) / tail[0] if tail[0] > 0 else math.inf,
                "plateaued": bool(tail[0] > 0 and
                                  max(tail) / tail[0] <= 1.0 + block["plateau_tol"]),
            }
    except BoundaryMassError as exc:
        writer.json("sobolev_report.json", {"guard": str(exc)})
        writer.close(EXIT_GUARD)
        return EXIT_GUARD
    writer.start("write")
    rows = []
    for rep in reports:
        for n, h, dag, ratio in rep.rows():
            rows.append((rep.s, n, h, dag, ratio))
    writer.csv("sobolev_table.csv", ["s", "n", "h_norm", "dagger_lb", "ratio"],
               rows)
    writer.json("sobolev_report.json", {
        "reports": [rep.as_dict() for rep in reports],
        "plateau": plateau,
        "grid": {"nx": list(grid.nx), "ny": list(grid.ny)},
    })
    writer.close(EXIT_OK)
    return EXIT_OK


def cmd_decay(cfg: ExperimentConfig) -> int:
    """Measure correlations, fit the rate, report the theoretical interval."""
    model = cfg.model
    block = cfg.block("decay")
    writer = RunWriter(cfg, "decay")
    phi = Observable.from_block(block["phi"])
    psi = Observable.from_block(block["psi"])
    writer.start("correlations")
    table = measure_correlations(model, phi, psi, block["n_max"],
                                 n_orbits=block["n_orbits"],
                                 orbit_len=block["orbit_len"],
                                 burn_in=block["burn_in"],
                                 n_batches=block["n_batches"],
                                 seed=block["seed"])
    writer.csv("correlations.csv", ["n", "c_n", "sigma_n"],
               list(zip(table.ns, table.values, table.sigmas)))
    writer.start("tau_upper_bound")
    threads = cfg.threads if cfg.threads > 0 else None
    tau_report = tau_upper_bound(model, block["q"], block["p_list"],
                                 gamma=block["gamma"],
                                 max_refinements=block["max_refinements"],
                                 pair_budget=block["pair_budget"],
                                 threads=threads)
    interval = zeta_interval(model, tau_report.tau_upper, block["q"])
    writer.start("fit")
    refused = None
    fit = None
    try:
        fit = fit_decay(table, floor_mult=block["floor_mult"],
                        min_points=block["min_points"])
    except FitRefusedError as exc:
        refused = str(exc)
    report = {
        "observables": {"phi": phi.as_dict(), "psi": psi.as_dict()},
        "correlations": table.as_dict(),
        "fit": fit.as_dict() if fit else None,
        "fit_refused": refused,
        "zeta_interval": interval.as_dict(),
        "tau_upper": tau_report.tau_upper,
        "tau_budget_limited": tau_report.budget_limited,
    }
    writer.json("decay_report.json", report)
    code = EXIT_GUARD if refused else EXIT_OK
    writer.close(code)
    return code


def cmd_scan(cfg: ExperimentConfig) -> int:
    """Sweep forcing amplitudes with random draws; tabulate certification."""
    model = cfg.model
    block = cfg.block("scan")
    writer = RunWriter(cfg, "scan")
    writer.start("scan")
    threads = cfg.threads if cfg.threads > 0 else None
    rows = random_f_scan(model.E, model.C, block["amplitudes"], block["q"],
                         n_seeds=block["n_seeds"], seed=block["seed"],
                         max_freq=block["max_freq"], r=model.r, s=model.s,
                         p_list=tuple(block["p_list"]), gamma=block["gamma"],
                         n_grid=block["n_grid"],
                         max_refinements=block["max_refinements"],
                         pair_budget=block["pair_budget"], threads=threads)
    writer.start("write")
    writer.csv("scan_table.csv",
               ["amplitude", "seed_index", "q", "tau_upper", "margin",
                "undecided_pairs", "budget_limited", "certified"],
               [(r["amplitude"], r["seed_index"], r["q"], r["tau_upper"],
                 r["margin"], r["undecided_pairs"], int(r["budget_limited"]),
                 int(r["certified"])) for r in rows])
    writer.json("scan_report.json", {"rows": rows, "q": block["q"],
                                     "amplitudes": block["amplitudes"],
                                     "n_seeds": block["n_seeds"],
                                     "seed": block["seed"]})
    all_budget = all(r["budget_limited"] for r in rows) if rows else False
    code = EXIT_BUDGET if all_budget else EXIT_OK
    writer.close(code)
    return code
