"""Experiment configuration: TOML schema, validation, model building.

A config file has a ``[model]`` table plus one table per subcommand;
only the tables a subcommand reads need to be present.  Validation is
strict: unknown keys are rejected with the dotted path to the
offending key, so typos fail loudly instead of silently falling back
to defaults.  All numeric tolerances used by the drivers live here as
documented defaults, overridable per run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # python < 3.11
    import tomli as tomllib

from .model import Contraction, ExpandingMap, SkewModel, TrigForcing


class SchemaError(ValueError):
    """Config does not match the schema; message carries the key path."""


# Schemas map key -> (type spec, default).  A type spec is a type, a
# tuple of types, a list [elem types] for homogeneous arrays, or a
# nested dict for sub-tables.  Defaults of REQUIRED mark mandatory keys.
REQUIRED = object()

_NUM = (int, float)
_MATRIX = (int, float, list)

_OBSERVABLE_SCHEMA = {
    "cos": ([_NUM], [0.0, 1.0]),     # c_k on cos(2 pi k x), k = 0, 1, ...
    "sin": ([_NUM], []),             # s_k on sin(2 pi k x), k = 1, 2, ...
    "axis": (int, 0),                # which x coordinate carries the waves
    "y_kind": (str, "poly"),         # "poly" or "bump"
    "y_params": ([_NUM], [1.0]),     # poly coefficients, or (half_width,)
    "y_axis": (int, 0),
}

SCHEMA: dict = {
    "out": (str, "runs/out"),
    "threads": (int, 0),             # 0 = serial
    "model": {
        "expanding": (_MATRIX, REQUIRED),
        "contraction": (_MATRIX, REQUIRED),
        "forcing": (str, "cosine"),          # zero | cosine | random
        "amplitude": (_NUM, 0.1),
        "frequency": (int, 1),
        "max_freq": (int, 3),
        "forcing_seed": (int, 0),
        "r": (int, 2),
        "s": (_NUM, 0.0),
        "k0": (_NUM, None),
        "k0_margin": (_NUM, 0.1),
    },
    "certify": {
        "q": (int, 3),
        "p_list": ([int], [1, 2]),
        "gamma": (_NUM, 0.45),
        "n_grid": (int, None),
        "max_refinements": (int, 2),
        "pair_budget": (int, 5_000_000),
    },
    "density": {
        "nx": (_MATRIX, 128),
        "ny": (_MATRIX, 128),
        "method": (str, "auto"),             # auto | split | subgrid | mc
        "samples_per_cell": (int, 0),
        "leak_tol": (_NUM, 1e-9),
        "tol": (_NUM, 1e-10),
        "max_iters": (int, 5000),
        "mc_orbits": (int, 100_000),
        "mc_burn_in": (int, 1000),
        "mc_orbit_len": (int, 100),
        "seed": (int, 0),
    },
    "sobolev": {
        "nx": (_MATRIX, 64),
        "ny": (_MATRIX, 64),
        "s_values": ([_NUM], [0.0, 0.05, 0.1, 0.15]),
        "rho": (int, 1),
        "n_max": (int, 40),
        "pad": (_NUM, 0.5),
        "boundary_tol": (_NUM, 1e-8),
        "mollify_width": (_NUM, 2.0),
        "dagger_every": (int, 5),
        "plateau_window": (int, 20),         # plateau test starts here
        "plateau_tol": (_NUM, 0.1),          # max/h[window] - 1 below this
        "start_width": (_NUM, 0.6),          # y half-width fraction of phi0
    },
    "decay": {
        "n_max": (int, 30),
        "n_orbits": (int, 50_000),
        "orbit_len": (int, 80),
        "burn_in": (int, 500),
        "n_batches": (int, 10),
        "seed": (int, 0),
        "floor_mult": (_NUM, 3.0),           # noise floor = this many sigma
        "min_points": (int, 5),
        "q": (int, 2),
        "p_list": ([int], [1, 2]),
        "gamma": (_NUM, 0.45),
        "max_refinements": (int, 2),
        "pair_budget": (int, 5_000_000),
        "phi": _OBSERVABLE_SCHEMA,
        "psi": _OBSERVABLE_SCHEMA,
    },
    "scan": {
        "amplitudes": ([_NUM], [0.0, 0.05, 0.1]),
        "q": (int, 2),
        "n_seeds": (int, 5),
        "seed": (int, 0),
        "max_freq": (int, 3),
        "p_list": ([int], [1, 2]),
        "gamma": (_NUM, 0.45),
        "n_grid": (int, None),
        "max_refinements": (int, 2),
        "pair_budget": (int, 5_000_000),
    },
}


def _check_type(value, spec, path: str):
    if isinstance(spec, list):
        if not isinstance(value, list):
            raise SchemaError(f"{path}: expected an array")
        for i, item in enumerate(value):
            _check_type(item, spec[0], f"{path}[{i}]")
        return
    if isinstance(spec, tuple):
        if isinstance(value, bool) or not isinstance(value, spec):
            raise SchemaError(f"{path}: expected one of {spec}")
        return
    if spec is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{path}: expected an integer")
        return
    if not isinstance(value, spec):
        raise SchemaError(f"{path}: expected {spec.__name__}")


def _resolve_table(data: dict, schema: dict, path: str) -> dict:
    out = {}
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise SchemaError(f"unknown key: {here}")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise SchemaError(f"{here}: expected a table")
            out[key] = _resolve_table(value, spec, here)
        else:
            type_spec, _ = spec
            _check_type(value, type_spec, here)
            out[key] = value
    for key, spec in schema.items():
        if key in out:
            continue
        here = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _resolve_table({}, spec, here)
        else:
            _, default = spec
            if default is REQUIRED:
                raise SchemaError(f"missing required key: {here}")
            out[key] = default
    return out


def resolve(raw: dict) -> dict:
    """Validate a parsed config against the schema and fill defaults."""
    if "model" not in raw:
        raise SchemaError("missing required table: model")
    return _resolve_table(raw, SCHEMA, "")


def build_model(block: dict) -> SkewModel:
    """Construct the skew model described by a resolved [model] table."""
    expanding = ExpandingMap(block["expanding"])
    contraction = Contraction(block["contraction"])
    u, d, r = expanding.dim, contraction.matrix.shape[0], block["r"]
    kind = block["forcing"]
    if kind == "zero":
        forcing = TrigForcing.zero(u, d, r=r)
    elif kind == "cosine":
        forcing = TrigForcing.cosine(block["frequency"], block["amplitude"],
                                     u=u, d=d, r=r)
    elif kind == "random":
        rng = np.random.default_rng(block["forcing_seed"])
        forcing = TrigForcing.random(u, d, block["max_freq"],
                                     block["amplitude"], rng, r=r)
    else:
        raise SchemaError(
            f"model.forcing: unknown kind {kind!r} (zero|cosine|random)")
    return SkewModel(expanding, contraction, forcing, s=block["s"],
                     k0_margin=block["k0_margin"], k0=block["k0"])


@dataclass
class ExperimentConfig:
    """A resolved experiment configuration plus the built model."""

    raw: dict
    model: SkewModel
    out_dir: Path
    threads: int = 0
    source: str = ""

    def block(self, name: str) -> dict:
        return self.raw[name]

    def sha256(self) -> str:
        """Digest of the numeric experiment: everything but out/threads.

        Output location and thread count cannot change any result byte,
        so two runs with equal digests must produce equal outputs."""
        ident = {k: v for k, v in self.raw.items()
                 if k not in ("out", "threads")}
        canon = json.dumps(ident, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: str | Path, out_override: str | None = None,
                threads_override: int | None = None,
                seed_override: int | None = None,
                seed_tables: tuple[str, ...] = ("density", "decay", "scan"),
                ) -> ExperimentConfig:
    """Parse, validate, and resolve a TOML config file.

    CLI overrides are folded into the resolved dict so the manifest
    records what actually ran; the identity digest skips out/threads.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"TOML parse error in {path}: {exc}") from exc
    resolved = resolve(raw)
    if out_override is not None:
        resolved["out"] = out_override
    if threads_override is not None:
        resolved["threads"] = threads_override
    if seed_override is not None:
        for table in seed_tables:
            if "seed" in resolved.get(table, {}):
                resolved[table]["seed"] = seed_override
    model = build_model(resolved["model"])
    return ExperimentConfig(raw=resolved, model=model,
                            out_dir=Path(resolved["out"]),
                            threads=resolved["threads"], source=str(path))
