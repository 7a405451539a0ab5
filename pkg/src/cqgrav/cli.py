"""Command-line entry point.

Usage::

    cqgrav verify|simulate|squeeze|decohere|energy SCENARIO [--out DIR] [--threads N] [--seed S] [--strict]

Exit codes: 0 success or satisfied, 2 domain verdict (trade-off violated,
invalid kernel pair, squeezed out with ``--strict``), 1 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .constants import CODATA, Constants
from .errors import CQError, InvalidPair, ScenarioError
from .kernels import KernelSpec, SpatialGrid, discretize, saturating_pair
from .newtonian import FieldState, NoiseConfig, run_ensemble, run_manifest
from .observables import (
    MassDistribution,
    SqueezeScenario,
    decoherence_rate,
    energy_production,
    self_energy_rate,
    squeeze,
    sweep_lower_bound,
)
from .tradeoff import check_coupling_tradeoff, check_kernel_tradeoff

log = logging.getLogger("cqgrav")

EXIT_OK, EXIT_INPUT, EXIT_VERDICT = 0, 1, 2
SCENARIO_VERSION = "cqgrav-scenario/1"
COMMANDS = ("verify", "simulate", "squeeze", "decohere", "energy")

# canonical coupling units of each kernel family (decoherence role unless noted)
KERNEL_UNITS = {
    "DiosiPenrose": "m kg^-2 s^-1",
    "Gaussian": "m^3 kg^-2 s^-1",
    "LaplaceBeltramiWeakField": "kg^2 s m^-1",
}


# --- schema ------------------------------------------------------------------

def _quantity(unit: str) -> dict:
    return {"type": "object", "required": ["value", "unit"], "additionalProperties": False,
            "properties": {"value": {"type": "number"}, "unit": {"const": unit}}}


def _vector(unit: str) -> dict:
    return {"type": "object", "required": ["value", "unit"], "additionalProperties": False,
            "properties": {"value": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                           "unit": {"const": unit}}}


_MATRIX = {"anyOf": [{"type": "number"},
                     {"type": "array", "items": {"anyOf": [{"type": "number"},
                                                           {"type": "array", "items": {"type": "number"}}]}}]}

_GRID = {"type": "object", "required": ["shape", "spacing"], "additionalProperties": False,
         "properties": {"shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                  "minItems": 3, "maxItems": 3},
                        "spacing": _quantity("m"), "center": _vector("m")}}

_KERNEL = {"type": "object", "required": ["family", "coupling"], "additionalProperties": False,
           "properties": {"family": {"enum": sorted(KERNEL_UNITS)},
                          "coupling": {"type": "object", "required": ["value", "unit"],
                                       "properties": {"value": {"type": "number", "minimum": 0},
                                                      "unit": {"type": "string"}},
                                       "additionalProperties": False},
                          "r0": _quantity("m")}}

_MASS = {"type": "object", "required": ["kind"],
         "properties": {"kind": {"enum": ["uniform_sphere", "point", "sites"]},
                        "mass": _quantity("kg"), "radius": _quantity("m"), "center": _vector("m"),
                        "values": {"type": "array", "items": {"type": "number", "minimum": 0}},
                        "unit": {"const": "kg m^-3"}},
         "additionalProperties": False}

_BLOCKS = {
    "verify": {"type": "object", "required": ["mode"], "additionalProperties": False,
               "properties": {"mode": {"enum": ["couplings", "kernels"]},
                              "D0": _MATRIX, "D1_br": _MATRIX, "D2": _MATRIX,
                              "grid": _GRID, "kernel": _KERNEL, "drift": {"type": "number"},
                              "method": {"enum": ["auto", "grid", "continuum"]},
                              "order": {"type": "integer", "minimum": 0},
                              "D2_scale": {"type": "number", "minimum": 0},
                              "eigen_method": {"enum": ["auto", "dense", "lanczos", "skip"]}}},
    "simulate": {"type": "object", "required": ["grid", "branches", "dt", "t_final"],
                 "additionalProperties": False,
                 "properties": {"grid": _GRID, "kernel": _KERNEL, "noise": {"type": "boolean"},
                                "branches": {"type": "array", "items": _MASS, "minItems": 2, "maxItems": 2},
                                "amplitudes": {"type": "array", "items": {"type": "number"},
                                               "minItems": 2, "maxItems": 2},
                                "dt": _quantity("s"), "t_final": _quantity("s"),
                                "ensemble_size": {"type": "integer", "minimum": 1},
                                "record_every": {"type": "integer", "minimum": 1},
                                "seed": {"type": "integer", "minimum": 0},
                                "quasi_static": {"type": "boolean"}}},
    "squeeze": {"type": "object",
                "required": ["family", "sigma_a", "T", "N", "r_N", "V_b", "M_lambda", "V_lambda", "R_lambda",
                             "lambda"],
                "additionalProperties": False,
                "properties": {"family": {"enum": ["ContinuousDirac", "DiscreteLocal", "DP-LaplaceBeltrami"]},
                               "sigma_a": _quantity("m s^-2"), "T": _quantity("s"), "N": {"type": "number"},
                               "r_N": _quantity("m"), "V_b": _quantity("m^3"), "M_lambda": _quantity("kg"),
                               "V_lambda": _quantity("m^3"), "R_lambda": _quantity("m"),
                               "lambda": _quantity("s^-1"), "m_N": _quantity("kg"),
                               "sweep_lambda": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}}},
    "decohere": {"type": "object", "required": ["grid", "kernel", "branches"], "additionalProperties": False,
                 "properties": {"grid": _GRID, "kernel": _KERNEL,
                                "branches": {"type": "array", "items": _MASS, "minItems": 2, "maxItems": 2},
                                "subsamples": {"type": "integer", "minimum": 1}}},
    "energy": {"type": "object", "required": ["mass_density", "lambda", "volume"], "additionalProperties": False,
               "properties": {"mass_density": _quantity("kg m^-3"), "lambda": _quantity("s^-1"),
                              "volume": _quantity("m^3"), "spread_volume": _quantity("m^3"),
                              "age": _quantity("s")}},
}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["version"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCENARIO_VERSION},
        "description": {"type": "string"},
        "constants": {"type": "object", "additionalProperties": False,
                      "properties": {"G": _quantity("m^3 kg^-1 s^-2"), "c": _quantity("m s^-1"),
                                     "hbar": _quantity("J s")}},
        "output": {"type": "object", "additionalProperties": False,
                   "properties": {"dir": {"type": "string"}}},
        **_BLOCKS,
    },
    "minProperties": 2,
}


# --- loading -----------------------------------------------------------------

@dataclass
class Scenario:
    command: str
    block: dict
    constants: Constants
    raw: dict
    text: str
    path: Path


def _line_of(text: str, path) -> Optional[int]:
    """Line of the deepest key named in ``path`` (best effort)."""
    keys = [p for p in path if isinstance(p, str)]
    pos = 0
    for key in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1 if keys else 1


def load_scenario(path: Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})") from exc
    errors = sorted(jsonschema.Draft202012Validator(SCENARIO_SCHEMA).iter_errors(raw),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ScenarioError(f"{path}:{_line_of(text, err.absolute_path)}: {where}: {err.message}")
    present = [c for c in COMMANDS if c in raw]
    if len(present) != 1:
        raise ScenarioError(f"{path}: exactly one command block is required, found {present or 'none'}")
    overrides = {k: v["value"] for k, v in raw.get("constants", {}).items()}
    return Scenario(present[0], raw[present[0]], CODATA.with_overrides(**overrides), raw, text, Path(path))


def _grid(block: dict) -> SpatialGrid:
    shape = tuple(block["shape"])
    h = block["spacing"]["value"]
    if not h > 0:
        raise ScenarioError("grid spacing must be positive")
    center = tuple(block.get("center", {"value": (0, 0, 0)})["value"])
    return SpatialGrid(shape, tuple(n * h for n in shape), center)


def _kernel_spec(block: dict, role: str = "D0") -> KernelSpec:
    family = block["family"]
    unit = block["coupling"]["unit"]
    if unit != KERNEL_UNITS[family]:
        raise ScenarioError(f"coupling of {family} must be given in {KERNEL_UNITS[family]!r}, got {unit!r}")
    r0 = block["r0"]["value"] if "r0" in block else None
    return KernelSpec(family, block["coupling"]["value"], unit, r0=r0, role=role)


def _mass_field(block: dict, grid: SpatialGrid, subsamples: int = 4) -> np.ndarray:
    kind = block["kind"]
    if kind == "sites":
        if "values" not in block:
            raise ScenarioError("a 'sites' mass field needs 'values'")
        values = np.asarray(block["values"], float)
        if values.size != grid.n_sites:
            raise ScenarioError(f"'sites' mass field has {values.size} values for {grid.n_sites} sites")
        return values
    if "mass" not in block:
        raise ScenarioError(f"a {kind!r} mass distribution needs 'mass'")
    center = tuple(block.get("center", {"value": (0, 0, 0)})["value"])
    radius = block["radius"]["value"] if "radius" in block else None
    dist = MassDistribution(kind, block["mass"]["value"], position=center, radius=radius)
    return dist.density_on(grid, subsamples)


def _matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    return np.atleast_2d(arr) if arr.ndim < 2 else arr


# --- commands ----------------------------------------------------------------

def _write(out: Optional[Path], name: str, text: str) -> Optional[Path]:
    if out is None:
        return None
    out.mkdir(parents=True, exist_ok=True)
    target = out / name
    target.write_text(text, encoding="utf-8", newline="")
    return target


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_verify(sc: Scenario, args) -> int:
    """Check the decoherence-diffusion trade-off for couplings or a kernel pair."""
    b = sc.block
    if b["mode"] == "couplings":
        missing = [k for k in ("D0", "D1_br", "D2") if k not in b]
        if missing:
            raise ScenarioError(f"verify couplings needs {missing}")
        verdict = check_coupling_tradeoff(_matrix(b["D0"]), _matrix(b["D1_br"]), _matrix(b["D2"]))
    else:
        missing = [k for k in ("grid", "kernel") if k not in b]
        if missing:
            raise ScenarioError(f"verify kernels needs {missing}")
        grid = _grid(b["grid"])
        drift = b.get("drift", -0.5)
        D0, D2 = saturating_pair(_kernel_spec(b["kernel"]), grid, drift=drift,
                                 method=b.get("method", "auto"), order_N=b.get("order", 8))
        D2 = D2.scaled(b.get("D2_scale", 1.0))
        verdict = check_kernel_tradeoff(D0, drift, D2, eigen_method=b.get("eigen_method", "auto"))
    report = {"command": "verify", "mode": b["mode"], "verdict": verdict.to_dict()}
    _write(args.out, "verdict.json", _dump(report))
    print(f"trade-off {'satisfied' if verdict.satisfied else 'VIOLATED'}: "
          f"min eigenvalue {verdict.min_eigenvalue:.3e}, Schur defect {verdict.schur_defect:.3e}, "
          f"support defect {verdict.support_defect:.3e}")
    return EXIT_OK if verdict.satisfied else EXIT_VERDICT


def cmd_simulate(sc: Scenario, args) -> int:
    """Run an unraveling ensemble and write trajectory CSV plus manifest."""
    b = sc.block
    grid = _grid(b["grid"])
    seed = args.seed if args.seed is not None else b.get("seed", 0)
    m_L, m_R = (_mass_field(m, grid) for m in b["branches"])
    state = FieldState.two_branch(grid, m_L, m_R, amplitudes=b.get("amplitudes", (1.0, 1.0)))
    noise = b.get("noise", True)
    if noise:
        if "kernel" not in b:
            raise ScenarioError("a noisy simulation needs a kernel")
        D0, D2 = saturating_pair(_kernel_spec(b["kernel"]), grid, drift=-0.5)
    else:
        zero = KernelSpec("DiosiPenrose", 0.0)
        D0 = D2 = discretize(zero, grid)
    cfg = NoiseConfig(seed=int(seed), dt=b["dt"]["value"], D2_kernel=D2, D0_kernel=D0,
                      ensemble_size=b.get("ensemble_size", 1), constants=sc.constants,
                      quasi_static=b.get("quasi_static", False), validate_pair=noise)
    summary = run_ensemble(state, cfg, b["t_final"]["value"], record_every=b.get("record_every", 1),
                           workers=args.threads)
    csv_text = summary.csv_text()
    config = {**sc.raw, "simulate": {**b, "seed": int(seed)}}
    manifest = run_manifest(config, cfg, summary)
    manifest["package_version"] = __version__
    _write(args.out, "trajectory.csv", csv_text)
    _write(args.out, "manifest.json", _dump(manifest))
    if args.out is None:
        sys.stdout.write(csv_text)
    last = len(summary.times) - 1
    print(f"{summary.n_trajectories} trajectories to t = {summary.times[-1]:g} s; "
          f"ensemble coherence {summary.ensemble_coherence(last):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_squeeze(sc: Scenario, args) -> int:
    """Compute upper and lower bounds on the diffusion coupling."""
    b = sc.block
    if b["family"] == "DiscreteLocal" and "m_N" not in b:
        raise ScenarioError("the DiscreteLocal family needs m_N")
    scenario = SqueezeScenario(sigma_a=b["sigma_a"]["value"], T=b["T"]["value"], N=b["N"],
                               r_N=b["r_N"]["value"], V_b=b["V_b"]["value"], M_lambda=b["M_lambda"]["value"],
                               V_lambda=b["V_lambda"]["value"], R_lambda=b["R_lambda"]["value"],
                               lam=b["lambda"]["value"], family=b["family"],
                               m_N=b["m_N"]["value"] if "m_N" in b else None)
    report = squeeze(scenario, sc.constants)
    _write(args.out, "bounds.json", report.to_json() + "\n")
    if "sweep_lambda" in b:
        _write(args.out, "sweep.csv", sweep_lower_bound(scenario, b["sweep_lambda"]))
    print(report.table())
    if args.strict and report.squeezed_out:
        return EXIT_VERDICT
    return EXIT_OK


def cmd_decohere(sc: Scenario, args) -> int:
    """Decoherence rate of a two-branch mass superposition."""
    b = sc.block
    grid = _grid(b["grid"])
    kernel = discretize(_kernel_spec(b["kernel"]), grid)
    sub = b.get("subsamples", 4)
    m_L, m_R = (_mass_field(m, grid, sub) for m in b["branches"])
    result = {"command": "decohere", "decoherence_rate": decoherence_rate(kernel, m_L, m_R),
              "self_energy_rate": [self_energy_rate(kernel, m_L), self_energy_rate(kernel, m_R)],
              "unit": "s^-1", "grid": grid.to_dict(), "family": kernel.family}
    _write(args.out, "decoherence.json", _dump(result))
    print(f"decoherence rate {result['decoherence_rate']:.6e} s^-1")
    return EXIT_OK


def cmd_energy(sc: Scenario, args) -> int:
    """Lower bound on stochastic gravitational energy production."""
    b = sc.block

    def get(key):
        return b[key]["value"] if key in b else None

    rep = energy_production(get("mass_density"), get("lambda"), get("volume"),
                            spread_volume=get("spread_volume"), age=get("age"), constants=sc.constants)
    result = {"command": "energy", "rate_W": rep.rate, "rate_density_W_per_m3": rep.rate_density,
              "accumulated_density_J_per_m3": rep.accumulated_density, "inputs": rep.inputs}
    _write(args.out, "energy.json", _dump(result))
    print(f"energy production {rep.rate:.3e} W, {rep.rate_density:.3e} W/m^3")
    if rep.accumulated_density is not None:
        print(f"accumulated density {rep.accumulated_density:.3e} J/m^3")
    return EXIT_OK


HANDLERS = {"verify": cmd_verify, "simulate": cmd_simulate, "squeeze": cmd_squeeze,
            "decohere": cmd_decohere, "energy": cmd_energy}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqgrav", description="Classical-quantum gravity trade-off tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("scenario", type=Path, help="scenario JSON file")
        p.add_argument("--out", type=Path, default=None, help="directory for report files")
        p.add_argument("--threads", type=int, default=1, help="worker threads for ensembles")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--strict", action="store_true", help="exit 2 when the bounds are squeezed out")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        sc = load_scenario(args.scenario)
        if sc.command != args.command:
            raise ScenarioError(f"{args.scenario}: scenario holds a {sc.command!r} block, "
                                f"not {args.command!r}")
        if sc.raw.get("output", {}).get("dir") and args.out is None:
            args.out = (sc.path.parent / sc.raw["output"]["dir"]).resolve()
        return HANDLERS[args.command](sc, args)
    except InvalidPair as exc:
        print(f"invalid kernel pair: {exc}", file=sys.stderr)
        return EXIT_VERDICT
    except (CQError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
