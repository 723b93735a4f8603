"""Batch driver: every experiment is a subcommand reading one JSON config.

    qbdspin <subcommand> --config FILE [--seed N] [--workers N] [--out DIR]

Flag precedence is flags > config file > defaults; QBDSPIN_WORKERS is the
fallback worker count.  All outputs are plain CSV/JSON carrying a
provenance header (sha256 of the resolved config plus the code version),
and every subcommand is byte-deterministic in (config, seed) regardless
of worker count.

Exit codes: 0 ok, 1 validation, 2 numeric domain, 3 no crossing,
4 integration instability.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, dynamics, model, montecarlo, spinwave
from .errors import (AccuracyError, BracketError, ConfigError, DomainError,
                     FitError, LswtInstabilityError, QbdspinError,
                     StepSizeError, StructureError)
from .kernel import KernelSpec, closed_form, kernel_quadrature
from .lattice import (build_coupling_table, build_lattice, nn_table,
                      save_config_json)

EXPERIMENTS = ("kernel", "tc", "dispersion", "memory", "sweep")


def exit_code_for(err: Exception) -> int:
    if isinstance(err, ConfigError):
        return 1
    if isinstance(err, BracketError):
        return 3
    if isinstance(err, StepSizeError):
        return 4
    if isinstance(err, (DomainError, AccuracyError, StructureError,
                        LswtInstabilityError, FitError)):
        return 2
    return 2 if isinstance(err, QbdspinError) else 70


# --------------------------------------------------------------------------
# configuration schema

class _Rule:
    def __init__(self, typ, default=None, required=False):
        self.typ = typ
        self.default = default
        self.required = required


def _field(typ, default=None, required=False):
    return _Rule(typ, default, required)

_KERNEL_SECTION = {
    "mu2": _field((int, float), 1.0),
    "dim": _field(int, 3),
    "g": _field((int, float), 1.0),
}

_LATTICE_SECTION = {
    "dim": _field(int, 3),
    "lengths": _field(list, None, required=True),
    "spacing": _field((int, float), 1.0),
    "periodic": _field((bool, list), True),
}

_TABLE_SECTION = {
    "type": _field(str, "kernel"),          # "kernel" | "nn"
    "cutoff": _field((int, float, type(None)), None),
    "sign": _field(int, 1),
    "j_bond": _field((int, float), 1.0),    # nn tables only
}

_MC_SECTION = {
    "sweeps": _field(int, 4000),
    "burn_in": _field((int, type(None)), None),
    "thin": _field(int, 1),
    "proposal": _field(str, "uniform"),
    "cone_angle": _field((int, float, type(None)), None),
}

_SCHEMAS = {
    "kernel": {
        "experiment": _field(str),
        "seed": _field(int, 0),
        "workers": _field((int, type(None)), None),
        "output_dir": _field(str, "qbdspin_out"),
        "kernel": _KERNEL_SECTION,
        "scan": {
            "r_min": _field((int, float), None),
            "r_max": _field((int, float), None),
            "n_r": _field(int, 80),
            "mu2_values": _field((list, type(None)), None),
            "tol": _field((int, float), 1e-8),
            "quad_tol": _field((int, float), 1e-9),
        },
    },
    "tc": {
        "experiment": _field(str),
        "seed": _field(int, 0),
        "workers": _field((int, type(None)), None),
        "output_dir": _field(str, "qbdspin_out"),
        "kernel": _KERNEL_SECTION,
        "lattice": {
            "dim": _field(int, 3),
            "spacing": _field((int, float), 1.0),
            "periodic": _field((bool, list), True),
        },
        "table": _TABLE_SECTION,
        "mc": _MC_SECTION,
        "tc": {
            "sizes": _field(list, None, required=True),
            "t_grid": _field(list, None, required=True),
        },
    },
    "dispersion": {
        "experiment": _field(str),
        "seed": _field(int, 0),
        "workers": _field((int, type(None)), None),
        "output_dir": _field(str, "qbdspin_out"),
        "kernel": _KERNEL_SECTION,
        "lattice": _LATTICE_SECTION,
        "table": _TABLE_SECTION,
        "dispersion": {
            "path": _field(str, None, required=True),
            "points_per_segment": _field(int, 40),
            "orders": _field(list, ["fm"]),
            "S": _field((int, float), 1.0),
            "smallk_points": _field(int, 9),
            "smallk_direction": _field((list, type(None)), None),
        },
    },
    "memory": {
        "experiment": _field(str),
        "seed": _field(int, 0),
        "workers": _field((int, type(None)), None),
        "output_dir": _field(str, "qbdspin_out"),
        "kernel": _KERNEL_SECTION,
        "lattice": _LATTICE_SECTION,
        "table": _TABLE_SECTION,
        "mc": _MC_SECTION,
        "memory": {
            "T_store": _field((int, float), None, required=True),
            "pulse_sites": _field(list, [0]),
            "tilt_angle": _field((int, float), math.pi / 4),
            "alpha": _field((int, float), 0.1),
            "dt": _field((int, float), 0.01),
            "steps": _field(int, 2000),
        },
    },
    "sweep": {
        "experiment": _field(str),
        "seed": _field(int, 0),
        "workers": _field((int, type(None)), None),
        "output_dir": _field(str, "qbdspin_out"),
        "kernel": _KERNEL_SECTION,
        "lattice": _LATTICE_SECTION,
        "table": _TABLE_SECTION,
        "mc": _MC_SECTION,
        "sweep": {
            "t_grid": _field(list, None, required=True),
        },
    },
}


def _validate_section(raw: dict, schema: dict, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    out = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
    for key, rule in schema.items():
        sub_path = f"{path}{key}."
        if isinstance(rule, dict):
            out[key] = _validate_section(raw.get(key, {}), rule, sub_path)
            continue
        if key in raw:
            val = raw[key]
            allows_bool = rule.typ is bool or (isinstance(rule.typ, tuple)
                                               and bool in rule.typ)
            if isinstance(val, bool) and not allows_bool:
                raise ConfigError(f"config key {path + key!r} has wrong type")
            if not isinstance(val, rule.typ):
                raise ConfigError(
                    f"config key {path + key!r} has wrong type "
                    f"({type(val).__name__})")
            out[key] = val
        elif rule.required:
            raise ConfigError(f"missing required config key {path + key!r}")
        else:
            out[key] = rule.default
    return out


def load_config(path: str, experiment: str, overrides: dict) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}")
    cfg = _validate_section(raw, _SCHEMAS[experiment], "")
    if cfg.get("experiment") not in (None, experiment):
        raise ConfigError(
            f"config declares experiment {cfg['experiment']!r} but the "
            f"{experiment!r} subcommand was invoked")
    cfg["experiment"] = experiment
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    if cfg.get("workers") is None:
        cfg["workers"] = int(os.environ.get("QBDSPIN_WORKERS", "1"))
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    _post_validate(cfg, experiment)
    return cfg


def _post_validate(cfg: dict, experiment: str) -> None:
    """Cross-field checks that must fail before any computation starts."""
    if experiment == "tc":
        sizes = cfg["tc"]["sizes"]
        grid = cfg["tc"]["t_grid"]
        if len(sizes) < 2:
            raise ConfigError("tc.sizes needs at least 2 entries")
        if len(grid) < 4:
            raise ConfigError("tc.t_grid needs at least 4 temperatures")
    if experiment == "sweep" and not cfg["sweep"]["t_grid"]:
        raise ConfigError("sweep.t_grid must not be empty")
    if experiment == "dispersion":
        dim = cfg["lattice"]["dim"]
        spinwave.parse_k_path(cfg["dispersion"]["path"], dim,
                              float(cfg["lattice"]["spacing"]), 2)
        for order in cfg["dispersion"]["orders"]:
            if order.lower() not in ("fm", "afm"):
                raise ConfigError(f"unknown dispersion order {order!r}")
    if experiment == "memory":
        mem = cfg["memory"]
        if mem["alpha"] < 0:
            raise ConfigError("memory.alpha must be >= 0")
        if not mem["pulse_sites"]:
            raise ConfigError("memory.pulse_sites must not be empty")
        if mem["steps"] < 100:
            raise ConfigError("memory.steps must be >= 100 for recall analysis")


def provenance_for(cfg: dict) -> dict:
    """Digest of the resolved configuration.  Worker count and output
    directory are execution details that cannot affect results, so they
    stay out of the hash (outputs must be byte-identical across worker
    counts)."""
    physics = {k: v for k, v in cfg.items()
               if k not in ("workers", "output_dir")}
    canon = json.dumps(physics, sort_keys=True, separators=(",", ":"))
    return {"config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "version": __version__}


def _write_json(path, doc: dict) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.floating,)):
            return float(v)
        if isinstance(v, np.ndarray):
            return clean(v.tolist())
        return v
    with open(path, "w") as fh:
        json.dump(clean(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _csv_provenance_lines(prov: dict):
    return [f"# {k}={v}" for k, v in sorted(prov.items())]


def _build_lattice(cfg_lattice: dict, lengths=None):
    lengths = lengths if lengths is not None else cfg_lattice["lengths"]
    return build_lattice(cfg_lattice["dim"], lengths,
                         float(cfg_lattice["spacing"]),
                         cfg_lattice["periodic"])


def _build_table(lattice, cfg: dict):
    tbl = cfg["table"]
    if tbl["type"] == "nn":
        return nn_table(lattice, float(tbl["j_bond"]), tbl["sign"])
    if tbl["type"] == "kernel":
        spec = KernelSpec(mu2=float(cfg["kernel"]["mu2"]),
                          dim=cfg["kernel"]["dim"],
                          g=float(cfg["kernel"]["g"]))
        cutoff = tbl["cutoff"]
        return build_coupling_table(lattice, spec,
                                    None if cutoff is None else float(cutoff),
                                    tbl["sign"])
    raise ConfigError(f"unknown table.type {tbl['type']!r}")


def _chain_params(cfg: dict, T: float, seed: int) -> montecarlo.ChainParams:
    mc = cfg["mc"]
    return montecarlo.ChainParams(T=T, sweeps=mc["sweeps"],
                                  burn_in=mc["burn_in"], thin=mc["thin"],
                                  seed=seed, proposal=mc["proposal"],
                                  cone_angle=mc["cone_angle"])


# --------------------------------------------------------------------------
# subcommands

def cmd_kernel(cfg: dict, out_dir: str) -> int:
    prov = provenance_for(cfg)
    spec_dim = cfg["kernel"]["dim"]
    g = float(cfg["kernel"]["g"])
    scan = cfg["scan"]
    mu2_values = scan["mu2_values"]
    if mu2_values is None:
        mu2_values = [0.0, 0.25, 1.0, 4.0] if spec_dim == 3 else [0.25, 1.0, 4.0]
    r_min = scan["r_min"] if scan["r_min"] is not None else (0.1 if spec_dim == 3 else 0.5)
    r_max = scan["r_max"] if scan["r_max"] is not None else (20.0 if spec_dim == 3 else 10.0)
    if not (0 < r_min < r_max):
        raise ConfigError("scan.r_min/r_max must satisfy 0 < r_min < r_max")
    rs = np.linspace(float(r_min), float(r_max), scan["n_r"])

    lines = _csv_provenance_lines(prov)
    lines.append("r,mu2,closed_form,quadrature,abs_error_bound,rel_deviation")
    max_dev = 0.0
    for mu2 in mu2_values:
        spec = KernelSpec(mu2=float(mu2), dim=spec_dim, g=g)
        for r in rs:
            cf = closed_form(float(r), spec)
            kv = kernel_quadrature(float(r), spec, tol=float(scan["quad_tol"]))
            dev = abs(kv.value - cf) / abs(cf)
            max_dev = max(max_dev, dev)
            lines.append(",".join([repr(float(r)), repr(float(mu2)), repr(cf),
                                   repr(kv.value), repr(kv.abs_error_bound),
                                   repr(dev)]))
    with open(os.path.join(out_dir, "kernel_samples.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    passed = max_dev <= float(scan["tol"])
    _write_json(os.path.join(out_dir, "kernel_report.json"), {
        "provenance": prov,
        "max_rel_deviation": max_dev,
        "tol": float(scan["tol"]),
        "pass": passed,
        "mu2_values": [float(v) for v in mu2_values],
        "dim": spec_dim,
        "r_range": [float(r_min), float(r_max)],
    })
    print(f"kernel scan: max relative deviation {max_dev:.3e} "
          f"({'pass' if passed else 'FAIL'} at tol {scan['tol']:g})")
    return 0 if passed else 2


def cmd_tc(cfg: dict, out_dir: str) -> int:
    prov = provenance_for(cfg)
    chains_dir = os.path.join(out_dir, "chains")
    os.makedirs(chains_dir, exist_ok=True)

    def factory(L):
        lattice = _build_lattice(cfg["lattice"], [L] * cfg["lattice"]["dim"])
        return lattice, _build_table(lattice, cfg)

    def store_load(key):
        L, T = key
        path = os.path.join(chains_dir, f"L{L}_T{T!r}.csv")
        if os.path.exists(path):
            return montecarlo.load_series(path)
        return None

    def store_save(key, series):
        L, T = key
        path = os.path.join(chains_dir, f"L{L}_T{T!r}.csv")
        montecarlo.save_series(series, path, provenance=prov)

    params = _chain_params(cfg, T=1.0, seed=cfg["seed"])
    sizes = cfg["tc"]["sizes"]
    t_grid = cfg["tc"]["t_grid"]
    try:
        est = montecarlo.estimate_Tc(sizes, factory, t_grid, params,
                                     workers=cfg["workers"],
                                     series_store=(store_load, store_save))
    except BracketError as err:
        if err.u4_table is not None:
            _write_u4_csv(out_dir, prov, sizes, t_grid, err.u4_table)
        raise
    _write_u4_csv(out_dir, prov, sizes, t_grid, est.u4)
    _write_json(os.path.join(out_dir, "tc_estimate.json"), {
        "provenance": prov,
        "T_B": est.t_b,
        "uncertainty": est.uncertainty,
        "crossings": {f"{a}-{b}": v for (a, b), v in est.crossings.items()},
        "sizes": list(est.sizes),
        "t_grid": list(est.t_grid),
        "n_boot": est.n_boot,
    })
    print(f"T_B = {est.t_b:.4f} +- {est.uncertainty:.4f}")
    return 0


def _write_u4_csv(out_dir, prov, sizes, t_grid, u4) -> None:
    lines = _csv_provenance_lines(prov)
    lines.append("T,L,U4")
    for k, T in enumerate(t_grid):
        for a, L in enumerate(sizes):
            lines.append(f"{float(T)!r},{int(L)},{float(u4[a][k])!r}")
    with open(os.path.join(out_dir, "binder_u4.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_dispersion(cfg: dict, out_dir: str) -> int:
    prov = provenance_for(cfg)
    disp = cfg["dispersion"]
    lattice = _build_lattice(cfg["lattice"])
    dim = lattice.dim
    k_path, path_t = spinwave.parse_k_path(disp["path"], dim, lattice.spacing,
                                           disp["points_per_segment"])
    direction = disp["smallk_direction"] or [1.0] + [0.0] * (dim - 1)
    if len(direction) != dim:
        raise ConfigError("dispersion.smallk_direction must match lattice dim")

    base = dict(cfg["table"])
    goldstone = {}
    exponents = {}
    for order in [o.lower() for o in disp["orders"]]:
        cfg_order = dict(cfg)
        cfg_order["table"] = dict(base, sign=1 if order == "fm" else -1)
        table = _build_table(lattice, cfg_order)
        fn = spinwave.fm_dispersion if order == "fm" else spinwave.afm_dispersion
        curve = fn(table, k_path, S=float(disp["S"]))
        curve.path_t = path_t
        spinwave.save_dispersion_csv(
            curve, os.path.join(out_dir, f"dispersion_{order}.csv"),
            provenance=prov)
        zero = fn(table, np.zeros((1, dim)), S=float(disp["S"])).omega[0]
        goldstone[order] = float(abs(zero))
        window = spinwave.smallk_curve(table, direction, order,
                                       S=float(disp["S"]),
                                       n=disp["smallk_points"])
        exponents[order] = spinwave.smallk_exponent(window)

    goldstone_ok = all(v <= 1e-10 for v in goldstone.values())
    _write_json(os.path.join(out_dir, "dispersion_report.json"), {
        "provenance": prov,
        "smallk_exponents": exponents,
        "goldstone_omega0": goldstone,
        "pass_goldstone": goldstone_ok,
        "path": disp["path"],
    })
    for order, ex in sorted(exponents.items()):
        print(f"{order} small-k exponent: {ex:.3f} "
              f"(omega(0) = {goldstone[order]:.2e})")
    return 0 if goldstone_ok else 2


def cmd_memory(cfg: dict, out_dir: str) -> int:
    prov = provenance_for(cfg)
    mem = cfg["memory"]
    lattice = _build_lattice(cfg["lattice"])
    table = _build_table(lattice, cfg)
    params = _chain_params(cfg, T=float(mem["T_store"]), seed=cfg["seed"])

    stored, record = dynamics.store_memory(lattice, table,
                                           float(mem["T_store"]), params)
    save_config_json(stored, os.path.join(out_dir, "stored_config.json"))
    e_ref = model.total_energy(stored, table).total

    pulsed = dynamics.recall_pulse(stored, mem["pulse_sites"],
                                   float(mem["tilt_angle"]),
                                   order_direction=record.order_direction)
    save_config_json(pulsed, os.path.join(out_dir, "pulsed_config.json"))

    try:
        traj = dynamics.evolve_damped(pulsed, table, float(mem["alpha"]),
                                      float(mem["dt"]), mem["steps"],
                                      reference_energy=e_ref)
    except StepSizeError as err:
        if err.trajectory is not None:
            dynamics.save_trajectory_csv(
                err.trajectory, os.path.join(out_dir, "trajectory.csv"),
                provenance=prov)
        raise
    dynamics.save_trajectory_csv(traj, os.path.join(out_dir, "trajectory.csv"),
                                 provenance=prov)
    save_config_json(pulsed, os.path.join(out_dir, "final_config.json"))
    report = dynamics.measure_recall(traj, record)
    _write_json(os.path.join(out_dir, "memory_report.json"), {
        "provenance": prov,
        "order_direction": [float(v) for v in record.order_direction],
        "order_magnitude": record.order_magnitude,
        "T_store": record.T_store,
        "decay_time": report.decay_time,
        "direction_fidelity": report.direction_fidelity,
        "no_decay": report.no_decay,
        "alpha": float(mem["alpha"]),
        "initial_excess": float(traj.excess[0]),
    })
    decay = "no decay" if report.no_decay else f"decay_time {report.decay_time:.3f}"
    print(f"stored |m| = {record.order_magnitude:.3f}; {decay}; "
          f"fidelity {report.direction_fidelity:.4f}")
    return 0


def cmd_sweep(cfg: dict, out_dir: str) -> int:
    prov = provenance_for(cfg)
    lattice = _build_lattice(cfg["lattice"])
    table = _build_table(lattice, cfg)
    t_grid = [float(T) for T in cfg["sweep"]["t_grid"]]
    n = lattice.n_sites

    def job(kT):
        k, T = kT
        params = _chain_params(cfg, T=T,
                               seed=montecarlo.derive_seed(cfg["seed"], 0, k))
        series = montecarlo.run_chain(lattice, table, params)
        return k, series

    results = [None] * len(t_grid)
    jobs = list(enumerate(t_grid))
    if cfg["workers"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
            for k, series in pool.map(job, jobs):
                results[k] = series
    else:
        for k, series in map(job, jobs):
            results[k] = series

    lines = _csv_provenance_lines(prov)
    lines.append("T,m_mean,m_err,energy_per_site,chi,C,acceptance")
    for k, T in enumerate(t_grid):
        series = results[k]
        v = series.order_parameter()
        resp = montecarlo.susceptibility_and_heat(series, T, n)
        m_err = _blocked_error(v)
        lines.append(",".join([
            repr(T), repr(float(v.mean())), repr(m_err),
            repr(float(series.energy.mean() / n)),
            repr(resp["chi"]), repr(resp["C"]),
            repr(float(series.meta["acceptance_rate"]))]))
    with open(os.path.join(out_dir, "observables.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"swept {len(t_grid)} temperatures on {n} sites")
    return 0


def _blocked_error(v: np.ndarray, n_blocks: int = 20) -> float:
    """Standard error of the mean from block averages (guards against
    autocorrelation)."""
    if v.shape[0] < 2 * n_blocks:
        return float(v.std(ddof=1) / math.sqrt(v.shape[0]))
    usable = (v.shape[0] // n_blocks) * n_blocks
    blocks = v[:usable].reshape(n_blocks, -1).mean(axis=1)
    return float(blocks.std(ddof=1) / math.sqrt(n_blocks))


# --------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "kernel": cmd_kernel,
    "tc": cmd_tc,
    "dispersion": cmd_dispersion,
    "memory": cmd_memory,
    "sweep": cmd_sweep,
}

_HELP = {
    "kernel": "closed-form vs quadrature kernel comparison scan",
    "tc": "Binder-cumulant crossing estimate of the ordering temperature",
    "dispersion": "magnon dispersion curves and small-k exponents",
    "memory": "store / pulse / damped-recall experiment",
    "sweep": "observables over a temperature grid",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbdspin",
        description="spin-lattice experiments with screened-propagator couplings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=None,
                       help="worker count (fallback: QBDSPIN_WORKERS, then 1)")
        p.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command,
                          {"seed": args.seed, "workers": args.workers,
                           "output_dir": args.out})
        out_dir = cfg["output_dir"]
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir)
    except Exception as err:   # map to the documented exit codes
        code = exit_code_for(err)
        doc = {"error": {"type": type(err).__name__, "message": str(err),
                         "exit_code": code}}
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
