"""Command-line driver: study orchestration with deterministic artifacts.

Configs are flat ``key = value`` files with JSON values, one per line.
Every study writes a manifest.json (config hash plus all derived constants),
a JSON summary and CSV tables under the output directory; wall times go to
a separate timings.json so the comparable outputs are bitwise reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .caches import save_coeffs, save_family, save_noise, save_solution
from .errors import (
    ConfigError,
    FlowInstabilityError,
    IterationDivergedError,
    RgflowError,
    SupercriticalError,
    UnsupportedDepthError,
)
from .grid import Field, TorusGrid, apply_multiplier
from .kernels import KernelFamily, ScaleGrid, length_scale
from .noise import EnsembleSpec, sample_noise
from .renorm import (
    CountertermSchedule,
    c1_fourier_oracle,
    compute_counterterms,
    cumulant_scaling_report,
    empirical_cumulants,
    expected_mass,
    fit_divergence_exponent,
    power_counting,
    scaling_report,
)
from .solver import (
    FlowTrajectory,
    SolverConfig,
    direct_picard,
    dpd_counterterm,
    dpd_solve,
    kappa_study,
    solve_effective,
    solve_for_noise,
)

_DEFAULTS = {
    "d": 1,
    "n": 64,
    "sigma": 0.45,
    "eps": 0.0,
    "lambda": 0.0,
    "kappa": 0.2,
    "kappa_ladder": None,
    "mu_min": 1e-4,
    "scale_count": 48,
    "base_seed": 2026,
    "members": 64,
    "counterterms": "compute",
    "workers": 1,
    "output": "out",
    "slope_tol": 0.15,
    "alpha_prime_shift": 0.05,
}


@dataclass
class RunConfig:
    """Validated study configuration."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kappas(self):
        ladder = self.values.get("kappa_ladder")
        return list(ladder) if ladder else [self.values["kappa"]]


def parse_config_text(text: str) -> dict:
    out = dict(_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        try:
            out[key] = json.loads(val.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad JSON value for {key}: {exc}") from exc
    return out


def load_config(path, overrides=None) -> RunConfig:
    if path is None:
        values = dict(_DEFAULTS)
    else:
        with open(path, "r", encoding="utf-8") as f:
            values = parse_config_text(f.read())
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    cfg = RunConfig(values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    v = cfg.values
    if v["d"] not in (1, 2):
        raise ConfigError(f"d must be 1 or 2, got {v['d']}")
    try:
        TorusGrid(v["d"], v["n"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        pc = power_counting(v["d"], v["sigma"], v["eps"])
    except SupercriticalError:
        raise
    if pc.i_flat > 2:
        raise UnsupportedDepthError(
            f"truncation order i_flat = {pc.i_flat} > 2 is outside the supported window"
        )
    if not 0.0 < v["mu_min"] < 0.5:
        raise ConfigError("mu_min must lie in (0, 1/2)")
    for kappa in cfg.kappas:
        if not 0.0 < kappa <= 1.0:
            raise ConfigError(f"kappa = {kappa} outside (0, 1]")
    if v["members"] < 1 or v["workers"] < 1:
        raise ConfigError("members and workers must be positive")


def semantic_config(values: dict) -> dict:
    """Study configuration without delivery knobs (output path, workers)."""
    return {k: v for k, v in values.items() if k not in ("output", "workers")}


def config_hash(values: dict) -> str:
    canon = json.dumps(semantic_config(values), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_manifest(cfg: RunConfig, family: KernelFamily, pc) -> dict:
    rho_table = {f"{i},{m}": pc.rho(i, m) for (i, m) in pc.stored_targets()}
    return {
        "config": semantic_config(cfg.values),
        "config_hash": config_hash(cfg.values),
        "code_version": __version__,
        "kernel_cache": family.cache_key(),
        "constants": {
            "alpha": pc.alpha,
            "gamma": pc.gamma,
            "i_flat": pc.i_flat,
            "i_sharp": pc.i_sharp,
            "rho": rho_table,
            "c_gdot": family.c_gdot,
            "c_gtilde_lattice": family.c_g,
            "h": family.grid.h,
        },
    }


def fmt(x) -> str:
    return "%.17g" % float(x)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) if isinstance(v, (int, float, np.floating))
                             else str(v) for v in row) + "\n")


def write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def pmap(fn, items, workers: int):
    """Deterministic map: results in item order regardless of worker count."""
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# shared study plumbing


def _setup(cfg: RunConfig):
    v = cfg.values
    grid = TorusGrid(v["d"], v["n"])
    pc = power_counting(v["d"], v["sigma"], v["eps"])
    scale_grid = ScaleGrid.build(v["mu_min"], v["scale_count"])
    family = KernelFamily(grid, v["sigma"], scale_grid)
    os.makedirs(v["output"], exist_ok=True)
    return grid, pc, family


def _counterterms_for(cfg: RunConfig, kappa, family, pc) -> CountertermSchedule:
    source = cfg.values["counterterms"]
    if source == "zero":
        return CountertermSchedule(kappa, (0.0,) * pc.i_sharp,
                                   (0.0,) * pc.i_sharp, "zero", 0)
    if isinstance(source, str) and source.startswith("file:"):
        with open(source[5:], "r", encoding="utf-8") as f:
            payload = json.load(f)
        vals = tuple(payload[f"{kappa:.17g}"])
        return CountertermSchedule(kappa, vals, (0.0,) * len(vals), "file", 0)
    if source != "compute":
        raise ConfigError(f"unknown counterterm source {source!r}")
    ens = EnsembleSpec(cfg.values["base_seed"] + 1, max(8, cfg.values["members"] // 2))
    return compute_counterterms(ens, kappa, family, pc)


def _emit_manifest(cfg, family, pc, outdir, extra=None):
    manifest = build_manifest(cfg, family, pc)
    if extra:
        manifest["constants"].update(extra)
    write_json(os.path.join(outdir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# subcommands


def cmd_flow(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappa = cfg.kappas[0]
    sched = _counterterms_for(cfg, kappa, family, pc)
    report = scaling_report(
        EnsembleSpec(v["base_seed"], v["members"]), kappa, family, pc,
        sched.padded(pc.i_sharp), window=(v["mu_min"], 0.5),
    )
    rows = []
    for target, data in report.rows.items():
        for j, mu in enumerate(data["mu"]):
            rows.append([target[0], target[1], mu, data["length"][j],
                         data["median"][j], data["q25"][j], data["q75"][j]])
    write_csv(os.path.join(outdir, "flow_norms.csv"),
              ["i", "m", "mu", "length", "median", "q25", "q75"], rows)
    xi = sample_noise(grid, EnsembleSpec(v["base_seed"], 1).seeds()[0])
    final = FlowTrajectory.run(xi.mollified(kappa, family), family, pc,
                               sched.padded(pc.i_sharp)).final
    save_coeffs(os.path.join(outdir, "coeffs_stop.rgfc"), final)
    save_noise(os.path.join(outdir, "noise0.rgfn"), xi.seed, xi.values)
    save_family(family, os.path.join(outdir, family.cache_key() + ".rgfk"))
    _emit_manifest(cfg, family, pc, outdir,
                   {"counterterms": list(sched.values)})
    write_json(os.path.join(outdir, "flow.json"), {
        "kappa": kappa,
        "counterterms": list(sched.values),
        "entries": [[t[0], t[1]] for t in report.rows],
    })
    print(f"flow: wrote norms for {len(report.rows)} coefficients")
    return 0


def cmd_counterterms(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    rows = []
    payload = {}
    for kappa in cfg.kappas:
        ens = EnsembleSpec(v["base_seed"], v["members"])
        sched = compute_counterterms(ens, kappa, family, pc)
        payload[f"{kappa:.17g}"] = list(sched.values)
        for order, (val, err) in enumerate(zip(sched.values, sched.stderr), 1):
            rows.append([order, kappa, length_scale(kappa, v["sigma"]), val, err,
                         sched.method, sched.samples])
    write_csv(os.path.join(outdir, "counterterms.csv"),
              ["order", "kappa", "length", "value", "stderr", "method", "samples"],
              rows)
    write_json(os.path.join(outdir, "counterterms.json"), payload)
    _emit_manifest(cfg, family, pc, outdir)
    print(f"counterterms: {len(rows)} values across {len(cfg.kappas)} cutoffs")
    return 0


def cmd_verify_scaling(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappa = min(cfg.kappas)
    sched = _counterterms_for(cfg, kappa, family, pc)
    report = scaling_report(
        EnsembleSpec(v["base_seed"], v["members"]), kappa, family, pc,
        sched.padded(pc.i_sharp), slope_tol=v["slope_tol"],
    )
    rows, verdicts = [], {}
    for fit in report.fits:
        verdicts[f"{fit.target[0]},{fit.target[1]}"] = {
            "slope": fit.slope, "rho": fit.exponent,
            "threshold": fit.threshold, "passed": fit.passed,
        }
        print(f"verify-scaling ({fit.target[0]},{fit.target[1]}): "
              f"slope {fit.slope:+.3f} vs rho {fit.exponent:+.3f} "
              f"-> {'PASS' if fit.passed else 'FAIL'}")
    for target, data in report.rows.items():
        for j, mu in enumerate(data["mu"]):
            rows.append([target[0], target[1], mu, data["length"][j],
                         data["median"][j], data["q25"][j], data["q75"][j]])
    write_csv(os.path.join(outdir, "scaling.csv"),
              ["i", "m", "mu", "length", "median", "q25", "q75"], rows)
    write_json(os.path.join(outdir, "scaling.json"),
               {"kappa": kappa, "window": list(report.window), "fits": verdicts})
    _emit_manifest(cfg, family, pc, outdir)
    return 0


def cmd_solve(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappa = cfg.kappas[0]
    sched = _counterterms_for(cfg, kappa, family, pc)
    xi = sample_noise(grid, EnsembleSpec(v["base_seed"], 1).seeds()[0])
    xi_k = xi.mollified(kappa, family)
    sol = solve_for_noise(xi_k, family, pc, sched.padded(pc.i_sharp), v["lambda"])
    linear = Field(grid, apply_multiplier(xi_k.values, family.green.multiplier))
    save_solution(os.path.join(outdir, "solution.rgfs"), sol, family)
    rows = [[j, x] for j, x in enumerate(sol.phi.values.reshape(-1))]
    write_csv(os.path.join(outdir, "solution_sites.csv"), ["site", "phi"], rows)
    write_json(os.path.join(outdir, "solve.json"), {
        "kappa": kappa,
        "lambda": v["lambda"],
        "iterations": sol.iterations,
        "recon_gap": sol.recon_gap,
        "radius": sol.config.radius,
        "lambda_star": sol.config.lambda_star,
        "sup_phi": sol.phi.sup(),
        "sup_linear_gap": (sol.phi - linear).sup(),
    })
    _emit_manifest(cfg, family, pc, outdir,
                   {"lambda_star": sol.config.lambda_star,
                    "radius": sol.config.radius})
    print(f"solve: {sol.iterations} iterations, recon gap {sol.recon_gap:.3e}")
    return 0


def _compare_one(task):
    """Worker for one seed of the cross-solver comparison (picklable)."""
    (seed, d, n, sigma, mu_min, count, kappa, lam, cts, c1, in_dpd) = task
    grid = TorusGrid(d, n)
    pc = power_counting(d, sigma)
    family = KernelFamily(grid, sigma, ScaleGrid.build(mu_min, count))
    xi = sample_noise(grid, seed)
    xi_k = xi.mollified(kappa, family)
    flow_phi = solve_for_noise(xi_k, family, pc, cts, lam).phi
    picard_flow = direct_picard(xi_k, lam, cts, family)
    gap_fp = (flow_phi - picard_flow).sup() / max(picard_flow.sup(), 1e-300)
    if in_dpd:
        picard_dpd = direct_picard(xi_k, lam, (c1,), family)
        dpd_phi = dpd_solve(xi_k, lam, family, c1)
        gap_dpd = (dpd_phi - picard_dpd).sup() / max(picard_dpd.sup(), 1e-300)
    else:
        gap_dpd = float("nan")
    return [seed, gap_fp, gap_dpd]


def cmd_compare(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappa = cfg.kappas[0]
    lam = v["lambda"]
    c1 = dpd_counterterm(family, kappa)
    sched = _counterterms_for(cfg, kappa, family, pc)
    in_dpd_regime = 5.0 * v["d"] / 12.0 < v["sigma"] <= v["d"] / 2.0
    tasks = [
        (seed, v["d"], v["n"], v["sigma"], v["mu_min"], v["scale_count"],
         kappa, lam, sched.padded(pc.i_sharp), c1, in_dpd_regime)
        for seed in EnsembleSpec(v["base_seed"], v["members"]).seeds()
    ]
    rows = pmap(_compare_one, tasks, v["workers"])
    write_csv(os.path.join(outdir, "compare.csv"),
              ["seed", "flow_vs_picard", "dpd_vs_picard"], rows)
    write_json(os.path.join(outdir, "compare.json"), {
        "kappa": kappa, "lambda": lam, "dpd_regime": in_dpd_regime,
        "median_flow_vs_picard": float(np.median([r[1] for r in rows])),
    })
    _emit_manifest(cfg, family, pc, outdir)
    print(f"compare: {len(rows)} seeds")
    return 0


def cmd_kappa_study(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappas = cfg.kappas
    if len(kappas) < 2:
        raise ConfigError("kappa-study needs a kappa_ladder with >= 2 rungs")
    schedules = {}
    for kappa in kappas:
        schedules[kappa] = _counterterms_for(cfg, kappa, family, pc).padded(pc.i_sharp)
    ens = EnsembleSpec(v["base_seed"], v["members"])
    alpha_prime = pc.alpha - v["alpha_prime_shift"]
    rows, rate = kappa_study(ens, kappas, family, pc, schedules, v["lambda"],
                             alpha_prime)
    csv_rows = [[r["kappa_hi"], r["kappa_lo"], r["length_hi"], r["median"]]
                for r in rows]
    write_csv(os.path.join(outdir, "kappa_study.csv"),
              ["kappa_hi", "kappa_lo", "length_hi", "median_diff"], csv_rows)
    write_json(os.path.join(outdir, "kappa_study.json"), {
        "ladder": kappas, "alpha_prime": alpha_prime, "fitted_rate": rate,
        "medians": [r["median"] for r in rows],
    })
    _emit_manifest(cfg, family, pc, outdir)
    print(f"kappa-study: fitted decay rate {rate:+.3f}")
    return 0


def cmd_cumulants(cfg: RunConfig) -> int:
    grid, pc, family = _setup(cfg)
    v = cfg.values
    outdir = v["output"]
    kappa = min(cfg.kappas)
    sched = _counterterms_for(cfg, kappa, family, pc)
    pairs = [(( 0, 0), (0, 0))]
    if pc.i_flat >= 1:
        pairs.append(((1, 0), (1, 0)))
    report = cumulant_scaling_report(
        EnsembleSpec(v["base_seed"], v["members"]), kappa, family, pc,
        sched.padded(pc.i_sharp), pairs,
    )
    rows = []
    verdicts = {}
    for fit in report.fits:
        label = "+".join(f"({i},{m})" for i, m in fit.target)
        verdicts[label] = {"slope": fit.slope, "bound": fit.exponent,
                           "threshold": fit.threshold, "passed": fit.passed}
        data = report.rows[fit.target]
        for j, mu in enumerate(data["mu"]):
            rows.append([label, mu, data["length"][j], data["median"][j]])
        print(f"cumulants {label}: slope {fit.slope:+.3f} vs bound "
              f"{fit.exponent:+.3f} -> {'PASS' if fit.passed else 'FAIL'}")
    write_csv(os.path.join(outdir, "cumulants.csv"),
              ["pair", "mu", "length", "norm"], rows)
    write_json(os.path.join(outdir, "cumulants.json"),
               {"kappa": kappa, "fits": verdicts})
    _emit_manifest(cfg, family, pc, outdir)
    return 0


_COMMANDS = {
    "flow": cmd_flow,
    "counterterms": cmd_counterterms,
    "verify-scaling": cmd_verify_scaling,
    "solve": cmd_solve,
    "compare": cmd_compare,
    "kappa-study": cmd_kappa_study,
    "cumulants": cmd_cumulants,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rgflow",
        description="Lattice studies of a renormalization-group flow solver",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("config", nargs="?", default=None,
                        help="flat key = value config file")
    parser.add_argument("--output", default=None, help="output directory")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--cache-dir", default=None,
                        help="directory for kernel caches")
    args = parser.parse_args(argv)
    t0 = time.time()
    try:
        cfg = load_config(args.config, {"output": args.output,
                                        "workers": args.workers})
        status = _COMMANDS[args.command](cfg)
    except (ConfigError, SupercriticalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FlowInstabilityError, IterationDivergedError) as exc:
        print(f"numerical instability: {exc}", file=sys.stderr)
        return 3
    except UnsupportedDepthError as exc:
        print(f"unsupported depth: {exc}", file=sys.stderr)
        return 4
    timings = {"wall_seconds": time.time() - t0, "command": args.command}
    try:
        write_json(os.path.join(cfg.values["output"], "timings.json"), timings)
    except OSError:
        pass
    return status


if __name__ == "__main__":
    sys.exit(main())
