"""Command-line workflows.

Every subcommand reads one JSON config, writes its numeric artifacts and a
run manifest into --out, and is deterministic: rerunning with the same
config and seed reproduces every output byte for byte (manifests carry no
timestamps).  Exit codes: 0 success, 2 configuration problem, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from ._backend import active_backend, have_numba
from .coupling import (PhiParams, PsiConstructionError, build_psi,
                       default_delta_couple, reflection_coupled_pair,
                       write_psi_csv)
from .experiments import (fit_rate, log_spaced_snapshots, run_entropy_decay,
                          run_ergodicity, two_flow_noise_floor)
from .fixed_point import PicardSettings, picard_iterate
from .metrics import (EstimatorError, GaussianRef, kstar_distance,
                      relative_entropy, wasserstein_p)
from .model import (DiffusionField, DriftField, EmpiricalMeasure, InitLaw,
                    InteractionKernel, ScenarioConfig, ValidationError)
from .sde_engine import (EngineError, MeasureMode, load_snapshots_csv,
                         sample_init, save_snapshots_binary,
                         save_snapshots_csv, simulate)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Anything wrong with the config file or its contents."""


# ---------------------------------------------------------------------------
# config parsing


def _load_config(path: str) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = p.read_bytes()
    try:
        cfg = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {version!r}; this build reads "
            f"{SCHEMA_VERSION}")
    return cfg, hashlib.sha256(raw).hexdigest()


def _parse_drift(block: dict) -> DriftField:
    kind = block.get("kind")
    if kind == "linear":
        return DriftField.linear(float(block["K"]))
    if kind == "double_well":
        return DriftField.double_well(float(block["K"]),
                                      float(block["amplitude"]),
                                      float(block["width"]))
    raise ConfigError(f"unknown drift kind {kind!r} (config supports "
                      "'linear' and 'double_well')")


def _parse_kernel(block: Optional[dict], d: int) -> InteractionKernel:
    if block is None or block.get("kind") in (None, "zero"):
        return InteractionKernel.zero(d)
    kind = block["kind"]
    kwargs = dict(
        d=d, c=float(block["c"]), beta_sing=float(block["beta_sing"]),
        k=float(block["k"]))
    if "offsets" in block:
        kwargs["offsets"] = tuple(tuple(float(v) for v in row)
                                  for row in block["offsets"])
    if "eps_cap" in block:
        kwargs["eps_cap"] = float(block["eps_cap"])
    if kind == "radial_unit":
        return InteractionKernel.radial(**kwargs)
    if kind == "componentwise":
        return InteractionKernel.componentwise(**kwargs)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def _parse_diffusion(block: dict, d: int) -> DiffusionField:
    kind = block.get("kind")
    if kind == "constant":
        if "matrix" in block:
            return DiffusionField.constant(
                np.asarray(block["matrix"], dtype=np.float64), d)
        return DiffusionField.constant(float(block["sigma"]), d)
    if kind == "smooth":
        return DiffusionField.smooth(float(block["base"]),
                                     float(block["amplitude"]),
                                     float(block["frequency"]), d)
    raise ConfigError(f"unknown diffusion kind {kind!r}")


def _parse_scenario(cfg: dict, seed_override: Optional[int]):
    try:
        scen = ScenarioConfig.from_dict(cfg["scenario"])
        if seed_override is not None:
            scen = scen.replace(seed=seed_override)
        drift = _parse_drift(cfg["drift"])
        kernel = _parse_kernel(cfg.get("kernel"), scen.d)
        diffusion = _parse_diffusion(cfg["diffusion"], scen.d)
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return scen, drift, kernel, diffusion


def _write_json(path: Path, payload: dict):
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: Path, subcommand: str, config_sha: str, seed: int,
                    outputs: Sequence[str]):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "config_sha256": config_sha,
        "seed": seed,
        "backend": active_backend(),
        "versions": {
            "mflab": __version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": _numba_version(),
        },
        "outputs": sorted(outputs),
    }
    _write_json(out / "manifest.json", manifest)


def _numba_version() -> Optional[str]:
    if not have_numba():
        return None
    import numba
    return numba.__version__


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(cfg, config_sha, out: Path, seed_override):
    scen, drift, kernel, diffusion = _parse_scenario(cfg, seed_override)
    if not scen.snapshot_times:
        scen = scen.replace(
            snapshot_times=log_spaced_snapshots(scen.T_end, scen.dt))
    snaps = simulate(scen, drift, kernel, MeasureMode.mean_field(),
                     diffusion)
    outputs = ["snapshots.csv"]
    save_snapshots_csv(out / "snapshots.csv", snaps)
    if cfg.get("binary_snapshots"):
        save_snapshots_binary(out / "snapshots.bin", snaps)
        outputs.append("snapshots.bin")
    _write_manifest(out, "simulate", config_sha, scen.seed, outputs)
    return 0


def _cmd_couple(cfg, config_sha, out: Path, seed_override):
    scen, drift, kernel, diffusion = _parse_scenario(cfg, seed_override)
    try:
        block = cfg.get("couple", {})
        y_law = InitLaw.from_dict(block["y_init_law"]) \
            if "y_init_law" in block else scen.init_law
        frozen = None
        if not kernel.is_zero:
            if "frozen_law" not in block:
                raise ConfigError(
                    "couple with a nonzero kernel needs couple.frozen_law")
            f_law = InitLaw.from_dict(block["frozen_law"])
            f_n = int(block.get("frozen_n", scen.N))
            f_seed = int(block.get("frozen_seed", scen.seed + 11))
            frozen = sample_init(f_law, f_n, scen.d, f_seed)
        delta = block.get("delta_couple")
        delta = float(delta) if delta is not None \
            else default_delta_couple(diffusion, scen.dt)
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    if not scen.snapshot_times:
        scen = scen.replace(
            snapshot_times=log_spaced_snapshots(scen.T_end, scen.dt))
    traj = reflection_coupled_pair(scen, drift, kernel, frozen,
                                   scen.init_law, y_law, diffusion,
                                   delta_couple=delta)
    with open(out / "coupling.csv", "w", newline="\n") as fh:
        fh.write("time,mean_gap,coupled_fraction\n")
        gaps = traj.mean_distance()
        for i, t in enumerate(traj.times):
            frac = float(np.mean(traj.tau <= t + 1e-12))
            fh.write(f"{float(t)!r},{float(gaps[i])!r},{frac!r}\n")
    _write_manifest(out, "couple", config_sha, scen.seed, ["coupling.csv"])
    return 0


def _cmd_psi(cfg, config_sha, out: Path, seed_override):
    try:
        block = cfg["phi_params"]
        params = PhiParams(c2=float(block["c2"]), c3=float(block["c3"]),
                           K=float(block["K"]), alpha=float(block["alpha"]),
                           beta_ell=float(block["beta_ell"]))
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    kwargs = {}
    if cfg.get("R_max") is not None:
        kwargs["R_max"] = float(cfg["R_max"])
    if cfg.get("grid_size") is not None:
        kwargs["grid_size"] = int(cfg["grid_size"])
    profile = build_psi(params, **kwargs)
    write_psi_csv(profile, out / "psi_profile.csv")
    _write_json(out / "psi_summary.json", {
        "psi_prime_0": profile.psi_prime_0,
        "r_root": profile.r_root,
        "rate": profile.rate,
        "prefactor": profile.prefactor,
    })
    seed = 0 if seed_override is None else seed_override
    _write_manifest(out, "psi", config_sha, seed,
                    ["psi_profile.csv", "psi_summary.json"])
    return 0


def _measure_from_csv(path: str, time: Optional[float]) -> EmpiricalMeasure:
    snaps = load_snapshots_csv(path)
    if time is None:
        return snaps[-1][1]
    for t, mu in snaps:
        if abs(t - time) <= 1e-9:
            return mu
    raise ConfigError(f"no snapshot at time {time} in {path}")


def _cmd_metrics(cfg, config_sha, out: Path, seed_override):
    try:
        block = cfg["metrics"]
        mu = _measure_from_csv(block["input_a"], block.get("time_a"))
        nu = _measure_from_csv(block["input_b"], block.get("time_b"))
        names = block.get("select", ["w1", "w2", "kstar"])
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    k = float(block.get("k", 2.0))
    bandwidth = block.get("bandwidth")
    bandwidth = float(bandwidth) if bandwidth is not None else None
    result = {}
    for name in names:
        if name == "w1":
            result["w1"] = float(wasserstein_p(mu, nu, 1))
        elif name == "w2":
            result["w2"] = float(wasserstein_p(mu, nu, 2))
        elif name == "kstar":
            est = kstar_distance(mu, nu, k, bandwidth=bandwidth)
            result["kstar_lower"] = est.lower
            result["kstar_upper"] = est.upper
            result["kstar_bandwidth"] = est.bandwidth
            result["kstar_cell_size"] = est.cell_size
        elif name == "entropy":
            result["entropy"] = float(relative_entropy(mu, nu,
                                                       bandwidth=bandwidth))
        else:
            raise ConfigError(f"unknown metric {name!r}")
    _write_json(out / "distances.json", result)
    seed = 0 if seed_override is None else seed_override
    _write_manifest(out, "metrics", config_sha, seed, ["distances.json"])
    return 0


def _cmd_picard(cfg, config_sha, out: Path, seed_override):
    scen, drift, kernel, diffusion = _parse_scenario(cfg, seed_override)
    try:
        block = cfg["picard"]
        burn_in_time = float(block["burn_in_time"])
        averaging_time = float(block["averaging_time"])
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    n_iters = int(block.get("n_iters", 5))
    table = block.get("drift_table_points")
    settings = PicardSettings(
        config=scen, drift=drift, kernel=kernel, diffusion=diffusion,
        burn_in_time=burn_in_time, averaging_time=averaging_time,
        metric_k=block.get("metric_k"),
        bandwidth=block.get("bandwidth"),
        cell_size=block.get("cell_size"),
        pool_snapshots=int(block.get("pool_snapshots", 1)),
        drift_table_points=int(table) if table is not None else None)
    mu0 = sample_init(scen.init_law, scen.N, scen.d, scen.seed)
    trace = picard_iterate(mu0, n_iters, settings)
    trace.to_csv(out / "picard_trace.csv")
    _write_manifest(out, "picard", config_sha, scen.seed,
                    ["picard_trace.csv"])
    return 0


def _cmd_ergodicity(cfg, config_sha, out: Path, seed_override):
    scen, drift, kernel, diffusion = _parse_scenario(cfg, seed_override)
    try:
        block = cfg["ergodicity"]
        init_b = InitLaw.from_dict(block["init_b"])
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    metrics = tuple(block.get("select", ("w1", "w2", "kstar")))
    k = block.get("k")
    bandwidth = block.get("bandwidth")
    series = run_ergodicity(scen, drift, kernel, diffusion, scen.init_law,
                            init_b, metrics=metrics,
                            k=float(k) if k is not None else None,
                            bandwidth=float(bandwidth)
                            if bandwidth is not None else None)
    series.to_csv(out / "series.csv")
    outputs = ["series.csv"]
    fit_block = block.get("fit")
    if fit_block:
        metric = fit_block.get("metric", "w1")
        floor = 0.0
        if fit_block.get("measure_noise_floor", True):
            floor = two_flow_noise_floor(scen, drift, kernel, diffusion,
                                         scen.init_law, metric=metric,
                                         k=float(k) if k is not None
                                         else None)
        theory = fit_block.get("theory_rate")
        report = fit_rate(
            series, metric=metric,
            burn_in=fit_block.get("burn_in"),
            noise_floor=floor,
            theory_rate=float(theory) if theory is not None else None,
            bootstrap_seed=int(fit_block.get("bootstrap_seed", 0)))
        _write_json(out / "report.json", report.to_json_dict())
        outputs.append("report.json")
    _write_manifest(out, "ergodicity", config_sha, scen.seed, outputs)
    return 0


def _cmd_entropy(cfg, config_sha, out: Path, seed_override):
    scen, drift, kernel, diffusion = _parse_scenario(cfg, seed_override)
    block = cfg.get("entropy", {})
    pre = block.get("pre_run_time")
    bandwidth = block.get("bandwidth")
    theory = block.get("theory_rate")
    report = run_entropy_decay(
        scen, drift, kernel, diffusion,
        gaussian_fit=bool(block.get("gaussian_fit", False)),
        pre_run_time=float(pre) if pre is not None else None,
        bandwidth=float(bandwidth) if bandwidth is not None else None,
        burn_in=block.get("burn_in"),
        noise_floor=float(block.get("noise_floor", 0.0)),
        theory_rate=float(theory) if theory is not None else None,
        bootstrap_seed=int(block.get("bootstrap_seed", 0)))
    report.series.to_csv(out / "series.csv")
    _write_json(out / "report.json", report.to_json_dict())
    _write_manifest(out, "entropy", config_sha, scen.seed,
                    ["series.csv", "report.json"])
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "couple": _cmd_couple,
    "psi": _cmd_psi,
    "metrics": _cmd_metrics,
    "picard": _cmd_picard,
    "ergodicity": _cmd_ergodicity,
    "entropy": _cmd_entropy,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mflab",
        description="Interacting-particle simulation lab: SDE flows, "
                    "reflection couplings, distance estimation, and "
                    "fixed-point iteration.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True,
                        help="path to the JSON config")
        sp.add_argument("--out", required=True,
                        help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg, config_sha = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    handler = _COMMANDS[args.subcommand]
    try:
        return handler(cfg, config_sha, out, args.seed)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EngineError, PsiConstructionError, EstimatorError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
