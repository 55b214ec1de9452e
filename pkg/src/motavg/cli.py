"""Command-line front end: wires configuration files to the simulation
modules and writes columnar CSV artifacts.

Every run emits its CSVs plus one ``<command>.manifest.json`` sibling
recording the command, config digest, seed, tool version, wall-clock
duration and output list; re-running with the same config and seed
reproduces the CSVs byte for byte at any thread count.  Exit codes
partition failures by class: 2 for configuration problems, 3 for
data/artifact problems, 4 for numeric failures.

Column conventions: ``*_s`` columns are seconds, ``*_hz`` and
``detuning_opt`` ordinary hertz (cycles per second), everything else
dimensionless.  Outputs are plain columnar data for any plotting tool;
nothing here depends on a plotting library.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, correlations, motion, readout, repeater, spectrum
from . import write as write_stage
from .config import ConfigError, ConfigFile, build_all, parse_config
from .errors import DataError, MissingArtifactError, NumericError
from .model import c_delta_k

__all__ = ["main", "PRESETS"]

PRESET_DIR = Path(__file__).parent / "presets"

#: Named parameter presets shipped as data files, so every number used
#: to regenerate a standard plot is auditable in one place.
PRESETS = {
    "cs-cell": "cs_cell.cfg",
    "fig2": "fig2.cfg",
    "fig3a": "fig3a.cfg",
    "fig3b": "fig3b.cfg",
    "fig4": "fig4.cfg",
    "repeater-80km": "repeater_80km.cfg",
    "budget-cs": "budget_cs.cfg",
}

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TWO_PI = 2.0 * math.pi

FIT_CSV_HEADER = "gamma_rad_per_s,gamma_hz,alpha,reduced_chisq,n_samples"
DEPTH_CSV_HEADER = ("d,faraday_angle_deg,n_atoms_effective,n_classical,"
                    "filter_constant,c_delta_k")
REPORT_CSV_HEADER = ("p_e,kappa2_hz,tau_read_s,finesse,eta_write,eta_read,"
                     "p_success,p_swap_product,p_postselect,fidelity,rate_hz")


# ---------------------------------------------------------------------------
# small helpers


def _fmt(value: float) -> str:
    """Fixed decimal formatting shared by all CSV writers."""
    return f"{value:.17g}"


def _write_rows(path: Path, header: str, rows) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _float_list(cfg: ConfigFile, section: str, key: str,
                default: tuple[float, ...] | None = None,
                to_angular: bool = False) -> tuple[float, ...]:
    """Comma-separated float list; ``to_angular`` applies the same 2*pi
    convention as scalar ``*_hz`` keys."""
    if not cfg.has(section, key):
        if default is not None:
            return default
    raw = cfg.get_str(section, key)
    try:
        values = tuple(float(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"key '{key}' expects comma-separated numbers, "
                          f"got {raw!r}", cfg.path,
                          cfg.sections[section][key].line) from None
    if not values:
        raise ConfigError(f"key '{key}' is empty", cfg.path,
                          cfg.sections[section][key].line)
    if to_angular and not cfg.angular:
        values = tuple(TWO_PI * v for v in values)
    return values


def _resolve_config(args) -> ConfigFile:
    if args.config and args.figure:
        raise ConfigError("give either --config or --figure, not both")
    if args.figure:
        try:
            name = PRESETS[args.figure]
        except KeyError:
            raise ConfigError(
                f"unknown preset {args.figure!r}; available: "
                + ", ".join(sorted(PRESETS))) from None
        return parse_config(PRESET_DIR / name)
    if args.config:
        return parse_config(args.config)
    raise ConfigError("a configuration is required: --config PATH or "
                      "--figure NAME")


def _resolve_out(args) -> Path:
    out = args.out or os.environ.get("MOTAVG_OUT") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    else:
        raw = os.environ.get("MOTAVG_THREADS")
        try:
            value = int(raw) if raw else 1
        except ValueError:
            raise ConfigError(
                f"MOTAVG_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("thread count must be >= 1")
    return value


def _resolve_seed(args, cfg: ConfigFile) -> int:
    if args.seed is not None:
        return args.seed
    if "simulation" in cfg.sections:
        return cfg.get_int("simulation", "seed", 2024)
    return 2024


def _wall_model(cfg: ConfigFile) -> motion.WallModel:
    name = cfg.get_str("simulation", "wall", "thermalizing").lower()
    try:
        return motion.WallModel(name)
    except ValueError:
        raise ConfigError(
            f"unknown wall model {name!r}; use one of "
            + ", ".join(m.value for m in motion.WallModel),
            cfg.path, cfg.section_lines.get("simulation")) from None


def _trajectories(cfg: ConfigFile, cell, seed: int, threads: int):
    """Load the configured trajectory archive or simulate a fresh ensemble."""
    if cfg.has("simulation", "trajectories_file"):
        path = Path(cfg.get_str("simulation", "trajectories_file"))
        if not path.is_absolute() and cfg.path not in ("<config>",):
            path = Path(cfg.path).parent / path
        if not path.exists():
            raise MissingArtifactError(
                f"trajectory archive {path} not found; create it with "
                "'motavg correlations --dump-trajectories'")
        with open(path, "rb") as fh:
            return motion.load_trajectories(fh)
    duration = cfg.get_float("simulation", "duration_s")
    dt = cfg.get_float("simulation", "dt_s")
    return motion.generate_ensemble(cell.n_atoms, duration, dt, cell,
                                    _wall_model(cfg), seed, threads=threads)


def _write_manifest(out: Path, command: str, cfg: ConfigFile, seed: int,
                    threads: int, started: float, outputs: list[Path],
                    warnings: list[str]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.path,
        "config_digest": cfg.digest(),
        "seed": seed,
        "threads": threads,
        "duration_s": round(time.time() - started, 3),
        "outputs": [p.name for p in outputs],
        "warnings": warnings,
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_correlations(args, cfg: ConfigFile, out: Path, seed: int,
                     threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    trajs = _trajectories(cfg, cell, seed, threads)
    s_max = cfg.get_float("correlations", "s_max_s") \
        if cfg.has("correlations", "s_max_s") else None
    series = correlations.estimate_correlation(
        trajs, optics, species, s_max=s_max,
        lag_step=cfg.get_int("correlations", "lag_step",
                             correlations.DEFAULT_LAG_STEP),
        threads=threads)
    outputs = []
    series_path = out / "correlation_series.csv"
    with open(series_path, "w", encoding="ascii", newline="\n") as fh:
        correlations.series_to_csv(series, fh)
    outputs.append(series_path)

    try:
        rate, alpha, rchisq = correlations.fit_exponential(series)
    except NumericError as exc:
        warnings.append(f"decay fit failed: {exc}")
        rate = alpha = rchisq = float("nan")
    fit_path = out / "correlation_fit.csv"
    _write_rows(fit_path, FIT_CSV_HEADER,
                [(rate, rate / TWO_PI, alpha, rchisq, series.n_samples)])
    outputs.append(fit_path)

    if args.dump_trajectories:
        dump_path = out / "trajectories.bin"
        with open(dump_path, "wb") as fh:
            motion.dump_trajectories(trajs, fh)
        outputs.append(dump_path)
    return outputs


def _correlation_series_for(cfg: ConfigFile, optics, species, cell,
                            seed: int, threads: int):
    """Series for downstream sweeps: load the configured artifact or
    regenerate from a fresh simulation."""
    if cfg.has("sweep", "series_file"):
        path = Path(cfg.get_str("sweep", "series_file"))
        if not path.is_absolute() and cfg.path not in ("<config>",):
            path = Path(cfg.path).parent / path
        if not path.exists():
            raise MissingArtifactError(
                f"correlation series {path} not found; generate it with "
                "'motavg correlations'")
        with open(path, "r", encoding="ascii") as fh:
            series = correlations.series_from_csv(fh)
        series.waist_w = optics.waist_w
        series.v_thermal = cell.v_thermal
        return series
    trajs = _trajectories(cfg, cell, seed, threads)
    return correlations.estimate_correlation(trajs, optics, species,
                                             threads=threads)


def cmd_write_sweep(args, cfg: ConfigFile, out: Path, seed: int,
                    threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    series = _correlation_series_for(cfg, optics, species, cell, seed, threads)
    kappa2_values = _float_list(cfg, "sweep", "kappa2_hz_values",
                                to_angular=True)
    rows = write_stage.sweep_kappa2(
        optics, cell, species, series, np.asarray(kappa2_values),
        t_int_factor=cfg.get_float("sweep", "t_int_factor", 10.0))
    path = out / "write_sweep.csv"
    _write_rows(path, write_stage.WRITE_SWEEP_HEADER,
                [(r["kappa2_hz"], r["eta_write_closed"],
                  r["eta_write_semianalytic"], r["n_pass"]) for r in rows])
    return [path]


def cmd_psd(args, cfg: ConfigFile, out: Path, seed: int,
            threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    trajs = _trajectories(cfg, cell, seed, threads)
    series = correlations.estimate_correlation(trajs, optics, species,
                                               threads=threads)
    # get_float returns rad/s for *_hz keys; the spectrum frequency axis
    # runs in ordinary hertz, so convert back.
    psd = spectrum.psd_from_correlation(
        series,
        t_int=cfg.get_float("psd", "t_int_s"),
        larmor_hz=cfg.get_float("psd", "larmor_hz") / TWO_PI,
        scale=cfg.get_float("psd", "scale", 1.0),
        shot_level=cfg.get_float("psd", "shot_level", 1.0),
        f_min=cfg.get_float("psd", "f_min_hz", 0.0) / TWO_PI,
        f_max=cfg.get_float("psd", "f_max_hz") / TWO_PI
        if cfg.has("psd", "f_max_hz") else None)
    path = out / "psd.csv"
    spectrum.psd_to_csv(psd, path)
    return [path]


def cmd_readout_sweep(args, cfg: ConfigFile, out: Path, seed: int,
                      threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    trajs = _trajectories(cfg, cell, seed, threads)
    fluct = readout.estimate_fluctuations(
        trajs, optics, species, threads=threads,
        aux_levels=readout.CS_READOUT_AUX_LEVELS)
    depth = cfg.get_float("readout", "depth", 168.0)
    kappa2 = cfg.get_float("readout", "kappa2_hz", math.inf)
    fin_lo = cfg.get_float("readout", "finesse_min", 20.0)
    fin_hi = cfg.get_float("readout", "finesse_max", 100.0)
    n_fin = cfg.get_int("readout", "n_finesse", 9)
    rows = []
    warned = False
    for tau in _float_list(cfg, "readout", "tau_values_s"):
        opt = readout.optimize_readout(
            optics, cell, species, fluct, depth=depth, kappa2=kappa2,
            tau_read=tau, finesse_bounds=(fin_lo, fin_hi),
            n_finesse=n_fin, threads=threads)
        if opt.branch_warning and not warned:
            warnings.append("retrieval-branch continuity check tripped "
                            "during the finesse search")
            warned = True
        rows.append((tau, opt.finesse, opt.cavity_detuning / TWO_PI,
                     opt.eta_read))
    path = out / "readout_sweep.csv"
    _write_rows(path, readout.READOUT_SWEEP_HEADER, rows)
    return [path]


def cmd_p1_sweep(args, cfg: ConfigFile, out: Path, seed: int,
                 threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    trajs = _trajectories(cfg, cell, seed, threads)
    fluct = readout.estimate_fluctuations(
        trajs, optics, species, threads=threads,
        aux_levels=readout.CS_READOUT_AUX_LEVELS)
    depth = cfg.get_float("readout", "depth", 168.0)
    finesse = cfg.get_float("readout", "finesse", optics.finesse)
    tau_read = cfg.get_float("readout", "tau_read_s")
    epsilon = cfg.get_float("readout", "epsilon", 0.005)
    # Drive calibrated once so the retrieval completes within tau_read;
    # the filter width only reshapes what reaches the detector.
    opt = readout.optimize_readout(
        optics, cell, species, fluct, depth=depth, kappa2=math.inf,
        tau_read=tau_read, finesse_bounds=(finesse, finesse), n_finesse=1,
        threads=threads)
    rows = []
    for kappa2 in _float_list(cfg, "readout", "kappa2_hz_values",
                              to_angular=True):
        res = readout.p1_incoherent(opt.couplings, fluct, kappa2,
                                    tau_read, epsilon)
        rows.append((kappa2 / TWO_PI, res.p1_over_epsilon))
    path = out / "p1_sweep.csv"
    _write_rows(path, readout.P1_SWEEP_HEADER, rows)
    return [path]


def _budget_from_config(cfg: ConfigFile) -> repeater.LinkBudget:
    sec = "repeater"
    if sec not in cfg.sections:
        return repeater.DEFAULT_LINK_BUDGET
    return repeater.LinkBudget(
        distance_km=cfg.get_float(sec, "distance_km", 80.0),
        attenuation_km=cfg.get_float(sec, "attenuation_km", 20.0),
        detector_efficiency=cfg.get_float(sec, "detector_efficiency", 0.95),
        # counts per second, deliberately not a *_hz key: a dark rate is
        # not an angular frequency and must skip the 2*pi load rule
        dark_rate_hz=cfg.get_float(sec, "dark_rate_per_s", 1.0),
        outcoupling_loss=cfg.get_float(sec, "outcoupling_loss", 0.10),
        intracavity_loss=cfg.get_float(sec, "intracavity_loss", 0.02),
        epsilon=cfg.get_float(sec, "epsilon", 0.005),
        n_swap_levels=cfg.get_int(sec, "n_swap_levels", 1),
        phase_mismatch=cfg.get_float(sec, "phase_mismatch_rad", 0.0),
        multiplexing=cfg.get_float(sec, "multiplexing", 1.0),
    )


def _trace_row(tp: repeater.TracePoint) -> tuple:
    return (tp.p_e, tp.kappa2 / TWO_PI, tp.t_int, tp.tau_read, tp.finesse,
            tp.eta_write, tp.eta_read, tp.p_success, tp.p_swap_product,
            tp.p_postselect, tp.fidelity, tp.rate_hz, int(tp.feasible))


def cmd_repeater(args, cfg: ConfigFile, out: Path, seed: int,
                 threads: int, warnings: list[str]) -> list[Path]:
    budget = _budget_from_config(cfg)
    if args.optimize:
        kwargs = {}
        sec = "repeater"
        if cfg.has(sec, "p_e_values"):
            kwargs["p_e_values"] = _float_list(cfg, sec, "p_e_values")
        if cfg.has(sec, "kappa2_hz_values"):
            kwargs["kappa2_values"] = _float_list(cfg, sec,
                                                  "kappa2_hz_values",
                                                  to_angular=True)
        if cfg.has(sec, "tau_read_s_values"):
            kwargs["tau_read_values"] = _float_list(cfg, sec,
                                                    "tau_read_s_values")
        if cfg.has(sec, "finesse_values"):
            kwargs["finesse_values"] = _float_list(cfg, sec,
                                                   "finesse_values")
        result = repeater.optimize_scenario(
            budget,
            fidelity_floor=cfg.get_float(sec, "fidelity_floor", 0.80),
            refine_passes=cfg.get_int(sec, "refine_passes", 2),
            threads=threads, **kwargs)
        trace_path = out / "repeater_trace.csv"
        _write_rows(trace_path, repeater.REPEATER_TRACE_HEADER,
                    [_trace_row(tp) for tp in result.trace])
        rep = result.report
        point = result.point
        summary = "\n".join([
            "best operating point (fidelity floor "
            f"{result.fidelity_floor:g}):",
            f"  p_e             = {point.p_e:.6g}",
            f"  kappa2          = {point.kappa2 / TWO_PI:.6g} Hz",
            f"  t_int           = {repeater.DEFAULT_PULSE_FILTER_PRODUCT / point.kappa2:.6g} s",
            f"  tau_read        = {point.tau_read:.6g} s",
            f"  finesse         = {point.finesse:.6g}",
            f"  eta_write       = {rep.scenario.eta_write:.6g}",
            f"  eta_read        = {rep.scenario.eta_read:.6g}",
            f"  P_success       = {rep.p_success:.6g}",
            f"  P_swap          = {', '.join(f'{p:.6g}' for p in rep.p_swaps) or '-'}",
            f"  P_postselect    = {rep.p_postselect:.6g}",
            f"  fidelity        = {rep.fidelity:.6g}",
            f"  rate            = {rep.rate_hz:.6g} Hz",
        ]) + "\n"
        summary_path = out / "repeater_summary.txt"
        summary_path.write_text(summary)
        sys.stdout.write(summary)
        return [trace_path, summary_path]

    sec = "scenario"
    point = repeater.OperatingPoint(
        p_e=cfg.get_float(sec, "p_e"),
        kappa2=cfg.get_float(sec, "kappa2_hz"),
        tau_read=cfg.get_float(sec, "tau_read_s"),
        finesse=cfg.get_float(sec, "finesse", 20.0))
    model = repeater.DEFAULT_EFFICIENCIES
    scenario = repeater.compose_scenario(
        budget, p_e=point.p_e, kappa2=point.kappa2, tau_read=point.tau_read,
        eta_write=model.write_efficiency(point.kappa2),
        eta_read=model.read_efficiency(point.tau_read, point.finesse),
        background_per_impurity=model.background_per_impurity(
            point.kappa2, point.tau_read))
    rep = repeater.evaluate_scenario(scenario,
                                     multiplexing=budget.multiplexing)
    swap_product = math.prod(rep.p_swaps) if rep.p_swaps else 1.0
    path = out / "repeater_report.csv"
    _write_rows(path, REPORT_CSV_HEADER,
                [(point.p_e, point.kappa2 / TWO_PI, point.tau_read,
                  point.finesse, scenario.eta_write, scenario.eta_read,
                  rep.p_success, swap_product, rep.p_postselect,
                  rep.fidelity, rep.rate_hz)])
    sys.stdout.write(f"fidelity = {rep.fidelity:.6g}, "
                     f"rate = {rep.rate_hz:.6g} Hz\n")
    return [path]


def cmd_optical_depth(args, cfg: ConfigFile, out: Path, seed: int,
                      threads: int, warnings: list[str]) -> list[Path]:
    cell, optics, species = build_all(cfg)
    wavelength = TWO_PI / optics.k_c
    kwargs = {}
    if cfg.has("depth", "faraday_angle_deg"):
        kwargs["faraday_angle"] = math.radians(
            cfg.get_float("depth", "faraday_angle_deg"))
        kwargs["probe_detuning"] = cfg.get_float("depth",
                                                 "probe_detuning_hz")
    n_real = cfg.get_float("depth", "n_real_atoms", float("nan"))
    result = write_stage.optical_depth(
        cell, species, wavelength,
        n_real_atoms=None if math.isnan(n_real) else n_real, **kwargs)
    budget_finesse = cfg.get_float("depth", "budget_finesse",
                                   optics.finesse)
    budget = write_stage.classical_photon_budget(optics, cell, species,
                                                result.d, budget_finesse)
    overlap = c_delta_k(optics.delta_k, cell.half_length_Lz)
    path = out / "optical_depth.csv"
    _write_rows(path, DEPTH_CSV_HEADER,
                [(result.d, math.degrees(result.faraday_angle),
                  result.n_atoms_effective, budget.n_classical,
                  budget.filter_constant, overlap)])
    sys.stdout.write(f"d = {result.d:.6g}, classical photons to filter = "
                     f"{budget.n_classical:.6g}\n")
    return [path]


# ---------------------------------------------------------------------------
# argument parsing and dispatch


_COMMANDS = {
    "correlations": cmd_correlations,
    "write-sweep": cmd_write_sweep,
    "psd": cmd_psd,
    "readout-sweep": cmd_readout_sweep,
    "p1-sweep": cmd_p1_sweep,
    "repeater": cmd_repeater,
    "optical-depth": cmd_optical_depth,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motavg",
        description="Motional-averaging simulations for room-temperature "
                    "atomic-ensemble quantum memories")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="configuration file path")
        cmd.add_argument("--figure", help="named preset shipped with the "
                         "tool (" + ", ".join(sorted(PRESETS)) + ")")
        cmd.add_argument("--seed", type=int,
                         help="master random seed (default: config value "
                         "or 2024)")
        cmd.add_argument("--out", help="output directory (default: "
                         "$MOTAVG_OUT or current directory)")
        cmd.add_argument("--threads", type=int,
                         help="worker cap (default: $MOTAVG_THREADS or 1); "
                         "never changes results")
        if name == "correlations":
            cmd.add_argument("--dump-trajectories", action="store_true",
                             help="also archive the simulated trajectories")
        if name == "repeater":
            cmd.add_argument("--optimize", action="store_true",
                             help="search the configured operating-point "
                             "grid instead of evaluating one scenario")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = _resolve_config(args)
        out = _resolve_out(args)
        threads = _resolve_threads(args)
        seed = _resolve_seed(args, cfg)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must fit in 64 bits")
        warnings: list[str] = []
        outputs = _COMMANDS[args.command](args, cfg, out, seed, threads,
                                          warnings)
        _write_manifest(out, args.command, cfg, seed, threads, started,
                        outputs, warnings)
        for note in warnings:
            sys.stderr.write(f"warning: {note}\n")
        return 0
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except ValueError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NumericError as exc:
        sys.stderr.write(f"numeric error: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
