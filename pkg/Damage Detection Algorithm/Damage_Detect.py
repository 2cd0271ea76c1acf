#!/usr/bin/env python3
"""
Damage detection pipeline on ultrasonic A-scan grids.

Subcommands:
    simulate    synthetic plate with an implanted damage patch -> scan set
    preprocess  normalize, subtract free head, flag faulty scans
    calibrate   Nelder-Mead (b, c) per cell -> parameter table + b / c maps
    posterior   MCMC for one cell (chain + KDE grid) or posterior-mean maps
    test        posterior probability of the undamaged region per cell
    render      map CSV -> 8-bit PGM
    bench       forward-model and chain-cache benchmark report

Exit codes: 0 success, 2 invalid input or usage, 1 runtime failure.
"""

import argparse
import os
import sys
import traceback
from dataclasses import replace
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
from preprocess_utils import SmoothingOptions, preprocess_scan_set  # type: ignore
from scanset_io import (RunConfig, read_config, read_map, read_parameter_table,  # type: ignore
                        read_scan_set, write_chain, write_chain_archive, write_map,
                        write_parameter_table, write_pgm, write_scan_set)
from signal_core import (InvalidArgumentError, MaterialParams, PlateModel, ScanSet,  # type: ignore
                         grid_mask, make_time_grid)

from bayes_utils import (McmcOptions, PriorBox, ProposalSchedule, chain_for_scan, posterior_map,
                         posterior_summary)
from calibrate import NelderMeadOptions, ParameterMap, calibrate_grid
from damage_detection import derive_thresholds, test_grid
from feature_utils import EchoWindow, estimate_covariance, reference_subset, select_dominant_bins
from solver_bench import bench_chain_cache, bench_forward, format_report
from synth_oracle import SyntheticPlateSpec, make_pulse, make_synthetic_plate

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def banner(title: str):
    print("=" * 60)
    print(f"  {title}")
    print("=" * 60)


def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext.lower() in ('.csv', '.pgm', '.h5', '.scanset') else path


def _pair(text: str, kind=float) -> Tuple:
    parts = text.replace('x', ',').split(',')
    if len(parts) != 2:
        raise InvalidArgumentError(f"expected two comma-separated values, got '{text}'")
    return tuple(kind(p) for p in parts)


def _rect(text: str) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """'x0:x1,y0:y1' half-open index rectangle."""
    try:
        xs, ys = text.split(',')
        x0, x1 = (int(v) for v in xs.split(':'))
        y0, y1 = (int(v) for v in ys.split(':'))
    except ValueError:
        raise InvalidArgumentError(f"rectangle must look like x0:x1,y0:y1, got '{text}'")
    return (x0, x1), (y0, y1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(args) -> RunConfig:
    """Defaults < --config file < explicit flags."""
    config = read_config(args.config) if getattr(args, 'config', None) else RunConfig()
    overrides = {
        'workers': getattr(args, 'workers', None),
        'root_seed': getattr(args, 'seed', None),
        'dt_us': getattr(args, 'dt', None),
        'n_samples': getattr(args, 'n_samples', None),
        'plate_dz': getattr(args, 'dz', None),
        'noise_sigma': getattr(args, 'noise', None),
        'rejection_level': getattr(args, 'level', None),
        'quantile': getattr(args, 'quantile', None),
        'chain_length': getattr(args, 'chain_length', None),
    }
    if getattr(args, 'shape', None):
        overrides['plate_shape'] = _pair(args.shape, int)
    if getattr(args, 'start', None):
        overrides['start'] = _pair(args.start)
    config = config.with_overrides(**overrides)
    if getattr(args, 'no_patch', False):
        config = replace(config, patch=None)
    return config


def _prior(config: RunConfig) -> PriorBox:
    return PriorBox(*config.box)


def _mcmc(config: RunConfig) -> McmcOptions:
    return McmcOptions(burn_in=config.burn_in, n=config.chain_length,
                       schedule=ProposalSchedule(config.eps_early, config.eps_late, config.switch_step),
                       root_seed=config.root_seed, workers=config.workers)


def _smoothing(config: RunConfig) -> SmoothingOptions:
    return SmoothingOptions(config.smoothing_cutoff_mhz, config.tukey_taper)


def _load_scans(path: str, config: RunConfig) -> ScanSet:
    scans = read_scan_set(path)
    if scans.t_ex is None:
        scans = replace(scans, t_ex=config.t_ex_us)
    print(f"✓ read {len(scans)} scans ({scans.shape[0]}x{scans.shape[1]} grid) from {path}")
    return scans


def _reference_mask(args, scans: ScanSet) -> np.ndarray:
    if getattr(args, 'reference', None):
        xs, ys = _rect(args.reference)
        return grid_mask(scans.shape, xs, ys)
    if getattr(args, 'exclude', None):
        xs, ys = _rect(args.exclude)
        return ~grid_mask(scans.shape, xs, ys)
    print("⚠ no --reference / --exclude given, using the whole grid as undamaged reference")
    nx, ny = scans.shape
    return np.ones((ny, nx), dtype=bool)


def _covariance_reference(args, scans: ScanSet, config: RunConfig) -> ScanSet:
    """Separate undamaged scan set if given, else the reference region of the plate under test."""
    if not getattr(args, 'covariance_reference', None):
        return reference_subset(scans, _reference_mask(args, scans))
    reference = _load_scans(args.covariance_reference, config)
    if reference.grid != scans.grid:
        raise InvalidArgumentError(
            f"covariance reference grid {reference.grid} differs from scan grid {scans.grid}")
    print(f"✓ feature covariance reference: {args.covariance_reference} "
          f"({len(reference.usable())} usable cells)")
    return reference


def _feature_model(args, scans: ScanSet, config: RunConfig):
    window = EchoWindow(*config.echo_window)
    reference = _covariance_reference(args, scans, config)
    bins = select_dominant_bins(reference, window, config.smoothing_cutoff_mhz)
    cov = estimate_covariance(reference, window, bins)
    flag = ' (regularized)' if cov.degenerate else ''
    print(f"✓ feature covariance from {cov.n_locations} reference cells, bins {bins}{flag}")
    return window, bins, cov


def _report_failures(failures):
    if failures:
        print(f"⚠ {len(failures)} cells failed and are left empty: {sorted(failures, key=lambda i: (i[1], i[0]))}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = load_config(args)
    banner("Synthetic plate")
    grid = make_time_grid(config.dt_us, config.n_samples)
    plate = PlateModel(dz=config.plate_dz)
    pulse = make_pulse(config.pulse_center_mhz, config.pulse_cycles, config.pulse_amplitude, grid,
                       config.t_ex_us, config.pulse_start_us)
    spec = SyntheticPlateSpec(shape=config.plate_shape, base=config.base, patch=config.patch,
                              delta_b=config.delta_b, delta_c=config.delta_c, noise_sigma=config.noise_sigma,
                              seed=config.synthetic_seed, param_jitter=config.param_jitter,
                              resolution=config.resolution_mm, prior=_prior(config))
    scans = make_synthetic_plate(spec, pulse, plate, grid, workers=config.workers)
    write_scan_set(scans, args.output)
    print(f"✓ wrote {len(scans)} scans to {args.output}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = load_config(args)
    banner("Preprocessing")
    scans = _load_scans(args.input, config)
    head = read_scan_set(args.free_head) if args.free_head else None
    cleaned, reports = preprocess_scan_set(scans, scans.t_ex, head, config.echo_jump, config.excitation_jump)
    for index, report in sorted(reports.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if report.faulty:
            print(f"⚠ faulty scan at {index}: jump at sample {report.first_violation_index} "
                  f"(max echo jump {report.max_echo_jump:.3f})")
    write_scan_set(cleaned, args.output)
    print(f"✓ {len(cleaned.faulty)} faulty of {len(cleaned)}; wrote {args.output}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = load_config(args)
    banner("Calibration")
    scans = _load_scans(args.input, config)
    plate = PlateModel(dz=config.plate_dz)
    options = NelderMeadOptions(bounds=config.box)
    pmap = calibrate_grid(scans, None, plate, MaterialParams(*config.start), options, workers=config.workers,
                          smoothing=_smoothing(config))
    stem = _stem(args.output)
    write_parameter_table(pmap, args.output)
    write_map(pmap, f"{stem}_b.csv", name='b')
    write_map(pmap, f"{stem}_c.csv", name='c')
    done = sum(r is not None for r in pmap.results.values())
    not_converged = sum(r is not None and not r.converged for r in pmap.results.values())
    print(f"✓ calibrated {done} cells ({not_converged} not converged)")
    print(f"✓ wrote {args.output}, {stem}_b.csv, {stem}_c.csv")
    return EXIT_OK


def cmd_posterior(args) -> int:
    config = load_config(args)
    banner("Posterior")
    scans = _load_scans(args.input, config)
    plate = PlateModel(dz=config.plate_dz)
    prior = _prior(config)
    window, bins, cov = _feature_model(args, scans, config)
    options = _mcmc(config)
    stem = _stem(args.output)

    if args.location:
        ix, iy = _pair(args.location, int)
        scan = scans.get(ix, iy)
        if scan is None or scan.index in scans.faulty:
            raise InvalidArgumentError(f"no usable scan at location {ix},{iy}")
        chain = chain_for_scan(scan, cov, window, bins, None, plate, prior, options, t_ex=scans.t_ex,
                               smoothing=_smoothing(config))
        summary = posterior_summary(chain, prior)
        b_axis, c_axis, density = summary.kde_grid(args.kde_points, args.kde_points)
        write_chain(chain, f"{stem}_chain.csv")
        frame = pd.DataFrame(density.T, index=pd.Index(c_axis), columns=b_axis)
        frame.to_csv(f"{stem}_kde.csv", index_label='density [1/(1/us * L/us)] c/b')
        for d in chain.diagnostics:
            print(f"⚠ {d}")
        print(f"✓ cell {ix},{iy}: mean b={summary.mean.b:.4f} c={summary.mean.c:.5f}, "
              f"acceptance {chain.acceptance_rate:.2f}")
        print(f"✓ wrote {stem}_chain.csv, {stem}_kde.csv")
        return EXIT_OK

    pmap = posterior_map(scans, cov, window, bins, None, plate, prior, options, smoothing=_smoothing(config))
    _report_failures(pmap.failures)
    for name in ('b', 'c', 'std_b', 'std_c'):
        write_map(pmap, f"{stem}_{name}.csv", name=name)
    unreliable = pmap.unreliable_cells()
    if unreliable:
        print(f"⚠ {len(unreliable)} cells with out-of-range acceptance")
    print(f"✓ wrote posterior-mean maps {stem}_b.csv, {stem}_c.csv (+ std)")
    return EXIT_OK


def cmd_test(args) -> int:
    config = load_config(args)
    banner("Damage test")
    scans = _load_scans(args.input, config)
    plate = PlateModel(dz=config.plate_dz)
    prior = _prior(config)
    reference_map = ParameterMap.from_table(read_parameter_table(args.calibration))
    if reference_map.shape != scans.shape:
        raise InvalidArgumentError(f"calibration grid {reference_map.shape} differs from scan grid {scans.shape}")
    thresholds = derive_thresholds(reference_map, _reference_mask(args, scans), config.quantile, prior)
    print(f"✓ b_crit={thresholds.b_crit:.4f}, c_crit={thresholds.c_crit:.5f} "
          f"({100 * config.quantile:.0f}% quantiles)")
    window, bins, cov = _feature_model(args, scans, config)
    pmap = test_grid(scans, thresholds, prior, cov, None, plate, window, bins, config.rejection_level,
                     _mcmc(config), keep_chains=bool(args.chains), smoothing=_smoothing(config))
    _report_failures(pmap.failures)
    stem = _stem(args.output)
    write_map(pmap, args.output, name='p_null')
    write_map(pmap, f"{stem}_rejected.csv", name='rejected')
    if args.chains:
        write_chain_archive(pmap.chains, args.chains)
        print(f"✓ wrote chains to {args.chains}")
    rejected = int(np.nansum(pmap.values('rejected')))
    print(f"✓ null rejected in {rejected} cells ({100 * pmap.rejection_fraction():.1f}%)")
    print(f"✓ wrote {args.output}, {stem}_rejected.csv")
    return EXIT_OK


def cmd_render(args) -> int:
    layer = read_map(args.input)
    value_range = _pair(args.range) if args.range else None
    write_pgm(layer, args.output, value_range)
    print(f"✓ rendered {layer.name} ({layer.values.shape[1]}x{layer.values.shape[0]}) to {args.output}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args)
    banner("Benchmark")
    grid = make_time_grid(config.dt_us, config.n_samples)
    plate = PlateModel(dz=config.plate_dz)
    report = bench_forward(args.repeats, grid, plate)
    cache = bench_chain_cache(args.steps, grid, plate) if args.steps > 0 else None
    text = format_report(report, cache, args.format)
    if args.output:
        with open(args.output, 'w') as f:
            f.write(text)
        print(f"✓ wrote {args.output}")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="key = value run configuration")
    common.add_argument('--workers', type=int, help="worker threads over grid cells")
    common.add_argument('--seed', type=int, help="root seed of the per-cell chains")
    common.add_argument('--dt', type=float, help="time step [us]")
    common.add_argument('--n-samples', type=int, dest='n_samples', help="samples per record")
    common.add_argument('--dz', type=float, help="plate discretization")

    parser = argparse.ArgumentParser(prog='Damage_Detect.py', description=__doc__.split('\n')[1])
    sub = parser.add_subparsers(dest='cmd', required=True)

    p = sub.add_parser('simulate', parents=[common], help="synthetic plate scan set")
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--shape', help="grid NXxNY")
    p.add_argument('--noise', type=float, help="sample noise sigma")
    p.add_argument('--no-patch', action='store_true', dest='no_patch', help="undamaged plate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('preprocess', parents=[common], help="normalize and flag faulty scans")
    p.add_argument('input')
    p.add_argument('--free-head', dest='free_head', help="free-head scan set to subtract")
    p.add_argument('-o', '--output', required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser('calibrate', parents=[common], help="Nelder-Mead (b, c) maps")
    p.add_argument('input')
    p.add_argument('-o', '--output', required=True, help="parameter table CSV")
    p.add_argument('--start', help="start point b,c")
    p.set_defaults(func=cmd_calibrate)

    for name, func, text in (('posterior', cmd_posterior, "MCMC posterior"),
                             ('test', cmd_test, "Bayesian damage test")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('input')
        p.add_argument('-o', '--output', required=True)
        region = p.add_mutually_exclusive_group()
        region.add_argument('--reference', help="undamaged rectangle x0:x1,y0:y1 (grid indices)")
        region.add_argument('--exclude', help="damaged rectangle x0:x1,y0:y1; the rest is the reference")
        p.add_argument('--chain-length', type=int, dest='chain_length', help="post burn-in samples")
        p.add_argument('--covariance-reference', dest='covariance_reference',
                       help="undamaged scan set for the feature bins and covariance")
        p.set_defaults(func=func)
        if name == 'posterior':
            p.add_argument('--location', help="single cell ix,iy")
            p.add_argument('--kde-points', type=int, default=101, dest='kde_points')
        else:
            p.add_argument('--calibration', required=True, help="parameter table from 'calibrate'")
            p.add_argument('--level', type=float, help="rejection level")
            p.add_argument('--quantile', type=float, help="threshold quantile")
            p.add_argument('--chains', help="HDF5 archive of the per-cell chains")

    p = sub.add_parser('render', help="map CSV to PGM")
    p.add_argument('input')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--range', help="min,max of the gray scale")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('bench', parents=[common], help="benchmark report")
    p.add_argument('--repeats', type=int, default=5)
    p.add_argument('--steps', type=int, default=200, help="chain steps of the cache A/B run (0 = skip)")
    p.add_argument('--format', choices=('markdown', 'csv'), default='markdown')
    p.add_argument('-o', '--output')
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    try:
        return args.func(args)
    except ValueError as e:
        print(f"✗ {e}")
        if DEBUG:
            traceback.print_exc()
        return EXIT_INVALID
    except Exception as e:
        print(f"✗ {type(e).__name__}: {e}")
        if DEBUG:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
