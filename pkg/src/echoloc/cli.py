"""Command-line interface: simulate, campaign, dop-map, range-test.

Exit codes: 0 success, 2 for anything wrong with the inputs (bad flags,
unparseable or invalid files, out-of-domain values), 1 for runtime failures
such as unwritable outputs.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .channel import ChannelConfig, PathSet, apply_channel
from .errors import (ArgumentError, ConfigurationError, DomainError,
                     EcholocError, ParseError, ValidationError)
from .estimation import estimate_doppler, estimate_toa
from .harness import (CampaignSpec, emit_dop_grid, emit_results,
                      load_campaign_spec, run_campaign, run_once)
from .localization import dop_grid
from .scenario import default_scenario, load_scenario
from .signals import (DEFAULT_BITS_PER_BURST, SignalFrame, make_hop_plan,
                      random_bits, samples_per_bit, synthesize_fhss)

_STAGE_CHOICES = {"1": (1,), "12": (1, 2), "123": (1, 2, 3)}


def _load_scenario_arg(path: str | None):
    return load_scenario(path) if path else default_scenario()


def _preflight(path) -> None:
    # Touch the output target so a bad path fails before the compute.
    with open(path, "a", encoding="utf-8"):
        pass


def _cmd_simulate(args) -> int:
    scenario = _load_scenario_arg(args.scenario)
    _preflight(args.out)
    result = run_once(scenario, _STAGE_CHOICES[args.stages],
                      seed=args.seed, workers=args.workers)
    emit_results(result, args.format, args.out)
    summary = result.summary()
    top = max(result.stages)
    mean_3d = summary[top]["mean_3d_m"]
    print(f"wrote {args.out}: {result.n_bursts} bursts, stage-{top} "
          f"mean 3D error {mean_3d:.4g} m")
    return 0


def _cmd_campaign(args) -> int:
    if args.spec:
        spec = load_campaign_spec(args.spec)
    else:
        spec = CampaignSpec(default_scenario())
    spec = replace(spec, out_dir=args.out_dir)
    result = run_campaign(spec, workers=args.workers)
    print(f"wrote {args.out_dir}/summary.csv: "
          f"{len(result.summary_rows)} (snr, stage) rows over "
          f"{spec.n_trials} trials")
    return 0


def _cmd_dop_map(args) -> int:
    scenario = _load_scenario_arg(args.scenario)
    _preflight(args.out)
    grid = dop_grid(scenario.beacons, scenario.room_dims_m,
                    args.resolution_m)
    emit_dop_grid(grid, args.out, args.slice_z_m)
    print(f"wrote {args.out}: mean hdop {grid.mean_hdop():.4f}, "
          f"mean vdop {grid.mean_vdop():.4f}")
    return 0


def _cmd_range_test(args) -> int:
    scenario = _load_scenario_arg(args.scenario)
    c = scenario.sound_speed()
    if not args.distance_m > 0:
        raise ArgumentError("--distance-m must be positive")
    rng = np.random.default_rng(args.seed)
    bits = random_bits(DEFAULT_BITS_PER_BURST, rng)
    plan = make_hop_plan(DEFAULT_BITS_PER_BURST, seed=rng)
    frame = synthesize_fhss(bits, plan)
    paths = PathSet(np.array([args.distance_m / c.value_mps]),
                    np.array([1.0]), np.array([0]))
    config = ChannelConfig(snr_db=args.snr_db, max_reflection_order=0,
                           fading="none", seed=args.seed)
    received = apply_channel(frame, paths, args.velocity_mps, config, c)
    toa = estimate_toa(received, frame, c)
    n_spb = samples_per_bit(sample_rate_hz=frame.sample_rate_hz,
                            bit_duration_s=1e-3)
    segment = received.samples[toa.peak_sample:
                               toa.peak_sample + len(frame.samples)]
    doppler = None
    if segment.size >= n_spb:
        doppler = estimate_doppler(SignalFrame(segment,
                                               frame.sample_rate_hz),
                                   plan, c)
    print(toa)
    print(doppler)
    print(f"true distance {args.distance_m:.4f} m -> estimated "
          f"{toa.distance_m:.4f} m")
    if doppler is not None:
        print(f"true velocity {args.velocity_mps:+.3f} m/s -> estimated "
              f"{doppler.velocity_mps:+.3f} m/s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoloc",
        description="Ultrasonic FHSS indoor-localization simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="run one flight and write per-burst fixes")
    p.add_argument("--scenario", help="scenario JSON file (default: stock "
                                       "5x5x3 room)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario root seed")
    p.add_argument("--stages", choices=sorted(_STAGE_CHOICES),
                   default="123", help="stage set to solve (default 123)")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, default=1,
                   help="worker threads across beacons")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("campaign",
                       help="Monte-Carlo grid over SNR points and trials")
    p.add_argument("--spec", help="campaign spec JSON file (default: "
                                  "default scenario, 6 SNRs x 100 trials)")
    p.add_argument("--out-dir", required=True,
                   help="directory for summary.csv, trials.csv, meta.json")
    p.add_argument("--workers", type=int, default=1,
                   help="worker threads across trials")
    p.set_defaults(func=_cmd_campaign)

    p = sub.add_parser("dop-map",
                       help="dilution-of-precision lattice of the room")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--resolution-m", type=float, default=0.25,
                   help="cell edge length (default 0.25 m)")
    p.add_argument("--slice-z-m", type=float, default=None,
                   help="keep only the z-layer nearest this height")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=_cmd_dop_map)

    p = sub.add_parser("range-test",
                       help="single transmitter/receiver ranging demo")
    p.add_argument("--scenario", help="scenario JSON file (for temperature "
                                      "and sound speed)")
    p.add_argument("--distance-m", type=float, default=2.0)
    p.add_argument("--velocity-mps", type=float, default=0.0)
    p.add_argument("--snr-db", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_range_test)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ParseError, ValidationError, ConfigurationError, ArgumentError,
            DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EcholocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
