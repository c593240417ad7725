"""Command-line interface: ``tipsdta {separate,simulate,eval,trace}``.

Exit codes: 0 success, 1 non-monotone trace (``trace`` only), 2 missing file
or invalid flag/input, 3 unreadable or unsupported WAV, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateBasisError, InvalidCostError, SingularMatrixError, WavFormatError
from .evaluation import MixingSpec, mix_waveforms, sdr_improvement, write_metrics_csv
from .model import ModelConfig, parse_nu, save_model
from .pipeline import CostTrace, separate
from .signal import WaveformBatch, read_wav, stft, write_wav

logger = logging.getLogger("tipsdta")

EXIT_NONMONOTONE = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4

# flag defaults, applied after the config file so that file < flags
SEPARATE_DEFAULTS = {
    "nu": 1.0,
    "k": 2,
    "iters": 100,
    "vcd_sweeps": 10,
    "blocks": "pairs",
    "window_ms": 256.0,
    "hop_ms": 128.0,
    "seed": 0,
    "reference": 0,
    "bit_depth": 32,
}


class UsageError(Exception):
    """Bad flag, bad config file or missing input; maps to exit code 2."""


def _blocks(value):
    if value in ("pairs", "single"):
        return value
    try:
        size = int(value)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"block scheme must be pairs, single or a positive integer, got {value!r}")
    if size < 1:
        raise argparse.ArgumentTypeError(f"block size must be positive, got {size}")
    return size


def _nu(value):
    try:
        return parse_nu(value)
    except (ContractViolation, ValueError):
        raise argparse.ArgumentTypeError(f"nu must be a positive number or 'inf', got {value!r}")


def _require_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _load_config(path) -> dict:
    _require_file(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})")
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object of flag values")
    data = {key.replace("-", "_"): value for key, value in data.items()}
    unknown = set(data) - set(SEPARATE_DEFAULTS)
    if unknown:
        raise UsageError(f"{path}: unknown keys {', '.join(sorted(unknown))}")
    return data


def _merged_settings(args) -> dict:
    settings = dict(SEPARATE_DEFAULTS)
    if args.config:
        settings.update(_load_config(args.config))
    for key in SEPARATE_DEFAULTS:
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    try:
        settings["nu"] = _nu(settings["nu"])
        settings["blocks"] = _blocks(settings["blocks"])
    except argparse.ArgumentTypeError as exc:
        raise UsageError(str(exc))
    if settings["bit_depth"] not in (16, 32):
        raise UsageError(f"bit depth must be 16 or 32, got {settings['bit_depth']}")
    return settings


def cmd_separate(args) -> int:
    _require_file(args.mixture)
    settings = _merged_settings(args)
    try:
        config = ModelConfig(
            nu=settings["nu"],
            n_basis=settings["k"],
            partition=settings["blocks"],
            outer_iterations=settings["iters"],
            vcd_sweeps=settings["vcd_sweeps"],
            seed=settings["seed"],
        )
    except (ContractViolation, TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    mixture = read_wav(args.mixture)
    if mixture.n_channels < 2:
        raise UsageError(f"{args.mixture}: need at least 2 channels, got {mixture.n_channels}")
    X = stft(mixture, settings["window_ms"], settings["hop_ms"])
    logger.info("separating %s: %d bins x %d frames x %d channels", args.mixture, *X.data.shape)

    result = separate(X, config, reference=settings["reference"])

    os.makedirs(args.output, exist_ok=True)
    for n, samples in enumerate(result.waveforms.samples):
        path = os.path.join(args.output, f"source_{n + 1}.wav")
        write_wav(path, WaveformBatch(samples, mixture.sample_rate), bit_depth=settings["bit_depth"])
    result.trace.to_csv(os.path.join(args.output, "trace.csv"), timing=args.timing)
    save_model(os.path.join(args.output, "model.npz"), result.model, config)
    print(f"wrote {result.waveforms.n_channels} sources, trace.csv and model.npz to {args.output}")
    return 0


def cmd_simulate(args) -> int:
    for path in args.sources:
        _require_file(path)
    batches = [read_wav(path) for path in args.sources]
    rates = {b.sample_rate for b in batches}
    if len(rates) != 1:
        raise UsageError(f"sources have different sample rates: {sorted(rates)}")
    lengths = {b.length for b in batches}
    if len(lengths) != 1:
        raise UsageError(f"sources have different lengths: {sorted(lengths)}")
    sources = WaveformBatch(np.concatenate([b.samples for b in batches]), rates.pop())
    n = sources.n_channels
    if n < 2:
        raise UsageError("need at least 2 source signals")
    spec = MixingSpec.identity(n) if args.mixing == "identity" else MixingSpec.random(n, seed=args.seed, cond_bound=args.cond_bound)
    mixture = mix_waveforms(sources, spec)
    write_wav(args.output, mixture, bit_depth=32)
    manifest = {
        "mixing": args.mixing,
        "seed": args.seed if args.mixing == "random" else None,
        "matrix": spec.matrices.tolist(),
        "sample_rate": sources.sample_rate,
        "sources": [os.path.abspath(p) for p in args.sources],
        "mixture": os.path.abspath(args.output),
    }
    manifest_path = args.manifest or os.path.splitext(args.output)[0] + ".json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    print(f"wrote {args.output} and {manifest_path}")
    return 0


def _read_channels(paths: Sequence[str]) -> WaveformBatch:
    batches = [read_wav(_require_file(p)) for p in paths]
    return WaveformBatch(np.concatenate([b.samples for b in batches]), batches[0].sample_rate)


def cmd_eval(args) -> int:
    refs = _read_channels(args.references)
    ests = _read_channels(args.estimates)
    mixture = read_wav(_require_file(args.mixture))
    if refs.n_channels != ests.n_channels:
        raise UsageError(f"{refs.n_channels} reference signals but {ests.n_channels} estimates")
    length = min(refs.length, ests.length, mixture.length)
    if length != max(refs.length, ests.length, mixture.length):
        logger.warning("signals differ in length; scoring the first %d samples", length)
    scores = sdr_improvement(refs.samples[:, :length], mixture.samples[args.reference, :length], ests.samples[:, :length])
    write_metrics_csv(args.output, [scores], trials=[args.trial])
    print(f"mean SI-SDR improvement {scores.mean_improvement:.2f} dB -> {args.output}")
    return 0


def cmd_trace(args) -> int:
    trace = CostTrace.from_csv(_require_file(args.trace))
    costs = trace.costs
    if not len(costs):
        print("empty trace")
        return 0
    bad = trace.increases(args.rtol)
    print(f"{len(costs)} records, cost {costs[0]:.10g} -> {costs[-1]:.10g}")
    for t in bad:
        r = trace.records[t - (len(costs) - len(trace.records))]
        print(f"increase at iteration {r.iteration} ({r.phase}): {costs[t - 1]:.10g} -> {costs[t]:.10g}")
    print("monotone" if not bad else f"NOT monotone ({len(bad)} increases above {args.rtol:g} relative)")
    return 0 if not bad else EXIT_NONMONOTONE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tipsdta", description="Student's t IPSDTA blind source separation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("separate", help="separate a multichannel WAV mixture")
    p.add_argument("mixture", help="input WAV with M >= 2 channels")
    p.add_argument("-o", "--output", default=".", help="output directory (default: current)")
    p.add_argument("--config", help="JSON file with default values for the flags below")
    p.add_argument("--nu", type=_nu, help="degrees of freedom, or 'inf' for the Gaussian model (default 1)")
    p.add_argument("--k", type=int, help="bases per source (default 2)")
    p.add_argument("--iters", type=int, help="outer iterations (default 100)")
    p.add_argument("--vcd-sweeps", type=int, help="demixing sweeps per iteration (default 10)")
    p.add_argument("--blocks", type=_blocks, help="frequency blocks: pairs, single or a block size (default pairs)")
    p.add_argument("--window-ms", type=float, help="STFT window in ms (default 256)")
    p.add_argument("--hop-ms", type=float, help="STFT hop in ms (default 128)")
    p.add_argument("--seed", type=int, help="initialization seed (default 0)")
    p.add_argument("--reference", type=int, help="reference channel for rescaling (default 0)")
    p.add_argument("--bit-depth", type=int, help="output WAV encoding: 32 (float) or 16 (default 32)")
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds in trace.csv")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("simulate", help="mix source WAVs into a multichannel mixture")
    p.add_argument("sources", nargs="+", help="one WAV per source (channels are concatenated)")
    p.add_argument("-o", "--output", required=True, help="mixture WAV to write")
    p.add_argument("--manifest", help="manifest path (default: output with .json suffix)")
    p.add_argument("--mixing", choices=("random", "identity"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cond-bound", type=float, default=5.0, help="largest accepted condition number")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="SI-SDR improvement of estimates against references")
    p.add_argument("--references", nargs="+", required=True)
    p.add_argument("--estimates", nargs="+", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--reference", type=int, default=0, help="mixture channel used as the input baseline")
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("-o", "--output", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="summarize a trace.csv and check monotonicity")
    p.add_argument("trace")
    p.add_argument("--rtol", type=float, default=1e-9)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WavFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SingularMatrixError, DegenerateBasisError, InvalidCostError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
