"""Command-line entry point: ``photonbeat <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, correlator, fock_oracle, montecarlo
from .core_model import (
    BeatModel,
    Polarization,
    Wavepacket,
    cross_correlation,
    joint_density,
    khz_to_angular,
    mhz_to_angular,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

# config key -> (ExperimentConfig field, converter)
CONFIG_KEYS = {
    "period_ns": ("period", float),
    "tau_p_ns": ("tau_p", float),
    "delta_mhz": ("delta", lambda s: mhz_to_angular(float(s))),
    "delta_omega_khz": ("delta_omega", lambda s: khz_to_angular(float(s))),
    "v0": ("v0", float),
    "bin_width_ns": ("bin_width", float),
    "dark_rate_per_us": ("dark_rate", lambda s: float(s) * 1e-3),
    "gate_open_ns": ("gate_open", float),
    "seed": ("seed", int),
    "mode": ("mode", montecarlo.Mode),
    "eta_a": ("eta_a", float),
    "eta_b": ("eta_b", float),
    "emission_prob": ("emission_prob", float),
    "photons_per_train": ("photons_per_train", int),
    "target_side_peak": ("target_side_peak", int),
    "max_trains": ("max_trains", int),
}


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_config(text: str) -> montecarlo.ExperimentConfig:
    """Parse ``key=value`` lines into an :class:`ExperimentConfig`.

    Blank lines and ``#`` comments are skipped; unknown keys are rejected.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"config line {lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        name, convert = CONFIG_KEYS[key]
        try:
            values[name] = convert(value)
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
    try:
        return montecarlo.ExperimentConfig(**values)
    except montecarlo.ConfigError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def load_config(path) -> montecarlo.ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    return parse_config(text)


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    try:
        return open(path, "w")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def _read_records(path) -> tuple[montecarlo.RecordBatch, dict]:
    try:
        with open(path) as fh:
            return montecarlo.read_records(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _read_histogram(path) -> correlator.CorrelationHistogram:
    try:
        with open(path) as fh:
            return correlator.read_histogram(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _is_record_file(path) -> bool:
    try:
        with open(path) as fh:
            return fh.readline().rstrip("\n") == montecarlo.RECORDS_HEADER
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    try:
        result = montecarlo.run(config, workers=args.workers)
    except montecarlo.TargetNotReached as exc:
        raise NumericalFailure(str(exc)) from None
    meta = {"n_trains": result.n_trains, "period_ns": repr(config.period), "side_peak_count": result.side_peak_count}
    out = _open_out(args.out)
    try:
        montecarlo.write_records(out, result.records, meta)
    finally:
        if out is not sys.stdout:
            out.close()
    _, _, tau = correlator.cross_pairs(result.records, config.period / 2, inclusive=False)
    print(f"trains: {result.n_trains}")
    print(f"records: {len(result.records)}")
    print(f"side_peak_coincidences: {result.side_peak_count}")
    print(f"sub_period_coincidences: {tau.size}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    records, meta = _read_records(args.input)
    if not records.is_sorted():
        raise UsageError("records are not sorted by timestamp")
    period = float(meta["period_ns"]) if "period_ns" in meta else montecarlo.DEFAULT_PERIOD_NS
    n_trains = int(meta["n_trains"]) if "n_trains" in meta else None
    max_tau = args.max_tau_ns if args.max_tau_ns is not None else 2 * period
    hist = correlator.correlate(records, args.bin_width_ns, max_tau, period=period, n_trains=n_trains)
    if args.config:
        if n_trains is None:
            raise UsageError("record file lacks n_trains; cannot scale the background model")
        config = load_config(args.config)
        background = correlator.background_estimate(config, hist.bin_centers, hist.bin_width, n_trains)
        hist = correlator.subtract_background(hist, background)
    elif args.background_from_data:
        hist = correlator.subtract_background(hist, correlator.background_from_data(hist, period))
    out = _open_out(args.out)
    try:
        correlator.write_histogram(out, hist)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_fit(args) -> int:
    if not args.reference:
        raise UsageError("fit needs --reference")
    par = _read_histogram(args.input)
    ref = _read_histogram(args.reference)
    try:
        result = analysis.fit_beat(par, ref)
    except (analysis.InsufficientDataError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _open_out(args.out)
    try:
        analysis.write_fit(out, result)
        use = par.region(analysis.FIT_HALF_RANGE_NS)
        out.write("\n")
        analysis.write_model_curve(out, result.params, par.bin_centers[use], par.bin_width, par.corrected[use])
    finally:
        if out is not sys.stdout:
            out.close()
    if not result.converged:
        print("fit did not converge; best point reported", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _load_scan_source(path):
    if _is_record_file(path):
        records, meta = _read_records(path)
        return records, meta
    return _read_histogram(path), {}


def cmd_filter_scan(args) -> int:
    if not args.reference:
        raise UsageError("filter-scan needs --reference")
    windows = args.window_ns or [48.0, 200.0, 460.0, 920.0]
    par, meta = _load_scan_source(args.input)
    ref, _ = _load_scan_source(args.reference)
    period = float(meta.get("period_ns", montecarlo.DEFAULT_PERIOD_NS))
    max_tau = args.max_tau_ns if args.max_tau_ns is not None else period / 2
    try:
        rows = analysis.filter_scan(par, ref, sorted(windows), max_tau=max_tau, period=period)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _open_out(args.out)
    try:
        out.write("window_ns\tvisibility\tvisibility_err\tacceptance\tn_parallel\tn_reference\tflag\n")
        for r in rows:
            flag = "empty" if r.empty else "ok"
            out.write(f"{r.window!r}\t{r.visibility!r}\t{r.visibility_err!r}\t{r.acceptance!r}\t{r.n_parallel!r}\t{r.n_reference!r}\t{flag}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_analytic(args) -> int:
    config = load_config(args.config) if args.config else montecarlo.ExperimentConfig()
    model = BeatModel(1.0, config.tau_p, config.delta, config.delta_omega, config.v0)
    step = args.bin_width_ns or config.bin_width
    max_tau = args.max_tau_ns if args.max_tau_ns is not None else 2 * 640.0
    tau = correlator.bin_centers_for(step, max_tau)
    ref = cross_correlation(model, Polarization.PERPENDICULAR, tau)
    par = cross_correlation(model, Polarization.PARALLEL, tau)
    out = _open_out(args.out)
    try:
        out.write("tau_ns\treference\tparallel_model\n")
        for t, r, p in zip(tau.tolist(), ref.tolist(), par.tolist()):
            out.write(f"{t!r}\t{r!r}\t{p!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def oracle_deviation(n_bins: int = 32, tau_p: float = 450.0, delta: float = mhz_to_angular(3.0)) -> float:
    """Largest |oracle - closed form| probability over identical and detuned pairs, both polarizations."""
    span = (-5.0 * tau_p, 5.0 * tau_p)
    worst = 0.0
    for det_b in (0.0, delta):
        wpA = Wavepacket(0.0, tau_p, 0.0)
        wpB = Wavepacket(0.0, tau_p, det_b)
        state = fock_oracle.build_state(wpA, wpB, n_bins, span)
        for pol in Polarization:
            exact = fock_oracle.detection_distribution(state, distinguishable=pol is Polarization.PERPENDICULAR)
            closed = joint_density(wpA, wpB, pol, times=state.times).probabilities()
            for ch, probs in closed.items():
                worst = max(worst, float(np.abs(exact[ch] - probs).max()))
    return worst


def cmd_oracle_check(args) -> int:
    deviation = oracle_deviation(args.n_bins)
    ok = deviation <= 1e-9
    print(f"n_bins: {args.n_bins}")
    print(f"max_deviation: {deviation:.3e}")
    print("result: " + ("pass" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERICAL


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="photonbeat", description="Two-photon quantum-beat simulator and analysis tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate time-tagged detection records")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="build a C/D coincidence histogram")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--bin-width-ns", type=float, default=48.0)
    p.add_argument("--max-tau-ns", type=float)
    p.add_argument("--config", help="subtract the modelled dark-count background for this config")
    p.add_argument("--background-from-data", action="store_true", help="subtract a triangle fitted to off-peak bins")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fit", help="fit the beat model to a parallel histogram")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("filter-scan", help="visibility versus temporal-filter window")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--window-ns", type=_float_list, help="comma-separated windows")
    p.add_argument("--max-tau-ns", type=float)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_filter_scan)

    p = sub.add_parser("analytic", help="analytic reference and parallel correlation curves")
    p.add_argument("--config")
    p.add_argument("--bin-width-ns", type=float)
    p.add_argument("--max-tau-ns", type=float)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("oracle-check", help="compare closed-form densities against the Fock-space oracle")
    p.add_argument("--n-bins", type=int, default=32)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"photonbeat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"photonbeat {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
