"""Parameter extraction from coincidence histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
from scipy import optimize

from .core_model import BeatModel, Polarization, cross_correlation
from .correlator import CorrelationHistogram, temporal_filter
from .montecarlo import DEFAULT_PERIOD_NS, RunResult, side_peak_count

FIT_HALF_RANGE_NS = 2 * 640.0
PARAM_NAMES = ("amplitude", "tau_p", "delta", "delta_omega", "v0")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class InsufficientDataError(ValueError):
    pass


def model_counts(model: BeatModel, bin_centers, bin_width: float, pol=Polarization.PARALLEL) -> np.ndarray:
    """Expected counts per bin: the cross-correlation integrated over each bin."""
    centers = np.asarray(bin_centers, dtype=float)
    nodes = centers[:, None] + 0.5 * bin_width * _GL_X[None, :]
    return 0.5 * bin_width * (cross_correlation(model, pol, nodes) * _GL_W).sum(axis=1)


def _poisson_sigma(hist: CorrelationHistogram) -> np.ndarray:
    return np.sqrt(np.maximum(hist.counts, 1).astype(float))


# ---------------------------------------------------------------------------
# reference peak


@dataclass(frozen=True)
class ReferenceFit:
    amplitude: float
    tau_p: float
    amplitude_err: float
    tau_p_err: float
    chi2: float
    dof: int
    converged: bool

    @property
    def peak_half_width(self) -> float:
        """1/e half-width of the fitted coincidence peak."""
        return math.sqrt(2.0) * self.tau_p

    def model(self) -> BeatModel:
        return BeatModel(amplitude=self.amplitude, tau_p=self.tau_p, v0=0.0)


def fit_reference(hist: CorrelationHistogram, half_range: float = FIT_HALF_RANGE_NS) -> ReferenceFit:
    """Weighted least-squares Gaussian fit of the central reference peak.

    Raises:
        InsufficientDataError: if the peak holds fewer than 100 counts.
    """
    use = hist.region(half_range)
    tau = hist.bin_centers[use]
    y = hist.corrected[use]
    sigma = _poisson_sigma(hist)[use]
    total = y.sum()
    if total < 100:
        raise InsufficientDataError(f"reference peak holds only {total:.0f} counts")
    width0 = math.sqrt(max((y * tau**2).sum() / total, hist.bin_width**2))
    # range truncation shrinks the second moment; scale guess by the central value instead
    width0 = max(width0, total * hist.bin_width / (math.sqrt(2 * math.pi) * max(y.max(), 1.0)))
    amp0 = 2.0 * total

    def residuals(p):
        model = BeatModel(amplitude=abs(p[0]), tau_p=abs(p[1]) + 1e-9, v0=0.0)
        return (model_counts(model, tau, hist.bin_width, Polarization.PERPENDICULAR) - y) / sigma

    res = optimize.least_squares(residuals, [amp0, width0], x_scale=[amp0, width0], xtol=1e-12, ftol=1e-12, gtol=1e-12)
    amp, tau_p = abs(res.x[0]), abs(res.x[1])
    chi2 = float((res.fun**2).sum())
    dof = int(use.sum()) - 2
    try:
        cov = np.linalg.inv(res.jac.T @ res.jac)
        errs = np.sqrt(np.abs(np.diag(cov)))
    except np.linalg.LinAlgError:
        errs = np.array([np.inf, np.inf])
    return ReferenceFit(amp, tau_p, float(errs[0]), float(errs[1]), chi2, dof, bool(res.success))


# ---------------------------------------------------------------------------
# beat fit


@dataclass(frozen=True)
class FitResult:
    params: BeatModel
    chi2: float
    dof: int
    param_errors: dict
    converged: bool
    n_evaluations: int = 0
    initial: BeatModel | None = None

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof


def _chi2_factory(hist: CorrelationHistogram, use):
    tau = hist.bin_centers[use]
    y = hist.corrected[use]
    w = 1.0 / np.maximum(hist.counts[use], 1).astype(float)

    def chi2(params) -> float:
        amp, tau_p, delta, d_omega, v0 = params
        model = BeatModel(abs(amp), abs(tau_p) + 1e-9, delta, abs(d_omega), min(max(v0, 0.0), 1.0))
        r = model_counts(model, tau, hist.bin_width) - y
        return float((w * r * r).sum())

    return chi2


def _initial_delta(tau, signal, bin_width) -> float:
    """Angular frequency of the largest discrete-Fourier component of ``signal``."""
    omegas = np.linspace(0.0, math.pi / bin_width, 4096)
    power = np.abs(np.exp(-1j * omegas[:, None] * tau[None, :]) @ signal)
    return float(omegas[np.argmax(power)])


def initial_guess(hist_parallel: CorrelationHistogram, hist_reference: CorrelationHistogram,
                  half_range: float = FIT_HALF_RANGE_NS) -> BeatModel:
    ref = fit_reference(hist_reference, half_range)
    use = hist_parallel.region(half_range)
    tau = hist_parallel.bin_centers[use]
    ref_curve = model_counts(ref.model(), tau, hist_parallel.bin_width, Polarization.PERPENDICULAR)
    deficit = ref_curve - hist_parallel.corrected[use]
    delta0 = _initial_delta(tau, deficit, hist_parallel.bin_width)

    centre = np.abs(tau) <= hist_parallel.bin_width + 1e-9
    v00 = 1.0 - hist_parallel.corrected[use][centre].sum() / ref_curve[centre].sum()
    v00 = min(max(v00, 0.05), 1.0)

    # dip width: scan the 1/e half-width with the other parameters held
    chi2 = _chi2_factory(hist_parallel, use)
    widths = np.geomspace(50.0, 5000.0, 60)
    scores = [chi2((ref.amplitude, ref.tau_p, delta0, 2.0 / w, v00)) for w in widths]
    width0 = widths[int(np.argmin(scores))]
    return BeatModel(ref.amplitude, ref.tau_p, delta0, 2.0 / width0, v00)


def _curvature_errors(chi2, x, scale) -> dict:
    errors = {}
    f0 = chi2(x * scale)
    for i, name in enumerate(PARAM_NAMES):
        h = 1e-3 * max(abs(x[i]), 1.0)
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        curv = (chi2(up * scale) - 2.0 * f0 + chi2(down * scale)) / h**2
        errors[name] = float(scale[i] * math.sqrt(2.0 / curv)) if curv > 0 else float("inf")
    return errors


def fit_beat(hist_parallel: CorrelationHistogram, hist_reference: CorrelationHistogram,
             half_range: float = FIT_HALF_RANGE_NS, start: BeatModel | None = None,
             simplex_step: float = 0.1, fixed: Sequence[str] = ()) -> FitResult:
    """Nelder-Mead fit of the five-parameter beat model to the parallel histogram.

    Minimizes the chi-square with weights ``1/max(counts, 1)`` over the bins
    within ``half_range`` of zero delay. Parameter errors come from the
    chi-square curvature along each coordinate at the optimum and are
    approximate.

    Args:
        start: starting point; by default derived from both histograms.
        fixed: names from ``PARAM_NAMES`` held at their starting values,
            e.g. ``("amplitude", "tau_p")`` to pin the envelope to the
            reference fit. Fixed parameters report zero error.

    Raises:
        InsufficientDataError: if fewer than 5 bins in the fit region hold counts.
    """
    if not hist_parallel.same_grid(hist_reference):
        raise ValueError("parallel and reference histograms must share a bin grid")
    unknown = set(fixed) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameters to fix: {sorted(unknown)}")
    use = hist_parallel.region(half_range)
    if int((hist_parallel.counts[use] > 0).sum()) < 5:
        raise InsufficientDataError("fewer than 5 populated bins in the central region")
    init = start or initial_guess(hist_parallel, hist_reference, half_range)
    chi2 = _chi2_factory(hist_parallel, use)

    scale = np.array([
        max(init.amplitude, 1e-12),
        init.tau_p,
        max(abs(init.delta), 1.0 / init.tau_p),
        max(init.delta_omega, 0.1 / init.tau_p),
        1.0,
    ])
    full0 = np.array(init.as_tuple()) / scale
    free = [i for i, name in enumerate(PARAM_NAMES) if name not in fixed]
    if not free:
        raise ValueError("at least one parameter must be free")
    n_free = len(free)
    bounds = [(0.0, None), (1e-6, None), (None, None), (0.0, None), (0.0, 1.0)]
    bounds = [(lo / s if lo is not None else None, hi / s if hi is not None else None) for (lo, hi), s in zip(bounds, scale)]
    bounds = [bounds[i] for i in free]
    v0_slot = free.index(4) if 4 in free else None

    def expand(x):
        full = full0.copy()
        full[free] = x
        return full

    def objective(x):
        return chi2(expand(x) * scale)

    x0 = full0[free]
    evaluations = 0
    best = None
    # restart from the best vertex until a restart no longer improves the minimum
    for _ in range(5):
        simplex = np.vstack([x0] + [x0 + simplex_step * np.eye(n_free)[i] for i in range(n_free)])
        if v0_slot is not None and simplex[v0_slot + 1, v0_slot] > 1.0:
            simplex[v0_slot + 1, v0_slot] = x0[v0_slot] - simplex_step
        res = optimize.minimize(
            objective, x0, method="Nelder-Mead", bounds=bounds,
            options={"xatol": 1e-6, "fatol": 1e-9, "maxfev": 10_000, "initial_simplex": simplex},
        )
        evaluations += res.nfev
        improved = best is None or res.fun < best.fun - 1e-9
        if best is None or res.fun < best.fun:
            best = res
        if not improved or evaluations >= 10_000:
            break
        x0 = best.x
        simplex_step = 0.02

    x = expand(best.x)
    params = BeatModel(abs(x[0] * scale[0]), abs(x[1] * scale[1]), abs(x[2] * scale[2]),
                       abs(x[3] * scale[3]), float(min(max(x[4], 0.0), 1.0)))
    dof = int(use.sum()) - n_free
    converged = bool(best.success) and evaluations < 10_000
    errors = _curvature_errors(chi2, np.array(params.as_tuple()) / scale, scale)
    for name in fixed:
        errors[name] = 0.0
    return FitResult(params, float(best.fun), dof, errors, converged, evaluations, init)


# ---------------------------------------------------------------------------
# visibility


@dataclass(frozen=True, eq=False)
class VisibilityCurve:
    tau: np.ndarray
    visibility: np.ndarray
    error: np.ndarray
    defined: np.ndarray

    def at(self, tau: float) -> tuple[float, float]:
        i = int(np.argmin(np.abs(self.tau - tau)))
        return float(self.visibility[i]), float(self.error[i])


def visibility_curve(hist_parallel: CorrelationHistogram, hist_reference: CorrelationHistogram,
                     min_reference: int = 5) -> VisibilityCurve:
    """Per-bin ``1 - parallel/reference`` with Poisson errors.

    Bins whose reference holds fewer than ``min_reference`` counts are marked
    undefined and carry NaN.
    """
    if not hist_parallel.same_grid(hist_reference):
        raise ValueError("histograms must share a bin grid")
    par = hist_parallel.corrected
    ref = hist_reference.corrected
    var_p = np.maximum(hist_parallel.counts, 1).astype(float)
    var_r = np.maximum(hist_reference.counts, 1).astype(float)
    defined = hist_reference.counts >= min_reference
    with np.errstate(divide="ignore", invalid="ignore"):
        vis = np.where(defined, 1.0 - par / ref, np.nan)
        err = np.where(defined, np.sqrt(var_p / ref**2 + par**2 * var_r / ref**4), np.nan)
    return VisibilityCurve(hist_parallel.bin_centers.copy(), vis, err, defined)


# ---------------------------------------------------------------------------
# temporal filter scan


@dataclass(frozen=True)
class FilterScanRow:
    window: float
    visibility: float
    visibility_err: float
    acceptance: float
    n_parallel: float
    n_reference: float
    empty: bool = False


def _scan_counts(source, window: float, max_tau: float):
    if isinstance(source, CorrelationHistogram):
        inside = np.abs(source.bin_centers) < window
        total = np.abs(source.bin_centers) <= max_tau
        kept = float(source.corrected[inside].sum())
        return kept, float(source.corrected[total].sum()), float(source.counts[inside].sum())
    result = temporal_filter(source, window, max_tau)
    return float(result.n_kept), float(result.n_total), float(result.n_kept)


def _normalisation(source, period):
    if period is None:
        return 1.0
    if isinstance(source, CorrelationHistogram):
        return source.peak_sum(period, period / 2) + source.peak_sum(-period, period / 2)
    if isinstance(source, RunResult):
        return float(source.side_peak_count)
    return float(side_peak_count(source, period))


def filter_scan(parallel, reference, windows: Sequence[float], max_tau: float = DEFAULT_PERIOD_NS / 2,
                period: float | None = None) -> list[FilterScanRow]:
    """Visibility and acceptance of the temporal filter for each window.

    ``parallel`` and ``reference`` are record sets or histograms. With a
    ``period`` the two runs are normalized by their side-peak counts;
    otherwise they are assumed to share an integration length. Histograms
    resolve the window only to whole bins.
    """
    windows = list(windows)
    if any(w <= 0 for w in windows) or windows != sorted(windows):
        raise ValueError("windows must be positive and ascending")
    scale = _normalisation(reference, period) / _normalisation(parallel, period) if period else 1.0
    rows = []
    for w in windows:
        n_par, tot_par, raw_par = _scan_counts(parallel, w, max_tau)
        n_ref, _, raw_ref = _scan_counts(reference, w, max_tau)
        acceptance = n_par / tot_par if tot_par > 0 else float("nan")
        if n_ref <= 0:
            rows.append(FilterScanRow(w, float("nan"), float("nan"), acceptance, n_par, n_ref, empty=True))
            continue
        ratio = scale * n_par / n_ref
        err = scale * math.sqrt(max(raw_par, 1.0) / n_ref**2 + n_par**2 * max(raw_ref, 1.0) / n_ref**4)
        rows.append(FilterScanRow(w, 1.0 - ratio, err, acceptance, n_par, n_ref))
    return rows


# ---------------------------------------------------------------------------
# text output


def write_fit(stream: TextIO, result: FitResult) -> None:
    p = result.params
    rows = [
        ("amplitude", p.amplitude),
        ("tau_p_ns", p.tau_p),
        ("delta_rad_per_ns", p.delta),
        ("delta_mhz", p.delta / (2 * math.pi * 1e-3)),
        ("delta_omega_rad_per_ns", p.delta_omega),
        ("delta_omega_khz", p.delta_omega / (2 * math.pi * 1e-6)),
        ("v0", p.v0),
    ]
    if p.delta_omega > 0:
        rows.append(("coherence_time_ns", 2.0 / p.delta_omega))
    rows += [(f"{name}_err", result.param_errors[name]) for name in PARAM_NAMES]
    rows.append(("chi2", result.chi2))
    for key, value in rows:
        stream.write(f"{key}: {float(value)!r}\n")
    stream.write(f"dof: {result.dof}\n")
    stream.write(f"converged: {str(result.converged).lower()}\n")


def read_fit(stream: TextIO) -> dict:
    out = {}
    for line in stream:
        key, sep, value = line.partition(":")
        if sep:
            out[key.strip()] = value.strip()
    return out


def write_model_curve(stream: TextIO, model: BeatModel, tau, bin_width: float, data=None) -> None:
    """``tau_ns<TAB>model`` rows, plus data and residual columns when ``data`` is given."""
    curve = model_counts(model, tau, bin_width)
    if data is None:
        stream.write("tau_ns\tmodel\n")
        for t, m in zip(np.asarray(tau).tolist(), curve.tolist()):
            stream.write(f"{t!r}\t{m!r}\n")
        return
    stream.write("tau_ns\tmodel\tdata\tresidual\n")
    for t, m, d in zip(np.asarray(tau).tolist(), curve.tolist(), np.asarray(data).tolist()):
        stream.write(f"{t!r}\t{m!r}\t{d!r}\t{d - m!r}\n")
