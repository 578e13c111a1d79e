"""Coincidence histograms between detectors C and D.

The signed delay is ``tau = t_D - t_C``. Every C/D pair within ``max_tau`` is
counted (multi-stop). Bins are centred on integer multiples of the bin width,
so one bin is centred on ``tau = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TextIO

import numpy as np
from scipy import optimize, special

from .montecarlo import DEFAULT_PERIOD_NS, ExperimentConfig, Mode, RecordBatch, RunResult

HIST_COLUMNS = "tau_ns\tcounts\tbackground\tcorrected"


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CorrelationHistogram:
    """Binned C/D coincidences with their background.

    ``corrected`` is always ``counts - background``; negative values are kept.
    """

    bin_width: float
    bin_centers: np.ndarray
    counts: np.ndarray
    background: np.ndarray
    corrected: np.ndarray
    period: float | None = None
    n_records: int = 0
    n_trains: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrelationHistogram):
            return NotImplemented
        return (
            self.bin_width == other.bin_width
            and self.period == other.period
            and self.n_records == other.n_records
            and self.n_trains == other.n_trains
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("bin_centers", "counts", "background", "corrected")
            )
        )

    def __len__(self) -> int:
        return len(self.bin_centers)

    @property
    def background_peak(self) -> float:
        return float(self.background.max()) if len(self) else 0.0

    def region(self, max_abs_tau: float, center: float = 0.0) -> np.ndarray:
        """Boolean mask of bins whose centre lies within ``max_abs_tau`` of ``center``."""
        return np.abs(self.bin_centers - center) <= max_abs_tau + 1e-9

    def peak_sum(self, center: float, half_width: float, corrected: bool = True) -> float:
        values = self.corrected if corrected else self.counts
        return float(values[self.region(half_width, center)].sum())

    def same_grid(self, other: "CorrelationHistogram") -> bool:
        return self.bin_width == other.bin_width and np.array_equal(self.bin_centers, other.bin_centers)


def _as_batch(records) -> RecordBatch:
    if isinstance(records, RunResult):
        return records.records
    if isinstance(records, RecordBatch):
        return records
    return RecordBatch.from_records(records)


def cross_pairs(records, max_tau: float, inclusive: bool = True):
    """All C/D pairs with ``|t_D - t_C| <= max_tau`` (``<`` if not inclusive).

    Returns ``(c_index, d_index, tau)`` where the indices point into the C and
    D timestamp arrays of the batch.

    Raises:
        ValueError: if the records are not sorted by timestamp.
    """
    batch = _as_batch(records)
    if not batch.is_sorted():
        raise ValueError("records must be sorted by timestamp")
    tc = batch.times("C")
    td = batch.times("D")
    if tc.size == 0 or td.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    if inclusive:
        lo = np.searchsorted(td, tc - max_tau, "left")
        hi = np.searchsorted(td, tc + max_tau, "right")
    else:
        lo = np.searchsorted(td, tc - max_tau, "right")
        hi = np.searchsorted(td, tc + max_tau, "left")
    n = hi - lo
    c_index = np.repeat(np.arange(tc.size), n)
    # d_index runs lo[i] .. hi[i]-1 for each C record i
    starts = np.repeat(lo - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
    d_index = starts + np.arange(int(n.sum()))
    return c_index, d_index, td[d_index] - tc[c_index]


def bin_centers_for(bin_width: float, max_tau: float) -> np.ndarray:
    k_max = int(math.floor(max_tau / bin_width + 0.5))
    return bin_width * np.arange(-k_max, k_max + 1, dtype=float)


def correlate(records, bin_width: float = 48.0, max_tau: float = 2 * DEFAULT_PERIOD_NS,
              period: float | None = DEFAULT_PERIOD_NS, n_trains: int | None = None) -> CorrelationHistogram:
    """Histogram of ``tau = t_D - t_C`` over all pairs with ``|tau| <= max_tau``."""
    if not bin_width > 0 or not max_tau > 0:
        raise ValueError("bin_width and max_tau must be positive")
    if isinstance(records, RunResult) and n_trains is None:
        n_trains = records.n_trains
    batch = _as_batch(records)
    centers = bin_centers_for(bin_width, max_tau)
    _, _, tau = cross_pairs(batch, max_tau)
    k = np.floor(tau / bin_width + 0.5).astype(np.int64) + (len(centers) // 2)
    counts = np.bincount(k, minlength=len(centers)).astype(np.int64)
    zeros = np.zeros(len(centers))
    return CorrelationHistogram(
        bin_width=float(bin_width),
        bin_centers=centers,
        counts=counts,
        background=zeros,
        corrected=counts.astype(float),
        period=period,
        n_records=len(batch),
        n_trains=n_trains,
    )


# ---------------------------------------------------------------------------
# background


def _triangle_antiderivative(u, gate):
    u = np.clip(u, -gate, gate)
    return np.where(u <= 0, 0.5 * (gate + u) ** 2, gate**2 - 0.5 * (gate - u) ** 2)


def _dark_photon_overlap(u, gate, sigma):
    """Density in u of (photon time - dark time) for one dark count per ns of gate and one photon."""
    half = gate / 2.0
    hi = np.minimum(half, u + half)
    lo = np.maximum(-half, u - half)
    s = sigma * math.sqrt(2.0)
    return np.where(hi > lo, 0.5 * (special.erf(hi / s) - special.erf(lo / s)), 0.0)


def photons_per_slot(config: ExperimentConfig) -> np.ndarray:
    """Expected photons reaching each detector in each gated slot (before gating)."""
    n = config.photons_per_train
    p = config.emission_prob
    m = np.zeros(config.n_slots)
    if config.mode is Mode.SINGLE_PATH:
        m[:n] += p * config.eta_b
    else:
        m[:n] += 0.5 * p * config.eta_b
        m[1:] += 0.5 * p * config.eta_a
    return 0.5 * m


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def background_estimate(config: ExperimentConfig, bin_centers, bin_width: float, n_trains: int) -> np.ndarray:
    """Expected accidental C/D coincidences per bin involving at least one dark count.

    Dark-dark pairs follow the autocorrelation of the gate window, a triangle
    repeating every period. Dark-photon pairs follow the overlap of the gate with
    the photon envelope. Both are summed over all slot lags within a train and
    scaled by ``n_trains``.
    """
    centers = np.asarray(bin_centers, dtype=float)
    out = np.zeros(centers.size)
    r = config.dark_rate
    if r == 0 or n_trains == 0:
        return out
    gate = config.gate_open
    period = config.period
    sigma = config.tau_p / math.sqrt(2.0)
    n_slots = config.n_slots
    m = photons_per_slot(config)
    lo_edge = centers - bin_width / 2
    hi_edge = centers + bin_width / 2
    nodes = 0.5 * (hi_edge + lo_edge)[:, None] + 0.5 * bin_width * _GL_X[None, :]

    for lag in range(-(n_slots - 1), n_slots):
        shift = lag * period
        if np.all((hi_edge < shift - gate) | (lo_edge > shift + gate)):
            continue
        slot_pairs = n_slots - abs(lag)
        # dark C in slot s, D in slot s + lag
        first = np.arange(max(0, -lag), min(n_slots, n_slots - lag))
        photon_d = m[first + lag].sum()
        photon_c = m[first].sum()
        dd = r * r * slot_pairs * (
            _triangle_antiderivative(hi_edge - shift, gate) - _triangle_antiderivative(lo_edge - shift, gate)
        )
        overlap = 0.5 * bin_width * (_dark_photon_overlap(nodes - shift, gate, sigma) * _GL_W).sum(axis=1)
        # overlap is even in u, so photon-C/dark-D pairs share the same shape
        out += dd + r * (photon_d + photon_c) * overlap
    return n_trains * out


def _gate_acceptance(config: ExperimentConfig) -> float:
    half = config.gate_open / 2.0
    return float(special.erf(half / config.tau_p))


def expected_side_peak_per_train(config: ExperimentConfig) -> float:
    """Expected C x D pairs per train in the two peaks at plus and minus one period.

    Valid when the gate is at most half a period, so every pair from adjacent
    slots falls in a side peak and no other pair does.
    """
    if config.gate_open > config.period / 2.0 + 1e-9:
        raise ValueError("side-peak expectation assumes gate_open <= period/2")
    n = config.photons_per_train
    g = _gate_acceptance(config)
    p = config.emission_prob
    b = np.zeros(config.n_slots)  # photon via B arriving in slot s, from emission s
    a = np.zeros(config.n_slots)  # photon via A arriving in slot s, from emission s-1
    if config.mode is Mode.SINGLE_PATH:
        b[:n] = p * config.eta_b * g
    else:
        b[:n] = 0.5 * p * config.eta_b * g
        a[1:] = 0.5 * p * config.eta_a * g
    # n_s = B_s + A_s; within adjacent slots only B_s and A_{s+1} share an emission and exclude each other
    pair = b[:-1] * b[1:] + a[:-1] * b[1:] + a[:-1] * a[1:]
    per_det = 0.5 * (a + b)
    dark = config.dark_rate * config.gate_open
    dark_terms = 2.0 * (dark * (per_det[:-1] + per_det[1:]) + dark * dark)
    # detectors of different slots are independent and each photon is at C with probability 1/2
    return float((0.5 * pair + dark_terms).sum())


def background_peak(config: ExperimentConfig, n_trains: float) -> float:
    """Mean modelled background in the bins centred on zero delay and plus/minus one period."""
    centers = np.array([-config.period, 0.0, config.period])
    return float(background_estimate(config, centers, config.bin_width, 1).mean() * n_trains)


def calibrate_dark_rate(config: ExperimentConfig, peak_per_bin: float = 3.2) -> float:
    """Dark rate per detector (counts/ns of open gate) giving ``peak_per_bin`` background counts.

    The integration length is the expected number of trains needed to collect
    ``config.target_side_peak`` side-peak coincidences at that dark rate.
    """
    if peak_per_bin <= 0 or config.target_side_peak <= 0:
        raise ValueError("peak_per_bin and target_side_peak must be positive")

    def excess(rate):
        trial = replace(config, dark_rate=rate)
        n_trains = config.target_side_peak / expected_side_peak_per_train(trial)
        return background_peak(trial, n_trains) - peak_per_bin

    hi = 1e-7
    while excess(hi) < 0:
        hi *= 4.0
        if hi > 1.0:
            raise ValueError("no dark rate reaches the requested background")
    return float(optimize.brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-12))


def background_from_data(hist: CorrelationHistogram, period: float | None = None, exclusion: float = 1500.0) -> np.ndarray:
    """Periodic triangular background fitted to bins far from the coincidence peaks.

    The model ``b0 + b1 * (1 - 2 d / period)``, with ``d`` the distance to the
    nearest multiple of the period, is fitted by linear least squares to bins
    more than ``exclusion`` ns from every peak.
    """
    period = period or hist.period
    if not period:
        raise ValueError("a period is required")
    d = np.abs(hist.bin_centers - period * np.round(hist.bin_centers / period))
    shape = 1.0 - 2.0 * d / period
    use = d > exclusion
    if use.sum() < 2:
        raise ValueError("too few bins outside the excluded peak regions")
    design = np.column_stack([np.ones(use.sum()), shape[use]])
    (b0, b1), *_ = np.linalg.lstsq(design, hist.counts[use].astype(float), rcond=None)
    return b0 + b1 * shape


def subtract_background(hist: CorrelationHistogram, background) -> CorrelationHistogram:
    """Subtract ``background`` from the corrected values; raw counts are untouched."""
    if isinstance(background, CorrelationHistogram):
        if not hist.same_grid(background):
            raise GridMismatchError("histograms have different bin grids")
        background = background.corrected
    background = np.asarray(background, dtype=float)
    if background.shape != hist.counts.shape:
        raise GridMismatchError(f"background has shape {background.shape}, histogram {hist.counts.shape}")
    return replace(hist, background=hist.background + background, corrected=hist.corrected - background)


# ---------------------------------------------------------------------------
# temporal filter


@dataclass(frozen=True, eq=False)
class FilterResult:
    c_index: np.ndarray
    d_index: np.ndarray
    tau: np.ndarray
    n_total: int

    @property
    def n_kept(self) -> int:
        return int(self.tau.size)

    @property
    def acceptance(self) -> float:
        return self.n_kept / self.n_total if self.n_total else float("nan")


def temporal_filter(records, window: float, max_tau: float = DEFAULT_PERIOD_NS / 2) -> FilterResult:
    """Keep C/D pairs with ``|tau| < window`` out of all pairs with ``|tau| <= max_tau``."""
    if not window > 0:
        raise ValueError("window must be positive")
    c_index, d_index, tau = cross_pairs(records, max_tau)
    keep = np.abs(tau) < window
    return FilterResult(c_index[keep], d_index[keep], tau[keep], int(tau.size))


# ---------------------------------------------------------------------------
# text format


def write_histogram(stream: TextIO, hist: CorrelationHistogram) -> None:
    stream.write(f"# bin_width_ns: {hist.bin_width!r}\n")
    stream.write(f"# period_ns: {hist.period!r}\n")
    stream.write(f"# n_records: {hist.n_records}\n")
    if hist.n_trains is not None:
        stream.write(f"# n_trains: {hist.n_trains}\n")
    stream.write(HIST_COLUMNS + "\n")
    for row in zip(hist.bin_centers.tolist(), hist.counts.tolist(), hist.background.tolist(), hist.corrected.tolist()):
        stream.write(f"{row[0]!r}\t{row[1]}\t{row[2]!r}\t{row[3]!r}\n")


def read_histogram(stream: TextIO) -> CorrelationHistogram:
    meta = {}
    rows = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
            continue
        if line == HIST_COLUMNS:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 columns")
        rows.append(parts)
    if "bin_width_ns" not in meta:
        raise ValueError("missing bin_width_ns header")
    period = None if meta.get("period_ns", "None") == "None" else float(meta["period_ns"])
    n_trains = int(meta["n_trains"]) if "n_trains" in meta else None
    return CorrelationHistogram(
        bin_width=float(meta["bin_width_ns"]),
        bin_centers=np.array([float(r[0]) for r in rows]),
        counts=np.array([int(r[1]) for r in rows], dtype=np.int64),
        background=np.array([float(r[2]) for r in rows]),
        corrected=np.array([float(r[3]) for r in rows]),
        period=period,
        n_records=int(meta.get("n_records", 0)),
        n_trains=n_trains,
    )
