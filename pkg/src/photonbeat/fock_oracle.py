"""Brute-force two-photon beam-splitter simulation on discrete time bins.

The two photons live in single-particle modes labelled (port, polarization, bin).
The symmetric two-photon wavefunction is transformed by the beam splitter
acting on the port index, and detection probabilities are read off the output
wavefunction. Detectors do not resolve polarization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_model import CHANNELS, Wavepacket, envelope

MAX_BINS = 64

# Input ports A, B -> output ports C, D for creation operators:
# a_A^dag = (c^dag - d^dag)/sqrt2, a_B^dag = (c^dag + d^dag)/sqrt2.
BEAM_SPLITTER = np.array([[1.0, 1.0], [-1.0, 1.0]]) / math.sqrt(2.0)  # rows: C, D; cols: A, B
DETECTORS = ("C", "D")


@dataclass(frozen=True, eq=False)
class TimeBinState:
    """Product state of one photon in port A and one in port B, over time bins."""

    times: np.ndarray
    amp_a: np.ndarray
    amp_b: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if not 2 <= n <= MAX_BINS:
            raise ValueError(f"n_bins must be in [2, {MAX_BINS}], got {n}")
        for name, amp in (("amp_a", self.amp_a), ("amp_b", self.amp_b)):
            if amp.shape != (n,):
                raise ValueError(f"{name} has shape {amp.shape}, expected ({n},)")
            if abs(np.vdot(amp, amp).real - 1.0) > 1e-12:
                raise ValueError(f"{name} is not normalized")

    @property
    def n_bins(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True, eq=False)
class DetectionDistribution:
    """Exact probabilities ``probs[ch][i, j]`` of a first click at bin i and a second at bin j."""

    times: np.ndarray
    probs: dict

    def __getitem__(self, channel: str) -> np.ndarray:
        return self.probs[channel]

    def total(self) -> float:
        return float(sum(p.sum() for p in self.probs.values()))

    def channel_total(self, channel: str) -> float:
        return float(self.probs[channel].sum())


def build_state(wpA: Wavepacket, wpB: Wavepacket, n_bins: int, span: tuple[float, float]) -> TimeBinState:
    """Sample both envelopes at the centres of ``n_bins`` bins covering ``span``."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    lo, hi = span
    dt = (hi - lo) / n_bins
    times = lo + dt * (np.arange(n_bins) + 0.5)
    amps = []
    for name, wp in (("A", wpA), ("B", wpB)):
        raw = envelope(wp, times) * math.sqrt(dt)
        mass = float(np.vdot(raw, raw).real)
        if 1.0 - mass > 1e-3:
            raise ValueError(f"{1.0 - mass:.2e} of envelope {name} lies outside the span")
        amps.append(raw / math.sqrt(mass))
    return TimeBinState(times=times, amp_a=amps[0], amp_b=amps[1])


def _output_wavefunction(state: TimeBinState, distinguishable: bool) -> np.ndarray:
    """Symmetric two-photon wavefunction psi[d1, p1, i, d2, p2, j] after the beam splitter."""
    n = state.n_bins
    phi_a = np.zeros((2, 2, n), dtype=complex)  # (input port, polarization, bin)
    phi_b = np.zeros((2, 2, n), dtype=complex)
    phi_a[0, 0] = state.amp_a
    phi_b[1, 1 if distinguishable else 0] = state.amp_b
    out_a = np.einsum("dk,kpi->dpi", BEAM_SPLITTER, phi_a)
    out_b = np.einsum("dk,kpi->dpi", BEAM_SPLITTER, phi_b)
    psi = np.einsum("abc,def->abcdef", out_a, out_b)
    psi = (psi + psi.transpose(3, 4, 5, 0, 1, 2)) / math.sqrt(2.0)
    return psi


def detection_distribution(state: TimeBinState, distinguishable: bool = False) -> DetectionDistribution:
    """Exact detection distribution for every ordered pair of clicks.

    With ``distinguishable=True`` the photons carry orthogonal polarizations.
    A pair of clicks in the same bin but different detectors is split evenly
    between the two orderings.
    """
    n = state.n_bins
    psi = _output_wavefunction(state, distinguishable)
    # P{clicks at (d1,i) and (d2,j)}: sum over polarization mode pairs of
    # 2|psi(m,m')|^2 for distinct detector-bins, |psi|^2 summed once otherwise
    pol_summed = (np.abs(psi) ** 2).sum(axis=(1, 4))  # [d1, i, d2, j]
    same_cell = np.eye(2)[:, None, :, None] * np.eye(n)[None, :, None, :]
    event = pol_summed * (2.0 - same_cell)

    upper = np.triu(np.ones((n, n)), k=1)
    diag = np.eye(n)
    probs = {}
    for ch in CHANNELS:
        x, y = DETECTORS.index(ch[0]), DETECTORS.index(ch[1])
        block = event[x, :, y, :]
        # equal bins in different detectors: the event is shared by both orderings
        diag_weight = 1.0 if x == y else 0.5
        probs[ch] = block * upper + diag_weight * block * diag
    return DetectionDistribution(times=state.times, probs=probs)


def conditional_state(state: TimeBinState, first_detector: str, first_bin: int) -> np.ndarray:
    """One-photon state left after a click in ``first_detector`` at ``first_bin``.

    Returns a normalized complex array of shape ``(2, n_bins)`` whose rows are
    the amplitudes at detectors C and D. Amplitudes at bins before
    ``first_bin`` are retained.
    """
    x = DETECTORS.index(first_detector)
    psi = _output_wavefunction(state, distinguishable=False)[:, 0, :, :, 0, :]
    after = psi[x, first_bin]  # shape (2, n)
    norm = float(np.vdot(after, after).real)
    if norm < 1e-300:
        raise ValueError(f"click at {first_detector}, bin {first_bin} has zero probability")
    return after / math.sqrt(norm)


def second_click_probabilities(cond: np.ndarray) -> np.ndarray:
    """Detector-resolved probabilities, shape ``(2, n_bins)``, for a conditional state."""
    return np.abs(cond) ** 2
