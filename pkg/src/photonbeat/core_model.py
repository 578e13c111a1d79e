"""Closed-form joint photodetection densities for two photons at a 50:50 beam splitter.

Time is in ns and angular frequency in rad/ns throughout. Output port C is
``(a_B + a_A)/sqrt(2)``, port D is ``(a_B - a_A)/sqrt(2)``.

A joint density channel ``XY`` at ``(t1, t2)`` is the density for a first click
in detector X at ``t1`` followed by a second click in detector Y at ``t2``, so
it lives on the ordered half-plane ``t1 <= t2``. With that convention the four
channels together integrate to one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

CHANNELS = ("CD", "DC", "CC", "DD")


class GridTooSmallError(ValueError):
    """Raised when a sampling grid misses too much of a photon envelope."""


class Polarization(enum.Enum):
    PARALLEL = "parallel"
    PERPENDICULAR = "perpendicular"


def mhz_to_angular(f_mhz: float) -> float:
    """Cyclic frequency in MHz to angular frequency in rad/ns."""
    return 2.0 * math.pi * f_mhz * 1e-3


def khz_to_angular(f_khz: float) -> float:
    return 2.0 * math.pi * f_khz * 1e-6


def angular_to_mhz(omega: float) -> float:
    return omega / (2.0 * math.pi * 1e-3)


@dataclass(frozen=True)
class Wavepacket:
    """Temporal mode of a single photon.

    Attributes:
        t_center: arrival time of the envelope maximum (ns).
        tau_p: 1/e half-width of the intensity envelope (ns).
        detuning: carrier offset from a common reference (rad/ns).
    """

    t_center: float = 0.0
    tau_p: float = 450.0
    detuning: float = 0.0

    def __post_init__(self):
        if not self.tau_p > 0:
            raise ValueError(f"tau_p must be positive, got {self.tau_p}")

    @property
    def time_sigma(self) -> float:
        """Standard deviation of the detection-time distribution."""
        return self.tau_p / math.sqrt(2.0)

    def amplitude(self, t):
        return envelope(self, t)

    def intensity(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-((t - self.t_center) / self.tau_p) ** 2) / (math.sqrt(math.pi) * self.tau_p)

    def mass_outside(self, t_lo: float, t_hi: float) -> float:
        """Envelope probability falling outside ``[t_lo, t_hi]``."""
        lo = (t_lo - self.t_center) / self.tau_p
        hi = (t_hi - self.t_center) / self.tau_p
        return 0.5 * (special.erfc(hi) + special.erfc(-lo))


def envelope(wp: Wavepacket, t):
    """Normalized Gaussian mode amplitude of ``wp`` at time(s) ``t``."""
    t = np.asarray(t, dtype=float)
    u = t - wp.t_center
    norm = (math.pi * wp.tau_p**2) ** -0.25
    return norm * np.exp(-(u**2) / (2.0 * wp.tau_p**2)) * np.exp(-1j * wp.detuning * u)


@dataclass(frozen=True)
class BeatModel:
    """Five-parameter correlation model.

    ``amplitude`` scales the perpendicular cross-correlation density, whose
    integral over all delays is ``amplitude / 2``.
    """

    amplitude: float = 1.0
    tau_p: float = 450.0
    delta: float = 0.0
    delta_omega: float = 0.0
    v0: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not self.tau_p > 0:
            raise ValueError("tau_p must be positive")
        if self.delta_omega < 0:
            raise ValueError("delta_omega must be >= 0")
        if not 0.0 <= self.v0 <= 1.0:
            raise ValueError("v0 must lie in [0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.amplitude, self.tau_p, self.delta, self.delta_omega, self.v0)


@dataclass(frozen=True, eq=False)
class JointDensity:
    """Four-channel joint detection density on a square ``(t1, t2)`` lattice.

    ``values[ch][i, j]`` is the density (ns^-2) for the first click in the
    channel's first detector at ``times[i]`` and the second click in its second
    detector at ``times[j]``. Entries with ``i > j`` are zero and diagonal entries
    carry half weight, so ``sum(values) * dt**2`` approximates the ordered
    half-plane integral.
    """

    times: np.ndarray
    dt: float
    values: dict

    def __getitem__(self, channel: str) -> np.ndarray:
        return self.values[channel]

    def probabilities(self) -> dict:
        return {ch: v * self.dt**2 for ch, v in self.values.items()}

    def total(self) -> float:
        return float(sum(v.sum() for v in self.values.values()) * self.dt**2)


def channel_densities(wpA: Wavepacket, wpB: Wavepacket, pol: Polarization, t1, t2, v0: float = 1.0) -> dict:
    """Unordered channel formulas evaluated at broadcastable ``t1``, ``t2``.

    ``v0`` scales the interference cross term; it is ignored for
    perpendicular polarization, where the cross term is absent.
    """
    pol = Polarization(pol)
    xa1, xb1 = envelope(wpA, t1), envelope(wpB, t1)
    xa2, xb2 = envelope(wpA, t2), envelope(wpB, t2)
    x = xa1 * xb2
    y = xb1 * xa2
    incoherent = np.abs(x) ** 2 + np.abs(y) ** 2
    if pol is Polarization.PERPENDICULAR:
        same = different = 0.25 * incoherent
    else:
        # mix of the distinguishable and fully interfering forms, non-negative term by term
        different = 0.25 * ((1.0 - v0) * incoherent + v0 * np.abs(x - y) ** 2)
        same = 0.25 * ((1.0 - v0) * incoherent + v0 * np.abs(x + y) ** 2)
    return {"CD": different, "DC": different, "CC": same, "DD": same}


def time_grid(wpA: Wavepacket, wpB: Wavepacket, dt: float = 4.0, n_widths: float = 4.0) -> np.ndarray:
    """Uniform grid covering ``n_widths * tau_p`` around both wavepackets."""
    lo = min(wpA.t_center - n_widths * wpA.tau_p, wpB.t_center - n_widths * wpB.tau_p)
    hi = max(wpA.t_center + n_widths * wpA.tau_p, wpB.t_center + n_widths * wpB.tau_p)
    n = int(math.ceil((hi - lo) / dt)) + 1
    return lo + dt * np.arange(n)


def joint_density(
    wpA: Wavepacket,
    wpB: Wavepacket,
    pol: Polarization = Polarization.PARALLEL,
    times=None,
    dt: float = 4.0,
) -> JointDensity:
    """Ordered four-channel joint density sampled on a square lattice.

    Args:
        times: uniformly spaced sample points; built with ``time_grid`` when
            omitted.
        dt: grid spacing used only when ``times`` is omitted.

    Raises:
        GridTooSmallError: if more than 1e-6 of either envelope lies outside
            the cells spanned by ``times``.
    """
    if times is None:
        times = time_grid(wpA, wpB, dt)
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise GridTooSmallError("grid needs at least two points")
    dt = float(times[1] - times[0])
    lo, hi = times[0] - dt / 2, times[-1] + dt / 2
    for name, wp in (("A", wpA), ("B", wpB)):
        outside = wp.mass_outside(lo, hi)
        if outside > 1e-6:
            raise GridTooSmallError(f"{outside:.2e} of envelope {name} lies outside the grid")

    raw = channel_densities(wpA, wpB, pol, times[:, None], times[None, :])
    weight = np.triu(np.ones((times.size, times.size)), k=1) + 0.5 * np.eye(times.size)
    values = {ch: raw[ch] * weight for ch in CHANNELS}
    return JointDensity(times=times, dt=dt, values=values)


def _reference_shape(tau, tau_p):
    return np.exp(-(np.asarray(tau, dtype=float) ** 2) / (2.0 * tau_p**2)) / (2.0 * math.sqrt(2.0 * math.pi) * tau_p)


def visibility(model: BeatModel, tau):
    """Interference contrast remaining after delay ``tau``."""
    tau = np.asarray(tau, dtype=float)
    return model.v0 * np.exp(-((model.delta_omega * tau / 2.0) ** 2))


def cross_correlation(model: BeatModel, pol: Polarization, tau):
    """C/D cross-correlation density versus delay ``tau = t_D - t_C`` (ns^-1)."""
    pol = Polarization(pol)
    ref = model.amplitude * _reference_shape(tau, model.tau_p)
    if pol is Polarization.PERPENDICULAR:
        return ref
    tau = np.asarray(tau, dtype=float)
    return ref * (1.0 - visibility(model, tau) * np.cos(model.delta * tau))


def coherent_baseline(delta: float, tau):
    """Cross-correlation modulation of two coherent fields with frequency offset ``delta``."""
    return 1.0 - 0.5 * np.cos(delta * np.asarray(tau, dtype=float))


def coherence_time(delta_omega: float) -> float:
    """1/e half-width of the dephasing envelope, ``2 / delta_omega``."""
    if not delta_omega > 0:
        raise ValueError("delta_omega must be positive (coherence time is unbounded at 0)")
    return 2.0 / delta_omega


def transform_limited_bandwidth(tau_p: float) -> float:
    """1/e half-width of the spectral intensity of a Gaussian photon, in MHz."""
    if not tau_p > 0:
        raise ValueError("tau_p must be positive")
    return 1e3 / (2.0 * math.pi * tau_p)


def filtered_visibility(model: BeatModel, window: float) -> float:
    """Visibility left in coincidences with ``|tau| < window``.

    Both integrands are even in ``tau``, so only ``[0, window]`` is integrated.
    """
    if not window > 0:
        raise ValueError("window must be positive")

    def ref(t):
        return _reference_shape(t, model.tau_p)

    def interfering(t):
        return ref(t) * visibility(model, t) * math.cos(model.delta * t)

    opts = dict(epsabs=1e-16, epsrel=1e-11, limit=200)
    num, _ = integrate.quad(interfering, 0.0, window, **opts)
    den, _ = integrate.quad(ref, 0.0, window, **opts)
    return num / den
