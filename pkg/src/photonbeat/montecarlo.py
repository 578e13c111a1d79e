"""Monte Carlo generation of time-tagged photodetections.

Each atom transit ("train") gets ``photons_per_train`` trigger slots spaced by
one period. An emitted photon is routed to path A, where it is delayed by one
period, or to path B, with equal probability. Photons from A and B that reach
the beam splitter in the same slot interfere. The detectors are gated, and dark
counts arrive as a Poisson process while a gate is open.

Every train draws from its own counter-based substream keyed by
``(seed, train_id)``, so a train's records do not depend on how the trains are
scheduled.
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

from .core_model import Wavepacket

DEFAULT_PERIOD_NS = 5300.0
RECORDS_HEADER = "#photon-beat-records v1"
TRAIN_GAP_PERIODS = 8
DETECTOR_NAMES = ("C", "D")
ORIGIN_NAMES = ("photon", "dark")


class ConfigError(ValueError):
    pass


class TargetNotReached(RuntimeError):
    """Raised when ``max_trains`` trains do not accumulate the side-peak target."""


class Mode(str, enum.Enum):
    TWO_PATH_PARALLEL = "two_path_parallel"
    TWO_PATH_PERPENDICULAR = "two_path_perpendicular"
    SINGLE_PATH = "single_path"


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one simulated run.

    ``dark_rate`` is per detector, in counts/ns while the gate is open.
    ``gate_open`` defaults to half the period, centred on the photon arrival.
    """

    period: float = DEFAULT_PERIOD_NS
    photons_per_train: int = 20
    emission_prob: float = 1.0
    mode: Mode = Mode.TWO_PATH_PARALLEL
    eta_a: float = 1.0
    eta_b: float = 1.0
    tau_p: float = 450.0
    delta: float = 0.0
    delta_omega: float = 0.0
    v0: float = 1.0
    dark_rate: float = 0.0
    gate_open: float | None = None
    bin_width: float = 48.0
    target_side_peak: int = 980
    seed: int = 0
    max_trains: int = 2_000_000

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.gate_open is None:
            object.__setattr__(self, "gate_open", self.period / 2.0)
        for name in ("emission_prob", "eta_a", "eta_b", "v0"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not self.period > self.gate_open > 0:
            raise ConfigError("need period > gate_open > 0")
        if not self.bin_width > 0:
            raise ConfigError("bin_width must be positive")
        if not self.tau_p > 0:
            raise ConfigError("tau_p must be positive")
        if self.delta_omega < 0 or self.dark_rate < 0:
            raise ConfigError("delta_omega and dark_rate must be >= 0")
        if self.photons_per_train < 1:
            raise ConfigError("photons_per_train must be >= 1")
        if self.target_side_peak < 0 or self.max_trains < 1:
            raise ConfigError("target_side_peak must be >= 0 and max_trains >= 1")

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @property
    def n_slots(self) -> int:
        """Gated slots per train; the extra slot catches the last delayed photon."""
        return self.photons_per_train + 1

    @property
    def train_stride(self) -> float:
        return (self.n_slots + TRAIN_GAP_PERIODS) * self.period

    @property
    def photon_offset(self) -> float:
        """Arrival time of the envelope centre relative to the slot start."""
        return self.period / 2.0

    @property
    def interfering(self) -> bool:
        return self.mode is Mode.TWO_PATH_PARALLEL


def config_field_names() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]


class DetectionRecord(NamedTuple):
    train_id: int
    detector: str
    timestamp: float
    origin: str


@dataclass(frozen=True, eq=False)
class RecordBatch:
    """Column-oriented detection records, sorted by timestamp.

    ``detector`` holds 0 for C and 1 for D; ``origin`` holds 0 for photon
    and 1 for dark count.
    """

    train_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    detector: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    timestamp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=float))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self) -> Iterator[DetectionRecord]:
        for k, d, t, o in zip(self.train_id, self.detector, self.timestamp, self.origin):
            yield DetectionRecord(int(k), DETECTOR_NAMES[d], float(t), ORIGIN_NAMES[o])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordBatch):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("train_id", "detector", "timestamp", "origin")
        )

    @classmethod
    def from_records(cls, records: Iterable[DetectionRecord]) -> "RecordBatch":
        records = list(records)
        return cls(
            train_id=np.array([r.train_id for r in records], dtype=np.int64),
            detector=np.array([DETECTOR_NAMES.index(r.detector) for r in records], dtype=np.int8),
            timestamp=np.array([r.timestamp for r in records], dtype=float),
            origin=np.array([ORIGIN_NAMES.index(r.origin) for r in records], dtype=np.int8),
        )

    @classmethod
    def concat(cls, batches: Iterable["RecordBatch"]) -> "RecordBatch":
        batches = list(batches)
        if not batches:
            return cls()
        return cls(*(np.concatenate([getattr(b, name) for b in batches]) for name in ("train_id", "detector", "timestamp", "origin")))

    def sorted(self) -> "RecordBatch":
        order = np.lexsort((self.origin, self.detector, self.train_id, self.timestamp))
        return RecordBatch(self.train_id[order], self.detector[order], self.timestamp[order], self.origin[order])

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamp) >= 0))

    def times(self, detector: str) -> np.ndarray:
        return self.timestamp[self.detector == DETECTOR_NAMES.index(detector)]


@dataclass(frozen=True, eq=False)
class RunResult:
    records: RecordBatch
    n_trains: int
    side_peak_count: int
    config: ExperimentConfig

    def __iter__(self) -> Iterator[DetectionRecord]:
        return iter(self.records)


# ---------------------------------------------------------------------------
# pair sampling


def sample_pairs(rng: np.random.Generator, wpA: Wavepacket, wpB: Wavepacket, v0: float, rel_detuning):
    """Draw detector/time outcomes for interfering photon pairs.

    The click times are drawn exactly from the channel-summed joint density,
    which is interference free: one time from each envelope, then sorted. The
    channel is then chosen from the four channel densities at those times, with
    the cross term scaled by ``v0``. ``rel_detuning`` is the carrier difference
    A minus B for each pair and overrides the wavepackets' own detunings.

    Returns:
        ``(det1, t1, det2, t2)`` arrays with ``t1 <= t2``; detectors are 0 for C
        and 1 for D.
    """
    rel = np.atleast_1d(np.asarray(rel_detuning, dtype=float))
    n = rel.size
    ta = rng.normal(wpA.t_center, wpA.time_sigma, n)
    tb = rng.normal(wpB.t_center, wpB.time_sigma, n)
    t1 = np.minimum(ta, tb)
    t2 = np.maximum(ta, tb)

    ga1, gb1 = wpA.intensity(t1), wpB.intensity(t1)
    ga2, gb2 = wpA.intensity(t2), wpB.intensity(t2)
    xx = ga1 * gb2
    yy = gb1 * ga2
    cross = 2.0 * v0 * np.sqrt(xx * yy) * np.cos(rel * (t2 - t1))
    incoherent = xx + yy
    with np.errstate(invalid="ignore", divide="ignore"):
        p_diff = np.where(incoherent > 0, 0.5 * (incoherent - cross) / incoherent, 0.5)
    p_diff = np.clip(p_diff, 0.0, 1.0)

    u = rng.random((2, n))
    different = u[0] < p_diff
    det1 = (u[1] < 0.5).astype(np.int8)
    det2 = np.where(different, 1 - det1, det1).astype(np.int8)
    return det1, t1, det2, t2


def sample_pair(rng: np.random.Generator, wpA: Wavepacket, wpB: Wavepacket, v0: float, rel_detuning: float):
    """Single-pair form of :func:`sample_pairs`, returning detector names."""
    d1, t1, d2, t2 = sample_pairs(rng, wpA, wpB, v0, [rel_detuning])
    return DETECTOR_NAMES[d1[0]], float(t1[0]), DETECTOR_NAMES[d2[0]], float(t2[0])


# ---------------------------------------------------------------------------
# gating and generation


def gate_pattern(config: ExperimentConfig) -> list[tuple[float, float]]:
    """Open gate intervals within one period, relative to the slot start."""
    half = config.gate_open / 2.0
    return [(config.photon_offset - half, config.photon_offset + half)]


def train_rng(seed: int, train_id: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(train_id,))
    return np.random.Generator(np.random.Philox(seq))


def simulate_train(config: ExperimentConfig, train_id: int) -> RecordBatch:
    """Records of one train, sorted by timestamp. Depends only on ``(config, train_id)``."""
    rng = train_rng(config.seed, train_id)
    n = config.photons_per_train
    n_slots = config.n_slots
    period = config.period
    origin_t = train_id * config.train_stride
    (g_lo, g_hi), = gate_pattern(config)

    emitted = rng.random(n) < config.emission_prob
    if config.mode is Mode.SINGLE_PATH:
        via_a = np.zeros(n, dtype=bool)
    else:
        via_a = rng.random(n) < 0.5
    kept = rng.random(n) < np.where(via_a, config.eta_a, config.eta_b)
    present = emitted & kept
    # photon from emission slot k arrives at slot k (path B) or k+1 (path A)
    a_at = np.zeros(n_slots, dtype=bool)
    b_at = np.zeros(n_slots, dtype=bool)
    a_at[1:] = present & via_a
    b_at[:n] = present & ~via_a

    wp = Wavepacket(t_center=0.0, tau_p=config.tau_p)
    paired = np.flatnonzero(a_at & b_at)
    single = np.flatnonzero(a_at ^ b_at)

    if config.interfering:
        rel = rng.normal(config.delta, config.delta_omega / math.sqrt(2.0), paired.size)
        v0 = config.v0
    else:
        rel = np.zeros(paired.size)
        v0 = 0.0
    d1, t1, d2, t2 = sample_pairs(rng, wp, wp, v0, rel)
    s_det = (rng.random(single.size) < 0.5).astype(np.int8)
    s_t = rng.normal(0.0, wp.time_sigma, single.size)

    slot_start = origin_t + period * np.arange(n_slots)
    photon_slot = np.concatenate([paired, paired, single])
    det = np.concatenate([d1, d2, s_det])
    t = np.concatenate([t1, t2, s_t]) + config.photon_offset
    in_gate = (t >= g_lo) & (t < g_hi)
    ts = slot_start[photon_slot[in_gate]] + t[in_gate]
    det = det[in_gate]
    org = np.zeros(ts.size, dtype=np.int8)

    if config.dark_rate > 0:
        n_dark = rng.poisson(config.dark_rate * config.gate_open, (n_slots, 2))
        total = int(n_dark.sum())
        dark_slot = np.repeat(np.repeat(np.arange(n_slots), 2), n_dark.ravel())
        dark_det = np.repeat(np.tile(np.array([0, 1], dtype=np.int8), n_slots), n_dark.ravel())
        dark_t = slot_start[dark_slot] + g_lo + config.gate_open * rng.random(total)
        ts = np.concatenate([ts, dark_t])
        det = np.concatenate([det, dark_det])
        org = np.concatenate([org, np.ones(total, dtype=np.int8)])

    batch = RecordBatch(np.full(ts.size, train_id, dtype=np.int64), det.astype(np.int8), ts, org)
    return batch.sorted()


def side_peak_count(batch: RecordBatch, period: float) -> int:
    """C x D pairs with ``period/2 <= |t_D - t_C| < 3*period/2``."""
    tc = np.sort(batch.times("C"))
    td = np.sort(batch.times("D"))
    if tc.size == 0 or td.size == 0:
        return 0
    positive = np.searchsorted(td, tc + 1.5 * period) - np.searchsorted(td, tc + 0.5 * period)
    negative = np.searchsorted(td, tc - 0.5 * period, "right") - np.searchsorted(td, tc - 1.5 * period, "right")
    return int(positive.sum() + negative.sum())


def _simulate_chunk(args):
    config, start, stop = args
    out = []
    for k in range(start, stop):
        batch = simulate_train(config, k)
        out.append((batch, side_peak_count(batch, config.period)))
    return out


def iter_trains(config: ExperimentConfig, start: int = 0, workers: int = 1, chunk: int = 256):
    """Yield ``(train_id, batch, side_peak_count)`` in train order, without end."""
    k = start
    if workers <= 1:
        while True:
            batch = simulate_train(config, k)
            yield k, batch, side_peak_count(batch, config.period)
            k += 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        while True:
            jobs = [(config, k + i * chunk, k + (i + 1) * chunk) for i in range(workers)]
            for results in pool.map(_simulate_chunk, jobs):
                for batch, count in results:
                    yield k, batch, count
                    k += 1


def run(config: ExperimentConfig, n_trains: int | None = None, workers: int = 1) -> RunResult:
    """Simulate trains until the side peaks hold ``target_side_peak`` coincidences.

    With ``n_trains`` given, exactly that many trains are generated instead.
    Trains never overlap in time (each is followed by a gap of several
    periods), so side-peak counts add up train by train.

    Raises:
        TargetNotReached: if ``max_trains`` trains fall short of the target.
    """
    if workers is None:
        workers = os.cpu_count() or 1
    limit = n_trains if n_trains is not None else config.max_trains
    batches = []
    side = 0
    done = 0
    if limit > 0 and (n_trains is not None or config.target_side_peak > 0):
        for k, batch, count in iter_trains(config, workers=workers):
            batches.append(batch)
            side += count
            done = k + 1
            if n_trains is None and side >= config.target_side_peak:
                break
            if done >= limit:
                break
    if n_trains is None and side < config.target_side_peak:
        raise TargetNotReached(
            f"{side} side-peak coincidences after {done} trains, target {config.target_side_peak}"
        )
    return RunResult(RecordBatch.concat(batches), done, side, config)


# ---------------------------------------------------------------------------
# text format


def write_records(stream: TextIO, records: RecordBatch, meta: dict | None = None) -> None:
    """Write ``train_id<TAB>detector<TAB>timestamp_ns<TAB>origin`` lines.

    Optional metadata goes into ``#key=value`` comment lines after the header.
    """
    stream.write(RECORDS_HEADER + "\n")
    for key, value in (meta or {}).items():
        stream.write(f"#{key}={value}\n")
    for k, d, t, o in zip(records.train_id.tolist(), records.detector.tolist(), records.timestamp.tolist(), records.origin.tolist()):
        stream.write(f"{k}\t{DETECTOR_NAMES[d]}\t{t!r}\t{ORIGIN_NAMES[o]}\n")


def read_records(stream: TextIO) -> tuple[RecordBatch, dict]:
    """Parse the record format; returns the batch and any ``#key=value`` metadata."""
    header = stream.readline().rstrip("\n")
    if header != RECORDS_HEADER:
        raise ValueError(f"not a record file (header {header!r})")
    meta = {}
    ids, dets, times, origins = [], [], [], []
    for lineno, line in enumerate(stream, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields")
        try:
            ids.append(int(parts[0]))
            dets.append(DETECTOR_NAMES.index(parts[1]))
            times.append(float(parts[2]))
            origins.append(ORIGIN_NAMES.index(parts[3]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    batch = RecordBatch(
        np.array(ids, dtype=np.int64),
        np.array(dets, dtype=np.int8),
        np.array(times, dtype=float),
        np.array(origins, dtype=np.int8),
    )
    return batch, meta
