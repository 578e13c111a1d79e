import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from photonbeat.core_model import BeatModel, Polarization, Wavepacket, cross_correlation, khz_to_angular, mhz_to_angular
from photonbeat.montecarlo import (
    ConfigError,
    DetectionRecord,
    ExperimentConfig,
    Mode,
    RecordBatch,
    TargetNotReached,
    gate_pattern,
    read_records,
    run,
    sample_pair,
    sample_pairs,
    side_peak_count,
    simulate_train,
    write_records,
)

DELTA = mhz_to_angular(3.0)
D_OMEGA = khz_to_angular(690.0)
WP = Wavepacket(0.0, 450.0, 0.0)


def split_taus(det1, t1, det2, t2):
    """Signed t_D - t_C of the pairs that hit different detectors."""
    split = det1 != det2
    tau = t2[split] - t1[split]
    return np.where(det1[split] == 0, tau, -tau)


def model_cdf(model, lo=-6000.0, hi=6000.0, n=400_001):
    grid = np.linspace(lo, hi, n)
    dens = cross_correlation(model, Polarization.PARALLEL, grid)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    return lambda x: np.interp(x, grid, cdf)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"emission_prob": 1.5}, {"eta_a": -0.1}, {"eta_b": 2.0}, {"v0": 1.2},
        {"gate_open": 5300.0}, {"gate_open": 0.0}, {"bin_width": 0.0}, {"photons_per_train": 0},
        {"dark_rate": -1.0}, {"tau_p": 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kwargs)

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.period == 5300.0
        assert cfg.bin_width == 48.0
        assert cfg.target_side_peak == 980
        assert cfg.gate_open == pytest.approx(2650.0)
        assert cfg.mode is Mode.TWO_PATH_PARALLEL

    def test_mode_from_string(self):
        assert ExperimentConfig(mode="single_path").mode is Mode.SINGLE_PATH


class TestPairSampler:
    def test_identical_photons_coalesce(self):
        rng = np.random.default_rng(1)
        d1, _, d2, _ = sample_pairs(rng, WP, WP, 1.0, np.zeros(100_000))
        assert np.count_nonzero(d1 != d2) == 0
        # both detectors used equally
        assert abs(d1.mean() - 0.5) < 3 * math.sqrt(0.25 / d1.size)

    def test_distinguishable_limit(self):
        rng = np.random.default_rng(2)
        n = 100_000
        d1, _, d2, _ = sample_pairs(rng, WP, WP, 0.0, np.zeros(n))
        frac = np.mean(d1 != d2)
        assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_times_ordered(self):
        rng = np.random.default_rng(3)
        _, t1, _, t2 = sample_pairs(rng, WP, WP, 1.0, np.full(1000, DELTA))
        assert np.all(t1 <= t2)

    def test_single_pair_form(self):
        d1, t1, d2, t2 = sample_pair(np.random.default_rng(4), WP, WP, 1.0, 0.0)
        assert d1 == d2 and d1 in ("C", "D") and t1 <= t2

    def test_beat_histogram_chi2(self):
        rng = np.random.default_rng(5)
        tau = split_taus(*sample_pairs(rng, WP, WP, 1.0, np.full(1_000_000, DELTA)))
        model = BeatModel(1.0, 450.0, DELTA, 0.0, 1.0)
        edges = np.arange(-1920.0, 1920.0 + 1, 48.0)
        counts, _ = np.histogram(tau, edges)
        cdf = model_cdf(model)
        expected = counts.sum() * np.diff(cdf(edges)) / (cdf(edges[-1]) - cdf(edges[0]))
        keep = expected > 5
        chi2 = ((counts[keep] - expected[keep]) ** 2 / expected[keep]).sum()
        dof = keep.sum() - 1
        assert chi2 / dof < 1.5

    def test_beat_ks(self):
        rng = np.random.default_rng(6)
        tau = split_taus(*sample_pairs(rng, WP, WP, 1.0, np.full(1_000_000, DELTA)))
        cdf = model_cdf(BeatModel(1.0, 450.0, DELTA, 0.0, 1.0))
        assert stats.kstest(tau, cdf).pvalue > 0.01

    def test_jitter_average_gives_dephasing(self):
        # Gaussian relative detuning reproduces the exp(-(d_omega tau / 2)^2) envelope
        rng = np.random.default_rng(7)
        rel = rng.normal(DELTA, D_OMEGA / math.sqrt(2.0), 1_000_000)
        tau = split_taus(*sample_pairs(rng, WP, WP, 1.0, rel))
        cdf = model_cdf(BeatModel(1.0, 450.0, DELTA, D_OMEGA, 1.0))
        assert stats.kstest(tau, cdf).pvalue > 0.01
        # a model without dephasing must be rejected at this sample size
        assert stats.kstest(tau, model_cdf(BeatModel(1.0, 450.0, DELTA, 0.0, 1.0))).pvalue < 1e-6

    def test_split_fraction_matches_model(self):
        # P(split) = integral of the two cross channels = (1 - v0 * <cos>)/2
        rng = np.random.default_rng(8)
        n = 400_000
        d1, _, d2, _ = sample_pairs(rng, WP, WP, 0.6, np.full(n, DELTA))
        model = BeatModel(1.0, 450.0, DELTA, 0.0, 0.6)
        grid = np.linspace(-6000, 6000, 200_001)
        expected = np.trapezoid(cross_correlation(model, Polarization.PARALLEL, grid), grid)
        frac = np.mean(d1 != d2)
        assert abs(frac - expected) < 4 * math.sqrt(expected * (1 - expected) / n)


def _slot_position(batch, cfg):
    rel = batch.timestamp - batch.train_id * cfg.train_stride
    slot = np.floor(rel / cfg.period)
    return slot, rel - slot * cfg.period


class TestSimulation:
    def test_deterministic(self):
        cfg = ExperimentConfig(delta=DELTA, delta_omega=D_OMEGA, dark_rate=1e-4, seed=11)
        a = run(cfg, n_trains=50)
        b = run(cfg, n_trains=50)
        assert a.records == b.records
        out_a, out_b = io.StringIO(), io.StringIO()
        write_records(out_a, a.records)
        write_records(out_b, b.records)
        assert out_a.getvalue() == out_b.getvalue()

    def test_different_seeds_differ(self):
        cfg = ExperimentConfig(seed=1)
        assert run(cfg, n_trains=20).records != run(cfg.replace(seed=2), n_trains=20).records

    def test_trains_independent_of_order(self):
        cfg = ExperimentConfig(dark_rate=1e-4, seed=3)
        forward = [simulate_train(cfg, k) for k in range(10)]
        backward = [simulate_train(cfg, k) for k in reversed(range(10))][::-1]
        for a, b in zip(forward, backward):
            assert a == b
        merged = RecordBatch.concat(forward).sorted()
        shuffled = RecordBatch.concat([forward[i] for i in (3, 7, 0, 9, 1, 5, 2, 8, 6, 4)]).sorted()
        assert merged == shuffled
        assert run(cfg, n_trains=10).records == merged

    def test_parallel_workers_match_serial(self):
        cfg = ExperimentConfig(dark_rate=1e-4, seed=4)
        assert run(cfg, n_trains=600, workers=2).records == run(cfg, n_trains=600, workers=1).records

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**63 - 1), gate_frac=st.floats(0.1, 0.95), dark=st.floats(0.0, 1e-3))
    def test_no_detection_outside_gate(self, seed, gate_frac, dark):
        cfg = ExperimentConfig(seed=seed, gate_open=gate_frac * 5300.0, dark_rate=dark)
        batch = run(cfg, n_trains=5).records
        (lo, hi), = gate_pattern(cfg)
        slot, pos = _slot_position(batch, cfg)
        assert np.all((pos >= lo - 1e-6) & (pos < hi + 1e-6))
        assert np.all((slot >= 0) & (slot < cfg.n_slots))

    def test_records_sorted(self):
        batch = run(ExperimentConfig(dark_rate=1e-4), n_trains=30).records
        assert batch.is_sorted()

    def test_single_path_antibunching(self):
        cfg = ExperimentConfig(mode=Mode.SINGLE_PATH, seed=5)
        batch = run(cfg, n_trains=300).records
        tc, td = batch.times("C"), batch.times("D")
        close = np.abs(td[None, :] - tc[:, None]) < cfg.period / 2
        assert close.sum() == 0
        assert side_peak_count(batch, cfg.period) > 0

    def test_parallel_coalescence(self):
        cfg = ExperimentConfig(mode=Mode.TWO_PATH_PARALLEL, v0=1.0, delta=0.0, delta_omega=0.0, seed=6)
        batch = run(cfg, n_trains=300).records
        tc, td = batch.times("C"), batch.times("D")
        assert (np.abs(td[None, :] - tc[:, None]) < cfg.period / 2).sum() == 0

    def test_perpendicular_has_central_peak(self):
        cfg = ExperimentConfig(mode=Mode.TWO_PATH_PERPENDICULAR, seed=7)
        batch = run(cfg, n_trains=300).records
        tc, td = batch.times("C"), batch.times("D")
        assert (np.abs(td[None, :] - tc[:, None]) < cfg.period / 2).sum() > 100

    def test_stops_at_target(self):
        cfg = ExperimentConfig(target_side_peak=200, seed=8)
        result = run(cfg)
        assert result.side_peak_count >= 200
        # one train fewer would not have reached it
        shorter = run(cfg, n_trains=result.n_trains - 1)
        assert shorter.side_peak_count < 200
        assert side_peak_count(result.records, cfg.period) == result.side_peak_count

    def test_target_not_reached(self):
        cfg = ExperimentConfig(emission_prob=0.0, target_side_peak=10, max_trains=20)
        with pytest.raises(TargetNotReached):
            run(cfg)

    def test_dark_counts_only_when_no_photons(self):
        cfg = ExperimentConfig(emission_prob=0.0, dark_rate=1e-3, seed=9)
        batch = run(cfg, n_trains=200).records
        assert np.all(batch.origin == 1)
        expected = 200 * cfg.n_slots * 2 * cfg.dark_rate * cfg.gate_open
        assert abs(len(batch) - expected) < 4 * math.sqrt(expected)


# ---------------------------------------------------------------------------
# peak ratio: brute-force enumeration of routings, losses and detector choices


def enumerate_peaks(n, eta_a, eta_b):
    """Exact expected central and one-side C x D pair counts for a perpendicular train."""
    central = side = 0.0
    outcomes = [("lost", None), ("A", eta_a), ("B", eta_b)]
    for route in itertools.product(range(3), repeat=n):
        weight = 1.0
        slots = []
        for k, r in enumerate(route):
            if r == 0:
                weight *= 0.5 * (1 - eta_a) + 0.5 * (1 - eta_b)
            else:
                weight *= 0.5 * outcomes[r][1]
                slots.append(k + 1 if r == 1 else k)
        if weight == 0.0 or len(slots) < 2:
            continue
        c_pairs = s_pairs = 0.0
        for dets in itertools.product((0, 1), repeat=len(slots)):
            for i, j in itertools.permutations(range(len(slots)), 2):
                if dets[i] == 0 and dets[j] == 1:
                    lag = slots[j] - slots[i]
                    if lag == 0:
                        c_pairs += 1
                    elif lag == 1:
                        s_pairs += 1
        norm = 2 ** len(slots)
        central += weight * c_pairs / norm
        side += weight * s_pairs / norm
    return central, side


def finite_train_ratio(n, r):
    return ((n - 1) * r * r + (n - 2) * r + (n - 1)) / (2 * (n - 1) * r)


@pytest.mark.parametrize("n,eta_a,eta_b", [(2, 1.0, 1.0), (4, 1.0, 1.0), (5, 0.38, 1.0), (6, 0.7, 0.9)])
def test_enumeration_matches_closed_form(n, eta_a, eta_b):
    central, side = enumerate_peaks(n, eta_a, eta_b)
    assert side / central == pytest.approx(finite_train_ratio(n, eta_a / eta_b), rel=1e-12)


def test_closed_form_limits():
    assert finite_train_ratio(10_000_000, 1.0) == pytest.approx(1.5, abs=1e-6)
    assert finite_train_ratio(10_000_000, 0.38) == pytest.approx((0.38**2 + 0.38 + 1) / 0.76, abs=1e-6)


@pytest.mark.parametrize("eta_a", [1.0, 0.38])
def test_simulated_ratio_matches_enumeration(eta_a):
    n = 5
    cfg = ExperimentConfig(mode=Mode.TWO_PATH_PERPENDICULAR, photons_per_train=n, eta_a=eta_a, seed=10)
    batch = run(cfg, n_trains=15_000).records
    tc, td = batch.times("C"), batch.times("D")
    central = np.searchsorted(td, tc + cfg.period / 2) - np.searchsorted(td, tc - cfg.period / 2)
    c_count = central.sum()
    s_count = side_peak_count(batch, cfg.period) / 2
    exp_c, exp_s = enumerate_peaks(n, eta_a, 1.0)
    ratio = s_count / c_count
    err = ratio * math.sqrt(1 / s_count + 1 / c_count)
    assert abs(ratio - exp_s / exp_c) < 4 * err
    # absolute rates agree as well
    assert abs(c_count - 15_000 * exp_c) < 4 * math.sqrt(15_000 * exp_c)


class TestRecordFormat:
    def test_round_trip(self):
        batch = run(ExperimentConfig(dark_rate=1e-4, seed=12), n_trains=20).records
        buf = io.StringIO()
        write_records(buf, batch, {"n_trains": 20, "period_ns": 5300.0})
        text = buf.getvalue()
        assert text.startswith("#photon-beat-records v1\n")
        back, meta = read_records(io.StringIO(text))
        assert back == batch
        assert meta == {"n_trains": "20", "period_ns": "5300.0"}

    def test_from_records(self):
        recs = [DetectionRecord(0, "C", 1.5, "photon"), DetectionRecord(0, "D", 2.5, "dark")]
        batch = RecordBatch.from_records(recs)
        assert list(batch) == recs

    @pytest.mark.parametrize("text", ["garbage\n", "#photon-beat-records v1\n0\tX\t1.0\tphoton\n",
                                      "#photon-beat-records v1\n0\tC\t1.0\n"])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            read_records(io.StringIO(text))
