import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpdsense.channel import (ADULT_BPM_RANGE, CHILD_BPM_RANGE, SPLIT_ENVIRONMENTS, ConfigError, Label,
                              MultipathComponent, RecordingTooShort, ScenarioConfig, band_limited_noise,
                              breathing_waveform, link_sensitivities, make_scenario_bank,
                              subcarrier_frequencies, synth_csi)
from cpdsense.features import FeatureConfig, acf_matrix, extract_windows, most_sensitive_subcarrier
from cpdsense.seeding import derive_rng


def child(**kw):
    base = dict(class_label=Label.CHILD, child_state="sleeping", breathing_bpm=24.0, displacement_ns=0.2,
                dynamic_gain=0.1, duration_s=30.0, rng_seed=2)
    base.update(kw)
    return ScenarioConfig(**base)


def empty(**kw):
    base = dict(class_label=Label.EMPTY, dynamic_paths=(0, 0), duration_s=12.0, rng_seed=1)
    base.update(kw)
    return ScenarioConfig(**base)


# -- breathing waveform -------------------------------------------------------


def test_breathing_waveform_zero_at_origin():
    assert breathing_waveform(24, 0.3e-9, 0.0) == 0.0


def test_breathing_waveform_quarter_period_peak():
    # 24 breaths/min is a 2.5 s period: peak at 0.625 s, back to zero at 1.25 s
    assert breathing_waveform(24, 0.3e-9, 0.625) == pytest.approx(0.3e-9, rel=1e-12)
    assert breathing_waveform(24, 0.3e-9, 1.25) == pytest.approx(0.0, abs=1e-20)


@given(st.floats(1.0, 60.0), st.floats(0.0, 100.0))
def test_breathing_waveform_periodic(bpm, t):
    period = 60.0 / bpm
    assert breathing_waveform(bpm, 1.0, t) == pytest.approx(breathing_waveform(bpm, 1.0, t + period), abs=1e-9)


# -- configuration invariants -----------------------------------------------


def test_child_breathing_range_enforced():
    with pytest.raises(ConfigError):
        child(breathing_bpm=35.0)
    with pytest.raises(ConfigError):
        ScenarioConfig(class_label=Label.ADULT, breathing_bpm=25.0)


def test_empty_requires_no_dynamic_paths():
    with pytest.raises(ConfigError):
        ScenarioConfig(class_label=Label.EMPTY, dynamic_paths=(1, 2))


def test_negative_delay_rejected():
    with pytest.raises(ConfigError):
        MultipathComponent(1.0 + 0j, -1e-9)


def test_zero_subcarriers_rejected():
    with pytest.raises(ConfigError):
        empty(num_subcarriers_per_link=0)
    with pytest.raises(ConfigError):
        subcarrier_frequencies(0)


def test_subcarrier_grid_spans_band():
    f = subcarrier_frequencies(58)
    assert f.size == 58
    assert f[0] == pytest.approx(5e9 - 20e6)
    assert f[-1] == pytest.approx(5e9 + 20e6)
    assert np.allclose(np.diff(f), np.diff(f)[0])


def test_scenario_dict_round_trip():
    cfg = child(companion_child_bpm=None)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


# -- synthesis ---------------------------------------------------------------


def test_recording_shape_and_finite():
    cfg = child(duration_s=12.0)
    rec = synth_csi(cfg)
    assert rec.samples.shape == (12 * 30, 4, 58)
    assert np.all(np.isfinite(rec.samples))


def test_too_short_recording_rejected():
    with pytest.raises(RecordingTooShort):
        synth_csi(child(duration_s=9.0))


def test_identical_seeds_bit_identical():
    a = synth_csi(child()).samples
    b = synth_csi(child()).samples
    assert a.tobytes() == b.tobytes()


def test_different_seeds_differ():
    assert not np.array_equal(synth_csi(child()).samples, synth_csi(child(rng_seed=3)).samples)


def test_static_noiseless_is_constant_in_time():
    rec = synth_csi(empty(noise_power=0.0))
    assert np.array_equal(rec.samples, np.broadcast_to(rec.samples[:1], rec.samples.shape))


def test_empty_scene_motion_statistic_near_zero():
    rec = synth_csi(empty(duration_s=110.0))
    windows = extract_windows(rec, FeatureConfig(), max_windows=100)
    assert len(windows) == 100
    per_window = [w.motion_stats.mean() for w in windows]
    assert np.mean(np.abs(per_window)) < 0.05
    assert abs(windows[0].motion_stats[0]) < 0.1


def test_breathing_period_recovered():
    rec = synth_csi(child())
    fs = rec.sample_rate_hz
    # spectral oracle: strongest power-series tone inside the child breathing band
    g = np.abs(rec.samples[:, 0, :]) ** 2
    spec = (np.abs(np.fft.rfft(g - g.mean(axis=0), axis=0)) ** 2).sum(axis=1)
    freqs = np.fft.rfftfreq(g.shape[0], 1.0 / fs)
    band = (freqs >= CHILD_BPM_RANGE[0] / 60) & (freqs <= CHILD_BPM_RANGE[1] / 60)
    assert 1.0 / freqs[band][np.argmax(spec[band])] == pytest.approx(2.5, abs=0.2)
    # ACF of the most sensitive subcarrier peaks one breath later
    sample = acf_matrix(rec, 0.0, FeatureConfig())
    col = sample.link_block(0)[:, most_sensitive_subcarrier(sample, 0)]
    lo, hi = int(1.25 * fs), int(3.75 * fs)
    peak_lag = (lo + np.argmax(col[lo - 1:hi])) / fs
    assert peak_lag == pytest.approx(2.5, abs=0.2)


def test_noise_monotonically_lowers_motion_statistic():
    cfg = child()
    psi = [acf_matrix(synth_csi(cfg.replace(noise_power=p)), 0.0).motion_stats.mean()
           for p in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)]
    assert all(a > b for a, b in zip(psi, psi[1:]))


def test_link_sensitivity_ordering():
    sens = (1.0, 0.6, 0.3, 0.1)
    stats = [acf_matrix(synth_csi(child(per_link_sensitivity=sens, dynamic_paths=(2, 2),
                                        noise_power=1e-3, rng_seed=s)), 0.0).per_link_motion_stat
             for s in range(10)]
    mean = np.mean(stats, axis=0)
    assert all(a > b for a, b in zip(mean, mean[1:]))


def test_band_limited_noise_spectrum():
    x = band_limited_noise(derive_rng(0, "scenario", 9), 3000, 30.0, 2.0)
    spec = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(3000, 1 / 30.0)
    assert x.std() == pytest.approx(1.0)
    assert np.max(spec[freqs > 2.0]) < 1e-9 * np.max(spec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_bank_scenarios_finite_and_bounded(seed):
    for cfg in make_scenario_bank("train", 3, seed, num_subcarriers_per_link=8, duration_s=10.0):
        rec = synth_csi(cfg)
        assert np.all(np.isfinite(rec.samples))
        assert np.max(np.abs(rec.samples)) < 20.0


# -- scenario banks -----------------------------------------------------------


def test_bank_balanced():
    bank = make_scenario_bank("train", 300, 7)
    counts = {lab: sum(c.class_label is lab for c in bank) for lab in Label}
    assert set(counts.values()) == {100}
    uneven = make_scenario_bank("train", 301, 7)
    counts = [sum(c.class_label is lab for c in uneven) for lab in Label]
    assert max(counts) - min(counts) <= 1


def test_bank_deterministic():
    assert make_scenario_bank("val", 30, 4) == make_scenario_bank("val", 30, 4)
    assert make_scenario_bank("val", 30, 4) != make_scenario_bank("val", 30, 5)


def test_bank_label_invariants():
    for cfg in make_scenario_bank("train", 90, 1):
        if cfg.class_label is Label.EMPTY:
            assert cfg.dynamic_paths == (0, 0)
        elif cfg.class_label is Label.CHILD:
            assert CHILD_BPM_RANGE[0] <= cfg.breathing_bpm <= CHILD_BPM_RANGE[1]
            assert cfg.child_state in ("awake", "sleeping")
        else:
            assert ADULT_BPM_RANGE[0] <= cfg.breathing_bpm <= ADULT_BPM_RANGE[1]


def test_test_split_environment_disjoint():
    train_env, test_env = SPLIT_ENVIRONMENTS["train"], SPLIT_ENVIRONMENTS["test"]
    assert train_env["static_paths"][1] < test_env["static_paths"][0]
    assert train_env["delay_max_ns"][1] < test_env["delay_max_ns"][0]
    train = make_scenario_bank("train", 60, 3)
    test = make_scenario_bank("test", 60, 3)
    assert max(c.static_delay_ns[1] for c in train) < min(c.static_delay_ns[1] for c in test)
    assert max(c.static_paths[1] for c in train) < min(c.static_paths[0] for c in test)


def test_antenna_geometry_spread():
    def spread(name):
        rng = derive_rng(0, "scenario", 7)
        return np.mean([np.ptp(link_sensitivities(rng, name, 4)) for _ in range(200)])
    assert spread("C1") < spread("C3") < spread("C2")


def test_indoor_variant_is_larger():
    indoor = make_scenario_bank("train", 30, 0, environment="indoor")
    assert all(c.static_paths[0] >= 20 and c.static_delay_ns[1] >= 150 for c in indoor)
