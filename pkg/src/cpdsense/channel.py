"""Generative multipath channel simulator for in-cabin CSI.

A recording is the superposition, per Tx-Rx link and per subcarrier, of
time-invariant paths (cabin structure, seats), time-varying paths reflected
off an occupant, and circular complex Gaussian noise::

    H(t, f) = sum_static a_m exp(-j 2 pi f tau_m)
            + sum_dynamic a_n(t) exp(-j 2 pi f tau_n(t)) + n(t, f)

Dynamic delays are driven by a sinusoidal breathing displacement and, for
moving occupants, by band-limited Gaussian jitter.  All numeric ranges used by
:func:`make_scenario_bank` are tunable defaults chosen to look plausible for a
car cabin; they are not measured values.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_CARRIER_HZ = 5.0e9
DEFAULT_BANDWIDTH_HZ = 40.0e6
DEFAULT_WINDOW_S = 10.0

CHILD_BPM_RANGE = (20.0, 30.0)
ADULT_BPM_RANGE = (12.0, 20.0)

ANTENNA_CONFIGS = ("C1", "C2", "C3")
CHILD_STATES = ("awake", "sleeping", "n/a")
ENVIRONMENTS = ("car", "indoor")


class Label(enum.IntEnum):
    """Class labels, in the fixed order used by confusion matrices."""

    EMPTY = 0
    ADULT = 1
    CHILD = 2

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


class ConfigError(ValueError):
    """A scenario configuration violates its invariants."""


class RecordingTooShort(ValueError):
    """Requested duration cannot hold one ACF window."""


# ---------------------------------------------------------------------------
# multipath components


@dataclass(frozen=True)
class Breathing:
    bpm: float
    displacement_scale: float  # seconds of delay swing
    phase_s: float = 0.0

    def __post_init__(self):
        if self.bpm <= 0:
            raise ConfigError("breathing rate must be positive")


@dataclass(frozen=True)
class Motion:
    bandwidth_hz: float
    intensity: float  # seconds of delay jitter (std)

    def __post_init__(self):
        if self.intensity < 0:
            raise ConfigError("motion intensity must be non-negative")


@dataclass(frozen=True)
class MultipathComponent:
    amplitude: complex
    delay: float
    kind: str = "static"  # static | dynamic
    modulation: Breathing | Motion | tuple | None = None

    def __post_init__(self):
        if self.delay < 0:
            raise ConfigError("path delay must be non-negative")
        if self.kind not in ("static", "dynamic"):
            raise ConfigError(f"unknown path kind {self.kind!r}")

    @property
    def modulations(self) -> tuple:
        if self.modulation is None:
            return ()
        if isinstance(self.modulation, tuple):
            return self.modulation
        return (self.modulation,)


def breathing_waveform(bpm: float, displacement_scale: float, t):
    """Delay offset of a breathing chest: ``s * sin(2 pi (bpm/60) t)``."""
    return displacement_scale * np.sin(2.0 * np.pi * (bpm / 60.0) * np.asarray(t, dtype=float))


def band_limited_noise(rng: np.random.Generator, n: int, sample_rate_hz: float, bandwidth_hz: float) -> np.ndarray:
    """Unit-variance Gaussian process with a brick-wall spectrum below ``bandwidth_hz``."""
    if n == 0:
        return np.zeros(0)
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    spec[freqs > bandwidth_hz] = 0.0
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=n)
    std = x.std()
    return x / std if std > 0 else x


def burst_gate(rng: np.random.Generator, t: np.ndarray, duty_cycle: float, period_s: float = 5.0) -> np.ndarray:
    """0/1 activity gate that is on for ``duty_cycle`` of every period, random phase."""
    if duty_cycle >= 1.0:
        return np.ones_like(t)
    if duty_cycle <= 0.0:
        return np.zeros_like(t)
    phase = rng.uniform(0.0, period_s)
    return (np.mod(t + phase, period_s) < duty_cycle * period_s).astype(float)


def subcarrier_frequencies(n: int, carrier_hz: float = DEFAULT_CARRIER_HZ,
                           bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ) -> np.ndarray:
    if n <= 0:
        raise ConfigError("need at least one subcarrier")
    if n == 1:
        return np.array([carrier_hz])
    return carrier_hz + np.linspace(-bandwidth_hz / 2.0, bandwidth_hz / 2.0, n)


# ---------------------------------------------------------------------------
# scenario configuration


@dataclass(frozen=True)
class ScenarioConfig:
    class_label: Label
    child_state: str = "n/a"
    antenna_config: str = "C1"
    num_links: int = 4
    num_subcarriers_per_link: int = 58
    sample_rate_hz: float = 30.0
    duration_s: float = 12.0
    noise_power: float = 1e-4
    static_paths: tuple[int, int] = (8, 20)
    static_delay_ns: tuple[float, float] = (0.0, 100.0)
    dynamic_paths: tuple[int, int] = (1, 4)
    breathing_bpm: float = 0.0
    displacement_ns: float = 0.0
    dynamic_gain: float = 0.0
    motion_intensity: float = 0.0  # ns of delay jitter (std) while moving
    motion_bandwidth_hz: float = 0.0
    motion_duty_cycle: float = 1.0
    companion_child_bpm: float | None = None  # child breathing alongside an adult
    per_link_sensitivity: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    environment: str = "car"
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_label", Label.parse(self.class_label))
        object.__setattr__(self, "static_paths", tuple(int(v) for v in self.static_paths))
        object.__setattr__(self, "static_delay_ns", tuple(float(v) for v in self.static_delay_ns))
        object.__setattr__(self, "dynamic_paths", tuple(int(v) for v in self.dynamic_paths))
        object.__setattr__(self, "per_link_sensitivity", tuple(float(v) for v in self.per_link_sensitivity))
        self.validate()

    def validate(self) -> None:
        label = self.class_label
        if self.antenna_config not in ANTENNA_CONFIGS:
            raise ConfigError(f"unknown antenna config {self.antenna_config!r}")
        if self.child_state not in CHILD_STATES:
            raise ConfigError(f"unknown child state {self.child_state!r}")
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.environment!r}")
        if self.num_links < 1:
            raise ConfigError("need at least one link")
        if self.num_subcarriers_per_link < 1:
            raise ConfigError("zero subcarriers")
        if self.sample_rate_hz <= 0 or self.duration_s <= 0:
            raise ConfigError("sample rate and duration must be positive")
        if self.noise_power < 0:
            raise ConfigError("noise power must be non-negative")
        if len(self.per_link_sensitivity) != self.num_links:
            raise ConfigError("per_link_sensitivity needs one entry per link")
        if any(not 0.0 <= s <= 1.0 for s in self.per_link_sensitivity):
            raise ConfigError("link sensitivities must lie in [0, 1]")
        for lo, hi in (self.static_paths, self.dynamic_paths):
            if lo < 0 or hi < lo:
                raise ConfigError("path count ranges must satisfy 0 <= lo <= hi")
        if self.static_delay_ns[0] < 0 or self.static_delay_ns[1] < self.static_delay_ns[0]:
            raise ConfigError("static delay range must satisfy 0 <= lo <= hi")
        if self.motion_intensity < 0:
            raise ConfigError("motion intensity must be non-negative")
        if label is Label.EMPTY:
            if self.dynamic_paths != (0, 0):
                raise ConfigError("an empty cabin has no dynamic paths")
        else:
            lo, hi = CHILD_BPM_RANGE if label is Label.CHILD else ADULT_BPM_RANGE
            if not lo <= self.breathing_bpm <= hi:
                raise ConfigError(
                    f"{label.name.lower()} breathing rate {self.breathing_bpm} outside [{lo}, {hi}] BPM")
        if label is not Label.CHILD and self.child_state != "n/a":
            raise ConfigError("child_state only applies to child scenarios")
        if self.companion_child_bpm is not None:
            if label is not Label.ADULT:
                raise ConfigError("a companion child is only modelled alongside an adult")
            lo, hi = CHILD_BPM_RANGE
            if not lo <= self.companion_child_bpm <= hi:
                raise ConfigError("companion child breathing rate out of range")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def num_features(self) -> int:
        return self.num_links * self.num_subcarriers_per_link

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_label"] = self.class_label.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class CsiRecording:
    samples: np.ndarray  # complex [time, link, subcarrier]
    sample_rate_hz: float
    scenario: ScenarioConfig
    carrier_hz: float = DEFAULT_CARRIER_HZ
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    recording_id: str = ""

    def __post_init__(self):
        if self.samples.ndim != 3:
            raise ValueError("samples must be [time, link, subcarrier]")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("recording contains non-finite samples")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_links(self) -> int:
        return self.samples.shape[1]

    @property
    def num_subcarriers(self) -> int:
        return self.samples.shape[2]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz

    @property
    def label(self) -> Label:
        return self.scenario.class_label


# ---------------------------------------------------------------------------
# synthesis


def _static_components(rng: np.random.Generator, config: ScenarioConfig) -> list[MultipathComponent]:
    lo, hi = config.static_paths
    count = int(rng.integers(lo, hi + 1))
    dlo, dhi = config.static_delay_ns
    mags = 10.0 ** rng.uniform(-1.0, 0.0, count)  # log-uniform in [0.1, 1]
    phases = rng.uniform(0.0, 2.0 * np.pi, count)
    delays = rng.uniform(dlo, dhi, count) * 1e-9
    return [MultipathComponent(complex(m * np.exp(1j * p)), float(d))
            for m, p, d in zip(mags, phases, delays)]


def _dynamic_components(rng: np.random.Generator, config: ScenarioConfig, sensitivity: float,
                        breathing: Breathing | None, motion: Motion | None,
                        gain: float) -> list[MultipathComponent]:
    lo, hi = config.dynamic_paths
    count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    out = []
    for _ in range(count):
        mag = gain * sensitivity * rng.uniform(0.5, 1.0)
        amp = complex(mag * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi)))
        delay = rng.uniform(5.0, 50.0) * 1e-9
        mods = []
        if breathing is not None:
            # each reflecting surface of the torso moves a slightly different amount
            mods.append(dataclasses.replace(
                breathing, displacement_scale=breathing.displacement_scale * rng.uniform(0.6, 1.0)))
        if motion is not None:
            mods.append(dataclasses.replace(motion, intensity=motion.intensity * rng.uniform(0.6, 1.0)))
        out.append(MultipathComponent(amp, float(delay), "dynamic", tuple(mods)))
    return out


def _evaluate(freqs: np.ndarray, t: np.ndarray, static: list[MultipathComponent],
              dynamic: list[MultipathComponent], motion_track: np.ndarray | None,
              static_scale: float) -> np.ndarray:
    h = np.zeros((t.size, freqs.size), dtype=complex)
    if static:
        amps = np.array([c.amplitude for c in static])
        delays = np.array([c.delay for c in static])
        hs = (amps[:, None] * np.exp(-2j * np.pi * freqs[None, :] * delays[:, None])).sum(axis=0)
        h += static_scale * hs[None, :]
    for comp in dynamic:
        delay_t = np.full(t.size, comp.delay)
        amp_t = np.full(t.size, comp.amplitude, dtype=complex)
        for mod in comp.modulations:
            if isinstance(mod, Breathing):
                delay_t = delay_t + breathing_waveform(mod.bpm, mod.displacement_scale, t + mod.phase_s)
            elif isinstance(mod, Motion) and motion_track is not None:
                delay_t = delay_t + mod.intensity * motion_track
                amp_t = amp_t * (1.0 + 0.25 * np.tanh(motion_track))
        h += amp_t[:, None] * np.exp(-2j * np.pi * freqs[None, :] * delay_t[:, None])
    return h


def synth_csi(config: ScenarioConfig, min_duration_s: float = DEFAULT_WINDOW_S,
              recording_id: str = "") -> CsiRecording:
    """Simulate one labelled CSI recording.

    Path geometry, occupant dynamics and receiver noise come from three
    independent streams of ``config.rng_seed``, so changing ``noise_power``
    leaves the geometry and the noise pattern (up to scale) untouched.
    """
    config.validate()
    if config.duration_s + 1e-12 < min_duration_s:
        raise RecordingTooShort(
            f"duration {config.duration_s}s shorter than one {min_duration_s}s ACF window")
    n = config.num_samples
    t = np.arange(n) / config.sample_rate_hz
    freqs = subcarrier_frequencies(config.num_subcarriers_per_link)

    geo_rng = derive_rng(config.rng_seed, "scenario", 0)
    dyn_rng = derive_rng(config.rng_seed, "scenario", 1)
    noise_rng = derive_rng(config.rng_seed, "scenario", 2)

    label = config.class_label
    breathing = motion = None
    motion_track = None
    companion = None
    if label is not Label.EMPTY:
        breathing = Breathing(config.breathing_bpm, config.displacement_ns * 1e-9,
                              phase_s=float(dyn_rng.uniform(0.0, 60.0 / config.breathing_bpm)))
        if config.motion_intensity > 0 and config.motion_bandwidth_hz > 0:
            motion = Motion(config.motion_bandwidth_hz, config.motion_intensity * 1e-9)
            gate = burst_gate(dyn_rng, t, config.motion_duty_cycle)
            motion_track = band_limited_noise(dyn_rng, n, config.sample_rate_hz,
                                              config.motion_bandwidth_hz) * gate
        if config.companion_child_bpm is not None:
            companion = Breathing(config.companion_child_bpm, 0.6 * config.displacement_ns * 1e-9,
                                  phase_s=float(dyn_rng.uniform(0.0, 60.0 / config.companion_child_bpm)))

    samples = np.empty((n, config.num_links, freqs.size), dtype=complex)
    for link in range(config.num_links):
        sens = config.per_link_sensitivity[link]
        static = _static_components(geo_rng, config)
        dynamic = _dynamic_components(geo_rng, config, sens, breathing, motion, config.dynamic_gain)
        if companion is not None:
            child_cfg = config.replace(dynamic_paths=(1, 2))
            dynamic += _dynamic_components(geo_rng, child_cfg, sens, companion, None,
                                           0.4 * config.dynamic_gain)
        # normalise the static response of every link to unit RMS across subcarriers
        hs = _evaluate(freqs, t[:1], static, [], None, 1.0)[0]
        rms = math.sqrt(float(np.mean(np.abs(hs) ** 2))) if static else 0.0
        scale = 1.0 / rms if rms > 0 else 1.0
        samples[:, link, :] = _evaluate(freqs, t, static, dynamic, motion_track, scale)

    if config.noise_power > 0:
        sigma = math.sqrt(config.noise_power / 2.0)
        noise = noise_rng.standard_normal(samples.shape) + 1j * noise_rng.standard_normal(samples.shape)
        samples = samples + sigma * noise

    return CsiRecording(samples=samples, sample_rate_hz=config.sample_rate_hz, scenario=config,
                        recording_id=recording_id)


# ---------------------------------------------------------------------------
# scenario banks

# Static-environment parameter ranges per split.  Test ranges are disjoint from
# train/val ranges so that test cabins are never seen during training.
SPLIT_ENVIRONMENTS = {
    "train": {"static_paths": (8, 14), "delay_max_ns": (20.0, 60.0)},
    "val": {"static_paths": (8, 14), "delay_max_ns": (20.0, 60.0)},
    "test": {"static_paths": (15, 20), "delay_max_ns": (70.0, 100.0)},
}
INDOOR_ENVIRONMENT = {"static_paths": (20, 60), "delay_max_ns": (150.0, 300.0)}

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def link_sensitivities(rng: np.random.Generator, antenna_config: str, num_links: int,
                       num_rx: int = 2) -> tuple[float, ...]:
    """Per-link gain of the occupant reflection for an antenna layout.

    C1 (colocated) gives nearly equal links, C2 (antennas in the four corners)
    splits links into near and far groups, C3 (hybrid) sits in between.
    Spreads are bounded so that C1 < C3 < C2 always holds.
    """
    if antenna_config == "C1":
        return tuple(float(v) for v in rng.uniform(0.85, 1.0, num_links))
    if antenna_config == "C3":
        return tuple(float(v) for v in rng.uniform(0.65, 1.0, num_links))
    num_rx = num_rx if num_links % num_rx == 0 else 1
    num_tx = num_links // num_rx
    near_tx = int(rng.integers(0, num_tx))
    vals = []
    for link in range(num_links):
        if link // num_rx == near_tx:
            vals.append(float(rng.uniform(0.8, 1.0)))
        else:
            vals.append(float(rng.uniform(0.1, 0.4)))
    return tuple(vals)


def _class_sequence(count: int, rng: np.random.Generator) -> list[Label]:
    labels = [Label(i % 3) for i in range(count)]
    order = rng.permutation(count)
    return [labels[i] for i in order]


def make_scenario_bank(split: str, count: int, seed: int, *, environment: str = "car",
                       num_links: int = 4, num_subcarriers_per_link: int = 58,
                       sample_rate_hz: float = 30.0, duration_s: float = 12.0) -> list[ScenarioConfig]:
    """Draw ``count`` class-balanced scenarios for one dataset split.

    Class counts differ by at most one.  ``environment="indoor"`` produces the
    larger-room variant used for presence pretraining (more paths, wider delay
    spread, stronger motion; nobody walks).
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if split not in SPLIT_ENVIRONMENTS:
        raise ValueError(f"unknown split {split!r}")
    if environment not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {environment!r}")
    env = INDOOR_ENVIRONMENT if environment == "indoor" else SPLIT_ENVIRONMENTS[split]
    env_code = 1 if environment == "indoor" else 0
    rng = derive_rng(seed, "data", _SPLIT_CODES[split], env_code)
    motion_boost = 1.5 if environment == "indoor" else 1.0

    bank = []
    for i, label in enumerate(_class_sequence(count, rng)):
        antenna = ANTENNA_CONFIGS[int(rng.integers(0, 3))]
        common = dict(
            class_label=label,
            antenna_config=antenna,
            num_links=num_links,
            num_subcarriers_per_link=num_subcarriers_per_link,
            sample_rate_hz=sample_rate_hz,
            duration_s=duration_s,
            noise_power=float(10.0 ** rng.uniform(-5.0, -3.0)),
            static_paths=env["static_paths"],
            static_delay_ns=(0.0, float(rng.uniform(*env["delay_max_ns"]))),
            per_link_sensitivity=link_sensitivities(rng, antenna, num_links),
            environment=environment,
            rng_seed=int(rng.integers(0, 2**63 - 1)),
        )
        if label is Label.EMPTY:
            cfg = ScenarioConfig(dynamic_paths=(0, 0), **common)
        elif label is Label.CHILD:
            state = "awake" if rng.random() < 0.5 else "sleeping"
            moving = state == "awake"
            cfg = ScenarioConfig(
                child_state=state,
                breathing_bpm=float(rng.uniform(*CHILD_BPM_RANGE)),
                displacement_ns=float(rng.uniform(0.1, 0.25)),
                dynamic_gain=float(rng.uniform(0.05, 0.15)) * motion_boost,
                motion_intensity=float(rng.uniform(0.05, 0.15)) * motion_boost if moving else 0.0,
                motion_bandwidth_hz=float(rng.uniform(1.5, 3.0)) if moving else 0.0,
                motion_duty_cycle=0.4,
                **common,
            )
        else:
            fidget = rng.random() < 0.5
            cfg = ScenarioConfig(
                breathing_bpm=float(rng.uniform(*ADULT_BPM_RANGE)),
                displacement_ns=float(rng.uniform(0.25, 0.5)),
                dynamic_gain=float(rng.uniform(0.15, 0.4)) * motion_boost,
                motion_intensity=float(rng.uniform(0.02, 0.06)) * motion_boost if fidget else 0.0,
                motion_bandwidth_hz=float(rng.uniform(0.2, 0.5)) if fidget else 0.0,
                motion_duty_cycle=1.0,
                companion_child_bpm=float(rng.uniform(*CHILD_BPM_RANGE)) if rng.random() < 0.3 else None,
                **common,
            )
        bank.append(cfg)
    logger.debug("scenario bank %s/%s: %d configs", split, environment, len(bank))
    return bank
