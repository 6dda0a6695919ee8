"""Per-subcarrier autocorrelation features.

The classifier never sees raw CSI.  Each subcarrier's power series
``G(t) = |H(t)|^2`` over a window is turned into its normalised
autocorrelation at lags ``1 .. l`` and the columns of all subcarriers of all
links are stacked into an ``l x N_s`` matrix.  Static multipath only shifts
the mean of ``G`` and is removed by mean subtraction, which is what makes the
feature largely independent of the cabin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .channel import CsiRecording, Label

logger = logging.getLogger(__name__)

ACF_EPS = 1e-6


class DegenerateSeries(ValueError):
    """The power series has zero variance (a dead or perfectly static subcarrier)."""


class AllStatic(ValueError):
    """No subcarrier carries a positive motion statistic."""


class WindowOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    window_s: float = 10.0
    stride_s: float = 1.0
    num_lags: int = 150

    def window_samples(self, sample_rate_hz: float) -> int:
        return int(round(self.window_s * sample_rate_hz))

    def stride_samples(self, sample_rate_hz: float) -> int:
        return max(1, int(round(self.stride_s * sample_rate_hz)))


@dataclass
class AcfSample:
    """One classifier input: ACF matrix ``[lag 1..l, subcarrier]`` plus metadata.

    Columns are link-major (all subcarriers of link 0, then link 1, ...).
    Row ``i`` holds the autocorrelation at lag ``(i + 1) * lag_step_s``.
    """

    matrix: np.ndarray
    lag_step_s: float
    label: Label
    num_links: int
    per_link_motion_stat: np.ndarray
    window_start_s: float = 0.0
    source: str = ""
    dead_subcarriers: tuple[int, ...] = ()
    provenance: str = "original"
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        self.label = Label.parse(self.label)
        self.per_link_motion_stat = np.asarray(self.per_link_motion_stat, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("ACF matrix must be 2-D")
        if self.matrix.shape[1] % self.num_links:
            raise ValueError("feature width must be a multiple of the link count")

    @property
    def num_lags(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_features(self) -> int:
        return self.matrix.shape[1]

    @property
    def subcarriers_per_link(self) -> int:
        return self.matrix.shape[1] // self.num_links

    @property
    def motion_stats(self) -> np.ndarray:
        """psi_f for every column: the ACF at the first lag."""
        return self.matrix[0]

    def link_block(self, link: int) -> np.ndarray:
        s = self.subcarriers_per_link
        return self.matrix[:, link * s:(link + 1) * s]


def power_response(h) -> np.ndarray:
    """Elementwise ``|H|^2``."""
    h = np.asarray(h)
    if np.iscomplexobj(h):
        return h.real * h.real + h.imag * h.imag
    return h.astype(float) ** 2


def _is_degenerate(centered: np.ndarray, series: np.ndarray) -> np.ndarray:
    # exact-constant series, or deviations at the level of float rounding of the mean
    scale = np.max(np.abs(series), axis=0)
    spread = np.max(np.abs(centered), axis=0)
    return spread <= 1e-12 * np.maximum(scale, np.finfo(float).tiny)


def _acf_full(g: np.ndarray, num_lags: int) -> tuple[np.ndarray, np.ndarray]:
    """Biased ACF at lags 0..num_lags for every column of ``g`` (time on axis 0)."""
    n = g.shape[0]
    centered = g - g.mean(axis=0)
    degenerate = _is_degenerate(centered, g)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(centered, n=nfft, axis=0)
    acov = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, n=nfft, axis=0)[:num_lags + 1] / n
    var = acov[0].copy()
    var[degenerate] = 1.0
    rho = acov / var
    rho[:, degenerate] = 0.0
    return rho, degenerate


def acf(g, num_lags: int, include_zero: bool = False) -> np.ndarray:
    """Normalised, mean-subtracted, divide-by-T autocorrelation of a real series.

    Returns lags ``1..num_lags`` (or ``0..num_lags`` with ``include_zero``).
    Raises :class:`DegenerateSeries` for a constant series.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 1:
        raise ValueError("acf expects a 1-D series")
    if g.size < num_lags + 2:
        raise ValueError(f"series of length {g.size} too short for {num_lags} lags")
    rho, degenerate = _acf_full(g[:, None], num_lags)
    if degenerate[0]:
        raise DegenerateSeries("power series has zero variance")
    rho = rho[:, 0]
    return rho if include_zero else rho[1:]


def motion_statistic(rho) -> float:
    """psi_f: the ACF value at the first non-zero lag."""
    rho = np.asarray(rho)
    if rho.size < 1:
        raise ValueError("ACF needs at least one lag")
    return float(rho[0])


def acf_matrix(recording: CsiRecording, window_start_s: float = 0.0,
               config: FeatureConfig = FeatureConfig()) -> AcfSample:
    """Stack per-subcarrier ACFs of one window into an ``l x N_s`` sample.

    Dead subcarriers (zero power variance) become zero columns; they are
    recorded on the sample and logged rather than aborting extraction.
    """
    fs = recording.sample_rate_hz
    w = config.window_samples(fs)
    start = int(round(window_start_s * fs))
    if start < 0 or start + w > recording.num_samples:
        raise WindowOutOfRange(
            f"window [{window_start_s}, {window_start_s + config.window_s}] s outside "
            f"recording of {recording.duration_s:.2f} s")
    if w < config.num_lags + 2:
        raise ValueError("window too short for the requested number of lags")
    n_links, n_sub = recording.num_links, recording.num_subcarriers
    h = recording.samples[start:start + w].reshape(w, n_links * n_sub)
    rho, degenerate = _acf_full(power_response(h), config.num_lags)
    matrix = np.ascontiguousarray(rho[1:])
    dead = tuple(int(i) for i in np.flatnonzero(degenerate))
    if dead:
        logger.info("recording %s window %.1fs: %d dead subcarriers zeroed",
                    recording.recording_id or "?", window_start_s, len(dead))
    psi = matrix[0].reshape(n_links, n_sub).mean(axis=1)
    return AcfSample(matrix=matrix, lag_step_s=1.0 / fs, label=recording.label, num_links=n_links,
                     per_link_motion_stat=psi, window_start_s=float(window_start_s),
                     source=recording.recording_id, dead_subcarriers=dead)


def window_starts(recording: CsiRecording, config: FeatureConfig = FeatureConfig()) -> list[float]:
    fs = recording.sample_rate_hz
    w = config.window_samples(fs)
    step = config.stride_samples(fs)
    return [i / fs for i in range(0, recording.num_samples - w + 1, step)]


def extract_windows(recording: CsiRecording, config: FeatureConfig = FeatureConfig(),
                    max_windows: int | None = None) -> list[AcfSample]:
    starts = window_starts(recording, config)
    if not starts:
        raise WindowOutOfRange("recording shorter than one ACF window")
    if max_windows is not None:
        starts = starts[:max_windows]
    return [acf_matrix(recording, s, config) for s in starts]


def most_sensitive_subcarrier(sample: AcfSample, link: int) -> int:
    """Index (within the link) of the subcarrier with the largest psi_f; ties go low."""
    if not 0 <= link < sample.num_links:
        raise ValueError(f"link {link} out of range")
    s = sample.subcarriers_per_link
    psi = sample.motion_stats[link * s:(link + 1) * s]
    return int(np.argmax(psi))


def mrc_weights(sample: AcfSample) -> np.ndarray:
    w = np.clip(sample.motion_stats, 0.0, None)
    total = w.sum()
    if total <= 0:
        raise AllStatic("every motion statistic is <= 0")
    return w / total


def mrc_average(sample: AcfSample) -> np.ndarray:
    """Motion-statistic-weighted average of all columns (ablation input)."""
    return sample.matrix @ mrc_weights(sample)
