"""Spectrogram stacks, channel-averaged volume, the volume labelling heuristic
and SNR-controlled noise injection."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .dataset import AudioClip
from .exceptions import ChannelError, ConfigError

# channel subsets used for the C-channel ablation; indices into the circular mics
CHANNEL_SUBSETS = {1: [0], 2: [0, 3], 4: [0, 1, 3, 4], 6: [0, 1, 2, 3, 4, 5]}


def channel_subset(n_channels):
    if n_channels not in CHANNEL_SUBSETS:
        raise ConfigError("channels", f"must be one of {sorted(CHANNEL_SUBSETS)}, got {n_channels}")
    return list(CHANNEL_SUBSETS[n_channels])


@dataclass(frozen=True)
class SpectrogramParams:
    window_s: float = 1.0
    n_fft: int = 256
    hop: int = 87
    freq_bins: int = 128
    time_frames: int = 512
    log_floor: float = 1e-6

    def __post_init__(self):
        if not self.window_s > 0:
            raise ConfigError("window_s", "must be > 0")
        if self.n_fft < 2 or self.hop < 1 or self.freq_bins < 1 or self.time_frames < 1:
            raise ConfigError("n_fft", "STFT sizes must be positive")
        if not self.log_floor > 0:
            raise ConfigError("log_floor", "must be > 0")


@dataclass
class SpectrogramStack:
    grid: np.ndarray
    center_timestamp_s: float
    channels: tuple = ()

    @property
    def n_channels(self):
        return self.grid.shape[0]


class PairLabel(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INCONCLUSIVE = "inconclusive"


@dataclass
class VolumeSeries:
    values: np.ndarray
    timestamps: np.ndarray

    @property
    def v_max(self):
        return float(np.max(self.values)) if len(self.values) else 0.0

    @property
    def normalized(self):
        """V / V0, reported as zeros for a silent run."""
        vmax = self.v_max
        if vmax == 0:
            return np.zeros_like(self.values)
        return self.values / vmax


def _window(n_fft, hop):
    # Hann scaled so that sum(w^2) == hop: frame energies then add up to the signal energy
    w = np.hanning(n_fft + 1)[:-1]
    return w * np.sqrt(hop / np.sum(w ** 2))


def stft_magnitude(x, n_fft=256, hop=87):
    """One-sided STFT magnitude of a 1-D signal, ``(n_fft // 2 + 1, frames)``.

    The signal is zero-padded by ``n_fft // 2`` on both sides (centred frames),
    giving ``1 + len(x) // hop`` frames.
    """
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad))
    n_frames = 1 + len(x) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    need = idx[-1, -1] + 1
    if need > xp.size:
        xp = np.pad(xp, (0, need - xp.size))
    frames = xp[idx] * _window(n_fft, hop)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1)).T


def _window_samples(samples, start, length):
    """``samples[:, start:start+length]`` with zero padding outside the clip."""
    C, N = samples.shape
    out = np.zeros((C, length), dtype=np.float64)
    a, b = max(start, 0), min(start + length, N)
    if b > a:
        out[:, a - start: b - start] = samples[:, a:b]
    return out


def spectrogram_stack(clip: AudioClip, t: float, params: SpectrogramParams = SpectrogramParams(),
                      use_channels=None) -> SpectrogramStack:
    """Log-compressed STFT magnitudes of a window centred at ``t``, one grid per channel."""
    channels = list(range(clip.n_channels)) if use_channels is None else list(use_channels)
    for ch in channels:
        if not 0 <= ch < clip.n_channels:
            raise ChannelError(f"channel {ch} requested but clip has {clip.n_channels} channels")
    fs = clip.sample_rate_hz
    length = int(round(params.window_s * fs))
    start = int(round((t - params.window_s / 2) * fs))
    win = _window_samples(clip.samples[channels], start, length)
    grid = np.zeros((len(channels), params.freq_bins, params.time_frames), dtype=np.float32)
    for c in range(len(channels)):
        mag = stft_magnitude(win[c], params.n_fft, params.hop)
        mag = mag[: params.freq_bins, : params.time_frames]
        grid[c, : mag.shape[0], : mag.shape[1]] = np.log1p(mag / params.log_floor)
    return SpectrogramStack(grid=grid, center_timestamp_s=float(t), channels=tuple(channels))


class SpectrogramSequence:
    """Lazy, indexable sequence of stacks for many timestamps of one or more clips.

    Items are computed on access so that training sets never hold every grid
    in memory at once.
    """

    def __init__(self, clips, timestamps, params=SpectrogramParams(), use_channels=None):
        self.clips = list(clips)
        self.items = [(int(c), float(t)) for c, t in timestamps]
        self.params = params
        self.use_channels = use_channels

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        if isinstance(i, slice):
            sub = SpectrogramSequence(self.clips, [], self.params, self.use_channels)
            sub.items = self.items[i]
            return sub
        c, t = self.items[i]
        return spectrogram_stack(self.clips[c], t, self.params, self.use_channels).grid

    def subset(self, indices):
        sub = SpectrogramSequence(self.clips, [], self.params, self.use_channels)
        sub.items = [self.items[int(i)] for i in indices]
        return sub


def volume_series(clip: AudioClip, frame_timestamps, window_s: float = 0.2,
                  use_channels=None) -> VolumeSeries:
    """Mean over channels of the per-channel RMS in a window centred on each timestamp."""
    ts = np.asarray(frame_timestamps, dtype=float)
    if ts.size == 0:
        raise ConfigError("frame_timestamps", "empty timestamp list")
    if not window_s > 0:
        raise ConfigError("window_s", "must be > 0")
    samples = clip.samples if use_channels is None else clip.samples[list(use_channels)]
    x2 = samples.astype(np.float64) ** 2
    csum = np.concatenate([np.zeros((x2.shape[0], 1)), np.cumsum(x2, axis=1)], axis=1)
    N = samples.shape[1]
    fs = clip.sample_rate_hz
    half = int(round(window_s * fs)) // 2
    values = np.empty(ts.size)
    for k, t in enumerate(ts):
        c = int(round(t * fs))
        a, b = max(c - half, 0), min(c + half, N)
        if b <= a:
            values[k] = 0.0
            continue
        ms = (csum[:, b] - csum[:, a]) / (b - a)
        values[k] = float(np.mean(np.sqrt(np.maximum(ms, 0.0))))
    return VolumeSeries(values=values, timestamps=ts)


def _count(n, frac):
    # tolerance guards float products such as 100 * 0.29 = 28.999999999999996
    return int(math.floor(n * frac + 1e-9))


def classify_pairs(volumes, quiet_frac: float = 0.15, loud_frac: float = 0.15):
    """Label the loudest fraction Positive, the quietest Negative, the rest Inconclusive.

    ``volumes`` is one run (scene).  Ties are ordered by ascending frame index.
    """
    values = np.asarray(volumes.values if isinstance(volumes, VolumeSeries) else volumes, dtype=float)
    if not (0 < quiet_frac and 0 < loud_frac and quiet_frac + loud_frac < 1):
        raise ConfigError("quiet_frac/loud_frac", "need positive fractions summing to < 1")
    n = values.size
    if n < 3:
        raise ConfigError("volumes", f"need >= 3 frames per run, got {n}")
    if np.max(values) == 0:
        raise ConfigError("volumes", "silent run (V0 = 0): heuristic classification is undefined")
    n_pos, n_neg = _count(n, loud_frac), _count(n, quiet_frac)
    if n_pos == 0:
        raise ConfigError("loud_frac", f"{loud_frac} of {n} frames rounds to zero samples")
    if n_neg == 0:
        raise ConfigError("quiet_frac", f"{quiet_frac} of {n} frames rounds to zero samples")
    order = np.argsort(values, kind="stable")
    labels = [PairLabel.INCONCLUSIVE] * n
    for i in order[:n_neg]:
        labels[i] = PairLabel.NEGATIVE
    for i in order[n - n_pos:]:
        labels[i] = PairLabel.POSITIVE
    return labels


class VolumeHeuristic(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around :func:`classify_pairs` for one recording run."""

    def __init__(self, quiet_frac=0.15, loud_frac=0.15):
        self.quiet_frac = quiet_frac
        self.loud_frac = loud_frac

    def fit(self, X, y=None):
        self.labels_ = classify_pairs(np.ravel(X), self.quiet_frac, self.loud_frac)
        self.classes_ = np.array([l.value for l in PairLabel])
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


def add_noise(clip: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Add white Gaussian noise with per-channel sigma = rms(channel) * 10^(-snr/20)."""
    if math.isinf(snr_db) and snr_db > 0:
        return AudioClip(samples=clip.samples.copy(), sample_rate_hz=clip.sample_rate_hz)
    x = clip.samples.astype(np.float64)
    rms = np.sqrt(np.mean(x ** 2, axis=1))
    if np.any(rms == 0):
        bad = int(np.flatnonzero(rms == 0)[0])
        raise ValueError(f"channel {bad} has zero RMS: noise level undefined for finite SNR")
    sigma = rms * 10.0 ** (-snr_db / 20.0)
    noise = np.random.default_rng(seed).standard_normal(x.shape) * sigma[:, None]
    return AudioClip(samples=(x + noise).astype(clip.samples.dtype), sample_rate_hz=clip.sample_rate_hz)


def measured_snr_db(clean, noisy):
    """Per-channel SNR of ``noisy`` relative to ``clean`` (clips or arrays)."""
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    n = np.asarray(getattr(noisy, "samples", noisy), dtype=np.float64) - c
    return 20 * np.log10(np.sqrt(np.mean(c ** 2, axis=-1)) / np.sqrt(np.mean(n ** 2, axis=-1)))


# ---------------------------------------------------------------- serialization


def save_stack_npz(stack: SpectrogramStack, path, params: SpectrogramParams = SpectrogramParams()):
    np.savez(path, grid=stack.grid.astype("<f4"), center_timestamp_s=np.float64(stack.center_timestamp_s),
             channels=np.asarray(stack.channels, dtype=np.int64),
             params=np.array(json.dumps(asdict(params), sort_keys=True)))


def load_stack_npz(path):
    with np.load(path) as z:
        stack = SpectrogramStack(grid=z["grid"].astype(np.float32),
                                 center_timestamp_s=float(z["center_timestamp_s"]),
                                 channels=tuple(int(c) for c in z["channels"]))
        params = SpectrogramParams(**json.loads(str(z["params"])))
    return stack, params


def save_stack_raw(stack: SpectrogramStack, path, params: SpectrogramParams = SpectrogramParams()):
    """Raw little-endian float32 plus a ``.json`` sidecar with shape and params."""
    path = Path(path)
    stack.grid.astype("<f4").tofile(path)
    sidecar = {"shape": list(stack.grid.shape), "dtype": "<f4",
               "center_timestamp_s": stack.center_timestamp_s,
               "channels": list(stack.channels), "params": asdict(params)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_stack_raw(path):
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = np.fromfile(path, dtype=side["dtype"]).reshape(side["shape"]).astype(np.float32)
    return (SpectrogramStack(grid=grid, center_timestamp_s=side["center_timestamp_s"],
                             channels=tuple(side["channels"])),
            SpectrogramParams(**side["params"]))
