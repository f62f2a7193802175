"""Audio frontend: WAV loading, log-mel spectrograms and waveform augmentations."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 32000
WIN_LENGTH = 800   # 25 ms
HOP_LENGTH = 320   # 10 ms
N_FFT = 1024
N_MELS = 128
F_MIN = 0.0
F_MAX = 16000.0
LOG_OFFSET = 1e-5

NORM_MEAN = -4.5
NORM_STD = 5.0


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise AudioError("mono required")
        if samples.size == 0:
            raise AudioError("waveform is empty")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate} Hz")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies laid out as (n_mels, frames)."""

    values: np.ndarray
    hop_ms: int = 10
    win_ms: int = 25

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def frame_count(self):
        return self.values.shape[1]


def load_pcm(path):
    """Read a mono 32 kHz WAV file (16-bit PCM or 32-bit float) into a Waveform."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 1:
        raise AudioError("mono required")
    if rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = np.clip(data, -1.0, 1.0)
    else:
        raise AudioError(f"unsupported sample format {data.dtype}; need int16 or float32")
    return Waveform(samples, rate)


def save_pcm(path, w, float32=False):
    """Write a Waveform as 16-bit PCM (default) or 32-bit float WAV."""
    if float32:
        wavfile.write(path, w.sample_rate, np.asarray(w.samples, dtype=np.float32))
    else:
        pcm = np.clip(np.round(np.asarray(w.samples) * 32767.0), -32768, 32767)
        wavfile.write(path, w.sample_rate, pcm.astype(np.int16))


def hz_to_mel(hz):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    hz = np.asarray(hz, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        hz >= min_log_hz,
        min_log_mel + np.log(np.maximum(hz, min_log_hz) / min_log_hz) / logstep,
        hz / f_sp,
    )


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        mel >= min_log_mel,
        min_log_hz * np.exp(logstep * (mel - min_log_mel)),
        mel * f_sp,
    )


@lru_cache(maxsize=4)
def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, f_min=F_MIN, f_max=F_MAX):
    """Triangular filters with Slaney area normalization, shape (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=1)
def _padded_window():
    win = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    left = (N_FFT - WIN_LENGTH) // 2
    out = np.zeros(N_FFT)
    out[left:left + WIN_LENGTH] = win
    out.setflags(write=False)
    return out


def frame_count(n_samples):
    return 1 + n_samples // HOP_LENGTH


def mel_spectrogram(w):
    """Log-mel spectrogram with 128 bands, 25 ms window and 10 ms hop.

    Frames are centered (reflection padding of N_FFT//2 on both sides), so a
    clip of ``n`` samples produces ``1 + n // 320`` frames. Output is
    ``log(mel_power + 1e-5)`` as float32.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    if x.shape[0] < WIN_LENGTH:
        raise AudioError(f"waveform shorter than one window ({WIN_LENGTH} samples)")
    pad = N_FFT // 2
    x = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP_LENGTH]
    spec = np.fft.rfft(frames * _padded_window(), axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = mel_filterbank() @ power.T
    return MelSpectrogram(np.log(mel + LOG_OFFSET).astype(np.float32))


def normalize(spec, mean=NORM_MEAN, std=NORM_STD):
    """Fixed affine normalization ``(x - mean) / (2 * std)`` applied before the model."""
    return MelSpectrogram(((spec.values - mean) / (2.0 * std)).astype(np.float32))


def roll_waveform(w, shift):
    return Waveform(np.roll(w.samples, int(shift) % len(w)), w.sample_rate)


def random_gain(w, gain_db):
    return Waveform(w.samples * 10.0 ** (gain_db / 20.0), w.sample_rate)


def mixup_waveform(a, b, lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mix-up lambda must lie in [0, 1], got {lam}")
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)} samples")
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rate mismatch")
    if lam == 1.0:
        return a
    if lam == 0.0:
        return b
    return Waveform(lam * a.samples + (1.0 - lam) * b.samples, a.sample_rate)


def fit_length(w, n_samples):
    """Zero-pad or crop a waveform to exactly ``n_samples``."""
    x = w.samples
    if len(x) >= n_samples:
        x = x[:n_samples]
    else:
        x = np.concatenate([x, np.zeros(n_samples - len(x), dtype=x.dtype)])
    return Waveform(x, w.sample_rate)
