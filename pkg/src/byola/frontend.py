"""WAV ingestion, resampling and the 64-bin log-mel front end."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ContractViolation, FormatError, TooShortError

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 160
N_MELS = 64
F_MIN = 60.0
F_MAX = 7800.0
LOG_FLOOR = 1e-7
UNIT_FRAMES = 96


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ContractViolation("audio clip must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise ContractViolation(f"invalid sample rate {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # [F, T]
    hop: float = HOP / SAMPLE_RATE
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    f_min: float = F_MIN
    f_max: float = F_MAX
    log_floor: float = LOG_FLOOR
    mel_norm: str = "slaney"


def load_wav(path) -> AudioClip:
    """Read PCM (8/16/24/32-bit) or float32 WAV, average channels, scale to [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.io.wavfile.WavFileWarning)
            rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM is returned left-justified in int32, so one scale fits both.
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise FormatError(f"{path}: no audio frames")
    return AudioClip(samples, int(rate))


def save_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    scipy.io.wavfile.write(path, clip.sample_rate, pcm)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling; output length ``round(n * target / source)``."""
    if target_rate <= 0:
        raise ContractViolation(f"invalid target rate {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    y = scipy.signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator,
                                   padtype="line")
    n_out = max(1, int(round(clip.samples.size * target_rate / clip.sample_rate)))
    if y.size >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.size), mode="edge")
    return AudioClip(y, target_rate)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel,
                    min_log_hz * np.exp(logstep * (m - min_log_mel)),
                    f_sp * m)


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN,
                           f_max: float = F_MAX) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   f_min: float = F_MIN, f_max: float = F_MAX,
                   norm: str = "slaney") -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]``; Slaney norm gives unit area per filter."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    if norm == "slaney":
        weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    elif norm is not None and norm != "none":
        raise ContractViolation(f"unknown mel norm {norm!r}")
    weights.setflags(write=False)
    return weights


def num_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (n_samples - n_fft) // hop + 1


def logmel(clip: AudioClip, cfg: FrontendConfig = FrontendConfig()) -> Spectrogram:
    """Power STFT (Hann window, no edge padding) -> mel filterbank -> natural log with floor."""
    if clip.sample_rate != cfg.sample_rate:
        raise ContractViolation(
            f"logmel expects {cfg.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    x = clip.samples
    if x.size < cfg.n_fft:
        raise TooShortError(f"clip of {x.size} samples is shorter than one {cfg.n_fft}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop]
    window = scipy.signal.get_window("hann", cfg.n_fft)
    power = np.abs(np.fft.rfft(frames * window, axis=-1)) ** 2  # [T, n_fft//2+1]
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max, cfg.mel_norm)
    mel = fb @ power.T  # [F, T]
    values = np.log(np.maximum(mel, cfg.log_floor))
    return Spectrogram(values, hop=cfg.hop / cfg.sample_rate, sample_rate=cfg.sample_rate)


def crop_or_pad(x: np.ndarray, length: int, rng: np.random.Generator | None = None,
                axis: int = -1) -> np.ndarray:
    """Random crop (or centre crop without ``rng``) / right zero-pad along ``axis``."""
    n = x.shape[axis]
    if n == length:
        return x.copy()
    if n > length:
        start = int(rng.integers(0, n - length + 1)) if rng is not None else (n - length) // 2
        return np.take(x, np.arange(start, start + length), axis=axis)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (0, length - n)
    return np.pad(x, pad)
