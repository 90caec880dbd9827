"""Audio loading, prefiltering, resampling and spectrograms."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

__all__ = [
    "AudioClip",
    "Spectrogram",
    "WavFormatError",
    "UnsupportedWavError",
    "EmptySignalError",
    "read_wav",
    "write_wav",
    "butter_highpass_sos",
    "highpass_butterworth",
    "resample",
    "as_time_expanded",
    "prefilter",
    "stft_spectrogram",
    "denoise",
    "log_compress",
    "TARGET_RATE",
    "DEFAULT_CUTOFF_HZ",
]

TARGET_RATE = 22050
DEFAULT_CUTOFF_HZ = 1500.0


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE structure."""


class UnsupportedWavError(ValueError):
    """Well-formed WAV with an encoding this reader does not handle."""


class EmptySignalError(ValueError):
    """Signal shorter than one analysis window."""


@dataclass
class AudioClip:
    """Mono waveform.

    ``time_expansion`` is the playback slow-down of the recording: 10 means
    every frequency in the file is a tenth of the real one.
    """

    samples: np.ndarray
    sample_rate: float
    time_expansion: float = 10.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.time_expansion < 1:
            raise ValueError("time_expansion must be >= 1")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        """Length in seconds of file time."""
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Magnitude matrix ``(n_fft // 2 + 1, frames)``."""

    values: np.ndarray
    n_fft: int
    hop: int
    sample_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != self.n_fft // 2 + 1:
            raise ValueError(f"values shape {self.values.shape} does not match n_fft={self.n_fft}")

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def bin_frequency(self, k) -> np.ndarray:
        return np.asarray(k) * self.sample_rate / self.n_fft


# ---------------------------------------------------------------- WAV I/O

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path, time_expansion: float = 10.0) -> AudioClip:
    """Read a PCM 16/24/32-bit integer or 32-bit float WAV as a mono clip.

    Stereo is averaged to mono; chunks other than ``fmt `` and ``data`` are
    skipped.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise WavFormatError(f"{path}: truncated extensible fmt chunk")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if rate == 0 or channels == 0:
        raise WavFormatError(f"{path}: zero sample rate or channel count")
    if channels > 2:
        raise UnsupportedWavError(f"{path}: {channels} channels")
    if block_align != channels * (bits // 8):
        raise WavFormatError(f"{path}: block_align {block_align} inconsistent with {channels}x{bits} bit")
    n = len(payload) // block_align
    payload = payload[: n * block_align]
    if tag == _PCM and bits == 16:
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _PCM and bits == 24:
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == _PCM and bits == 32:
        x = np.frombuffer(payload, dtype="<i4").astype(np.float64) / float(1 << 31)
    elif tag == _FLOAT and bits == 32:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag} with {bits} bits")
    x = x.reshape(-1, channels).mean(axis=1)
    return AudioClip(x, float(rate), time_expansion)


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    """Write mono audio as 16/24-bit PCM or (``bits=32``) IEEE float."""
    x = np.asarray(samples, dtype=np.float64)
    if bits == 16:
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag = _PCM
    elif bits == 24:
        v = np.clip(np.round(x * (1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        payload = v.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        tag = _PCM
    elif bits == 32:
        payload = x.astype("<f4").tobytes()
        tag = _FLOAT
    else:
        raise UnsupportedWavError(f"cannot write {bits}-bit audio")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, int(sample_rate), int(sample_rate) * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------- filtering


def butter_highpass_sos(order: int, cutoff_hz: float, sample_rate: float) -> np.ndarray:
    """Second-order sections of a digital Butterworth high-pass.

    Each conjugate pole pair ``p`` of the analog low-pass prototype gives the
    analog high-pass section ``s^2 / (s^2 + a*wc*s + wc^2)`` with
    ``a = -2 Re(p)``; the bilinear transform with the cutoff prewarped to
    ``tan(pi * fc / fs)`` maps it to the z-domain.
    """
    if order < 2 or order % 2:
        raise ValueError(f"order must be a positive even integer, got {order}")
    if not 0 < cutoff_hz < sample_rate / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate / 2})")
    w = np.tan(np.pi * cutoff_hz / sample_rate)
    sos = np.empty((order // 2, 6))
    for k in range(order // 2):
        a = 2.0 * np.sin((2 * k + 1) * np.pi / (2 * order))
        a0 = 1.0 + a * w + w * w
        sos[k] = [1.0 / a0, -2.0 / a0, 1.0 / a0, 1.0, 2.0 * (w * w - 1.0) / a0, (1.0 - a * w + w * w) / a0]
    return sos


def highpass_butterworth(clip: AudioClip, cutoff_hz: float = DEFAULT_CUTOFF_HZ, order: int = 10) -> AudioClip:
    """Causal Butterworth high-pass; output has the input's length."""
    sos = butter_highpass_sos(order, cutoff_hz, clip.sample_rate)
    return AudioClip(signal.sosfilt(sos, clip.samples), clip.sample_rate, clip.time_expansion)


def _lowpass_fir(cutoff: float, rate: float, half_len: int) -> np.ndarray:
    n = np.arange(-half_len, half_len + 1)
    fc = cutoff / rate
    h = 2 * fc * np.sinc(2 * fc * n) * np.kaiser(2 * half_len + 1, 5.0)
    return h / h.sum()


def resample(clip: AudioClip, target_rate: float) -> AudioClip:
    """Polyphase rational resampling with a Kaiser-windowed sinc anti-alias filter.

    The filter cuts at 0.45 x the lower of the two rates (90 % of the lower
    Nyquist).  Output length is ``round(len * target_rate / sample_rate)``.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.time_expansion)
    ratio = Fraction(target_rate).limit_denominator(10**6) / Fraction(clip.sample_rate).limit_denominator(10**6)
    ratio = ratio.limit_denominator(4096)
    up, down = ratio.numerator, ratio.denominator
    h = _lowpass_fir(0.45 * min(target_rate, clip.sample_rate), clip.sample_rate * up, 10 * max(up, down))
    y = signal.resample_poly(clip.samples, up, down, window=h)
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return AudioClip(y, float(target_rate), clip.time_expansion)


def as_time_expanded(clip: AudioClip, factor: float = 10.0) -> AudioClip:
    """Reinterpret the samples as a recording slowed down by ``factor``.

    No samples change; only the nominal rate scales by
    ``clip.time_expansion / factor``.
    """
    if clip.time_expansion == factor:
        return clip
    rate = clip.sample_rate * clip.time_expansion / factor
    return AudioClip(clip.samples, rate, factor)


def prefilter(
    clip: AudioClip,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    target_rate: float = TARGET_RATE,
    order: int = 10,
    time_expansion: float = 10.0,
) -> AudioClip:
    """Bring a recording to the model's time-expanded rate: high-pass, then resample."""
    clip = as_time_expanded(clip, time_expansion)
    return resample(highpass_butterworth(clip, cutoff_hz, order), target_rate)


# ---------------------------------------------------------------- spectrograms


def stft_spectrogram(clip: AudioClip | np.ndarray, n_fft: int = 512, hop: int = 128, sample_rate=None) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window and no padding.

    Frame ``j`` covers samples ``[j*hop, j*hop + n_fft)``; only frames fully
    inside the signal are computed.
    """
    if isinstance(clip, AudioClip):
        x, sample_rate = clip.samples, clip.sample_rate
    else:
        x = np.asarray(clip, dtype=np.float64)
        sample_rate = TARGET_RATE if sample_rate is None else sample_rate
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must lie in (0, n_fft], got {hop}")
    if len(x) < n_fft:
        raise EmptySignalError(f"signal of {len(x)} samples is shorter than n_fft={n_fft}")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    window = signal.get_window("hann", n_fft)
    mag = np.abs(np.fft.rfft(frames * window, axis=1))
    return Spectrogram(np.ascontiguousarray(mag.T), n_fft, hop, sample_rate)


def denoise(spec: Spectrogram) -> Spectrogram:
    """Remove stationary noise: subtract each row's temporal mean, clamp at zero."""
    v = spec.values
    out = np.maximum(v - v.mean(axis=1, keepdims=True), 0.0)
    return Spectrogram(out, spec.n_fft, spec.hop, spec.sample_rate)


def log_compress(values: np.ndarray) -> np.ndarray:
    return np.log1p(values)
