"""Mono 16 kHz audio handling: WAV I/O, resampling, length standardization, SNR mixing."""
from __future__ import annotations

import io
import wave
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

TARGET_RATE = 16_000
TARGET_SECONDS = 10.0
TARGET_SAMPLES = int(TARGET_RATE * TARGET_SECONDS)


class EmptyAudioError(ValueError):
    pass


class SilentNoiseError(ValueError):
    pass


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray  # float64 in [-1, 1], mono
    rate: int
    source: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate


def read_wav(path, source: str = "") -> AudioSegment:
    """Read 16-bit PCM WAV; multi-channel audio is averaged to mono."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_ch, rate = wf.getnchannels(), wf.getframerate()
        raw = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    x = raw.astype(np.float64) / 32768.0
    if n_ch > 1:
        x = x.reshape(-1, n_ch).mean(axis=1)
    return AudioSegment(x, rate, source)


def _pcm16(x: np.ndarray) -> bytes:
    return (np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")).tobytes()


def write_wav(path, seg: AudioSegment) -> None:
    Path(path).write_bytes(wav_bytes(seg))


def wav_bytes(seg: AudioSegment) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(seg.rate)
        wf.writeframes(_pcm16(seg.samples))
    return buf.getvalue()


def resample(x: np.ndarray, rate: int, target: int = TARGET_RATE) -> np.ndarray:
    """Polyphase resampling with scipy's Kaiser-windowed sinc filter."""
    if rate == target:
        return x
    frac = Fraction(target, rate)
    return resample_poly(x, frac.numerator, frac.denominator)


def standardize(seg: AudioSegment) -> AudioSegment:
    """Resample to 16 kHz mono and keep the first 10 s, zero-padding shorter clips."""
    x = np.asarray(seg.samples, dtype=np.float64)
    if x.size == 0:
        raise EmptyAudioError("empty audio")
    if x.ndim > 1:
        x = x.mean(axis=1)
    x = resample(x, seg.rate)
    if len(x) >= TARGET_SAMPLES:
        x = x[:TARGET_SAMPLES]
    else:
        x = np.concatenate([x, np.zeros(TARGET_SAMPLES - len(x))])
    return AudioSegment(x, TARGET_RATE, seg.source)


def truncate_for_asr(seg: AudioSegment) -> AudioSegment:
    """First 10 s at 16 kHz without padding."""
    x = resample(np.asarray(seg.samples, dtype=np.float64), seg.rate)
    return AudioSegment(x[:TARGET_SAMPLES], TARGET_RATE, seg.source)


def crop_or_pad(seg: AudioSegment, rng: np.random.Generator, n: int = TARGET_SAMPLES) -> AudioSegment:
    """Random ``n``-sample window of a longer clip, or right zero-padding of a shorter one."""
    x = seg.samples
    if len(x) > n:
        start = int(rng.integers(0, len(x) - n + 1))
        x = x[start : start + n]
    elif len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    return replace(seg, samples=x)


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x**2)))


def snr_db(signal, noise) -> float:
    return 20.0 * np.log10(rms(signal) / rms(noise))


def noise_gain(speech: np.ndarray, noise: np.ndarray, target_db: float) -> float:
    rs, rn = rms(speech), rms(noise)
    if rn == 0:
        raise SilentNoiseError("noise is silent")
    if rs == 0:
        raise EmptyAudioError("speech is silent")
    return (rs / rn) * 10.0 ** (-target_db / 20.0)


def mix_snr(speech: AudioSegment, noise: AudioSegment, target_db: float) -> AudioSegment:
    """Add ``noise`` scaled so that speech-to-noise power equals ``target_db``."""
    if len(speech.samples) != len(noise.samples) or speech.rate != noise.rate:
        raise ValueError("speech and noise must be standardized to the same length and rate")
    g = noise_gain(speech.samples, noise.samples, target_db)
    return replace(speech, samples=speech.samples + g * noise.samples)
