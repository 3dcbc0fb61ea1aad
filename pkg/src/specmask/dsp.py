"""STFT analysis/synthesis, noisy-phase reconstruction, and WAV I/O.

All audio is mono 16 kHz float64 in [-1, 1].  Analysis and synthesis share
one periodic Hann window; synthesis normalizes by the overlap-added squared
window (weighted overlap-add), which reconstructs interior samples exactly.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, _record

SAMPLE_RATE = 16000
FRAME_LEN = 512
HOP = 128


class InputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrogram:
    magnitude: np.ndarray  # [T_frames, F_bins]
    phase: np.ndarray      # [T_frames, F_bins] radians
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def f_bins(self):
        return self.frame_len // 2 + 1


def hann_window(n: int) -> np.ndarray:
    # periodic Hann: sums to a constant under hop = n/4 overlap-add
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def num_frames(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    return (n_samples - frame_len) // hop + 1


def stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    x = w.samples
    if len(x) < frame_len:
        raise InputError(f"signal of {len(x)} samples shorter than one frame ({frame_len})")
    nf = num_frames(len(x), frame_len, hop)
    win = hann_window(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(nf)[:, None]
    frames = x[idx] * win
    spec = np.fft.rfft(frames, axis=-1)
    return Spectrogram(np.abs(spec), np.angle(spec), frame_len, hop)


def _ola_norm(nf: int, frame_len: int, hop: int) -> np.ndarray:
    win = hann_window(frame_len)
    n = frame_len + hop * (nf - 1)
    norm = np.zeros(n)
    for m in range(nf):
        norm[m * hop:m * hop + frame_len] += win * win
    return norm


def istft(s: Spectrogram) -> Waveform:
    frame_len, hop = s.frame_len, s.hop
    if hop > frame_len:
        raise ConfigurationError(
            f"hop {hop} > frame length {frame_len}: overlap-add leaves gaps")
    win = hann_window(frame_len)
    nf = s.magnitude.shape[0]
    norm = _ola_norm(nf, frame_len, hop)
    if nf >= 2 and norm[hop:-hop].min() < 1e-8:
        raise ConfigurationError("window/hop pair does not satisfy overlap-add coverage")
    spec = s.magnitude * np.exp(1j * s.phase)
    frames = np.fft.irfft(spec, n=frame_len, axis=-1) * win
    out = np.zeros(frame_len + hop * (nf - 1))
    for m in range(nf):
        out[m * hop:m * hop + frame_len] += frames[m]
    return Waveform(out / np.maximum(norm, 1e-12))


def reconstruct_with_noisy_phase(enhanced_mag: np.ndarray, noisy: Spectrogram) -> Waveform:
    enhanced_mag = np.asarray(enhanced_mag, dtype=np.float64)
    if enhanced_mag.shape != noisy.phase.shape:
        raise ContractError(
            f"magnitude {enhanced_mag.shape} vs phase {noisy.phase.shape}")
    return istft(Spectrogram(enhanced_mag, noisy.phase, noisy.frame_len, noisy.hop))


def synth_fixed_phase(mag: Tensor, phase: np.ndarray,
                      frame_len: int = FRAME_LEN, hop: int = HOP) -> Tensor:
    """Differentiable overlap-add synthesis of mag[B,T,F] with a fixed phase.

    The operation is linear in the magnitudes, so the backward pass is the
    adjoint: frame the output gradient, FFT, rotate by the fixed phase.
    Returns a waveform Tensor [B, N].
    """
    if mag.shape != phase.shape:
        raise ContractError(f"magnitude {mag.shape} vs phase {phase.shape}")
    B, nf, fb = mag.shape
    win = hann_window(frame_len)
    norm = np.maximum(_ola_norm(nf, frame_len, hop), 1e-12)
    rot = np.exp(1j * phase)

    def forward(m):
        frames = np.fft.irfft(m * rot, n=frame_len, axis=-1) * win
        out = np.zeros((B, frame_len + hop * (nf - 1)))
        for t in range(nf):
            out[:, t * hop:t * hop + frame_len] += frames[:, t]
        return out / norm

    out = Tensor(forward(mag.data))

    def bwd(g):
        gn = g / norm
        gframes = np.empty((B, nf, frame_len))
        for t in range(nf):
            gframes[:, t] = gn[:, t * hop:t * hop + frame_len]
        gframes = gframes * win
        spec = np.fft.rfft(gframes, axis=-1)
        # adjoint of irfft: scale interior bins by 2/N, edges by 1/N
        scale = np.full(fb, 2.0 / frame_len)
        scale[0] = 1.0 / frame_len
        if frame_len % 2 == 0:
            scale[-1] = 1.0 / frame_len
        gm = scale * np.real(np.conj(spec) * rot)
        return (gm,)

    return _record(out, (mag,), bwd)


# ---------------------------------------------------------------------------
# WAV I/O: RIFF PCM, 16-bit signed LE, mono, 16 kHz


def write_wav(path, w: Waveform):
    x = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise InputError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != SAMPLE_RATE:
            raise InputError(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()}")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0)
