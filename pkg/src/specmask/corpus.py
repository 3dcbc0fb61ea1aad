"""Synthetic noisy-speech corpus: harmonic source-filter "speech" with exact
speaker/prosody/content labels, four noise classes, SNR-controlled mixing,
and tab-separated manifests with a speaker-disjoint train/validation split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import FRAME_LEN, HOP, SAMPLE_RATE, Waveform, num_frames, write_wav

NOISE_CLASSES = ("white", "pink", "tonal_event", "modulated_burst")
NUM_CONTENT_UNITS = 8
NUM_PROSODY_CLASSES = 4


class CorpusError(RuntimeError):
    pass


@dataclass
class CleanSpec:
    speaker_id: int
    prosody_class: int
    duration_s: float
    seed: int

    def __post_init__(self):
        if not (1.0 <= self.duration_s <= 4.0):
            raise ValueError(f"duration {self.duration_s}s outside [1, 4]")
        if not (0 <= self.prosody_class < NUM_PROSODY_CLASSES):
            raise ValueError(f"invalid prosody class {self.prosody_class}")


@dataclass
class MixSpec:
    clean: CleanSpec
    noise_class: str
    snr_db: float
    seed: int

    def __post_init__(self):
        if self.noise_class not in NOISE_CLASSES:
            raise ValueError(f"unknown noise class {self.noise_class!r}")
        if math.isfinite(self.snr_db) and not (0.0 <= self.snr_db <= 20.0):
            raise ValueError(f"snr {self.snr_db} dB outside [0, 20]")


def _speaker_profile(sid: int):
    """Deterministic per-speaker voice parameters."""
    pitch = 85.0 * 2.0 ** ((sid * 5 % 12) / 12.0)
    formants = np.array([
        420.0 + 65.0 * ((sid * 7) % 8),
        1150.0 + 140.0 * ((sid * 3) % 8),
        2500.0 + 190.0 * ((sid * 5) % 8),
    ])
    bw = np.array([130.0, 180.0, 260.0])
    return pitch, formants, bw


# per-unit spectral envelope modifiers: formant shift factor and tilt
_UNIT_SHIFT = 0.75 + 0.5 * (np.arange(NUM_CONTENT_UNITS) / (NUM_CONTENT_UNITS - 1))
_UNIT_TILT = 2200.0 + 500.0 * ((np.arange(NUM_CONTENT_UNITS) * 3) % NUM_CONTENT_UNITS)


def _pitch_contour(prosody: int, n: int, fs: int) -> np.ndarray:
    t = np.arange(n) / fs
    if prosody == 0:
        return np.ones(n)
    if prosody == 1:
        return 1.0 + 0.18 * t / t[-1]
    if prosody == 2:
        return 1.18 - 0.18 * t / t[-1]
    return 1.0 + 0.06 * np.sin(2 * np.pi * 5.5 * t)


def _energy_contour(prosody: int, n: int, fs: int) -> np.ndarray:
    t = np.arange(n) / fs
    if prosody == 0:
        return np.ones(n)
    if prosody == 1:
        return 0.6 + 0.4 * t / t[-1]
    if prosody == 2:
        return 1.0 - 0.4 * t / t[-1]
    return 1.0 + 0.35 * np.sin(2 * np.pi * 3.0 * t)


def synth_clean(spec: CleanSpec):
    """Render one clean utterance; returns (Waveform, labels dict).

    labels: speaker_id, prosody_class, content_seq (one unit id per sample
    block), frame_units (unit id per STFT frame).
    """
    fs = SAMPLE_RATE
    n = int(round(spec.duration_s * fs))
    rng = np.random.default_rng(spec.seed)
    pitch, formants, bw = _speaker_profile(spec.speaker_id)

    # unit sequence: random units with 0.15-0.30 s durations
    units = []
    total = 0
    while total < n:
        u = int(rng.integers(NUM_CONTENT_UNITS))
        dur = int(rng.uniform(0.15, 0.30) * fs)
        units.append((u, min(dur, n - total)))
        total += dur
    unit_per_sample = np.concatenate([np.full(d, u) for u, d in units])[:n]

    f0 = pitch * _pitch_contour(spec.prosody_class, n, fs)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    energy = _energy_contour(spec.prosody_class, n, fs)

    shift = _UNIT_SHIFT[unit_per_sample]
    tilt = _UNIT_TILT[unit_per_sample]
    h_max = int(4800.0 / (pitch * 1.2))
    h = np.arange(1, h_max + 1)[:, None]
    freq = h * f0[None, :]
    gain = np.exp(-freq / tilt[None, :]) * 0.12
    for fc, b in zip(formants, bw):
        gain += np.exp(-0.5 * ((freq - fc * shift[None, :]) / b) ** 2)
    sig = np.einsum("hn,hn->n", gain, np.sin(h * phase[None, :]))
    sig *= energy

    rms_target = rng.uniform(0.06, 0.15)
    sig *= rms_target / max(np.sqrt(np.mean(sig ** 2)), 1e-12)
    peak = np.abs(sig).max()
    if peak > 0.5:
        sig *= 0.45 / peak

    nf = num_frames(n)
    centers = HOP * np.arange(nf) + FRAME_LEN // 2
    labels = {
        "speaker_id": spec.speaker_id,
        "prosody_class": spec.prosody_class,
        "frame_units": unit_per_sample[centers].tolist(),
    }
    return Waveform(sig), labels


def synth_noise(noise_class: str, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if noise_class == "white":
        return rng.normal(size=n)
    if noise_class == "pink":
        white = rng.normal(size=n)
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spec /= np.sqrt(np.maximum(f, 1.0))
        return np.fft.irfft(spec, n=n)
    if noise_class == "tonal_event":
        sig = 0.03 * rng.normal(size=n)
        for _ in range(int(rng.integers(2, 6))):
            freq = rng.uniform(300.0, 6000.0)
            length = int(rng.uniform(0.1, 0.5) * SAMPLE_RATE)
            start = int(rng.integers(0, max(1, n - length)))
            t = np.arange(length)
            burst = np.sin(2 * np.pi * freq * t / SAMPLE_RATE + rng.uniform(0, 2 * np.pi))
            burst *= np.hanning(length)
            sig[start:start + length] += burst
        return sig
    if noise_class == "modulated_burst":
        env = np.full(n, 0.05)
        for _ in range(int(rng.integers(2, 7))):
            length = int(rng.uniform(0.1, 0.4) * SAMPLE_RATE)
            start = int(rng.integers(0, max(1, n - length)))
            env[start:start + length] += np.hanning(length)
        return env * rng.normal(size=n)
    raise ValueError(f"unknown noise class {noise_class!r}")


def mix(spec: MixSpec):
    """Mix clean and scaled noise at an exact SNR.

    Returns (noisy Waveform, clean Waveform, labels).  If the sum would clip,
    both signals are rescaled jointly and the factor is recorded.
    """
    clean, labels = synth_clean(spec.clean)
    x = clean.samples
    if math.isinf(spec.snr_db):
        noise = np.zeros_like(x)
    else:
        noise = synth_noise(spec.noise_class, len(x), spec.seed)
        p_clean = np.mean(x ** 2)
        p_noise = np.mean(noise ** 2)
        noise = noise * np.sqrt(p_clean / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
    y = x + noise
    rescale = 1.0
    peak = np.abs(y).max()
    if peak > 1.0:
        rescale = 0.99 / peak
        y = y * rescale
        x = x * rescale
    labels.update({"noise_class": spec.noise_class, "snr_db": spec.snr_db,
                   "rescale": rescale})
    return Waveform(y), Waveform(x), labels


def build_corpus(train_size: int, val_size: int, seed: int, out_dir,
                 duration_s: float = 2.0, snr_choices=(0.0, 5.0, 10.0, 15.0),
                 train_speakers=tuple(range(8)), val_speakers=(8, 9)):
    """Generate WAV pairs plus train.tsv / val.tsv manifests.

    Manifest rows are tab-separated: noisy_path, clean_path, speaker_id,
    noise_class, snr_db, seed.  Paths are relative to the manifest location.
    Validation speakers are disjoint from training speakers.
    """
    assert not set(train_speakers) & set(val_speakers)
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create corpus directory {out}: {e}") from e

    ss = np.random.SeedSequence(seed)
    children = ss.spawn(train_size + val_size)
    manifests = {}
    idx = 0
    for split, size, speakers in (("train", train_size, train_speakers),
                                  ("val", val_size, val_speakers)):
        rows = []
        for j in range(size):
            child = children[idx]
            idx += 1
            item_seed = int(child.generate_state(1)[0])
            rng = np.random.default_rng(item_seed)
            sid = int(speakers[int(rng.integers(len(speakers)))])
            mspec = MixSpec(
                clean=CleanSpec(speaker_id=sid,
                                prosody_class=int(rng.integers(NUM_PROSODY_CLASSES)),
                                duration_s=duration_s,
                                seed=item_seed + 1),
                noise_class=NOISE_CLASSES[j % len(NOISE_CLASSES)],
                snr_db=float(snr_choices[int(rng.integers(len(snr_choices)))]),
                seed=item_seed + 2)
            noisy, clean, labels = mix(mspec)
            stem = f"{split}_{j:05d}"
            noisy_rel = f"wav/{stem}_noisy.wav"
            clean_rel = f"wav/{stem}_clean.wav"
            try:
                write_wav(out / noisy_rel, noisy)
                write_wav(out / clean_rel, clean)
                (out / f"wav/{stem}.labels.json").write_text(
                    json.dumps(labels, sort_keys=True))
            except OSError as e:
                raise CorpusError(f"failed writing {out / noisy_rel}: {e}") from e
            rows.append("\t".join([noisy_rel, clean_rel, str(sid),
                                   mspec.noise_class, f"{mspec.snr_db:g}",
                                   str(item_seed)]))
        manifest_path = out / f"{split}.tsv"
        manifest_path.write_text("\n".join(rows) + "\n")
        manifests[split] = manifest_path
    return manifests


@dataclass
class ManifestRow:
    noisy_path: Path
    clean_path: Path
    speaker_id: int
    noise_class: str
    snr_db: float
    seed: int

    @property
    def labels_path(self) -> Path:
        return self.noisy_path.parent / (
            self.noisy_path.name.replace("_noisy.wav", ".labels.json"))

    def labels(self) -> dict:
        return json.loads(self.labels_path.read_text())


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        np_, cp, sid, nc, snr, seed = line.split("\t")
        rows.append(ManifestRow(path.parent / np_, path.parent / cp,
                                int(sid), nc, float(snr), int(seed)))
    return rows
