"""Objective evaluation: short-time intelligibility (STOI), scale-invariant
SDR, and spectral l1 distance.  All metrics are pure functions of the two
waveforms.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

from .dsp import InputError, SAMPLE_RATE, Spectrogram, Waveform, stft

SI_SDR_CAP_DB = 100.0

_STOI_RATE = 10000
_STOI_FRAME = 384
_STOI_HOP = 96
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_SEG = 30
_STOI_CLIP_DB = -15.0


def _resample_16k_to_10k(x: np.ndarray) -> np.ndarray:
    up, down = 5, 8
    cutoff_hz = 0.45 * _STOI_RATE
    taps = firwin(161, cutoff_hz, fs=SAMPLE_RATE * up)
    return resample_poly(x, up, down, window=taps * up)


def _third_octave_matrix(nfft: int, fs: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    centers = 150.0 * 2.0 ** (np.arange(_STOI_NBANDS) / 3.0)
    mat = np.zeros((_STOI_NBANDS, len(freqs)))
    for i, cf in enumerate(centers):
        lo, hi = cf * 2 ** (-1 / 6), cf * 2 ** (1 / 6)
        mat[i] = (freqs >= lo) & (freqs < hi)
    return mat


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    nf = (len(x) - _STOI_FRAME) // _STOI_HOP + 1
    if nf < _STOI_SEG:
        raise InputError(
            f"signal too short for STOI: {nf} frames < {_STOI_SEG}")
    win = np.hanning(_STOI_FRAME)
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(nf)[:, None]
    spec = np.fft.rfft(x[idx] * win, n=_STOI_NFFT, axis=-1)
    bands = _third_octave_matrix(_STOI_NFFT, _STOI_RATE)
    return np.sqrt(bands @ (np.abs(spec) ** 2).T)  # [bands, frames]


def stoi(clean: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility in [~0, 1]."""
    if len(clean) != len(degraded):
        raise InputError(
            f"length mismatch: clean {len(clean)} vs degraded {len(degraded)}")
    if len(clean) < SAMPLE_RATE // 2:
        raise InputError(f"need at least 0.5 s of audio, got {len(clean)} samples")
    x = _band_envelopes(_resample_16k_to_10k(clean.samples))
    y = _band_envelopes(_resample_16k_to_10k(degraded.samples))
    nf = x.shape[1]
    clip = 10.0 ** (-_STOI_CLIP_DB / 20.0)
    corrs = []
    for m in range(_STOI_SEG, nf + 1):
        xs = x[:, m - _STOI_SEG:m]
        ys = y[:, m - _STOI_SEG:m]
        alpha = np.sqrt(np.sum(xs ** 2, axis=1, keepdims=True)
                        / np.maximum(np.sum(ys ** 2, axis=1, keepdims=True), 1e-30))
        ys = np.minimum(alpha * ys, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        denom = np.sqrt(np.sum(xc ** 2, axis=1) * np.sum(yc ** 2, axis=1))
        num = np.sum(xc * yc, axis=1)
        corrs.append(num / np.maximum(denom, 1e-30))
    return float(np.mean(corrs))


def si_sdr(clean: Waveform, estimate: Waveform) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB for exact matches."""
    if len(clean) != len(estimate):
        raise InputError(
            f"length mismatch: clean {len(clean)} vs estimate {len(estimate)}")
    s = clean.samples
    e = estimate.samples
    denom = np.dot(s, s)
    if denom <= 0:
        raise InputError("clean reference is all zeros")
    target = (np.dot(e, s) / denom) * s
    resid = e - target
    p_res = np.dot(resid, resid)
    p_tgt = np.dot(target, target)
    if p_res <= p_tgt * 10.0 ** (-SI_SDR_CAP_DB / 10.0):
        return SI_SDR_CAP_DB
    return float(10.0 * np.log10(p_tgt / p_res))


def spectral_l1(clean: Waveform, estimate: Waveform) -> float:
    """Mean absolute STFT-magnitude difference."""
    cs = stft(clean)
    es = stft(estimate)
    return float(np.mean(np.abs(cs.magnitude - es.magnitude)))


@dataclass
class EvalResult:
    utt_ids: list
    stoi: np.ndarray
    si_sdr_db: np.ndarray
    spec_l1: np.ndarray

    @property
    def mean_stoi(self):
        return float(self.stoi.mean())

    @property
    def mean_si_sdr(self):
        return float(self.si_sdr_db.mean())

    @property
    def mean_spec_l1(self):
        return float(self.spec_l1.mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["utt_id", "stoi", "si_sdr_db", "spec_l1"])
        for i, u in enumerate(self.utt_ids):
            w.writerow([u, f"{self.stoi[i]:.6f}", f"{self.si_sdr_db[i]:.6f}",
                        f"{self.spec_l1[i]:.6f}"])
        w.writerow(["MEAN", f"{self.mean_stoi:.6f}", f"{self.mean_si_sdr:.6f}",
                    f"{self.mean_spec_l1:.6f}"])
        return buf.getvalue()


def score_pairs(pairs, utt_ids) -> EvalResult:
    """pairs: iterable of (clean Waveform, estimate Waveform) in utt order."""
    st, si, l1 = [], [], []
    for c, e in pairs:
        st.append(stoi(c, e))
        si.append(si_sdr(c, e))
        l1.append(spectral_l1(c, e))
    return EvalResult(list(utt_ids), np.array(st), np.array(si), np.array(l1))


def evaluate(net, manifest_rows, out_csv=None, subset=None) -> EvalResult:
    """Run the mask network over manifest rows and score against clean."""
    from .conformer import enhance
    from .dsp import read_wav

    rows = list(manifest_rows)
    if subset is not None:
        rows = [r for i, r in enumerate(rows) if i in set(subset)]
    pairs = []
    ids = []
    for r in rows:
        if not Path(r.noisy_path).exists():
            raise FileNotFoundError(f"missing audio file {r.noisy_path}")
        noisy = read_wav(r.noisy_path)
        clean = read_wav(r.clean_path)
        _, est = enhance(net, stft(noisy))
        n = min(len(est), len(clean))
        pairs.append((Waveform(clean.samples[:n]), Waveform(est.samples[:n])))
        ids.append(Path(r.noisy_path).stem.replace("_noisy", ""))
    res = score_pairs(pairs, ids)
    if out_csv is not None:
        Path(out_csv).write_text(res.to_csv())
    return res
