"""Opposite-gender voice perturbation: f0-median resampling, TD-PSOLA pitch
scaling and spectral-envelope (formant) warping."""

import enum
from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .dsp import RMS_GATE, estimate_f0_contour, voiced_median
from .errors import AllUnvoiced, OutOfRangeFactor, ZeroSourceMedian


class SpeakerGender(enum.Enum):
    F = "F"
    M = "M"

    @property
    def opposite(self):
        return SpeakerGender.M if self is SpeakerGender.F else SpeakerGender.F


@dataclass(frozen=True)
class PerturbConfig:
    p: float = 0.5
    feminine_mean: float = 250.0
    feminine_std: float = 17.0
    masculine_mean: float = 140.0
    masculine_std: float = 20.0
    formant_up: float = 1.2
    formant_down: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        if self.feminine_std <= 0 or self.masculine_std <= 0:
            raise ValueError("stds must be positive")
        if not self.formant_up > 1.0 > self.formant_down > 0.0:
            raise ValueError("need formant_up > 1 > formant_down > 0")


def sample_target_median(target_gender: SpeakerGender, cfg: PerturbConfig, rng) -> float:
    """Draw a target f0 median for the given gender, redrawn until within
    mean +- 3 sigma so the quoted 99.7% ranges are hard bounds."""
    if target_gender is SpeakerGender.F:
        mean, std = cfg.feminine_mean, cfg.feminine_std
    else:
        mean, std = cfg.masculine_mean, cfg.masculine_std
    while True:
        value = rng.normal(mean, std)
        if abs(value - mean) <= 3.0 * std:
            return float(value)


def compute_alpha(source_median: float, target_median: float) -> float:
    if source_median <= 0:
        raise ZeroSourceMedian("source f0 median must be positive")
    return target_median / source_median


def _pitch_marks(x, sr, contour):
    """Place one mark per pitch period inside voiced regions."""
    frame_hz = contour.frame_hz
    centers = contour.hop * np.arange(len(frame_hz)) + contour.frame_len // 2
    voiced = frame_hz > 0
    if not voiced.any():
        raise AllUnvoiced("no voiced frame, cannot place pitch marks")
    # per-sample period via interpolation over voiced frames
    f0_track = np.interp(np.arange(len(x)), centers[voiced], frame_hz[voiced])
    period = sr / f0_track

    # integrate the f0 track: a mark per unit of accumulated phase. Marks are
    # then spaced exactly one local period apart, which is all overlap-add
    # coherence needs; no dependence on waveform peaks (the fundamental may be
    # weak under a dominant formant).
    phase = np.cumsum(f0_track) / sr
    marks = np.searchsorted(phase, np.arange(0.5, phase[-1]))
    marks = marks[marks < len(x)]
    if len(marks) == 0:
        raise AllUnvoiced("waveform shorter than one pitch period")
    return marks.astype(int), period


def _psola(x, sr, contour, alpha):
    """Pitch scaling by alpha with duration preserved.

    Resampling shifts pitch (and formants, undone later by the envelope warp)
    exactly; a pitch-synchronous overlap-add time stretch then restores the
    original duration. Stretching at constant pitch keeps neighbouring grains
    phase-coherent, which direct PSOLA loses at ratios far from 1.
    """
    n = len(x)
    marks, period = _pitch_marks(x, sr, contour)

    # resample: y1[i] = x[alpha * i]; pitch and formants scale by alpha
    n1 = max(4, int(np.floor((n - 1) / alpha)) + 1)
    y1 = np.interp(alpha * np.arange(n1), np.arange(n), x)
    marks1 = np.round(marks / alpha).astype(int)
    gamma = n / n1

    out = np.zeros(n)
    norm = np.zeros(n)
    pos = float(marks1[0]) * gamma
    while pos < n:
        s = int(round(pos))
        i = int(np.argmin(np.abs(marks1 - s / gamma)))
        m = int(marks1[i])
        src_idx = min(int(round(m * alpha)), n - 1)
        p = max(2, int(round(period[src_idx] / alpha)))
        lo_off = min(p, m, s)
        hi_off = min(p, n1 - m, n - s)
        if hi_off + lo_off > 2:
            win = np.hanning(2 * p + 1)[p - lo_off:p + hi_off]
            out[s - lo_off:s + hi_off] += win * y1[m - lo_off:m + hi_off]
            norm[s - lo_off:s + hi_off] += win
        pos += period[src_idx] / alpha

    covered = norm > 0.2
    out[covered] /= norm[covered]
    # gaps (edges, unvoiced stretches): naive stretch of the resampled signal
    fallback_idx = np.clip(np.round(np.arange(n) / gamma).astype(int), 0, n1 - 1)
    out[~covered] = y1[fallback_idx[~covered]]
    return out


def _harmonic_envelope(mag, bin_hz, f0):
    """Log-linear envelope through the harmonic peak amplitudes of a frame."""
    n_bins = len(mag)
    half = max(2, int(0.4 * f0 / bin_hz))
    hz_pts, amp_pts = [], []
    k = 1
    while True:
        center = int(round(k * f0 / bin_hz))
        if center >= n_bins - 1:
            break
        lo = max(1, center - half)
        hi = min(n_bins, center + half + 1)
        j = lo + int(np.argmax(mag[lo:hi]))
        hz_pts.append(j * bin_hz)
        amp_pts.append(max(mag[j], 1e-12))
        k += 1
    if len(hz_pts) < 2:
        return np.full(n_bins, max(np.max(mag), 1e-12))
    freqs = np.arange(n_bins) * bin_hz
    log_env = np.interp(freqs, hz_pts, np.log(amp_pts))
    return np.exp(log_env)


def _formant_warp(x, scale, sr, f0, n_fft=1024):
    """Stretch the spectral envelope by `scale` (a peak at f moves to f*scale),
    leaving the harmonic structure in place. f0 is the signal's (post-shift)
    median fundamental, used to sample the envelope at harmonic peaks."""
    hop = n_fft // 4
    window = np.hanning(n_fft)
    pad = n_fft
    xp = np.pad(x, (pad, pad))
    out = np.zeros(len(xp))
    norm = np.zeros(len(xp))
    bins = np.arange(n_fft // 2 + 1)
    bin_hz = sr / n_fft

    for start in range(0, len(xp) - n_fft + 1, hop):
        frame = xp[start:start + n_fft] * window
        spec = np.fft.rfft(frame)
        if np.sqrt(np.mean(frame ** 2)) < RMS_GATE:
            frame_out = np.fft.irfft(spec, n_fft) * window
        else:
            env = _harmonic_envelope(np.abs(spec), bin_hz, f0)
            warped = np.interp(bins / scale, bins, env)
            ratio = np.clip(warped / np.maximum(env, 1e-12), 1e-3, 1e3)
            frame_out = np.fft.irfft(spec * ratio, n_fft) * window
        out[start:start + n_fft] += frame_out
        norm[start:start + n_fft] += window ** 2
    out /= np.maximum(norm, 1e-8)
    return out[pad:pad + len(x)]


def pitch_formant_shift(w: Waveform, alpha: float, formant_scale: float) -> Waveform:
    """Scale the f0 contour by alpha (TD-PSOLA) and the spectral envelope by
    formant_scale. Duration is preserved."""
    if not 0.25 <= alpha <= 4.0:
        raise OutOfRangeFactor(f"alpha {alpha} outside [0.25, 4]")
    if not 0.5 <= formant_scale <= 2.0:
        raise OutOfRangeFactor(f"formant_scale {formant_scale} outside [0.5, 2]")

    contour = estimate_f0_contour(w)
    if not (contour.frame_hz > 0).any():
        raise AllUnvoiced("cannot pitch-shift an unvoiced signal")
    y = _psola(w.samples, w.sample_rate, contour, alpha)
    # the resampling inside _psola scaled the envelope by alpha as well;
    # warp by formant_scale/alpha for a net envelope scale of formant_scale
    warp = formant_scale / alpha
    if abs(warp - 1.0) > 1e-9:
        f0_out = alpha * float(np.median(contour.frame_hz[contour.frame_hz > 0]))
        y = _formant_warp(y, warp, w.sample_rate, f0_out)
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y / peak
    return Waveform(y, w.sample_rate)


def apply_opposite(w: Waveform, speaker_gender: SpeakerGender, cfg: PerturbConfig, rng):
    """With probability cfg.p, shift the utterance toward the opposite gender's
    f0 distribution and scale formants (1.2 for M->F, 0.8 for F->M).

    Returns (waveform, manipulated). A fresh decision is made on every call;
    callers invoke once per epoch per sample.
    """
    if rng.random() >= cfg.p:
        return w, False
    target = speaker_gender.opposite
    source_median = voiced_median(estimate_f0_contour(w))
    target_median = sample_target_median(target, cfg, rng)
    alpha = float(np.clip(compute_alpha(source_median, target_median), 0.25, 4.0))
    scale = cfg.formant_up if target is SpeakerGender.F else cfg.formant_down
    return pitch_formant_shift(w, alpha, scale), True
