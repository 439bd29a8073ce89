"""Pitch tracking, voiced statistics and log-mel feature extraction."""

import struct
from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .errors import AllUnvoiced, MalformedHeader, TooShort

F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.3
RMS_GATE = 1e-4
N_MELS = 80
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"VXFT"


@dataclass(frozen=True)
class F0Contour:
    """Per-frame fundamental frequency track; 0.0 marks unvoiced frames."""

    frame_hz: np.ndarray
    hop: int
    frame_len: int

    @property
    def voiced(self):
        return self.frame_hz[self.frame_hz > 0]


@dataclass
class FeatureMatrix:
    """T x 80 log-mel energies, optionally mean/variance normalized."""

    frames: np.ndarray
    normalized: bool = False


def _parabolic_peak(values, i):
    """Refine a discrete argmax by fitting a parabola through its neighbours."""
    if i <= 0 or i >= len(values) - 1:
        return float(i), values[i]
    a, b, c = values[i - 1], values[i], values[i + 1]
    denom = a - 2 * b + c
    if abs(denom) < 1e-12:
        return float(i), b
    shift = 0.5 * (a - c) / denom
    shift = float(np.clip(shift, -0.5, 0.5))
    return i + shift, b - 0.25 * (a - c) * shift


def estimate_f0_contour(w: Waveform, frame_len=None, hop=None,
                        voicing_threshold=VOICING_THRESHOLD,
                        rms_gate=RMS_GATE) -> F0Contour:
    """Normalized-autocorrelation pitch tracker over [F0_MIN, F0_MAX].

    Frames with peak correlation below the voicing threshold or RMS below
    the gate are marked unvoiced (0.0).
    """
    sr = w.sample_rate
    if frame_len is None:
        frame_len = int(round(2 * sr / F0_MIN))
    if hop is None:
        hop = max(1, sr // 100)
    if frame_len < 2 * sr / F0_MIN:
        raise ValueError("frame_len must cover two periods of the lowest trackable f0")
    if hop <= 0:
        raise ValueError("hop must be positive")
    x = w.samples
    if len(x) < frame_len:
        raise TooShort(f"waveform of {len(x)} samples shorter than one frame ({frame_len})")

    lag_min = max(2, int(np.floor(sr / F0_MAX)))
    lag_max = int(np.ceil(sr / F0_MIN))
    n_frames = (len(x) - frame_len) // hop + 1
    out = np.zeros(n_frames)

    n_fft = 1 << int(np.ceil(np.log2(2 * frame_len)))
    lags = np.arange(lag_min, lag_max + 1)
    for fi in range(n_frames):
        frame = x[fi * hop:fi * hop + frame_len]
        frame = frame - np.mean(frame)
        if np.sqrt(np.mean(frame ** 2)) < rms_gate:
            continue
        # whiten: divide out the cepstrally-smoothed envelope so a dominant
        # formant cannot turn the frame into a near-pure tone, then lowpass at
        # 1.2 kHz so fractional periods do not decorrelate the high band
        fspec = np.fft.rfft(frame)
        logmag = np.log(np.maximum(np.abs(fspec), 1e-12))
        ceps = np.fft.irfft(logmag)
        keep = max(4, lag_min // 2)
        ceps[keep:len(ceps) - keep] = 0.0
        env = np.exp(np.fft.rfft(ceps).real)
        white = fspec / np.maximum(env, 1e-3 * env.max())
        cut = int(1200.0 * frame_len / sr)
        white[cut:] = 0.0
        frame = np.fft.irfft(white, frame_len)
        # normalized autocorrelation r(tau) over the search range, via FFT
        spec = np.fft.rfft(frame, n_fft)
        raw = np.fft.irfft(spec * np.conj(spec))[:lag_max + 1]
        sq = np.concatenate(([0.0], np.cumsum(frame ** 2)))
        total = sq[-1]
        head = sq[frame_len - lags]          # energy of frame[:-lag]
        tail = total - sq[lags]              # energy of frame[lag:]
        denom = np.sqrt(head * tail)
        r = np.where(denom > 0, raw[lags] / np.maximum(denom, 1e-20), 0.0)
        rmax = float(np.max(r))
        if rmax < voicing_threshold:
            continue
        # a periodic signal correlates at every multiple of its period, and an
        # integer multiple can beat a fractional true period; take the shortest
        # local maximum that is nearly as strong as the global one
        interior = np.arange(1, len(r) - 1)
        is_peak = (r[interior] >= r[interior - 1]) & (r[interior] >= r[interior + 1])
        strong = interior[is_peak & (r[interior] >= 0.9 * rmax)]
        best = int(strong[0]) if len(strong) else int(np.argmax(r))
        lag_refined, _ = _parabolic_peak(r, best)
        f0 = sr / (lag_min + lag_refined)
        out[fi] = float(np.clip(f0, F0_MIN, F0_MAX))

    return F0Contour(out, hop=hop, frame_len=frame_len)


def voiced_median(c: F0Contour) -> float:
    """Median f0 over voiced frames only."""
    voiced = c.voiced
    if len(voiced) == 0:
        raise AllUnvoiced("no voiced frame in contour")
    return float(np.median(voiced))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels=N_MELS, f_lo=20.0):
    """Triangular mel filters spanning [f_lo, Nyquist], shape (n_mels, n_fft//2+1)."""
    f_hi = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = hz_pts * n_fft / sample_rate
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = bins[m], bins[m + 1], bins[m + 2]
        k = np.arange(n_fft // 2 + 1)
        up = (k - lo) / max(mid - lo, 1e-9)
        down = (hi - k) / max(hi - mid, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def apply_cmvn_(frames):
    """Per-utterance, per-coefficient standardization (in place on a copy)."""
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return (frames - mean) / std


def logmel_features(w: Waveform, apply_cmvn=True) -> FeatureMatrix:
    """80-dim log mel-filterbank features: 25 ms Hann windows, 10 ms hop."""
    sr = w.sample_rate
    frame_len = int(round(0.025 * sr))
    hop = int(round(0.010 * sr))
    x = w.samples
    if len(x) < frame_len:
        raise TooShort(f"waveform of {len(x)} samples shorter than one 25 ms frame")

    n_frames = (len(x) - frame_len) // hop + 1
    window = np.hanning(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=frame_len, axis=1)) ** 2
    fb = mel_filterbank(sr, frame_len)
    mel = spec @ fb.T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    if apply_cmvn:
        return FeatureMatrix(apply_cmvn_(logmel), normalized=True)
    return FeatureMatrix(logmel, normalized=False)


def save_features(fm: FeatureMatrix, path) -> None:
    """Little-endian binary: magic, u32 T, u32 80, then T x 80 float32 row-major."""
    t, d = fm.frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", t, d))
        f.write(fm.frames.astype("<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != FEATURE_MAGIC:
            raise MalformedHeader(f"{path}: bad feature file magic")
        t, d = struct.unpack("<II", head[4:])
        data = np.frombuffer(f.read(4 * t * d), dtype="<f4")
    if data.size != t * d:
        raise MalformedHeader(f"{path}: truncated feature payload")
    return FeatureMatrix(data.reshape(t, d).astype(np.float64), normalized=False)


def spectral_envelope(w: Waveform, n_fft=2048, lifter_cut=None):
    """Cepstrally smoothed long-term spectral envelope.

    Returns (freqs_hz, envelope). Used as the analysis oracle for formant
    positions of harmonic signals.
    """
    x = w.samples
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    hop = n_fft // 4
    n_frames = max(1, (len(x) - n_fft) // hop + 1)
    window = np.hanning(n_fft)
    acc = np.zeros(n_fft // 2 + 1)
    for fi in range(n_frames):
        frame = x[fi * hop:fi * hop + n_fft] * window
        acc += np.abs(np.fft.rfft(frame)) ** 2
    logmag = 0.5 * np.log(np.maximum(acc / n_frames, 1e-20))
    if lifter_cut is None:
        # keep quefrencies below the shortest expected pitch period
        lifter_cut = max(8, int(1.5 * w.sample_rate / F0_MAX))
    ceps = np.fft.irfft(logmag)
    ceps[lifter_cut:len(ceps) - lifter_cut] = 0.0
    env = np.exp(np.fft.rfft(ceps).real)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / w.sample_rate)
    return freqs, env


def envelope_peak_hz(w: Waveform, lo_hz=200.0, hi_hz=4000.0, f0=None):
    """Frequency of the spectral-envelope maximum within [lo_hz, hi_hz].

    For harmonic signals the envelope is only sampled at multiples of f0, so
    the peak is located by a parabolic fit of log harmonic amplitudes around
    the strongest harmonic. Pass f0 when it is known; single-formant signals
    are nearly pure tones and can defeat the tracker.
    """
    if f0 is None:
        f0 = voiced_median(estimate_f0_contour(w))
    n_fft = 1 << int(np.ceil(np.log2(max(4096, 8 * w.sample_rate / f0))))
    x = w.samples
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    spec = np.abs(np.fft.rfft(x[:n_fft] * np.hanning(n_fft)))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / w.sample_rate)
    bin_hz = freqs[1]

    ks = np.arange(max(1, int(np.ceil(lo_hz / f0))), int(hi_hz / f0) + 1)
    if len(ks) == 0:
        raise ValueError("no harmonic inside the search band")
    amps, hzs = [], []
    for k in ks:
        center = int(round(k * f0 / bin_hz))
        half = max(2, int(0.4 * f0 / bin_hz))
        seg = spec[max(0, center - half):center + half + 1]
        j = int(np.argmax(seg)) + max(0, center - half)
        amps.append(max(spec[j], 1e-20))
        hzs.append(freqs[j])
    amps = np.log(np.array(amps))
    i = int(np.argmax(amps))
    if 0 < i < len(amps) - 1:
        shift, _ = _parabolic_peak(amps, i)
        return float(np.interp(shift, np.arange(len(hzs)), hzs))
    return float(hzs[i])
