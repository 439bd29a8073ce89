"""Mono 16-bit PCM audio container, WAV I/O and harmonic test-signal synthesis."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidF0, MalformedHeader, UnsupportedEncoding

PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio. Samples are float64 in [-1, 1]; immutable after construction."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedEncoding("only mono (1-D) audio is supported")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples = np.clip(samples, -1.0, 1.0)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file. Only 16-bit PCM mono is accepted."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm_bytes = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            pcm_bytes = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or pcm_bytes is None:
        raise MalformedHeader(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedEncoding(f"{path}: format tag {audio_format}, expected PCM (1)")
    if channels != 1:
        raise UnsupportedEncoding(f"{path}: {channels} channels, expected mono")
    if bits != 16:
        raise UnsupportedEncoding(f"{path}: {bits} bits/sample, expected 16")

    ints = np.frombuffer(pcm_bytes[: len(pcm_bytes) // 2 * 2], dtype="<i2")
    return Waveform(ints.astype(np.float64) / PCM_SCALE, sample_rate)


def write_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono. Samples are clipped to [-1, 1] before quantization."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    ints = np.clip(np.round(clipped * PCM_SCALE), -32768, 32767).astype("<i2")
    pcm = ints.tobytes()
    byte_rate = w.sample_rate * 2
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate, byte_rate, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    with open(path, "wb") as f:
        f.write(header + pcm)


def synth_harmonic(f0, formant_peaks, duration, sample_rate=16000) -> Waveform:
    """Sum of harmonics of f0 up to Nyquist, shaped by an envelope interpolated
    through formant_peaks [(hz, gain), ...], peak-normalized to 0.9."""
    if not 50.0 <= f0 <= 500.0:
        raise InvalidF0(f"f0 {f0} Hz outside [50, 500]")
    if duration <= 0:
        raise ValueError("duration must be positive")

    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    nyquist = sample_rate / 2.0
    harmonics = np.arange(1, int(nyquist // f0) + 1) * f0
    harmonics = harmonics[harmonics < nyquist]

    if formant_peaks:
        # resonance-like envelope: gentle lowpass base plus a Gaussian bump
        # per formant, so the envelope maximum sits at the stated peak
        envelope = 0.4 / (1.0 + (harmonics / 3000.0) ** 2)
        for hz, gain in formant_peaks:
            bw = max(80.0, 0.12 * hz)
            envelope = envelope + gain * np.exp(-0.5 * ((harmonics - hz) / bw) ** 2)
    else:
        envelope = np.ones_like(harmonics)

    out = np.zeros(n)
    for hz, gain in zip(harmonics, envelope):
        out += gain * np.sin(2.0 * np.pi * hz * t)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return Waveform(out, sample_rate)
