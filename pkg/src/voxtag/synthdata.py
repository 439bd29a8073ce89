"""Synthetic audio+text corpus where vocal pitch and formants carry the
speaker's gender and target sentences contain gender-marked token pairs."""

import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform, synth_harmonic, read_wav, write_wav
from .errors import InvalidSpec
from .evaluation import GenderEvalEntry
from .model import Vocabulary
from .perturb import PerturbConfig, SpeakerGender, sample_target_median

# Two-peak spectral envelopes per gender, picked so the 1.2x / 0.8x formant
# scaling maps one set approximately onto the other.
F_PEAKS = ((800.0, 8.0), (1150.0, 5.0))
M_PEAKS = ((650.0, 8.0), (950.0, 5.0))

# Pseudo-Romance toy grammar: neutral fillers plus gendered stems realized
# as stem+"a" (feminine) or stem+"o" (masculine).
NEUTRAL_TOKENS = (
    "il", "la", "con", "per", "sempre", "ieri", "oggi", "domani", "casa",
    "strada", "mare", "sole", "luna", "voce", "tempo", "viaggio", "canto",
    "vento", "ponte", "fiume", "notte", "giorno", "cielo", "verso", "senza",
    "dopo", "prima", "quasi",
)
GENDERED_STEMS = (
    "amat", "stanc", "content", "rott", "nat", "perdut", "solitari",
    "sicur", "piccol", "onest",
)


def gendered_form(stem: str, gender: SpeakerGender) -> str:
    return stem + ("a" if gender is SpeakerGender.F else "o")


# Spoken tokens are identified by two high-band spectral peaks. These sit
# above the gendered formant region (<= 1150 Hz) so token identity and
# speaker gender occupy largely separate mel bands.
TOKEN_PEAK_GAIN = 6.0


def token_peaks(token: str):
    """Deterministic pair of (hz, gain) peaks identifying a spoken token."""
    h = zlib.crc32(token.encode("utf-8"))
    p1 = 1500.0 + 200.0 * (h % 10)
    p2 = 3800.0 + 250.0 * ((h // 10) % 12)
    return ((p1, TOKEN_PEAK_GAIN), (p2, TOKEN_PEAK_GAIN))


def synth_utterance(f0, gender_peaks, source_tokens, token_duration,
                    sample_rate=16000) -> Waveform:
    """One fixed-length harmonic segment per source token, all at the
    speaker's f0 and formants, with short fades to avoid segment clicks."""
    n_seg = int(round(token_duration * sample_rate))
    fade = min(int(0.005 * sample_rate), n_seg // 4)
    window = np.ones(n_seg)
    if fade > 0:
        window[:fade] = np.linspace(0.0, 1.0, fade)
        window[-fade:] = np.linspace(1.0, 0.0, fade)
    segments = []
    for token in source_tokens:
        peaks = tuple(gender_peaks) + token_peaks(token)
        seg = synth_harmonic(f0, peaks, token_duration, sample_rate)
        segments.append(seg.samples * window)
    return Waveform(np.concatenate(segments), sample_rate)


def grammar_tokens():
    """Every surface token the corpus can emit."""
    forms = [gendered_form(s, g) for s in GENDERED_STEMS
             for g in (SpeakerGender.F, SpeakerGender.M)]
    return sorted(NEUTRAL_TOKENS) + sorted(forms)


def build_vocabulary() -> Vocabulary:
    return Vocabulary(grammar_tokens())


@dataclass(frozen=True)
class SynthSpec:
    n_utterances: int
    gender_split: float = 0.3
    token_duration: float = 0.06
    sample_rate: int = 16000
    min_len: int = 5
    max_len: int = 12
    max_gendered: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances <= 0:
            raise InvalidSpec("n_utterances must be positive")
        if not 0.0 < self.gender_split < 1.0:
            raise InvalidSpec("gender_split must be in (0, 1)")
        if self.token_duration <= 0:
            raise InvalidSpec("token_duration must be positive")
        if not 0 < self.min_len <= self.max_len:
            raise InvalidSpec("bad sentence length range")
        if not 1 <= self.max_gendered <= self.min_len - 1:
            raise InvalidSpec("max_gendered must fit in the shortest sentence")


@dataclass
class Utterance:
    id: str
    gender: SpeakerGender
    source_tokens: list
    target_tokens: list
    waveform: Waveform = None
    wav_path: str = None
    features: object = field(default=None, repr=False)


BIGRAM_BRANCHING = 3


def _successor(state: int, choice: int) -> int:
    """Deterministic 3-way bigram structure over the neutral tokens, keeping
    sentence content learnable by a small language model."""
    return (5 * state + 7 * choice + 3) % len(NEUTRAL_TOKENS)


def _sample_sentence(gender: SpeakerGender, rng):
    """Neutral fillers with 1-3 gendered slots; slot index 2 is always gendered
    so that decoding reliably passes through a gender-marked position."""
    length = int(rng.integers(5, 13))
    n_gendered = int(rng.integers(1, 4))
    positions = {2}
    while len(positions) < n_gendered:
        positions.add(int(rng.integers(0, length)))
    target, source, pairs = [], [], []
    slot = 0
    state = int(rng.integers(BIGRAM_BRANCHING))
    for i in range(length):
        if i in positions:
            # The stem is a deterministic function of the sentence state so
            # only its gendered ending carries information about the speaker.
            stem = GENDERED_STEMS[(5 * state + 7 * slot + 3) % len(GENDERED_STEMS)]
            slot += 1
            target.append(gendered_form(stem, gender))
            source.append(stem)
            pairs.append((gendered_form(stem, gender),
                          gendered_form(stem, gender.opposite)))
        else:
            state = _successor(state, int(rng.integers(BIGRAM_BRANCHING)))
            token = NEUTRAL_TOKENS[state]
            target.append(token)
            source.append(token)
    return source, target, pairs


def generate_corpus(spec: SynthSpec, perturb_cfg: PerturbConfig = None):
    """Sampled utterances plus the aligned gender-evaluation entries."""
    f0_cfg = perturb_cfg if perturb_cfg is not None else PerturbConfig()
    utterances, entries = [], []
    for i in range(spec.n_utterances):
        rng = np.random.default_rng([spec.seed, i])
        gender = SpeakerGender.F if rng.random() < spec.gender_split else SpeakerGender.M
        # Redraw samples near the 170 Hz decision boundary so an f0-median
        # threshold classifier recovers the label with certainty; only the
        # masculine distribution's upper tail is affected.
        lo, hi = (175.0, np.inf) if gender is SpeakerGender.F else (0.0, 165.0)
        f0 = sample_target_median(gender, f0_cfg, rng)
        while not lo <= f0 <= hi:
            f0 = sample_target_median(gender, f0_cfg, rng)
        peaks = F_PEAKS if gender is SpeakerGender.F else M_PEAKS
        source, target, pairs = _sample_sentence(gender, rng)
        w = synth_utterance(f0, peaks, source, spec.token_duration,
                            spec.sample_rate)
        swap = dict(pairs)
        swapped = [swap.get(t, t) for t in target]
        uid = f"utt{i:05d}"
        utterances.append(Utterance(id=uid, gender=gender, source_tokens=source,
                                    target_tokens=target, waveform=w))
        entries.append(GenderEvalEntry(id=uid, reference=tuple(target),
                                       wrong_reference=tuple(swapped),
                                       term_pairs=tuple(dict.fromkeys(pairs))))
    return utterances, entries


def write_manifest(utterances, out_dir) -> str:
    """Write wavs plus the tab-separated manifest; returns the manifest path."""
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.tsv")
    with open(path, "w", encoding="utf-8") as f:
        for utt in utterances:
            wav_path = utt.wav_path or os.path.join(wav_dir, f"{utt.id}.wav")
            if utt.waveform is not None:
                write_wav(utt.waveform, wav_path)
            f.write("\t".join([utt.id, wav_path, utt.gender.value,
                               " ".join(utt.source_tokens),
                               " ".join(utt.target_tokens)]) + "\n")
    return path


def read_manifest(path, load_audio=True):
    utterances = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, wav_path, gender, source, target = line.split("\t")
            utterances.append(Utterance(
                id=uid, gender=SpeakerGender(gender),
                source_tokens=source.split(), target_tokens=target.split(),
                waveform=read_wav(wav_path) if load_audio else None,
                wav_path=wav_path))
    return utterances
