import numpy as np
import pytest

from voxtag.dsp import estimate_f0_contour, voiced_median
from voxtag.errors import InvalidSpec
from voxtag.perturb import SpeakerGender
from voxtag.synthdata import (GENDERED_STEMS, NEUTRAL_TOKENS, SynthSpec,
                              build_vocabulary, gendered_form, generate_corpus,
                              grammar_tokens, read_manifest, token_peaks,
                              write_manifest)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthSpec(n_utterances=60, seed=7))


def test_grammar_size_and_forms():
    tokens = grammar_tokens()
    assert len(tokens) == len(NEUTRAL_TOKENS) + 2 * len(GENDERED_STEMS)
    assert gendered_form("amat", SpeakerGender.F) == "amata"
    assert gendered_form("amat", SpeakerGender.M) == "amato"
    assert "amata" in tokens and "amato" in tokens
    vocab = build_vocabulary()
    assert vocab.id_of("il") >= 5  # after the reserved ids


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        SynthSpec(n_utterances=0)
    with pytest.raises(InvalidSpec):
        SynthSpec(n_utterances=1, gender_split=1.0)
    with pytest.raises(InvalidSpec):
        SynthSpec(n_utterances=1, token_duration=0.0)
    with pytest.raises(InvalidSpec):
        SynthSpec(n_utterances=1, min_len=4, max_gendered=4)


def test_sentence_shape(corpus):
    utterances, _ = corpus
    spec = SynthSpec(n_utterances=60, seed=7)
    for utt in utterances:
        assert spec.min_len <= len(utt.target_tokens) <= spec.max_len
        gendered = [t for t in utt.target_tokens if t not in NEUTRAL_TOKENS]
        assert 1 <= len(gendered) <= spec.max_gendered
        suffix = "a" if utt.gender is SpeakerGender.F else "o"
        assert all(t.endswith(suffix) for t in gendered)
        # the spoken side carries the bare stems, not the gendered endings
        assert len(utt.source_tokens) == len(utt.target_tokens)
        for src, tgt in zip(utt.source_tokens, utt.target_tokens):
            assert src == tgt or tgt == src + suffix


def test_references_differ_only_at_gendered_slots(corpus):
    _, entries = corpus
    for e in entries:
        assert len(e.reference) == len(e.wrong_reference)
        swap = dict(e.term_pairs)
        assert all(w == swap.get(r, r)
                   for r, w in zip(e.reference, e.wrong_reference))
        assert any(r != w for r, w in zip(e.reference, e.wrong_reference))


def test_gender_split_is_binomial():
    utterances, _ = generate_corpus(SynthSpec(n_utterances=400, seed=1))
    n_f = sum(u.gender is SpeakerGender.F for u in utterances)
    # Binomial(400, 0.3): mean 120, std ~9.2; allow 4 sigma.
    assert abs(n_f - 120) < 37


def test_f0_medians_separate_at_170hz(corpus):
    utterances, _ = corpus
    for utt in utterances:
        med = voiced_median(estimate_f0_contour(utt.waveform))
        if utt.gender is SpeakerGender.F:
            assert med > 170.0
        else:
            assert med < 170.0


def test_waveform_length_tracks_sentence(corpus):
    utterances, _ = corpus
    spec = SynthSpec(n_utterances=60, seed=7)
    for utt in utterances[:10]:
        expected = len(utt.source_tokens) * int(round(spec.token_duration
                                                      * spec.sample_rate))
        assert len(utt.waveform.samples) == expected


def test_token_peaks_deterministic_and_high_band():
    for token in grammar_tokens():
        peaks = token_peaks(token)
        assert peaks == token_peaks(token)
        for hz, _gain in peaks:
            assert hz >= 1500.0  # above the gendered formant region


def test_generation_is_deterministic():
    a, ea = generate_corpus(SynthSpec(n_utterances=8, seed=42))
    b, eb = generate_corpus(SynthSpec(n_utterances=8, seed=42))
    assert ea == eb
    for ua, ub in zip(a, b):
        assert ua.target_tokens == ub.target_tokens
        assert ua.gender is ub.gender
        np.testing.assert_array_equal(ua.waveform.samples, ub.waveform.samples)


def test_manifest_roundtrip(tmp_path, corpus):
    utterances, _ = corpus
    path = write_manifest(utterances[:5], tmp_path)
    loaded = read_manifest(path)
    assert len(loaded) == 5
    for orig, back in zip(utterances, loaded):
        assert back.id == orig.id
        assert back.gender is orig.gender
        assert back.source_tokens == orig.source_tokens
        assert back.target_tokens == orig.target_tokens
        # 16-bit PCM roundtrip
        np.testing.assert_allclose(back.waveform.samples, orig.waveform.samples,
                                   atol=1.0 / 32767)
