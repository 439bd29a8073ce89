"""Gender-accuracy scoring, the tag-inversion protocol, and corpus BLEU."""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dsp import logmel_features
from .errors import InvalidSpec, LengthMismatch, MissingHypothesis, WrongMode
from .model import TAG_F_ID, TAG_M_ID
from .perturb import SpeakerGender


@dataclass(frozen=True)
class GenderEvalEntry:
    """One utterance's reference, its gender-swapped twin, and the annotated
    (correct_form, wrong_form) token pairs that differ between them."""

    id: str
    reference: tuple
    wrong_reference: tuple
    term_pairs: tuple

    def __post_init__(self):
        if not self.term_pairs:
            raise InvalidSpec(f"{self.id}: no annotated term pairs")
        for correct, wrong in self.term_pairs:
            if correct == wrong:
                raise InvalidSpec(f"{self.id}: degenerate pair {correct!r}")

    def swapped(self):
        """The same entry scored from the opposite gender's point of view."""
        return GenderEvalEntry(
            id=self.id,
            reference=self.wrong_reference,
            wrong_reference=self.reference,
            term_pairs=tuple((w, c) for c, w in self.term_pairs),
        )


@dataclass(frozen=True)
class GenderAccuracyReport:
    total_terms: int
    found: int
    correct: int

    @property
    def accuracy(self) -> Optional[float]:
        return None if self.found == 0 else self.correct / self.found

    @property
    def coverage(self) -> float:
        return 0.0 if self.total_terms == 0 else self.found / self.total_terms

    def as_dict(self):
        return {"total_terms": self.total_terms, "found": self.found,
                "correct": self.correct, "accuracy": self.accuracy,
                "coverage": self.coverage}


def gender_accuracy(hypotheses, entries) -> GenderAccuracyReport:
    """Exact whole-token, case-insensitive matching of annotated forms.

    For each term pair: correct_form in the hypothesis counts as found and
    correct; otherwise wrong_form present counts as found only.
    """
    total = found = correct = 0
    for entry in entries:
        if entry.id not in hypotheses:
            raise MissingHypothesis(f"no hypothesis for {entry.id}")
        tokens = {t.lower() for t in hypotheses[entry.id]}
        for correct_form, wrong_form in entry.term_pairs:
            total += 1
            if correct_form.lower() in tokens:
                found += 1
                correct += 1
            elif wrong_form.lower() in tokens:
                found += 1
    return GenderAccuracyReport(total_terms=total, found=found, correct=correct)


def tag_inversion_eval(model, corpus, entries, max_len=20):
    """Greedy-decode each utterance under both gender tags.

    Returns four reports keyed 1F, 1M (tag matches the speaker) and
    1F-tagM, 1M-tagF (inverted tag). In the inverted buckets the tag defines
    correctness, so scoring flips each entry's correct/wrong forms.
    """
    if model.cfg.mode != "multi_gender":
        raise WrongMode(f"tag inversion needs a multi_gender model, got {model.cfg.mode}")
    by_id = {e.id: e for e in entries}
    buckets = {"1F": [], "1M": [], "1F-tagM": [], "1M-tagF": []}
    hyps = {key: {} for key in buckets}
    matched_hyps = {}
    for utt in corpus:
        entry = by_id[utt.id]
        feats = logmel_features(utt.waveform).frames
        for tag, tag_gender in ((TAG_F_ID, SpeakerGender.F), (TAG_M_ID, SpeakerGender.M)):
            ids = model.greedy_decode(feats, tag, max_len=max_len)
            tokens = model.vocab.decode(ids)
            matched = tag_gender is utt.gender
            if matched:
                key = "1F" if utt.gender is SpeakerGender.F else "1M"
                buckets[key].append(entry)
                matched_hyps[utt.id] = tokens
            else:
                key = "1F-tagM" if utt.gender is SpeakerGender.F else "1M-tagF"
                buckets[key].append(entry.swapped())
            hyps[key][utt.id] = tokens
    reports = {key: gender_accuracy(hyps[key], buckets[key]) for key in buckets}
    return reports, matched_hyps


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def corpus_bleu(hypotheses, references) -> float:
    """Corpus BLEU on whitespace tokens: clipped n-gram precisions (n=1..4),
    exponential smoothing on zero numerators, brevity penalty, scaled to 100."""
    if len(hypotheses) != len(references):
        raise LengthMismatch(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references or any(len(r) == 0 for r in references):
        raise LengthMismatch("references must be non-empty")
    numer = np.zeros(4)
    denom = np.zeros(4)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hc = _ngram_counts(hyp, n)
            rc = _ngram_counts(ref, n)
            numer[n - 1] += sum(min(c, rc.get(g, 0)) for g, c in hc.items())
            denom[n - 1] += max(len(hyp) - n + 1, 0)
    log_prec = np.zeros(4)
    smooth = 1.0
    for n in range(4):
        if denom[n] == 0:
            return 0.0
        if numer[n] > 0:
            log_prec[n] = np.log(numer[n] / denom[n])
        else:
            smooth *= 2.0
            log_prec[n] = np.log(1.0 / (smooth * denom[n]))
    bp = 1.0 if hyp_len >= ref_len else np.exp(1.0 - ref_len / max(hyp_len, 1))
    return float(100.0 * bp * np.exp(log_prec.mean()))


def read_eval_tsv(path):
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, ref, wrong, pairs = line.split("\t")
            term_pairs = tuple(tuple(p.split("|")) for p in pairs.split(";"))
            entries.append(GenderEvalEntry(
                id=uid, reference=tuple(ref.split()),
                wrong_reference=tuple(wrong.split()), term_pairs=term_pairs))
    return entries


def write_eval_tsv(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            pairs = ";".join(f"{c}|{w}" for c, w in e.term_pairs)
            f.write(f"{e.id}\t{' '.join(e.reference)}\t{' '.join(e.wrong_reference)}\t{pairs}\n")


def write_report(reports, bleu, path) -> None:
    doc = {key: r.as_dict() for key, r in reports.items()}
    doc["bleu"] = bleu
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
