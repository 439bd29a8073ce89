"""Tag-conditioned encoder-decoder with an adversarial gender discriminator.

The encoder is a small feedforward-residual stack over x4 mean-pooled log-mel
frames; the decoder is a single-head attention layer conditioned on the first
prefix token (bos or a gender tag) at every position.
"""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateFrequency,
    EmptyPrefix,
    InvalidDistribution,
    MissingBos,
    NonFinite,
    ShapeMismatch,
    UnknownToken,
)
from .perturb import SpeakerGender

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
TAG_F_ID = 3
TAG_M_ID = 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<tag_F>", "<tag_M>")

MODES = ("gender_unaware", "multi_gender", "specialized_F", "specialized_M")


class Vocabulary:
    """Dense token-to-id map with fixed reserved ids 0..4."""

    def __init__(self, tokens):
        self.tokens = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        if len(set(self.tokens)) != len(self.tokens):
            raise UnknownToken("duplicate tokens in vocabulary")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens):
        return [self.id_of(t) for t in tokens]

    def decode(self, ids):
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise UnknownToken(f"id {i} out of range")
            out.append(self.tokens[i])
        return out


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 80
    hidden_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 1
    disc_hidden: int = 64
    label_smoothing: float = 0.1
    disc_loss_weight: float = 0.5
    dropout: float = 0.0
    mode: str = "multi_gender"

    def __post_init__(self):
        if min(self.feature_dim, self.hidden_dim, self.encoder_layers,
               self.decoder_layers, self.disc_hidden) <= 0:
            raise ValueError("dimensions and layer counts must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class ClassWeights:
    w_f: float
    w_m: float


def compute_class_weights(f_f: float, f_m: float) -> ClassWeights:
    """Inverse-frequency weights normalized so w_f*f_f + w_m*f_m = 1."""
    if f_f <= 0 or f_m <= 0:
        raise DegenerateFrequency("class frequencies must be positive")
    if abs(f_f + f_m - 1.0) > 1e-6:
        raise DegenerateFrequency("frequencies must sum to 1")
    return ClassWeights(w_f=1.0 / (2.0 * f_f), w_m=1.0 / (2.0 * f_m))


def apply_target_forcing(prefix, gender: SpeakerGender):
    """Replace the leading bos with the speaker's gender tag."""
    if not len(prefix) or prefix[0] != BOS_ID:
        raise MissingBos("prefix must start with bos")
    tag = TAG_F_ID if gender is SpeakerGender.F else TAG_M_ID
    return [tag] + list(prefix[1:])


def sinusoidal_positions(length, dim):
    pos = np.arange(length)[:, None]
    inv = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * inv[None, :]
    enc = np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def pool4(features):
    """Mean-pool frames in groups of 4; the tail group may be shorter."""
    T = features.shape[0]
    t_out = -(-T // 4)
    pooled = np.zeros((t_out, features.shape[1]))
    for i in range(t_out):
        pooled[i] = features[4 * i:4 * i + 4].mean(axis=0)
    return pooled


class TranslationModel:
    """Holds parameters and the forward graph for one configuration."""

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        h, d = cfg.hidden_dim, cfg.feature_dim
        V = len(vocab)

        def param(name, shape, fan_in):
            self.params[name] = ad.Tensor(
                rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape),
                requires_grad=True)

        # The encoder starts near-silent (small input projection, zero-output
        # residual branches) so conditioning signals in the decoder input are
        # picked up first and the audio pathway grows only when the loss
        # still demands it.
        param("enc.in_w", (d, h), 100.0 * d)
        param("enc.in_b", (h,), 1)
        for i in range(cfg.encoder_layers):
            param(f"enc.l{i}.w1", (h, h), h)
            param(f"enc.l{i}.b1", (h,), 1)
            self.params[f"enc.l{i}.w2"] = ad.Tensor(np.zeros((h, h)), requires_grad=True)
            param(f"enc.l{i}.b2", (h,), 1)
        param("dec.emb", (V, h), h)
        param("dec.l0.w1", (2 * h, h), 2 * h)
        param("dec.l0.b1", (h,), 1)
        for i in range(1, cfg.decoder_layers):
            param(f"dec.l{i}.w1", (h, h), h)
            param(f"dec.l{i}.b1", (h,), 1)
        param("dec.out_w", (h, V), h)
        param("dec.out_b", (V,), 1)
        param("disc.w1", (h, cfg.disc_hidden), h)
        param("disc.b1", (cfg.disc_hidden,), 1)
        param("disc.w2", (cfg.disc_hidden, 2), cfg.disc_hidden)
        param("disc.b2", (2,), 1)

    def state_dict(self):
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ShapeMismatch("checkpoint parameter names do not match model")
        for name, values in state.items():
            if values.shape != self.params[name].values.shape:
                raise ShapeMismatch(f"{name}: {values.shape} vs {self.params[name].values.shape}")
            self.params[name] = ad.Tensor(values, requires_grad=True)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def encode(self, features):
        """features: (T, feature_dim) array -> (ceil(T/4), hidden_dim) Tensor."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.cfg.feature_dim:
            raise ShapeMismatch(f"expected (T, {self.cfg.feature_dim}) features")
        x = ad.Tensor(pool4(features))
        p = self.params
        h = ad.add(ad.matmul(x, p["enc.in_w"]), p["enc.in_b"])
        for i in range(self.cfg.encoder_layers):
            inner = ad.relu(ad.add(ad.matmul(h, p[f"enc.l{i}.w1"]), p[f"enc.l{i}.b1"]))
            h = ad.add(h, ad.add(ad.matmul(inner, p[f"enc.l{i}.w2"]), p[f"enc.l{i}.b2"]))
        return h

    def _check_prefix(self, prefix):
        if len(prefix) == 0:
            raise EmptyPrefix("decoder prefix is empty")
        for t in prefix:
            if not 0 <= t < len(self.vocab):
                raise UnknownToken(f"token id {t} out of range")
        if prefix[0] not in (BOS_ID, TAG_F_ID, TAG_M_ID):
            raise UnknownToken("prefix must start with bos or a gender tag")

    def decode_all(self, enc_out, prefix):
        """Teacher-forced next-token logits for every prefix position: (L, V)."""
        self._check_prefix(prefix)
        p = self.params
        ids = np.asarray(prefix, dtype=np.int64)
        emb = ad.embedding(p["dec.emb"], ids)
        tag = ad.embedding(p["dec.emb"], ids[:1])
        d_in = ad.add(ad.add(emb, tag),
                      ad.Tensor(sinusoidal_positions(len(ids), self.cfg.hidden_dim)))
        scale = 1.0 / np.sqrt(self.cfg.hidden_dim)
        scores = ad.mul(ad.matmul(d_in, transpose(enc_out)), scale)
        ctx = ad.matmul(ad.softmax(scores, axis=-1), enc_out)
        hid = ad.relu(ad.add(ad.matmul(ad.concat([ctx, d_in], axis=1), p["dec.l0.w1"]),
                             p["dec.l0.b1"]))
        for i in range(1, self.cfg.decoder_layers):
            hid = ad.add(hid, ad.relu(ad.add(ad.matmul(hid, p[f"dec.l{i}.w1"]),
                                             p[f"dec.l{i}.b1"])))
        return ad.add(ad.matmul(hid, p["dec.out_w"]), p["dec.out_b"])

    def decode_step(self, enc_out, prefix):
        """Distribution over the vocabulary for the token after the prefix."""
        logits = self.decode_all(enc_out, prefix)
        return ad.softmax(ad.Tensor(logits.values[-1]), axis=-1)

    def greedy_decode(self, features, first_token, max_len=32):
        enc_out = self.encode(features)
        prefix = [first_token]
        for _ in range(max_len):
            dist = self.decode_step(enc_out, prefix)
            nxt = int(np.argmax(dist.values))
            if nxt == EOS_ID:
                break
            prefix.append(nxt)
        return prefix[1:]

    def discriminate(self, enc_out, lam):
        """Gender logits (size 2) through the gradient reversal layer."""
        p = self.params
        x = ad.grl_apply(enc_out, lam)
        hid = ad.relu(ad.add(ad.matmul(x, p["disc.w1"]), p["disc.b1"]))
        logits = ad.add(ad.matmul(hid, p["disc.w2"]), p["disc.b2"])
        return ad.mean(logits, axis=0)


def transpose(t):
    """Transpose a 2-D tensor (gradient transposes back)."""
    def backward(g):
        return (g.T,)
    return ad.Tensor(t.values.T, _parents=(t,), _backward=backward)


def label_smoothed_ce(probs, target: int, smoothing: float):
    """Cross entropy against a smoothed one-hot; pad targets contribute zero."""
    values = probs.values if isinstance(probs, ad.Tensor) else np.asarray(probs)
    if abs(values.sum() - 1.0) > 1e-6 or values.min() < 0:
        raise InvalidDistribution("probabilities must be a distribution")
    if target == PAD_ID:
        return ad.Tensor(0.0)
    n = values.shape[-1]
    q = np.full(n, smoothing / (n - 1))
    q[target] = 1.0 - smoothing
    probs = probs if isinstance(probs, ad.Tensor) else ad.Tensor(probs)
    return ad.mul(ad.sum_(ad.mul(q, ad.log(probs))), -1.0)


def sequence_loss(logits, targets, smoothing: float):
    """Mean label-smoothed cross entropy over non-pad positions of (L, V) logits."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.shape[0] != len(targets):
        raise ShapeMismatch("logits and targets disagree on length")
    n = logits.values.shape[1]
    q = np.full((len(targets), n), smoothing / (n - 1))
    q[np.arange(len(targets)), targets] = 1.0 - smoothing
    mask = (targets != PAD_ID).astype(np.float64)
    q *= mask[:, None]
    count = max(mask.sum(), 1.0)
    logp = ad.log(ad.add(ad.softmax(logits, axis=-1), 1e-300))
    return ad.mul(ad.sum_(ad.mul(q, logp)), -1.0 / count)


def weighted_disc_loss(logits, label: SpeakerGender, weights: ClassWeights):
    """Class-weighted cross entropy of the 2-way gender logits."""
    idx = 0 if label is SpeakerGender.F else 1
    w = weights.w_f if label is SpeakerGender.F else weights.w_m
    one_hot = np.zeros(2)
    one_hot[idx] = 1.0
    logp = ad.log(ad.add(ad.softmax(logits, axis=-1), 1e-300))
    return ad.mul(ad.sum_(ad.mul(one_hot, logp)), -w)


def combined_loss(translation_loss, disc_loss, cfg: ModelConfig):
    """translation_loss + disc_loss_weight * disc_loss (disc term optional)."""
    if not np.all(np.isfinite(translation_loss.values)):
        raise NonFinite("translation loss is not finite")
    if disc_loss is None:
        return translation_loss
    if not np.all(np.isfinite(disc_loss.values)):
        raise NonFinite("discriminator loss is not finite")
    return ad.add(translation_loss, ad.mul(disc_loss, cfg.disc_loss_weight))


def save_model(model: TranslationModel, path) -> None:
    """Checkpoint plus a sidecar text header with config and vocabulary."""
    ad.save_checkpoint(model.state_dict(), path)
    cfg = model.cfg
    lines = [f"{k}={getattr(cfg, k)}" for k in (
        "feature_dim", "hidden_dim", "encoder_layers", "decoder_layers",
        "disc_hidden", "label_smoothing", "disc_loss_weight", "dropout", "mode")]
    lines.append("vocab=" + " ".join(model.vocab.tokens[len(RESERVED_TOKENS):]))
    with open(str(path) + ".meta", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path) -> TranslationModel:
    meta = {}
    with open(str(path) + ".meta", encoding="utf-8") as f:
        for line in f:
            key, _, value = line.rstrip("\n").partition("=")
            meta[key] = value
    cfg = ModelConfig(
        feature_dim=int(meta["feature_dim"]),
        hidden_dim=int(meta["hidden_dim"]),
        encoder_layers=int(meta["encoder_layers"]),
        decoder_layers=int(meta["decoder_layers"]),
        disc_hidden=int(meta["disc_hidden"]),
        label_smoothing=float(meta["label_smoothing"]),
        disc_loss_weight=float(meta["disc_loss_weight"]),
        dropout=float(meta["dropout"]),
        mode=meta["mode"])
    vocab = Vocabulary(meta["vocab"].split() if meta["vocab"] else [])
    model = TranslationModel(vocab, cfg)
    model.load_state_dict(ad.load_checkpoint(path))
    return model


def with_mode(model: TranslationModel, mode: str) -> TranslationModel:
    """Same parameters under a different conditioning mode."""
    out = TranslationModel(model.vocab, replace(model.cfg, mode=mode))
    out.load_state_dict(model.state_dict())
    return out
