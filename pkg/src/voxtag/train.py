"""Training loops, Noam learning-rate schedule, Adam, checkpoint averaging,
and the post-hoc gender probe on frozen encoders."""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import LambdaSchedule, average_checkpoints, lambda_at
from .dsp import logmel_features
from .errors import ConfigInvalid, DivergedLoss, SingleClassData
from .perturb import PerturbConfig, SpeakerGender, apply_opposite

__all__ = ["TrainConfig", "TrainResult", "noam_lr", "Adam", "train_loop",
           "average_checkpoints", "probe_discriminator"]


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "scratch"
    use_grl: bool = False
    grl_schedule: LambdaSchedule = None
    perturb: Optional[PerturbConfig] = None
    lr_peak: float = 2e-3
    warmup_updates: int = 200
    total_updates: int = 2000
    batch_size: int = 8
    seed: int = 0
    average_last: int = 7
    checkpoint_interval: int = 0
    holdout_fraction: float = 0.1
    # Adversarial training is two-timescale: the discriminator head tracks
    # the encoder closely so the reversed gradient points toward class
    # confusion rather than an ever-flipping decision boundary.
    disc_lr_multiplier: float = 10.0

    def __post_init__(self):
        if self.strategy not in ("scratch", "fine_tune"):
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}")
        if self.warmup_updates > self.total_updates:
            raise ConfigInvalid("warmup_updates must not exceed total_updates")
        if min(self.warmup_updates, self.total_updates, self.batch_size) <= 0:
            raise ConfigInvalid("updates and batch size must be positive")
        interval = self.checkpoint_interval or max(1, self.total_updates // 10)
        if self.average_last > self.total_updates // interval:
            raise ConfigInvalid("average_last exceeds the number of saved checkpoints")

    @property
    def interval(self):
        return self.checkpoint_interval or max(1, self.total_updates // 10)

    def schedule(self):
        if self.grl_schedule is not None:
            return self.grl_schedule
        # Fixed lambdas mirroring the defaults for each strategy.
        fixed = 10.0 if self.strategy == "fine_tune" else 0.5
        return LambdaSchedule(total_updates=self.total_updates, fixed_lambda=fixed)


@dataclass
class TrainResult:
    model: mdl.TranslationModel
    checkpoints: list
    val_losses: list = field(default_factory=list)


def noam_lr(step: int, warmup: int, lr_peak: float) -> float:
    """Linear ramp to lr_peak at step=warmup, inverse-sqrt decay after."""
    return lr_peak * min(step / warmup, np.sqrt(warmup / step))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9, lr_scale=None):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scale = lr_scale or {}
        self.m = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g ** 2
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            scale = self.lr_scale.get(name.split(".")[0], 1.0)
            p.values = p.values - scale * lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _start_token(mode, gender):
    if mode == "multi_gender":
        return mdl.TAG_F_ID if gender is SpeakerGender.F else mdl.TAG_M_ID
    return mdl.BOS_ID


def _utterance_features(utt):
    if utt.features is None:
        utt.features = logmel_features(utt.waveform).frames
    return utt.features


def _val_loss(model, utterances, vocab):
    total = 0.0
    for utt in utterances:
        enc = model.encode(_utterance_features(utt))
        targets = vocab.encode(utt.target_tokens) + [mdl.EOS_ID]
        prefix = [_start_token(model.cfg.mode, utt.gender)] + targets[:-1]
        loss = mdl.sequence_loss(model.decode_all(enc, prefix), targets,
                                 model.cfg.label_smoothing)
        total += loss.values.item()
    return total / max(len(utterances), 1)


def train_loop(corpus, model_cfg, train_cfg, init=None, vocab=None,
               metrics_path=None) -> TrainResult:
    """Adam + Noam training over utterances; returns the trained model and all
    interval checkpoints. With use_grl the discriminator loss joins the total
    through the gradient reversal layer at lambda_at(current step)."""
    if train_cfg.strategy == "fine_tune" and init is None:
        raise ConfigInvalid("fine_tune requires an initial checkpoint")
    if model_cfg.mode == "specialized_F" and any(u.gender is not SpeakerGender.F for u in corpus):
        raise ConfigInvalid("specialized_F requires a feminine-only corpus")
    if model_cfg.mode == "specialized_M" and any(u.gender is not SpeakerGender.M for u in corpus):
        raise ConfigInvalid("specialized_M requires a masculine-only corpus")
    if vocab is None:
        tokens = sorted({t for u in corpus for t in u.target_tokens})
        vocab = mdl.Vocabulary(tokens)

    model = mdl.TranslationModel(vocab, model_cfg, seed=train_cfg.seed)
    if init is not None:
        model.load_state_dict(init)
    schedule = train_cfg.schedule()

    n_val = max(2, int(round(train_cfg.holdout_fraction * len(corpus))))
    n_val = min(n_val, max(len(corpus) - train_cfg.batch_size, 1))
    val_set, train_set = corpus[:n_val], corpus[n_val:]

    n_f = sum(u.gender is SpeakerGender.F for u in train_set)
    f_f = min(max(n_f / len(train_set), 1e-3), 1 - 1e-3)
    weights = mdl.compute_class_weights(f_f, 1.0 - f_f)

    lr_scale = {"disc": train_cfg.disc_lr_multiplier} if train_cfg.use_grl else None
    opt = Adam(model.params, lr_scale=lr_scale)
    rng = np.random.default_rng(train_cfg.seed)
    initial_val = _val_loss(model, val_set, vocab)
    val_losses = [(0, initial_val)]
    checkpoints = []
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    step = 0
    epoch = 0
    epoch_feats = None
    try:
        while step < train_cfg.total_updates:
            order = rng.permutation(len(train_set))
            if train_cfg.perturb is not None:
                epoch_feats = {}
                for i, utt in enumerate(train_set):
                    sub = np.random.default_rng([train_cfg.seed, 7919, epoch, i])
                    w, manipulated = apply_opposite(utt.waveform, utt.gender,
                                                    train_cfg.perturb, sub)
                    if manipulated:
                        epoch_feats[utt.id] = logmel_features(w).frames
            epoch += 1
            for lo in range(0, len(order), train_cfg.batch_size):
                if step >= train_cfg.total_updates:
                    break
                batch = [train_set[i] for i in order[lo:lo + train_cfg.batch_size]]
                step += 1
                lam = lambda_at(schedule, min(step, schedule.total_updates)) \
                    if train_cfg.use_grl else 0.0
                model.zero_grad()
                t_total, d_total = ad.Tensor(0.0), ad.Tensor(0.0)
                for utt in batch:
                    feats = _utterance_features(utt)
                    if epoch_feats is not None and utt.id in epoch_feats:
                        feats = epoch_feats[utt.id]
                    enc = model.encode(feats)
                    targets = vocab.encode(utt.target_tokens) + [mdl.EOS_ID]
                    prefix = [_start_token(model_cfg.mode, utt.gender)] + targets[:-1]
                    t_total = ad.add(t_total, mdl.sequence_loss(
                        model.decode_all(enc, prefix), targets, model_cfg.label_smoothing))
                    if train_cfg.use_grl:
                        d_total = ad.add(d_total, mdl.weighted_disc_loss(
                            model.discriminate(enc, lam), utt.gender, weights))
                scale = 1.0 / len(batch)
                t_loss = ad.mul(t_total, scale)
                d_loss = ad.mul(d_total, scale) if train_cfg.use_grl else None
                loss = mdl.combined_loss(t_loss, d_loss, model_cfg)
                ad.backward(loss)
                lr = noam_lr(step, train_cfg.warmup_updates, train_cfg.lr_peak)
                opt.step(lr)
                if metrics:
                    metrics.write(json.dumps({
                        "step": step, "lr": lr,
                        "translation_loss": t_loss.values.item(),
                        "disc_loss": d_loss.values.item() if d_loss is not None else None,
                        "lambda": lam if train_cfg.use_grl else None}) + "\n")
                if step % train_cfg.interval == 0:
                    checkpoints.append(model.state_dict())
                    val = _val_loss(model, val_set, vocab)
                    val_losses.append((step, val))
                    if not np.isfinite(val) or val > 10.0 * initial_val:
                        raise DivergedLoss(f"validation loss {val} at step {step}")
    finally:
        if metrics:
            metrics.close()
    return TrainResult(model=model, checkpoints=checkpoints, val_losses=val_losses)


def probe_discriminator(model, held_out, seed=0, steps=400, lr=5e-3) -> float:
    """Train a fresh two-layer gender probe on the frozen encoder's outputs
    (even-indexed utterances), report accuracy on the odd-indexed rest."""
    train_set = held_out[0::2]
    test_set = held_out[1::2]
    for split in (train_set, test_set):
        if len({u.gender for u in split}) < 2:
            raise SingleClassData("both genders must appear in each probe split")

    def encoded(split):
        frames, pool_rows, labels = [], [], []
        offset = 0
        for j, utt in enumerate(split):
            enc = model.encode(_utterance_features(utt)).values
            frames.append(enc)
            pool_rows.append((j, offset, enc.shape[0]))
            offset += enc.shape[0]
            labels.append(0 if utt.gender is SpeakerGender.F else 1)
        X = np.concatenate(frames, axis=0)
        P = np.zeros((len(split), offset))
        for j, start, n in pool_rows:
            P[j, start:start + n] = 1.0 / n
        return X, P, np.array(labels)

    X_tr, P_tr, y_tr = encoded(train_set)
    X_te, P_te, y_te = encoded(test_set)
    h = model.cfg.hidden_dim
    dh = model.cfg.disc_hidden
    rng = np.random.default_rng(seed)
    params = {
        "w1": ad.Tensor(rng.normal(scale=1 / np.sqrt(h), size=(h, dh)), requires_grad=True),
        "b1": ad.Tensor(np.zeros(dh), requires_grad=True),
        "w2": ad.Tensor(rng.normal(scale=1 / np.sqrt(dh), size=(dh, 2)), requires_grad=True),
        "b2": ad.Tensor(np.zeros(2), requires_grad=True),
    }
    onehot = np.zeros((len(y_tr), 2))
    onehot[np.arange(len(y_tr)), y_tr] = 1.0
    opt = Adam(params)
    for _ in range(steps):
        for t in params.values():
            t.zero_grad()
        hid = ad.relu(ad.add(ad.matmul(ad.Tensor(X_tr), params["w1"]), params["b1"]))
        logits = ad.matmul(ad.Tensor(P_tr), ad.add(ad.matmul(hid, params["w2"]), params["b2"]))
        logp = ad.log(ad.softmax(logits, axis=-1))
        loss = ad.mul(ad.sum_(ad.mul(onehot, logp)), -1.0 / len(y_tr))
        ad.backward(loss)
        opt.step(lr)
    hid = np.maximum(X_te @ params["w1"].values + params["b1"].values, 0.0)
    logits = P_te @ (hid @ params["w2"].values + params["b2"].values)
    return float(np.mean(np.argmax(logits, axis=1) == y_te))
