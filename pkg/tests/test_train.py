import numpy as np
import pytest

from voxtag.errors import ConfigInvalid, SingleClassData
from voxtag.model import ModelConfig, TranslationModel
from voxtag.perturb import PerturbConfig, SpeakerGender
from voxtag.synthdata import SynthSpec, build_vocabulary, generate_corpus
from voxtag.train import (Adam, TrainConfig, average_checkpoints, noam_lr,
                          probe_discriminator, train_loop)


@pytest.fixture(scope="module")
def tiny_corpus():
    utterances, _ = generate_corpus(SynthSpec(n_utterances=16, seed=9))
    return utterances


def tiny_cfg(**kw):
    base = dict(total_updates=20, warmup_updates=5, batch_size=4,
                average_last=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_noam_shape():
    peak, warmup = 2e-3, 200
    assert noam_lr(warmup, warmup, peak) == pytest.approx(peak)
    assert noam_lr(warmup // 2, warmup, peak) == pytest.approx(peak / 2)
    assert noam_lr(4 * warmup, warmup, peak) == pytest.approx(peak / 2)
    steps = np.arange(1, 1000)
    lrs = np.array([noam_lr(s, warmup, peak) for s in steps])
    assert np.argmax(lrs) == warmup - 1
    assert np.all(np.diff(lrs[warmup:]) < 0)


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        TrainConfig(strategy="weird")
    with pytest.raises(ConfigInvalid):
        TrainConfig(warmup_updates=100, total_updates=50)
    with pytest.raises(ConfigInvalid):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigInvalid):
        TrainConfig(total_updates=100, average_last=20)


def test_default_schedule_by_strategy():
    assert TrainConfig(strategy="scratch").schedule().fixed_lambda == 0.5
    assert TrainConfig(strategy="fine_tune").schedule().fixed_lambda == 10.0


def test_fine_tune_requires_init(tiny_corpus):
    with pytest.raises(ConfigInvalid):
        train_loop(tiny_corpus, ModelConfig(), tiny_cfg(strategy="fine_tune"))


def test_specialized_mode_rejects_mixed_corpus(tiny_corpus):
    assert len({u.gender for u in tiny_corpus}) == 2
    with pytest.raises(ConfigInvalid):
        train_loop(tiny_corpus, ModelConfig(mode="specialized_F"), tiny_cfg())


def test_training_is_seed_deterministic(tiny_corpus):
    vocab = build_vocabulary()
    runs = [train_loop(tiny_corpus, ModelConfig(mode="multi_gender"),
                       tiny_cfg(seed=3), vocab=vocab) for _ in range(2)]
    for name in runs[0].model.params:
        np.testing.assert_array_equal(runs[0].model.params[name].values,
                                      runs[1].model.params[name].values)
    assert runs[0].val_losses == runs[1].val_losses


def test_checkpoint_cadence_and_averaging(tiny_corpus):
    cfg = tiny_cfg(total_updates=20, checkpoint_interval=5, average_last=4)
    res = train_loop(tiny_corpus, ModelConfig(), cfg)
    assert len(res.checkpoints) == 4
    avg = average_checkpoints(res.checkpoints)
    for name in avg:
        expected = np.mean([c[name] for c in res.checkpoints], axis=0)
        np.testing.assert_allclose(avg[name], expected)


def test_fine_tune_starts_from_init(tiny_corpus):
    vocab = build_vocabulary()
    base = train_loop(tiny_corpus, ModelConfig(mode="gender_unaware"),
                      tiny_cfg(seed=1), vocab=vocab)
    init = base.model.state_dict()
    ft = train_loop(tiny_corpus, ModelConfig(mode="gender_unaware"),
                    tiny_cfg(strategy="fine_tune", seed=1),
                    init=init, vocab=vocab)
    # The fine-tune run's initial validation loss is the donor's final state.
    direct = train_loop(tiny_corpus, ModelConfig(mode="gender_unaware"),
                        tiny_cfg(strategy="fine_tune", seed=2),
                        init=init, vocab=vocab)
    assert ft.val_losses[0][1] == pytest.approx(direct.val_losses[0][1])
    assert ft.val_losses[0][1] != pytest.approx(base.val_losses[0][1])


def test_metrics_jsonl(tiny_corpus, tmp_path):
    import json
    path = tmp_path / "metrics.jsonl"
    train_loop(tiny_corpus, ModelConfig(mode="multi_gender"),
               tiny_cfg(use_grl=True), metrics_path=path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(lines) == 20
    assert [l["step"] for l in lines] == list(range(1, 21))
    for l in lines:
        assert set(l) == {"step", "lr", "translation_loss", "disc_loss", "lambda"}
        assert l["lambda"] == pytest.approx(0.5)
        assert np.isfinite(l["translation_loss"])


def test_perturbation_redrawn_each_epoch(tiny_corpus, monkeypatch):
    """With perturb active, each epoch makes fresh opposite-shift decisions."""
    from voxtag import train as train_mod
    calls = []

    def spy(w, gender, cfg, rng):
        calls.append(rng.random())
        return w, False

    monkeypatch.setattr(train_mod, "apply_opposite", spy)
    cfg = tiny_cfg(total_updates=8, batch_size=8, average_last=1,
                   perturb=PerturbConfig(p=0.5))
    train_loop(tiny_corpus, ModelConfig(), cfg)
    n_train = len(tiny_corpus) - max(2, round(0.1 * len(tiny_corpus)))
    epochs = len(calls) // n_train
    assert epochs >= 2
    first = calls[:n_train]
    second = calls[n_train:2 * n_train]
    assert first != second  # fresh draws, not replayed ones


def test_probe_requires_both_classes(tiny_corpus):
    vocab = build_vocabulary()
    model = TranslationModel(vocab, ModelConfig(), seed=0)
    only_f = [u for u in tiny_corpus if u.gender is SpeakerGender.F]
    with pytest.raises(SingleClassData):
        probe_discriminator(model, only_f)


def test_adam_moves_toward_minimum():
    from voxtag import autodiff as ad
    x = ad.Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam({"x": x})
    for _ in range(400):
        x.zero_grad()
        loss = ad.mul(ad.mul(x, x), 0.5)
        ad.backward(ad.mean(loss))
        opt.step(0.05)
    assert abs(float(x.values[0])) < 1e-2
