"""Command-line entry point exposing the pipeline as subcommands: corpus
synthesis, perturbation, feature extraction, training, checkpoint averaging,
evaluation, probing, and small calculators for schedules and class weights."""

import os

# Cap numeric-library worker threads before numpy spins up its pools.
_threads = os.environ.get("VOXTAG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import model as mdl
from . import synthdata as sd
from . import train as tr
from .autodiff import LambdaSchedule, lambda_at
from .dsp import logmel_features, save_features
from .errors import ConfigInvalid, VoxtagError
from .perturb import PerturbConfig, apply_opposite

_CONFIG_SECTIONS = (mdl.ModelConfig, tr.TrainConfig, PerturbConfig, sd.SynthSpec)
_KNOWN_KEYS = {f.name for cls in _CONFIG_SECTIONS for f in fields(cls)}


def load_run_config(path):
    """Flat JSON document whose keys mirror the config dataclasses; unknown
    keys are rejected before any work starts."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ConfigInvalid("config must be a JSON object")
    unknown = sorted(set(cfg) - _KNOWN_KEYS)
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _section_kwargs(cfg, cls, overrides):
    """Config-file values for one dataclass, with non-None flag overrides
    winning over the file."""
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in cfg.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items()
                   if k in names and v is not None})
    return kwargs


def _read_corpus(manifest, eval_tsv=None):
    utterances = sd.read_manifest(manifest)
    entries = ev.read_eval_tsv(eval_tsv) if eval_tsv else None
    return utterances, entries


def cmd_synth_data(args):
    cfg = load_run_config(args.config)
    over = {"n_utterances": args.n_utterances, "gender_split": args.gender_split,
            "token_duration": args.token_duration, "seed": args.seed}
    spec = sd.SynthSpec(**_section_kwargs(cfg, sd.SynthSpec, over))
    utterances, entries = sd.generate_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest = sd.write_manifest(utterances, args.out)
    ev.write_eval_tsv(entries, os.path.join(args.out, "eval.tsv"))
    print(f"wrote {len(utterances)} utterances to {manifest}")
    return 0


def cmd_perturb(args):
    cfg = load_run_config(args.config)
    over = {"p": args.p, "seed": args.seed}
    pcfg = PerturbConfig(**_section_kwargs(cfg, PerturbConfig, over))
    utterances, _ = _read_corpus(args.manifest)
    n_changed = 0
    for i, utt in enumerate(utterances):
        rng = np.random.default_rng([pcfg.seed, i])
        utt.waveform, changed = apply_opposite(utt.waveform, utt.gender, pcfg, rng)
        utt.wav_path = None
        n_changed += changed
    os.makedirs(args.out, exist_ok=True)
    manifest = sd.write_manifest(utterances, args.out)
    print(f"perturbed {n_changed}/{len(utterances)} utterances into {manifest}")
    return 0


def cmd_features(args):
    utterances, _ = _read_corpus(args.manifest)
    feat_dir = os.path.join(args.out, "feat")
    os.makedirs(feat_dir, exist_ok=True)
    for utt in utterances:
        save_features(logmel_features(utt.waveform),
                      os.path.join(feat_dir, f"{utt.id}.vxft"))
    print(f"wrote {len(utterances)} feature files to {feat_dir}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    model_over = {"mode": args.mode}
    train_over = {"strategy": args.strategy, "use_grl": args.use_grl,
                  "lr_peak": args.lr_peak, "warmup_updates": args.warmup_updates,
                  "total_updates": args.total_updates, "batch_size": args.batch_size,
                  "seed": args.seed}
    model_cfg = mdl.ModelConfig(**_section_kwargs(cfg, mdl.ModelConfig, model_over))
    train_kwargs = _section_kwargs(cfg, tr.TrainConfig, train_over)
    if args.with_perturb:
        train_kwargs["perturb"] = PerturbConfig(
            **_section_kwargs(cfg, PerturbConfig, {"seed": args.seed}))
    train_cfg = tr.TrainConfig(**train_kwargs)
    utterances, _ = _read_corpus(args.manifest)
    init = ad.load_checkpoint(args.init) if args.init else None
    os.makedirs(args.out, exist_ok=True)
    result = tr.train_loop(utterances, model_cfg, train_cfg, init=init,
                           metrics_path=os.path.join(args.out, "metrics.jsonl"))
    for i, state in enumerate(result.checkpoints):
        step = (i + 1) * train_cfg.interval
        ad.save_checkpoint(state, os.path.join(args.out, f"ckpt_{step:06d}.vxck"))
    averaged = tr.average_checkpoints(result.checkpoints[-train_cfg.average_last:])
    result.model.load_state_dict(averaged)
    mdl.save_model(result.model, os.path.join(args.out, "model.vxck"))
    final_val = result.val_losses[-1][1]
    print(f"trained {train_cfg.total_updates} updates; "
          f"final validation loss {final_val:.4f}")
    return 0


def cmd_average_ckpt(args):
    states = [ad.load_checkpoint(p) for p in args.inputs]
    ad.save_checkpoint(ad.average_checkpoints(states), args.out)
    print(f"averaged {len(states)} checkpoints into {args.out}")
    return 0


def cmd_evaluate(args):
    model = mdl.load_model(args.model)
    utterances, entries = _read_corpus(args.manifest, args.eval_tsv)
    reports, hypotheses = ev.tag_inversion_eval(model, utterances, entries)
    by_id = {e.id: e for e in entries}
    refs = [list(by_id[u.id].reference) for u in utterances]
    hyps = [hypotheses[u.id] for u in utterances]
    bleu = ev.corpus_bleu(hyps, refs)
    ev.write_report(reports, bleu, args.out)
    for name, rep in reports.items():
        acc = "n/a" if rep.accuracy is None else f"{rep.accuracy:.4f}"
        print(f"{name}: accuracy={acc} coverage={rep.coverage:.4f}")
    print(f"bleu={bleu:.2f}")
    return 0


def cmd_probe(args):
    model = mdl.load_model(args.model)
    utterances, _ = _read_corpus(args.manifest)
    accuracy = tr.probe_discriminator(model, utterances, seed=args.seed or 0)
    print(f"probe_accuracy={accuracy:.4f}")
    return 0


def cmd_schedule(args):
    schedule = LambdaSchedule(gamma=args.gamma, total_updates=args.total)
    if args.at is not None:
        print(f"lambda={lambda_at(schedule, args.at):.6f}")
        return 0
    interval = max(1, args.total // 10)
    for step in range(interval, args.total + 1, interval):
        print(f"step={step} lambda={lambda_at(schedule, step):.6f}")
    return 0


def cmd_class_weights(args):
    weights = mdl.compute_class_weights(args.f, args.m)
    print(f"w_f={weights.w_f:.4f} w_m={weights.w_m:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="voxtag")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **common):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        if common.get("config"):
            p.add_argument("--config", default=None)
        if common.get("seed"):
            p.add_argument("--seed", type=int, default=None)
        if common.get("out"):
            p.add_argument("--out", required=True)
        return p

    p = add("synth-data", cmd_synth_data, config=True, seed=True, out=True)
    p.add_argument("--n-utterances", type=int, default=None)
    p.add_argument("--gender-split", type=float, default=None)
    p.add_argument("--token-duration", type=float, default=None)

    p = add("perturb", cmd_perturb, config=True, seed=True, out=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--p", type=float, default=None)

    p = add("features", cmd_features, out=True)
    p.add_argument("--manifest", required=True)

    p = add("train", cmd_train, config=True, seed=True, out=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default=None, choices=mdl.MODES)
    p.add_argument("--strategy", default=None, choices=("scratch", "fine_tune"))
    p.add_argument("--init", default=None)
    p.add_argument("--use-grl", action="store_const", const=True, default=None)
    p.add_argument("--with-perturb", action="store_true")
    p.add_argument("--lr-peak", type=float, default=None)
    p.add_argument("--warmup-updates", type=int, default=None)
    p.add_argument("--total-updates", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = add("average-ckpt", cmd_average_ckpt, out=True)
    p.add_argument("inputs", nargs="+")

    p = add("evaluate", cmd_evaluate, out=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-tsv", required=True)

    p = add("probe", cmd_probe, seed=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)

    p = add("schedule", cmd_schedule)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--at", type=int, default=None)

    p = add("class-weights", cmd_class_weights)
    p.add_argument("--f", type=float, required=True)
    p.add_argument("--m", type=float, required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; the latter are
        # validation failures in this interface.
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (VoxtagError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
