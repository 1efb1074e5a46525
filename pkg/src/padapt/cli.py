"""Command-line surface for the speaker-adaptation workflows.

One subcommand per workflow stage: generate clips, pretrain the shared model,
enroll a speaker (learn their padding rings), adapt without labels, recognize
clips with a speaker's rings, tabulate metrics, cluster video embeddings into
speaker groups, and sweep ring presets against budgets.

Exit codes: 0 on success, 1 on usage errors (unknown flags, bad values,
missing required arguments), 2 on data or contract errors (missing files,
mismatched fingerprints, malformed inputs).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import adapt, cluster as cl, harness, synthdata as sd
from .adapt import AdaptBudget
from .errors import PadaptError
from .model import (
    TASK_CLASSIFICATION,
    load_checkpoint,
    save_checkpoint,
    standard_config,
)
from .model import build_model
from .padding import PaddingRegistry, init_user_padding
from .udtf import read_udtf

_PRESET_NAMES = {5: "small", 11: "medium", 17: "full"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not exit(2)."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _budget_from_args(args, *, default_minutes: float = 1.0) -> AdaptBudget:
    if getattr(args, "fraction", None) is not None:
        return AdaptBudget.fraction(args.fraction, seed=args.seed, folds=args.folds)
    minutes = getattr(args, "minutes", None)
    if minutes is None:
        minutes = default_minutes
    return AdaptBudget.minutes(minutes, seed=args.seed, folds=args.folds)


def _target_speakers(args, split) -> list:
    if getattr(args, "speaker", None):
        if args.speaker not in split.adapt:
            raise PadaptError(
                f"speaker {args.speaker!r} has no adaptation pool; "
                f"held out are {sorted(split.adapt)}"
            )
        return [args.speaker]
    return split.holdout_speakers


def _run_config(args, command: str, **extra) -> harness.RunConfig:
    budget_mode, amount = "minutes", 1.0
    minutes = getattr(args, "minutes", None)
    if isinstance(minutes, (int, float)):
        amount = float(minutes)
    elif minutes is not None:  # a sweep: the grid lives in extra, not the budget
        extra.setdefault("minutes", [float(m) for m in minutes])
        amount = 0.0
    if getattr(args, "fraction", None) is not None:
        budget_mode, amount = "fraction", args.fraction
    return harness.RunConfig(
        command=command,
        task=extra.pop("task", TASK_CLASSIFICATION),
        preset=_PRESET_NAMES.get(getattr(args, "preset", None), "full"),
        budget_mode=budget_mode,
        budget_amount=amount,
        threshold=getattr(args, "threshold", None),
        seed=args.seed,
        folds=getattr(args, "folds", 5),
        model_path=str(getattr(args, "model", "") or ""),
        registry_path=str(getattr(args, "registry", "") or ""),
        data_path=str(getattr(args, "data", "") or ""),
        out_path=str(getattr(args, "out", "") or ""),
        extra=extra,
    )


def _maybe_write(args, config: harness.RunConfig, records) -> None:
    if getattr(args, "out", None):
        path = harness.write_metrics(args.out, config, records)
        print(f"wrote {len(records)} metric records to {path}")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    overrides = {
        k: getattr(args, k)
        for k in (
            "task", "seed", "num_speakers", "vocab_size", "clips_per_speaker",
            "adapt_pool", "test_clips", "dtype", "clip_seconds", "frames",
        )
        if getattr(args, k) is not None
    }
    if args.holdout is not None:
        overrides["holdout"] = tuple(s for s in args.holdout.split(",") if s)
    cfg = sd.DataConfig(**overrides)
    split = sd.generate(cfg)
    root = sd.export(split, args.out)
    n = len(split.train) + len(split.seen_eval) + sum(
        len(split.adapt[s]) + len(split.test[s]) for s in split.holdout_speakers
    )
    print(f"wrote {n} clips ({cfg.task}, {cfg.num_speakers} speakers) to {root}")
    return 0


def _cmd_pretrain(args) -> int:
    split = sd.load(args.data)
    dcfg = split.config
    mcfg = standard_config(
        task=dcfg.task,
        vocab_size=dcfg.vocab_size,
        preset=args.preset if args.preset is not None else "full",
        dtype=args.dtype,
        seed=args.seed,
    )
    model = build_model(mcfg)
    if args.grl_weight > 0.0:
        head, history = adapt.train_speaker_invariant(
            model, split.train.clips, split.train.labels, split.train.speakers,
            grl_weight=args.grl_weight, epochs=args.epochs, batch_size=args.batch_size,
            lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
        )
        del head  # the adversarial probe head is training-time scaffolding
    else:
        history = adapt.pretrain(
            model, split.train.clips, split.train.labels,
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            weight_decay=args.weight_decay, seed=args.seed,
        )
    save_checkpoint(args.out, model)
    metrics = adapt.evaluate_model(model, split.seen_eval.clips, split.seen_eval.labels)
    shown = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
    print(
        f"pretrained {args.epochs} epochs (final loss {history['epoch_loss'][-1]:.4f}); "
        f"seen-speaker {shown}; checkpoint {args.out}"
    )
    return 0


def _cmd_enroll(args) -> int:
    model = load_checkpoint(args.model)
    split = sd.load(args.data)
    registry = PaddingRegistry(args.registry)
    budget = _budget_from_args(args)
    records = []
    for spk in _target_speakers(args, split):
        for fold in range(args.folds):
            sub = sd.budget_subset(split, spk, budget, fold)
            padding, _ = adapt.adapt_supervised(
                model, init_user_padding(model, spk), sub.clips, sub.labels,
                seed=args.seed + fold, epochs=args.epochs,
            )
            if fold == 0:
                registry.save(padding)
            metrics = adapt.evaluate_model(
                model, split.test[spk].clips, split.test[spk].labels, padding=padding
            )
            harness.emit(
                records, method="udp", speaker=spk, budget=budget.label, fold=fold,
                seed=args.seed + fold, metrics=metrics,
            )
        print(f"enrolled {spk} (fold 0 rings saved to {registry.root})")
    config = _run_config(args, "enroll", task=split.config.task)
    _maybe_write(args, config, records)
    if not args.out:
        print(harness.metric_table(records, harness.primary_metric(model)))
    return 0


def _cmd_adapt_unsup(args) -> int:
    model = load_checkpoint(args.model)
    split = sd.load(args.data)
    registry = PaddingRegistry(args.registry)
    budget = _budget_from_args(args) if (args.minutes or args.fraction) else AdaptBudget.everything(seed=args.seed)
    records = []
    for spk in _target_speakers(args, split):
        pool = split.adapt[spk]
        sub = pool.subset(budget.subset_indices(len(pool), split.clip_seconds, 0))
        padding, report = adapt.adapt_self_training(
            model, init_user_padding(model, spk), sub.clips,
            threshold=args.threshold, rounds=args.rounds, seed=args.seed,
            epochs=args.epochs, true_labels=sub.labels,
        )
        registry.save(padding)
        metrics = adapt.evaluate_model(
            model, split.test[spk].clips, split.test[spk].labels, padding=padding
        )
        last = report["rounds"][-1]
        metrics["kept"] = float(last.kept)
        metrics["pseudo_precision"] = last.precision
        harness.emit(
            records, method="self-train", speaker=spk, budget=budget.label, fold=0,
            seed=args.seed, metrics=metrics,
        )
        print(
            f"adapted {spk} without labels: kept {last.kept}/{last.total} clips at "
            f"threshold {report['threshold']:.2f}, precision {last.precision:.3f}"
        )
    config = _run_config(args, "adapt-unsup", task=split.config.task)
    _maybe_write(args, config, records)
    return 0


def _cmd_recognize(args) -> int:
    model = load_checkpoint(args.model)
    registry = PaddingRegistry(args.registry)
    if registry.has(args.speaker):
        padding = registry.load(args.speaker, model)
    else:
        warnings.warn(
            f"no rings enrolled for speaker {args.speaker!r}; "
            "falling back to the speaker-independent baseline",
            stacklevel=1,
        )
        padding = None
    clips = np.stack([read_udtf(p) for p in args.clips])
    if model.config.task == TASK_CLASSIFICATION:
        pred, conf = adapt.predict_classification(model, clips, padding=padding)
        results = [
            {"clip": str(p), "label": int(c), "confidence": float(q)}
            for p, c, q in zip(args.clips, pred, conf)
        ]
    else:
        seqs, conf = adapt.predict_sequences(model, clips, padding=padding)
        results = [
            {"clip": str(p), "tokens": list(map(int, s)), "confidence": float(q)}
            for p, s, q in zip(args.clips, seqs, conf)
        ]
    text = "\n".join(json.dumps(r, sort_keys=True) for r in results)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_eval(args) -> int:
    if args.metrics:
        records = []
        for path in args.metrics:
            _, recs = harness.read_metrics(path)
            records.extend(recs)
        names = sorted({r["metric_name"] for r in records})
    else:
        if not (args.model and args.data):
            raise _UsageError("eval: provide --metrics files or both --model and --data")
        model = load_checkpoint(args.model)
        split = sd.load(args.data)
        records = harness.baseline_records(model, split, seed=args.seed)
        if args.registry:
            registry = PaddingRegistry(args.registry)
            for spk in split.holdout_speakers:
                if not registry.has(spk):
                    continue
                padding = registry.load(spk, model)
                metrics = adapt.evaluate_model(
                    model, split.test[spk].clips, split.test[spk].labels, padding=padding
                )
                harness.emit(
                    records, method="registry", speaker=spk, budget="enrolled", fold=0,
                    seed=args.seed, metrics=metrics,
                )
        names = ["accuracy"] if model.config.task == TASK_CLASSIFICATION else ["sequence_accuracy", "wer"]
        config = _run_config(args, "eval", task=split.config.task)
        _maybe_write(args, config, records)
    for name in names:
        print(f"== {name} ==")
        print(harness.metric_table(records, name))
    return 0


def _cmd_cluster(args) -> int:
    embeddings = cl.load_embedding_dir(args.embeddings)
    thresholds = cl.Thresholds(t1=args.t1, t2=args.t2, t3=args.t3, t4=args.t4, m=args.momentum)
    clusters, report = cl.run_pipeline(embeddings, thresholds)
    cl.write_pipeline_outputs(args.out, clusters, report)
    print(
        f"{report['videos']} videos -> {len(clusters)} clusters "
        f"(assign {report['clusters_after_assign']}, split {report['clusters_after_split']}, "
        f"merge {report['clusters_after_merge']}); "
        f"{len(report['candidates'])} boundary candidates; outputs in {args.out}"
    )
    return 0


def _cmd_ablate_layers(args) -> int:
    model = load_checkpoint(args.model)
    split = sd.load(args.data)
    records, grid = harness.ablation_grid(
        model, split, minutes=tuple(args.minutes), folds=args.folds, seed=args.seed,
        jobs=args.jobs, epochs=args.epochs,
    )
    labels = [AdaptBudget.minutes(m).label for m in args.minutes]
    width = max(len(p) for p in harness.DEFAULT_PRESETS)
    print("preset".ljust(width) + "  " + "  ".join(f"{b:>7s}" for b in labels))
    for preset in harness.DEFAULT_PRESETS:
        row = [grid[(preset, b)] for b in labels]
        print(preset.ljust(width) + "  " + "  ".join(f"{v:7.4f}" for v in row))
    config = _run_config(args, "ablate-layers", task=split.config.task, minutes=list(args.minutes))
    _maybe_write(args, config, records)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p, *, model=False, data=False, registry=False, out=False) -> None:
    if model:
        p.add_argument("--model", required=True, help="model checkpoint path")
    if data:
        p.add_argument("--data", required=True, help="exported dataset directory")
    if registry:
        p.add_argument("--registry", required=True, help="per-speaker ring directory")
    if out:
        p.add_argument("--out", default=None, help="metrics JSON-lines output path")
    p.add_argument("--seed", type=int, default=0)


def _add_budget(p) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--minutes", type=float, default=None, help="budget in minutes of clips")
    group.add_argument("--fraction", type=float, default=None, help="budget as a pool fraction")
    p.add_argument("--folds", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="padapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-speaker dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("classification", "ctc_sequence"), default=None)
    p.add_argument("--num-speakers", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--clips-per-speaker", type=int, default=None)
    p.add_argument("--adapt-pool", type=int, default=None)
    p.add_argument("--test-clips", type=int, default=None)
    p.add_argument("--holdout", default=None, help="comma-separated held-out speaker ids")
    p.add_argument("--clip-seconds", type=float, default=None, help="declared duration per clip")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the shared recognizer")
    _add_common(p, data=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=18)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=adapt.DEFAULT_PRETRAIN_LR)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--preset", type=int, choices=(5, 11, 17), default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--grl-weight", type=float, default=0.0,
                   help="adversarial speaker-invariance weight (0 disables)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("enroll", help="learn padding rings for held-out speakers")
    _add_common(p, model=True, data=True, registry=True, out=True)
    p.add_argument("--speaker", default=None, help="enroll one speaker (default: all held out)")
    _add_budget(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_enroll)

    p = sub.add_parser("adapt-unsup", help="self-training adaptation without labels")
    _add_common(p, model=True, data=True, registry=True, out=True)
    p.add_argument("--speaker", default=None)
    _add_budget(p)
    p.add_argument("--threshold", type=float, default=None,
                   help="pseudo-label confidence threshold (default per task)")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(func=_cmd_adapt_unsup)

    p = sub.add_parser("recognize", help="recognize clips with a speaker's rings")
    _add_common(p, model=True, registry=True, out=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--clips", nargs="+", required=True, help="clip tensor files")
    p.set_defaults(func=_cmd_recognize)

    p = sub.add_parser("eval", help="accuracy / word-error-rate tables")
    p.add_argument("--metrics", nargs="+", default=None, help="metrics files to tabulate")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--registry", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cluster", help="group video embeddings by speaker")
    p.add_argument("--embeddings", required=True, help="embedding directory")
    p.add_argument("--out", required=True, help="output directory")
    defaults = cl.Thresholds()
    p.add_argument("--t1", type=float, default=defaults.t1, help="assignment threshold")
    p.add_argument("--t2", type=float, default=defaults.t2, help="split threshold")
    p.add_argument("--t3", type=float, default=defaults.t3, help="merge threshold")
    p.add_argument("--t4", type=float, default=defaults.t4, help="boundary lower threshold")
    p.add_argument("--momentum", type=float, default=defaults.m)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("ablate-layers", help="preset-by-budget accuracy grid")
    _add_common(p, model=True, data=True, out=True)
    p.add_argument("--minutes", type=float, nargs="+", default=[1.0, 3.0, 5.0])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_ablate_layers)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        print("run 'padapt --help' for usage", file=sys.stderr)
        return 1
    except PadaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
