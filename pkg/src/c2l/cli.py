"""Command-line entry point.

Subcommands cover the whole workflow: ``synth`` writes a labeled
corpus, ``pretrain`` runs the contrastive loop, ``probe`` and
``finetune`` score an encoder, ``ablate`` sweeps mixup modes over a
grid, ``export`` strips a full checkpoint down to the student.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run
echoes its fully resolved configuration into the output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import statistics
import sys
import traceback
import warnings

from . import checkpoint as ckpt
from .config import ConfigError, load_run_config
from .data import load_dataset, synth_generate
from .encoder import init_params
from .evaluate import (EvalConfig, FINETUNE_DEFAULTS, LabeledSet, fine_tune,
                       linear_probe)
from .trainer import (load_train_state, save_train_checkpoint, train,
                      export_student)


class _UsageError(Exception):
    """Bad invocation spotted after argparse (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; our contract reserves 2
    # for runtime failures, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _require_out(rc):
    if rc.out is None:
        raise _UsageError("an output directory is required "
                          "(--out or config key 'out')")
    return rc.out


def _manifest_path(data, split):
    if data.endswith(".csv"):
        return data
    path = os.path.join(data, split, "manifest.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no {split} manifest at {path}; pass a dataset "
                          f"root or a manifest.csv")
    return path


def _labeled_splits(data):
    train_ds = load_dataset(_manifest_path(data, "train"))
    test_ds = load_dataset(_manifest_path(data, "test"))
    return (LabeledSet.from_dataset(train_ds),
            LabeledSet.from_dataset(test_ds), test_ds.class_names)


def _encoder_arg(args, rc):
    if args.encoder is not None:
        return args.encoder
    return init_params(rc.train.encoder, seed=rc.train.seed)


def _eval_config(rc, args, defaults=None):
    """Explicit eval section wins; else CLI seed on library defaults."""
    if "eval" in rc.explicit:
        return rc.eval
    if defaults is not None and args.seed is not None:
        return EvalConfig(**defaults, seed=args.seed)
    return None


def _write_results(out_dir, result, class_names, seed):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "name", "split", "seed", "auroc"])
        for c, value in enumerate(result["per_class"]):
            name = class_names[c] if class_names else str(c)
            cell = "" if value is None else f"{value:.6f}"
            writer.writerow([c, name, "test", seed, cell])
        writer.writerow(["mean", "", "test", seed, f"{result['mean']:.6f}"])
    return path


def _surface_warnings(caught):
    for w in caught:
        print(f"c2l: warning: {w.message}", file=sys.stderr)


class _EpochReporter:
    """One stderr line per finished epoch, averaged over its steps."""

    def __init__(self, total_epochs):
        self.total = total_epochs
        self.epoch = None
        self.sums = {}
        self.count = 0

    def update(self, record):
        if record["epoch"] != self.epoch:
            self.flush()
            self.epoch = record["epoch"]
        for key in ("loss_A", "loss_M", "top1"):
            self.sums[key] = self.sums.get(key, 0.0) + record[key]
        self.lr = record["lr"]
        self.count += 1

    def flush(self):
        if self.epoch is None or not self.count:
            return
        means = {k: v / self.count for k, v in self.sums.items()}
        print(f"epoch {self.epoch + 1}/{self.total} lr {self.lr:g} "
              f"loss_A {means['loss_A']:.4f} loss_M {means['loss_M']:.4f} "
              f"top1 {means['top1']:.3f}", file=sys.stderr)
        self.sums = {}
        self.count = 0


def cmd_synth(args):
    rc = load_run_config(args.config, seed=args.seed, out=args.out)
    out = _require_out(rc)
    manifests = synth_generate(rc.synth, out)
    rc.echo(out)
    for split in ("pretrain", "train", "test"):
        print(f"synth: {split} -> {manifests[split]}")
    return 0


def cmd_pretrain(args):
    rc = load_run_config(args.config, seed=args.seed, out=args.out)
    out = _require_out(rc)
    cfg = rc.train
    dataset = load_dataset(_manifest_path(args.data, "pretrain"))
    os.makedirs(out, exist_ok=True)
    rc.echo(out)
    state = None
    if args.resume is not None:
        state = load_train_state(args.resume, cfg)
        print(f"resume: epoch {state.epoch}, iteration {state.iteration}",
              file=sys.stderr)
    reporter = _EpochReporter(cfg.epochs)
    student_path = os.path.join(out, "student.ckpt")

    def checkpoint_fn(st, epoch):
        save_train_checkpoint(st, os.path.join(out, f"epoch_{epoch:04d}.ckpt"),
                              cfg.seed)

    with open(os.path.join(out, "metrics.jsonl"), "a",
              encoding="utf-8") as fh:
        def metrics_fn(record):
            fh.write(json.dumps(record) + "\n")
            reporter.update(record)
        state = train(cfg, dataset, state=state, metrics_fn=metrics_fn,
                      checkpoint_fn=checkpoint_fn)
    reporter.flush()
    save_train_checkpoint(state, os.path.join(out, "last.ckpt"), cfg.seed)
    export_student(state, student_path)
    print(f"pretrain: {state.epoch} epochs, {state.iteration} steps; "
          f"student -> {student_path}")
    return 0


def cmd_probe(args):
    rc = load_run_config(args.config, seed=args.seed, out=args.out)
    out = _require_out(rc)
    train_set, test_set, class_names = _labeled_splits(args.data)
    encoder = _encoder_arg(args, rc)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = linear_probe(encoder, train_set, test_set,
                              config=_eval_config(rc, args))
    _surface_warnings(caught)
    rc.echo(out)
    path = _write_results(out, result, class_names, rc.eval.seed)
    print(f"probe: mean auroc {result['mean']:.4f} -> {path}")
    if args.strict and any(v is None for v in result["per_class"]):
        print("c2l: error: a class had a single label value (--strict)",
              file=sys.stderr)
        return 2
    return 0


def cmd_finetune(args):
    rc = load_run_config(args.config, seed=args.seed, out=args.out)
    out = _require_out(rc)
    train_set, test_set, class_names = _labeled_splits(args.data)
    encoder = args.encoder  # None means the from-scratch control arm
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fine_tune(encoder, train_set, test_set,
                           config=_eval_config(rc, args, FINETUNE_DEFAULTS),
                           encoder_config=(None if encoder is not None
                                           else rc.train.encoder))
    _surface_warnings(caught)
    rc.echo(out)
    path = _write_results(out, result, class_names, rc.eval.seed)
    ckpt.save_student(os.path.join(out, "finetuned.ckpt"), result["encoder"])
    print(f"finetune: mean auroc {result['mean']:.4f} -> {path}")
    if args.strict and any(v is None for v in result["per_class"]):
        print("c2l: error: a class had a single label value (--strict)",
              file=sys.stderr)
        return 2
    return 0


def cmd_export(args):
    manifest, _ = ckpt.read_manifest(args.src)
    if manifest["kind"] == "student":
        params = ckpt.load_student(args.src)
        progress = manifest.get("progress")
    else:
        pieces = ckpt.load_full(args.src)
        params = pieces["student"]
        progress = {"iteration": pieces["iteration"],
                    "epoch": pieces["epoch"]}
    ckpt.save_student(args.dst, params, progress=progress)
    print(f"export: student -> {args.dst}")
    return 0


_AUGMENT_TOGGLES = {
    "crop": "crop_enabled",
    "rotate": "rotate_enabled",
    "hflip": "hflip_enabled",
    "grayscale": "grayscale_enabled",
    "cutout": "cutout_enabled",
}


def _augment_without(cfg, name):
    field = _AUGMENT_TOGGLES.get(name)
    if field is None:
        raise ConfigError(f"ablate.augment_disable: unknown primitive "
                          f"{name!r}; valid: {sorted(_AUGMENT_TOGGLES)}")
    return dataclasses.replace(cfg, **{field: False})


def _rescale_drops(train_cfg, new_epochs):
    """Keep the schedule shape when ablation shortens the run."""
    if new_epochs == train_cfg.epochs:
        return train_cfg.lr_drop_epochs
    drops = set()
    for d in train_cfg.lr_drop_epochs:
        scaled = round(d * new_epochs / train_cfg.epochs)
        if 1 <= scaled < new_epochs:
            drops.add(scaled)
    return tuple(sorted(drops))


def _run_cell(cell):
    pretrain_ds = load_dataset(cell["pretrain"])
    state = train(cell["train"], pretrain_ds)
    train_set = LabeledSet.from_dataset(load_dataset(cell["train_split"]))
    test_set = LabeledSet.from_dataset(load_dataset(cell["test_split"]))
    result = linear_probe(state.student, train_set, test_set,
                          config=cell["eval"])
    return {"mixup": cell["mixup"], "queue_size": cell["queue_size"],
            "augment": cell["augment"], "seed": cell["seed"],
            "mean_auroc": result["mean"]}


def cmd_ablate(args):
    rc = load_run_config(args.config, seed=args.seed, out=args.out)
    out = _require_out(rc)
    os.makedirs(out, exist_ok=True)
    rc.echo(out)
    grid = rc.ablate
    variants = [("on", rc.train.augment)]
    for name in grid["augment_disable"]:
        variants.append((f"no_{name}", _augment_without(rc.train.augment,
                                                        name)))
    epochs = grid["epochs"]
    drops = _rescale_drops(rc.train, epochs)
    eval_cfg = _eval_config(rc, args)
    splits = {"pretrain": _manifest_path(args.data, "pretrain"),
              "train_split": _manifest_path(args.data, "train"),
              "test_split": _manifest_path(args.data, "test")}
    cells = []
    for mode in grid["mixup_modes"]:
        for q in grid["queue_sizes"]:
            for vname, vcfg in variants:
                for s in grid["seeds"]:
                    tc = dataclasses.replace(
                        rc.train, mixup_mode=mode, queue_size=q,
                        augment=vcfg, seed=s, epochs=epochs,
                        lr_drop_epochs=drops, checkpoint_every_epochs=0)
                    cells.append(dict(splits, train=tc, eval=eval_cfg,
                                      mixup=mode, queue_size=q,
                                      augment=vname, seed=s))
    workers = 1 if args.deterministic else max(
        1, int(os.environ.get("C2L_THREADS", "1")))
    if workers > 1 and len(cells) > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = []
        for i, cell in enumerate(cells):
            rows.append(_run_cell(cell))
            print(f"ablate: cell {i + 1}/{len(cells)} "
                  f"mixup={cell['mixup']} queue={cell['queue_size']} "
                  f"augment={cell['augment']} seed={cell['seed']} "
                  f"auroc={rows[-1]['mean_auroc']:.4f}", file=sys.stderr)
    cells_path = os.path.join(out, "cells.csv")
    with open(cells_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mixup", "queue_size",
                                                "augment", "seed",
                                                "mean_auroc"])
        writer.writeheader()
        writer.writerows(rows)
    groups = {}
    for row in rows:
        key = (row["mixup"], row["queue_size"], row["augment"])
        groups.setdefault(key, []).append(row["mean_auroc"])
    summary = [{"mixup": k[0], "queue_size": k[1], "augment": k[2],
                "median_auroc": statistics.median(v), "seeds": len(v)}
               for k, v in groups.items()]
    summary.sort(key=lambda r: (-r["median_auroc"], r["mixup"],
                                r["queue_size"], r["augment"]))
    summary_path = os.path.join(out, "summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mixup", "queue_size",
                                                "augment", "median_auroc",
                                                "seeds"])
        writer.writeheader()
        writer.writerows(summary)
    for row in summary:
        print(f"ablate: mixup={row['mixup']} queue={row['queue_size']} "
              f"augment={row['augment']} "
              f"median_auroc={row['median_auroc']:.4f} "
              f"({row['seeds']} seeds)")
    print(f"ablate: summary -> {summary_path}")
    return 0


def build_parser():
    parser = _Parser(prog="c2l",
                     description="Contrastive pretraining workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True, config=True):
        if config:
            p.add_argument("--config", help="JSON run configuration")
        if seed:
            p.add_argument("--seed", type=int,
                           help="override every seed in the config")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic PGM corpus")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(p)
    p.add_argument("--data", required=True,
                   help="dataset root (or a manifest.csv)")
    p.add_argument("--resume", help="full checkpoint to continue from")
    p.add_argument("--deterministic", action="store_true",
                   help="accepted for symmetry; runs are always "
                        "deterministic for a given seed")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, help_text in (
            ("probe", cmd_probe, "linear probe on frozen features"),
            ("finetune", cmd_finetune, "fine-tune encoder plus head")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--data", required=True,
                       help="dataset root with train/ and test/ splits")
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--encoder", help="student checkpoint to score")
        group.add_argument("--init", choices=["random"],
                           help="random-weight control arm")
        p.add_argument("--strict", action="store_true",
                       help="fail when any class AUROC is undefined")
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="sweep mixup modes over a grid")
    common(p)
    p.add_argument("--data", required=True,
                   help="dataset root (pretrain/train/test splits)")
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential cell execution")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="extract the student network")
    p.add_argument("src", help="checkpoint to read")
    p.add_argument("dst", help="student checkpoint to write")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"c2l: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # runtime failures map to exit code 2
        if os.environ.get("C2L_DEBUG"):
            traceback.print_exc()
        print(f"c2l: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
