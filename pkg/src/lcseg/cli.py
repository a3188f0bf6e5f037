"""Command-line interface.

Subcommands: generate, train, infer, eval, sweep, manyclass, coarse2fine,
report. Every command takes --config/--seed/--out and records its resolved
settings (plus a content hash of the code) in <out>/run.json.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .experiments import (
    ExperimentConfig,
    coarse2fine_outputs,
    evaluate_checkpoint,
    experiment_phantom,
    load_experiment_config,
    manyclass_outputs,
    read_rows_csv,
    run_class_sweep,
    run_coarse_to_fine,
    run_many_class,
    sweep_outputs,
)
from .inference import segment_case
from .model import load_checkpoint, save_checkpoint
from .reports import write_csv, write_json, write_run_json
from .synth import build_cohort, load_dataset, write_dataset
from .training import TrainConfig, train
from .volume_io import load_volume, save_labelmap, save_volume
from .grids import ImageVolume

log = logging.getLogger(__name__)


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--out", required=out_required, help="output directory")


def _ids_arg(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _experiment_config(args, **extra) -> ExperimentConfig:
    return load_experiment_config(args.config, seed=args.seed, **extra)


def cmd_generate(args) -> int:
    ecfg = _experiment_config(args)
    phantom = experiment_phantom(ecfg, args.kind)
    repeats = 1 if args.kind in ("manyclass", "coarse2fine") else ecfg.repeats
    cohort = build_cohort(phantom, ecfg.n_cases, ecfg.split_sizes, repeats)
    manifest = write_dataset(cohort, args.out)
    write_run_json(args.out, "generate", {**asdict(ecfg), "kind": args.kind}, ecfg.seed)
    log.info("wrote %d cases to %s", len(cohort.cases), manifest)
    return 0


def cmd_train(args) -> int:
    payload = json.loads(Path(args.config).read_text()) if args.config else {}
    for key, value in (("head", args.head), ("epochs", args.epochs), ("lr", args.lr),
                       ("batch_size", args.batch_size), ("seed", args.seed),
                       ("val_interval", args.val_interval)):
        if value is not None:
            payload[key] = value
    if args.class_ids:
        payload["class_ids"] = _ids_arg(args.class_ids)
    payload.setdefault("seed", 0)
    model_fields = {k: payload.pop(k) for k in ("base_channels", "num_levels")
                    if k in payload}
    tcfg = TrainConfig(**payload)

    cohort = load_dataset(args.data)
    split = cohort.splits[args.split_index]
    class_ids = tcfg.class_ids if tcfg.class_ids is not None else cohort.class_ids()
    grid = cohort.image(split.train[0]).shape
    from .model import ModelConfig

    mcfg = ModelConfig(
        input_grid=grid,
        head=tcfg.head,
        out_channels=len(class_ids) if tcfg.head == "baseline" else 1,
        seed=tcfg.seed,
        **model_fields,
    )
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(tcfg, mcfg, cohort, split, resume_from=resume)

    out = Path(args.out)
    save_checkpoint(ckpt, out / "checkpoint.lcsz")
    write_csv(out / "loss_curve.csv", ["epoch", "train_loss"],
              list(enumerate(ckpt.metadata["loss_curve"])))
    write_csv(out / "val_curve.csv", ["epoch", "val_dice"],
              [(int(e), v) for e, v in ckpt.metadata["val_curve"]])
    write_run_json(args.out, "train", {
        "train": asdict(tcfg), "model": asdict(mcfg), "data": str(args.data),
        "split_index": args.split_index,
    }, tcfg.seed)
    log.info("checkpoint: %s (best epoch %s, val dice %s)", out / "checkpoint.lcsz",
             ckpt.metadata["best_epoch"], ckpt.metadata["best_val_dice"])
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    image = load_volume(args.image)
    result = segment_case(ckpt, image, labels=args.labels, workers=args.workers)
    out = Path(args.out)
    save_labelmap(result.labels, out / "segmentation", spacing=image.spacing)
    if args.save_probs:
        for i, labels in enumerate(result.probs.channel_labels):
            name = "background" if not labels else "_".join(str(c) for c in sorted(labels))
            save_volume(ImageVolume(result.probs.data[i], image.spacing, name),
                        out / f"prob_{name}")
    write_run_json(args.out, "infer", {
        "checkpoint": str(args.checkpoint), "image": str(args.image),
        "labels": args.labels, "workers": args.workers,
    }, args.seed or 0)
    ledger = result.ledger
    log.info("%d passes, peak activations %.1f MiB", ledger.passes,
             ledger.peak_activation_bytes / 2**20)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cohort = load_dataset(args.data)
    split = cohort.splits[args.split_index]
    pools = {"train": split.train, "val": split.val, "test": split.test}
    cases = pools.get(args.cases) or tuple(args.cases.split(","))
    class_ids = _ids_arg(args.class_ids) if args.class_ids else None
    report = evaluate_checkpoint(ckpt, cohort, cases, class_ids,
                                 model_name=ckpt.config.head, workers=args.workers)
    out = Path(args.out)
    write_csv(out / "eval_rows.csv", ["model", "case_id", "class_id", "dice", "dice_argmax"],
              [(report.model, r.case_id, r.class_id, r.dice, r.dice_argmax)
               for r in report.rows])
    write_json(out / "eval_summary.json", {
        "model": report.model,
        "global_mean": report.global_mean(),
        "global_mean_argmax": report.global_mean("dice_argmax"),
        "per_class_mean": {str(k): v for k, v in report.per_class_mean().items()},
        "per_case_mean": report.per_case_mean(),
    })
    write_run_json(args.out, "eval", {
        "checkpoint": str(args.checkpoint), "data": str(args.data),
        "cases": args.cases, "split_index": args.split_index,
    }, args.seed or 0)
    log.info("mean dice %.4f over %d rows", report.global_mean(), len(report.rows))
    return 0


def _run_experiment(args, runner, name: str) -> int:
    ecfg = _experiment_config(args)
    summary = runner(ecfg, args.out)
    write_run_json(args.out, name, asdict(ecfg), ecfg.seed)
    log.info("%s summary written to %s", name, Path(args.out) / f"{name}_summary.json")
    del summary
    return 0


def cmd_report(args) -> int:
    rows_path = Path(args.rows)
    records = read_rows_csv(rows_path)
    if args.kind == "sweep":
        rows = [tuple(r[c] for c in
                      ("count", "repeat", "model", "case_id", "class_id", "dice",
                       "dice_argmax")) for r in records]
        sweep_outputs(rows, args.out)
    elif args.kind == "manyclass":
        mem_path = Path(args.memory) if args.memory else rows_path.parent / "manyclass_memory.json"
        if not mem_path.exists():
            raise FileNotFoundError(f"memory sidecar {mem_path} not found; pass --memory")
        rows = [tuple(r[c] for c in ("model", "case_id", "class_id", "dice", "dice_argmax"))
                for r in records]
        manyclass_outputs(rows, json.loads(mem_path.read_text()), args.out)
    elif args.kind == "coarse2fine":
        rows = [tuple(r[c] for c in ("case_id", "parent_id", "child_id", "coarse_dice",
                                     "naive_dice", "fine_dice")) for r in records]
        coarse2fine_outputs(rows, args.out)
    else:
        raise ValueError(f"unknown report kind {args.kind!r}")
    write_run_json(args.out, "report", {"kind": args.kind, "rows": str(args.rows)},
                   args.seed or 0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcseg",
        description="Atlas-conditioned single-channel volumetric segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["sweep", "manyclass", "coarse2fine"],
                   default="sweep", help="which experiment's phantom layout to use")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (with dataset.json)")
    p.add_argument("--head", choices=["baseline", "lcs"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--class-ids", default=None, help="comma list; default all")
    p.add_argument("--split-index", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one image with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", default="all",
                   help='"all", a comma list of ids, or "@mask" for a novel atlas mask')
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--save-probs", action="store_true",
                   help="also write per-class probability volumes")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on dataset cases")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cases", default="test", help="test|val|train or a comma list")
    p.add_argument("--class-ids", default=None)
    p.add_argument("--split-index", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    for name, runner in (("sweep", run_class_sweep), ("manyclass", run_many_class),
                         ("coarse2fine", run_coarse_to_fine)):
        p = sub.add_parser(name, help=f"run the {name} experiment end to end")
        _add_common(p)
        p.set_defaults(func=lambda a, r=runner, n=name: _run_experiment(a, r, n))

    p = sub.add_parser("report", help="regenerate summary and plots from a rows CSV")
    _add_common(p)
    p.add_argument("--kind", choices=["sweep", "manyclass", "coarse2fine"], required=True)
    p.add_argument("--rows", required=True, help="rows CSV from a previous run")
    p.add_argument("--memory", default=None,
                   help="memory sidecar JSON (manyclass; default beside the rows file)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
