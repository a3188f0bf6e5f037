"""Experiment drivers: class-count sweep, many-class scaling, coarse-to-fine.

Each driver builds a synthetic cohort, trains the two heads on shared splits
and seeds, evaluates on held-out test cases, and emits CSV rows plus a JSON
summary and an SVG plot. Summaries and plots are derived from the row data by
`*_outputs` functions, so the `report` subcommand can regenerate them from the
CSV alone and arrive at identical bytes. Scores are quantized to the CSV's
6-decimal precision at row creation to make that round trip exact.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import AtlasConditioner, pad_atlas
from .grids import ProbMap, binarize
from .inference import (
    assemble,
    checkpoint_atlas,
    segment_all,
    segment_all_baseline,
    segment_one,
)
from .metrics import dice, paired_t_test
from .model import (
    Checkpoint,
    ModelConfig,
    estimate_activation_memory,
    model_from_checkpoint,
    save_checkpoint,
)
from .reports import (
    DiceReport,
    DiceRow,
    paired_vectors,
    save_fine_label_plot,
    save_paired_dot_plot,
    save_sorted_bar_plot,
    write_csv,
    write_json,
)
from .synth import Cohort, PhantomConfig, Split, build_cohort
from .training import TrainConfig, train

log = logging.getLogger(__name__)


def quantize(value: float) -> float:
    """Round to the report precision so CSV round trips are exact."""
    return float(f"{float(value):.6f}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale experiment settings; every field has a JSON override."""

    seed: int = 0
    grid: tuple[int, int, int] = (32, 32, 32)
    n_cases: int = 15
    split_sizes: tuple[int, int, int, int] = (8, 1, 2, 4)
    repeats: int = 3
    # 3 levels keeps the conditioning grid at 8^3 on 32^3 phantoms; at the full
    # 5-level depth the mask channel degenerates to a single coarse cell and the
    # conditioning signal is too weak to train at desk scale.
    num_levels: int = 3
    epochs: int = 240
    lr: float = 1e-3
    batch_size: int = 2
    val_interval: int = 20
    noise_sigma: float = 0.08
    sibling_contrast: float = 0.3
    radius_range: tuple[float, float] = (0.22, 0.32)
    jitter_pos: float = 1.5
    jitter_scale: float = 0.1
    orient_jitter: float = 0.15
    sweep_counts: tuple[int, ...] = (2, 4, 8)
    many_k: int = 24
    many_c_max: int = 8
    fine_n_coarse: int = 4
    fine_children: int = 2
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(s) for s in self.grid))
        object.__setattr__(self, "split_sizes", tuple(int(s) for s in self.split_sizes))
        object.__setattr__(self, "sweep_counts", tuple(int(c) for c in self.sweep_counts))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        if sum(self.split_sizes) != self.n_cases:
            raise ValueError(f"split sizes {self.split_sizes} do not sum to {self.n_cases}")


def load_experiment_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    payload: dict = {}
    if path is not None:
        payload.update(json.loads(Path(path).read_text()))
    payload.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "fine_split" in payload:
        raise ValueError("fine_split is derived from fine_n_coarse and fine_children")
    return ExperimentConfig(**payload)


def experiment_phantom(ecfg: ExperimentConfig, kind: str) -> PhantomConfig:
    """The phantom recipe shared by each driver and its `generate` twin."""
    common = dict(grid=ecfg.grid, noise_sigma=ecfg.noise_sigma,
                  radius_range=ecfg.radius_range, jitter_pos=ecfg.jitter_pos,
                  jitter_scale=ecfg.jitter_scale, orient_jitter=ecfg.orient_jitter,
                  seed=ecfg.seed)
    if kind == "sweep":
        return PhantomConfig(n_coarse=max(ecfg.sweep_counts), **common)
    if kind == "manyclass":
        return PhantomConfig(n_coarse=ecfg.many_k, **common)
    if kind == "coarse2fine":
        return PhantomConfig(
            n_coarse=ecfg.fine_n_coarse,
            fine_split={c: ecfg.fine_children for c in range(1, ecfg.fine_n_coarse + 1)},
            sibling_contrast=ecfg.sibling_contrast, **common)
    raise ValueError(f"unknown dataset kind {kind!r}")


def _model_seed(base: int, rep: int, tag: int) -> int:
    return base * 100003 + rep * 101 + tag


def _train_one(cohort: Cohort, split: Split, head: str, class_ids: Sequence[int],
               ecfg: ExperimentConfig, rep: int, tag: int) -> Checkpoint:
    grid = cohort.image(split.train[0]).shape
    mcfg = ModelConfig(
        input_grid=grid,
        head=head,
        out_channels=len(class_ids) if head == "baseline" else 1,
        num_levels=ecfg.num_levels,
        seed=_model_seed(ecfg.seed, rep, tag),
    )
    tcfg = TrainConfig(
        epochs=ecfg.epochs,
        head=head,
        lr=ecfg.lr,
        batch_size=ecfg.batch_size,
        seed=_model_seed(ecfg.seed, rep, tag) + 7,
        val_interval=ecfg.val_interval,
        class_ids=tuple(class_ids),
    )
    return train(tcfg, mcfg, cohort, split)


def evaluate_checkpoint(ckpt: Checkpoint, cohort: Cohort, cases: Sequence[str],
                        class_ids: Sequence[int] | None = None, model_name: str = "",
                        workers: int = 1) -> DiceReport:
    """Score a checkpoint on the given cases, one row per (case, class)."""
    model = model_from_checkpoint(ckpt)
    ids = [int(c) for c in (class_ids if class_ids is not None
                            else ckpt.metadata.get("train_class_ids", []))]
    if not ids:
        raise ValueError("no class ids to evaluate")
    atlas = checkpoint_atlas(ckpt) if ckpt.config.head == "lcs" else None
    rows = []
    for case in cases:
        image, labels = cohort.cases[case]
        if ckpt.config.head == "lcs":
            result = segment_all(model, image, atlas, ids, workers, ckpt.vocabulary)
        else:
            result = segment_all_baseline(model, image, ids, ckpt.vocabulary)
        for cid in ids:
            gt = binarize(labels, {cid}).data.astype(bool)
            hard = result.raw_channel(cid) > 0.5
            from_argmax = result.labels.data == cid
            rows.append(DiceRow(case, cid, quantize(dice(hard, gt)),
                                quantize(dice(from_argmax, gt))))
    return DiceReport(model_name or ckpt.config.head, rows)


def read_rows_csv(path: str | Path) -> list[dict[str, str]]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))


# --- class-count sweep ----------------------------------------------------------

SWEEP_COLUMNS = ("count", "repeat", "model", "case_id", "class_id", "dice", "dice_argmax")


def sweep_outputs(rows: Sequence[tuple], out_dir: str | Path) -> dict:
    """Write the sweep CSV, summary JSON, plot-data CSV, and SVG from raw rows."""
    out_dir = Path(out_dir)
    write_csv(out_dir / "sweep_rows.csv", SWEEP_COLUMNS, rows)

    by_arm: dict[tuple[int, int, str], list[DiceRow]] = {}
    for count, rep, model, case, cid, d, da in rows:
        by_arm.setdefault((int(count), int(rep), str(model)), []).append(
            DiceRow(str(case), int(cid), float(d), float(da))
        )
    counts = sorted({k[0] for k in by_arm})
    summary: dict = {"experiment": "sweep", "counts": {}}
    case_means: dict[int, tuple[list[float], list[float]]] = {}
    for count in counts:
        reps = sorted({k[1] for k in by_arm if k[0] == count})
        per_rep = []
        dots_base: list[float] = []
        dots_lcs: list[float] = []
        for rep in reps:
            rep_b = DiceReport("baseline", by_arm[(count, rep, "baseline")])
            rep_l = DiceReport("lcs", by_arm[(count, rep, "lcs")])
            xs, ys = paired_vectors(rep_l, rep_b, by="case_class")
            test_cc = paired_t_test(xs, ys)
            mx, my = paired_vectors(rep_l, rep_b, by="case_mean")
            test_cm = paired_t_test(mx, my)
            dots_base.extend(my)
            dots_lcs.extend(mx)
            per_rep.append({
                "repeat": rep,
                "baseline_mean": rep_b.global_mean(),
                "lcs_mean": rep_l.global_mean(),
                "baseline_mean_argmax": rep_b.global_mean("dice_argmax"),
                "lcs_mean_argmax": rep_l.global_mean("dice_argmax"),
                "p_value_case_class": test_cc.p_value,
                "t_case_class": test_cc.t_statistic,
                "p_value_case_mean": test_cm.p_value,
                "n_pairs": test_cc.n,
                "lcs_minus_baseline": test_cc.mean_difference,
            })
        summary["counts"][str(count)] = {
            "class_ids": sorted({r.class_id for r in by_arm[(count, reps[0], "lcs")]}),
            "repeats": per_rep,
            "baseline_mean": float(np.mean([r["baseline_mean"] for r in per_rep])),
            "lcs_mean": float(np.mean([r["lcs_mean"] for r in per_rep])),
            "lcs_wins": int(sum(r["lcs_mean"] > r["baseline_mean"] for r in per_rep)),
        }
        case_means[count] = (dots_base, dots_lcs)

    dot_rows = [
        (count, i, base, cond)
        for count, (bases, conds) in sorted(case_means.items())
        for i, (base, cond) in enumerate(zip(bases, conds))
    ]
    write_csv(out_dir / "sweep_case_means.csv",
              ["count", "pair_index", "baseline_case_mean", "lcs_case_mean"], dot_rows)
    save_paired_dot_plot(out_dir / "sweep_pairs.svg", case_means)
    write_json(out_dir / "sweep_summary.json", summary)
    return summary


def run_class_sweep(ecfg: ExperimentConfig, out_dir: str | Path,
                    save_checkpoints: bool = False) -> dict:
    out_dir = Path(out_dir)
    cohort = build_cohort(experiment_phantom(ecfg, "sweep"),
                          ecfg.n_cases, ecfg.split_sizes, ecfg.repeats)
    all_ids = list(cohort.class_ids())

    rows = []
    for count in ecfg.sweep_counts:
        ids = all_ids[:count]
        for rep, split in enumerate(cohort.splits):
            log.info("sweep: count=%d rep=%d", count, rep)
            ckpt_b = _train_one(cohort, split, "baseline", ids, ecfg, rep, count)
            ckpt_l = _train_one(cohort, split, "lcs", ids, ecfg, rep, count)
            if save_checkpoints:
                save_checkpoint(ckpt_b, out_dir / f"ckpt_c{count}_r{rep}_baseline.lcsz")
                save_checkpoint(ckpt_l, out_dir / f"ckpt_c{count}_r{rep}_lcs.lcsz")
            for ckpt, name in ((ckpt_b, "baseline"), (ckpt_l, "lcs")):
                report = evaluate_checkpoint(ckpt, cohort, split.test, ids, name,
                                             ecfg.workers)
                rows.extend(
                    (count, rep, name, r.case_id, r.class_id, r.dice, r.dice_argmax)
                    for r in report.rows
                )
    return sweep_outputs(rows, out_dir)


# --- many-class scaling ----------------------------------------------------------

MANYCLASS_COLUMNS = ("model", "case_id", "class_id", "dice", "dice_argmax")


def _chunks(ids: Sequence[int], size: int) -> list[list[int]]:
    return [list(ids[i:i + size]) for i in range(0, len(ids), size)]


def memory_sidecar(grid: Sequence[int], k: int, c_max: int, num_levels: int = 3) -> dict:
    """Analytic training-memory comparison for the two heads at vocabulary K."""
    grid = tuple(int(s) for s in grid)
    return {
        "grid": list(grid),
        "bytes_per_scalar": 4,
        "training": True,
        "num_levels": int(num_levels),
        "baseline_at_k_bytes": estimate_activation_memory(
            ModelConfig(grid, "baseline", out_channels=k, num_levels=num_levels),
            4, training=True),
        "baseline_at_c_max_bytes": estimate_activation_memory(
            ModelConfig(grid, "baseline", out_channels=min(c_max, k), num_levels=num_levels),
            4, training=True),
        "lcs_bytes": estimate_activation_memory(
            ModelConfig(grid, "lcs", num_levels=num_levels), 4, training=True),
        "k": int(k),
        "c_max": int(c_max),
        "n_baseline_models": int(np.ceil(k / c_max)),
    }


def manyclass_outputs(rows: Sequence[tuple], mem: dict, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    write_csv(out_dir / "manyclass_rows.csv", MANYCLASS_COLUMNS, rows)
    write_json(out_dir / "manyclass_memory.json", mem)

    by_model: dict[str, list[DiceRow]] = {}
    for model, case, cid, d, da in rows:
        by_model.setdefault(str(model), []).append(
            DiceRow(str(case), int(cid), float(d), float(da))
        )
    rep_b = DiceReport("baseline", by_model["baseline"])
    rep_l = DiceReport("lcs", by_model["lcs"])
    ids = sorted({r.class_id for r in rep_b.rows})
    base_means = rep_b.per_class_mean()
    lcs_means = rep_l.per_class_mean()
    order = sorted(ids, key=lambda c: (base_means[c], c))
    write_csv(out_dir / "manyclass_per_class.csv",
              ["class_id", "baseline_mean", "lcs_mean"],
              [(c, base_means[c], lcs_means[c]) for c in order])
    save_sorted_bar_plot(out_dir / "manyclass_bars.svg", ids,
                         [base_means[c] for c in ids], [lcs_means[c] for c in ids])
    xs, ys = paired_vectors(rep_l, rep_b, by="case_class")
    test = paired_t_test(xs, ys)
    summary = {
        "experiment": "manyclass",
        "k": len(ids),
        "baseline_models": mem["n_baseline_models"],
        "baseline_global_mean": rep_b.global_mean(),
        "lcs_global_mean": rep_l.global_mean(),
        "baseline_global_mean_argmax": rep_b.global_mean("dice_argmax"),
        "lcs_global_mean_argmax": rep_l.global_mean("dice_argmax"),
        "p_value_case_class": test.p_value,
        "memory": mem,
    }
    write_json(out_dir / "manyclass_summary.json", summary)
    return summary


def run_many_class(ecfg: ExperimentConfig, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    cohort = build_cohort(experiment_phantom(ecfg, "manyclass"),
                          ecfg.n_cases, ecfg.split_sizes, repeats=1)
    split = cohort.splits[0]
    ids = list(cohort.class_ids())

    log.info("manyclass: conditioned model on K=%d", len(ids))
    ckpt_l = _train_one(cohort, split, "lcs", ids, ecfg, 0, 1)
    rep_l = evaluate_checkpoint(ckpt_l, cohort, split.test, ids, "lcs", ecfg.workers)

    groups = _chunks(ids, ecfg.many_c_max)
    log.info("manyclass: %d baseline models of <= %d classes", len(groups), ecfg.many_c_max)
    chunk_models = [
        model_from_checkpoint(_train_one(cohort, split, "baseline", group, ecfg, 0, 100 + gi))
        for gi, group in enumerate(groups)
    ]

    rows_b = []
    for case in split.test:
        image, labels = cohort.cases[case]
        maps: list[np.ndarray] = []
        for group, model in zip(groups, chunk_models):
            result = segment_all_baseline(model, image, group, cohort.vocabulary)
            maps.extend(result.raw_probs.data[i][None].copy() for i in range(len(group)))
        per_class = [ProbMap(m, (frozenset({cid}),)) for m, cid in zip(maps, ids)]
        _, discrete = assemble(per_class, cohort.vocabulary)
        for pm, cid in zip(per_class, ids):
            gt = binarize(labels, {cid}).data.astype(bool)
            rows_b.append(DiceRow(case, cid, quantize(dice(pm.data[0] > 0.5, gt)),
                                  quantize(dice(discrete.data == cid, gt))))
    rep_b = DiceReport("baseline", rows_b)

    rows = [
        (report.model, r.case_id, r.class_id, r.dice, r.dice_argmax)
        for report in (rep_b, rep_l) for r in report.rows
    ]
    grid = cohort.image(split.atlas).shape
    mem = memory_sidecar(grid, len(ids), ecfg.many_c_max, ecfg.num_levels)
    return manyclass_outputs(rows, mem, out_dir)


# --- coarse-to-fine ---------------------------------------------------------------

COARSE2FINE_COLUMNS = ("case_id", "parent_id", "child_id",
                       "coarse_dice", "naive_dice", "fine_dice")


def coarse2fine_outputs(rows: Sequence[tuple], out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    write_csv(out_dir / "coarse2fine_rows.csv", COARSE2FINE_COLUMNS, rows)
    per_child: dict[int, dict] = {}
    for _, parent, child, coarse_score, naive, fine in rows:
        entry = per_child.setdefault(int(child), {
            "parent": int(parent), "coarse": [], "naive": [], "fine": [],
        })
        entry["coarse"].append(float(coarse_score))
        entry["naive"].append(float(naive))
        entry["fine"].append(float(fine))
    children_summary = {
        str(child): {
            "parent_id": entry["parent"],
            "coarse_dice": float(np.mean(entry["coarse"])),
            "naive_dice": float(np.mean(entry["naive"])),
            "fine_dice": float(np.mean(entry["fine"])),
            "improved": bool(np.mean(entry["fine"]) > np.mean(entry["naive"])),
        }
        for child, entry in sorted(per_child.items())
    }
    n_improved = sum(e["improved"] for e in children_summary.values())
    summary = {
        "experiment": "coarse2fine",
        "children": children_summary,
        "n_fine_labels": len(children_summary),
        "n_improved": int(n_improved),
        "fraction_improved": n_improved / max(len(children_summary), 1),
    }
    fine_ids = sorted(per_child)
    write_csv(out_dir / "coarse2fine_per_child.csv",
              ["child_id", "parent_id", "coarse_dice", "naive_dice", "fine_dice"],
              [(c, children_summary[str(c)]["parent_id"],
                children_summary[str(c)]["coarse_dice"],
                children_summary[str(c)]["naive_dice"],
                children_summary[str(c)]["fine_dice"]) for c in fine_ids])
    save_fine_label_plot(out_dir / "coarse2fine_bars.svg", fine_ids,
                         [children_summary[str(c)]["naive_dice"] for c in fine_ids],
                         [children_summary[str(c)]["fine_dice"] for c in fine_ids])
    write_json(out_dir / "coarse2fine_summary.json", summary)
    return summary


def run_coarse_to_fine(ecfg: ExperimentConfig, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    phantom = experiment_phantom(ecfg, "coarse2fine")
    cohort = build_cohort(phantom, ecfg.n_cases, ecfg.split_sizes, repeats=1)
    split = cohort.splits[0]
    coarse_ids = list(phantom.coarse_ids())

    log.info("coarse2fine: training conditioned model on %d coarse labels", len(coarse_ids))
    ckpt = _train_one(cohort, split, "lcs", coarse_ids, ecfg, 0, 2)
    model = model_from_checkpoint(ckpt)
    atlas = checkpoint_atlas(ckpt)
    conditioner = AtlasConditioner(pad_atlas(atlas, model.config.pool_factor),
                                   factor=model.config.pool_factor)

    rows = []
    for case in split.test:
        image, labels = cohort.cases[case]
        for parent in coarse_ids:
            children = cohort.hierarchy.get(parent, ())
            if not children:
                continue
            parent_pred = segment_one(model, image, atlas, {parent}, conditioner)
            parent_hard = parent_pred.data[0] > 0.5
            parent_gt = binarize(labels, {parent}).data.astype(bool)
            coarse_score = quantize(dice(parent_hard, parent_gt))
            for child in children:
                child_gt = binarize(labels, {child}).data.astype(bool)
                child_pred = segment_one(model, image, atlas, {child}, conditioner)
                rows.append((
                    case, parent, child,
                    coarse_score,
                    quantize(dice(parent_hard, child_gt)),
                    quantize(dice(child_pred.data[0] > 0.5, child_gt)),
                ))
    return coarse2fine_outputs(rows, out_dir)
