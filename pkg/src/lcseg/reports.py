"""Dice reports, byte-stable CSV/JSON writers, and headless plot emission.

Everything written here is a pure function of (report content, config, seed):
fixed float formatting, sorted keys, LF newlines, and SVG output with a pinned
hash salt and no timestamp, so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FLOAT_DECIMALS = 6
EMPTY_EMPTY_NOTE = "dice convention: both-empty masks score 1.0"


def fmt_value(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{FLOAT_DECIMALS}f}"
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_value(v) for v in row])
    return path


def _round_floats(payload):
    if isinstance(payload, dict):
        return {k: _round_floats(v) for k, v in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_round_floats(v) for v in payload]
    if isinstance(payload, (bool, np.bool_)):
        return bool(payload)
    if isinstance(payload, (float, np.floating)):
        v = float(payload)
        return round(v, 10) if np.isfinite(v) else repr(v)
    if isinstance(payload, np.integer):
        return int(payload)
    return payload


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_round_floats(payload), indent=2, sort_keys=True)
    path.write_text(text + "\n")
    return path


# --- Dice reports -------------------------------------------------------------


@dataclass(frozen=True)
class DiceRow:
    case_id: str
    class_id: int
    dice: float  # per-class map thresholded at 0.5
    dice_argmax: float  # from the assembled discrete map

    def __post_init__(self):
        for v in (self.dice, self.dice_argmax):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"dice {v} outside [0, 1]")


@dataclass(frozen=True)
class DiceReport:
    """Per-(case, class) scores for one model, with the derived aggregates."""

    model: str
    rows: tuple[DiceRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        keys = self.pairing_keys()
        if len(keys) != len(self.rows):
            raise ValueError("duplicate (case, class) rows in report")

    def pairing_keys(self) -> set[tuple[str, int]]:
        return {(r.case_id, r.class_id) for r in self.rows}

    def score_map(self, metric: str = "dice") -> dict[tuple[str, int], float]:
        return {(r.case_id, r.class_id): getattr(r, metric) for r in self.rows}

    def per_class_mean(self, metric: str = "dice") -> dict[int, float]:
        acc: dict[int, list[float]] = {}
        for r in self.rows:
            acc.setdefault(r.class_id, []).append(getattr(r, metric))
        return {cid: float(np.mean(v)) for cid, v in sorted(acc.items())}

    def per_case_mean(self, metric: str = "dice") -> dict[str, float]:
        acc: dict[str, list[float]] = {}
        for r in self.rows:
            acc.setdefault(r.case_id, []).append(getattr(r, metric))
        return {case: float(np.mean(v)) for case, v in sorted(acc.items())}

    def global_mean(self, metric: str = "dice") -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows]))


def paired_vectors(a: DiceReport, b: DiceReport, by: str = "case_class",
                   metric: str = "dice") -> tuple[list[float], list[float]]:
    """Matched score vectors for a paired test; key sets must be identical."""
    if by == "case_class":
        if a.pairing_keys() != b.pairing_keys():
            raise ValueError("reports cover different (case, class) keys")
        sa, sb = a.score_map(metric), b.score_map(metric)
        keys = sorted(sa)
        return [sa[k] for k in keys], [sb[k] for k in keys]
    if by == "case_mean":
        ma, mb = a.per_case_mean(metric), b.per_case_mean(metric)
        if ma.keys() != mb.keys():
            raise ValueError("reports cover different cases")
        keys = sorted(ma)
        return [ma[k] for k in keys], [mb[k] for k in keys]
    raise ValueError(f"unknown pairing {by!r}")


# --- plots ---------------------------------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "lcseg"
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def save_paired_dot_plot(path: str | Path,
                         groups: dict[int, tuple[list[float], list[float]]]) -> Path:
    """Per-case paired dots (baseline vs conditioned) grouped by class count."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for gi, count in enumerate(sorted(groups)):
        base, cond = groups[count]
        x0, x1 = gi - 0.15, gi + 0.15
        for yb, yc in zip(base, cond):
            ax.plot([x0, x1], [yb, yc], color="0.7", linewidth=0.6, zorder=1)
        ax.scatter([x0] * len(base), base, s=14, color="#1f77b4", zorder=2,
                   label="baseline" if gi == 0 else None)
        ax.scatter([x1] * len(cond), cond, s=14, color="#d62728", zorder=2,
                   label="conditioned" if gi == 0 else None)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([str(c) for c in sorted(groups)])
    ax.set_xlabel("number of classes")
    ax.set_ylabel("mean test Dice per case")
    ax.legend(loc="lower left", frameon=False)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def save_sorted_bar_plot(path: str | Path, class_ids: Sequence[int],
                         baseline: Sequence[float], conditioned: Sequence[float]) -> Path:
    """Per-class bars sorted ascending by the baseline score."""
    plt = _plt()
    order = np.argsort(np.asarray(baseline, dtype=float), kind="stable")
    xs = np.arange(len(order))
    fig, ax = plt.subplots(figsize=(max(6, len(order) * 0.35), 4))
    ax.bar(xs - 0.2, [baseline[i] for i in order], width=0.4, color="#1f77b4",
           label="baseline")
    ax.bar(xs + 0.2, [conditioned[i] for i in order], width=0.4, color="#d62728",
           label="conditioned")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(class_ids[i]) for i in order], rotation=90, fontsize=7)
    ax.set_xlabel("class id (sorted by baseline Dice)")
    ax.set_ylabel("mean test Dice")
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def save_fine_label_plot(path: str | Path, fine_ids: Sequence[int],
                         naive: Sequence[float], fine: Sequence[float]) -> Path:
    """Naive-vs-fine-conditioned Dice per fine label."""
    plt = _plt()
    xs = np.arange(len(fine_ids))
    fig, ax = plt.subplots(figsize=(max(5, len(fine_ids) * 0.5), 4))
    ax.bar(xs - 0.2, naive, width=0.4, color="0.6", label="naive (coarse conditioning)")
    ax.bar(xs + 0.2, fine, width=0.4, color="#2ca02c", label="fine conditioning")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(c) for c in fine_ids])
    ax.set_xlabel("fine class id")
    ax.set_ylabel("mean test Dice")
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


# --- run provenance ------------------------------------------------------------


def code_version() -> str:
    """Content hash over all package sources; changes whenever the code does."""
    root = Path(__file__).resolve().parent
    digest = hashlib.sha1()
    for src in sorted(root.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return digest.hexdigest()


def write_run_json(out_dir: str | Path, command: str, config: dict, seed: int) -> Path:
    return write_json(Path(out_dir) / "run.json", {
        "command": command,
        "config": config,
        "seed": int(seed),
        "code_version": code_version(),
        "notes": [EMPTY_EMPTY_NOTE],
    })
