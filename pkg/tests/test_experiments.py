import json
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from lcseg.experiments import (
    ExperimentConfig,
    coarse2fine_outputs,
    evaluate_checkpoint,
    experiment_phantom,
    load_experiment_config,
    manyclass_outputs,
    memory_sidecar,
    quantize,
    read_rows_csv,
    run_class_sweep,
    run_coarse_to_fine,
    run_many_class,
    sweep_outputs,
)


# --- config ---------------------------------------------------------------------


def test_config_defaults_are_consistent():
    ecfg = ExperimentConfig()
    assert sum(ecfg.split_sizes) == ecfg.n_cases
    assert ecfg.sweep_counts == (2, 4, 8)
    assert max(ecfg.sweep_counts) <= ecfg.many_k


def test_config_rejects_bad_split_sum():
    with pytest.raises(ValueError, match="do not sum"):
        ExperimentConfig(n_cases=10, split_sizes=(8, 1, 2, 4))


def test_load_config_from_file_with_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3, "epochs": 12, "grid": [16, 16, 16]}))
    ecfg = load_experiment_config(path, epochs=5)
    assert ecfg.seed == 3
    assert ecfg.epochs == 5
    assert ecfg.grid == (16, 16, 16)
    # None overrides are "not given", not "set to null"
    assert load_experiment_config(path, epochs=None).epochs == 12


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ValueError, match="unknown config keys"):
        load_experiment_config(path)


def test_load_config_rejects_fine_split(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"fine_split": {"1": 2}}))
    with pytest.raises(ValueError, match="fine_split"):
        load_experiment_config(path)


def test_shipped_coarse2fine_config_loads():
    path = Path(__file__).parent.parent / "configs" / "coarse2fine.json"
    ecfg = load_experiment_config(path)
    assert ecfg.num_levels == 2
    assert ecfg.fine_n_coarse == 8
    assert ecfg.radius_range == (0.30, 0.42)


def test_experiment_phantom_kinds():
    ecfg = ExperimentConfig(jitter_pos=0.5, radius_range=(0.3, 0.4))
    sweep = experiment_phantom(ecfg, "sweep")
    assert sweep.n_coarse == max(ecfg.sweep_counts)
    assert sweep.fine_split == {}
    assert sweep.jitter_pos == 0.5 and sweep.radius_range == (0.3, 0.4)
    many = experiment_phantom(ecfg, "manyclass")
    assert many.n_coarse == ecfg.many_k
    fine = experiment_phantom(ecfg, "coarse2fine")
    assert fine.n_coarse == ecfg.fine_n_coarse
    assert fine.fine_split == {c: ecfg.fine_children
                               for c in range(1, ecfg.fine_n_coarse + 1)}
    assert fine.sibling_contrast == ecfg.sibling_contrast
    with pytest.raises(ValueError, match="unknown dataset kind"):
        experiment_phantom(ecfg, "nope")


def test_quantize_matches_csv_formatting():
    for value in (0.123456789, 1 / 3, 0.5, 0.0, 1.0):
        q = quantize(value)
        assert f"{q:.6f}" == f"{value:.6f}"
        assert quantize(q) == q


# --- memory sidecar -------------------------------------------------------------


def test_memory_sidecar_lcs_below_baseline_at_large_k():
    mem = memory_sidecar((32, 32, 32), k=24, c_max=8, num_levels=3)
    assert mem["lcs_bytes"] < mem["baseline_at_k_bytes"]
    assert mem["n_baseline_models"] == 3
    assert mem["baseline_at_c_max_bytes"] < mem["baseline_at_k_bytes"]


def test_memory_sidecar_lcs_constant_in_k():
    a = memory_sidecar((32, 32, 32), k=4, c_max=8, num_levels=3)
    b = memory_sidecar((32, 32, 32), k=95, c_max=8, num_levels=3)
    assert a["lcs_bytes"] == b["lcs_bytes"]
    assert b["n_baseline_models"] == 12


# --- evaluation -----------------------------------------------------------------


def test_evaluate_checkpoint_row_coverage(small_cohort, lcs_checkpoint):
    split = small_cohort.splits[0]
    report = evaluate_checkpoint(lcs_checkpoint, small_cohort, split.test)
    ids = [c for c, _ in lcs_checkpoint.vocabulary]
    assert len(report.rows) == len(split.test) * len(ids)
    for row in report.rows:
        assert 0.0 <= row.dice <= 1.0
        assert row.dice == quantize(row.dice)
        assert row.dice_argmax == quantize(row.dice_argmax)


def test_evaluate_checkpoint_requires_class_ids(small_cohort, lcs_checkpoint):
    ckpt = lcs_checkpoint
    ckpt.metadata.pop("train_class_ids", None)
    with pytest.raises(ValueError, match="no class ids"):
        evaluate_checkpoint(ckpt, small_cohort, small_cohort.splits[0].test)


# --- sweep outputs from synthetic rows ------------------------------------------


def sweep_rows():
    rows = []
    scores = {
        "baseline": {"case_a": (0.80, 0.70), "case_b": (0.60, 0.65)},
        "lcs": {"case_a": (0.90, 0.85), "case_b": (0.70, 0.72)},
    }
    for model, per_case in scores.items():
        for case, per_class in per_case.items():
            for cid, d in zip((1, 2), per_class):
                rows.append((2, 0, model, case, cid, quantize(d), quantize(d)))
    return rows


def test_sweep_summary_means_and_wins(tmp_path):
    summary = sweep_outputs(sweep_rows(), tmp_path)
    arm = summary["counts"]["2"]
    assert arm["baseline_mean"] == pytest.approx(np.mean([0.80, 0.70, 0.60, 0.65]))
    assert arm["lcs_mean"] == pytest.approx(np.mean([0.90, 0.85, 0.70, 0.72]))
    assert arm["lcs_wins"] == 1
    assert arm["class_ids"] == [1, 2]


def test_sweep_summary_t_test_matches_scipy(tmp_path):
    summary = sweep_outputs(sweep_rows(), tmp_path)
    rep = summary["counts"]["2"]["repeats"][0]
    lcs = [0.90, 0.85, 0.70, 0.72]
    base = [0.80, 0.70, 0.60, 0.65]
    t, p = stats.ttest_rel(lcs, base)
    assert rep["t_case_class"] == pytest.approx(float(t))
    assert rep["p_value_case_class"] == pytest.approx(float(p))
    assert rep["n_pairs"] == 4
    assert rep["lcs_minus_baseline"] == pytest.approx(np.mean(lcs) - np.mean(base))


def test_sweep_outputs_files_and_byte_identity(tmp_path):
    rows = sweep_rows()
    first = tmp_path / "first"
    again = tmp_path / "again"
    sweep_outputs(rows, first)
    sweep_outputs(rows, again)
    names = ["sweep_rows.csv", "sweep_summary.json", "sweep_case_means.csv",
             "sweep_pairs.svg"]
    for name in names:
        assert (first / name).read_bytes() == (again / name).read_bytes()


def test_sweep_report_regenerates_from_csv(tmp_path):
    original = tmp_path / "run"
    rebuilt = tmp_path / "rebuilt"
    sweep_outputs(sweep_rows(), original)
    records = read_rows_csv(original / "sweep_rows.csv")
    rows = [tuple(r[c] for c in ("count", "repeat", "model", "case_id",
                                 "class_id", "dice", "dice_argmax"))
            for r in records]
    sweep_outputs(rows, rebuilt)
    for name in ("sweep_rows.csv", "sweep_summary.json", "sweep_case_means.csv",
                 "sweep_pairs.svg"):
        assert (original / name).read_bytes() == (rebuilt / name).read_bytes()


# --- manyclass outputs ----------------------------------------------------------


def manyclass_rows():
    rows = []
    for model, offset in (("baseline", 0.0), ("lcs", 0.02)):
        for case in ("case_a", "case_b"):
            for cid in (1, 2, 3):
                d = quantize(0.5 + 0.1 * cid + offset * cid)
                rows.append((model, case, cid, d, d))
    return rows


def test_manyclass_summary_and_regeneration(tmp_path):
    mem = memory_sidecar((16, 16, 16), k=3, c_max=2, num_levels=3)
    original = tmp_path / "run"
    rebuilt = tmp_path / "rebuilt"
    summary = manyclass_outputs(manyclass_rows(), mem, original)
    assert summary["k"] == 3
    assert summary["baseline_models"] == 2
    assert summary["lcs_global_mean"] == pytest.approx(summary["baseline_global_mean"] + 0.04)
    records = read_rows_csv(original / "manyclass_rows.csv")
    rows = [tuple(r[c] for c in ("model", "case_id", "class_id", "dice", "dice_argmax"))
            for r in records]
    manyclass_outputs(rows, json.loads((original / "manyclass_memory.json").read_text()),
                      rebuilt)
    for name in ("manyclass_rows.csv", "manyclass_summary.json", "manyclass_memory.json",
                 "manyclass_per_class.csv", "manyclass_bars.svg"):
        assert (original / name).read_bytes() == (rebuilt / name).read_bytes()


def test_manyclass_per_class_csv_sorted_by_baseline(tmp_path):
    rows = [
        ("baseline", "case_a", 1, 0.9, 0.9),
        ("baseline", "case_a", 2, 0.3, 0.3),
        ("baseline", "case_a", 3, 0.6, 0.6),
        ("lcs", "case_a", 1, 0.9, 0.9),
        ("lcs", "case_a", 2, 0.4, 0.4),
        ("lcs", "case_a", 3, 0.7, 0.7),
    ]
    mem = memory_sidecar((16, 16, 16), k=3, c_max=3, num_levels=3)
    manyclass_outputs(rows, mem, tmp_path)
    records = read_rows_csv(tmp_path / "manyclass_per_class.csv")
    assert [r["class_id"] for r in records] == ["2", "3", "1"]


# --- coarse2fine outputs --------------------------------------------------------


def coarse2fine_rows():
    # child 3 improves on both cases, child 4 on neither, child 5 on average
    rows = [
        ("case_a", 1, 3, 0.80, 0.40, 0.70),
        ("case_b", 1, 3, 0.82, 0.45, 0.60),
        ("case_a", 1, 4, 0.80, 0.50, 0.30),
        ("case_b", 1, 4, 0.82, 0.55, 0.40),
        ("case_a", 2, 5, 0.78, 0.30, 0.80),
        ("case_b", 2, 5, 0.76, 0.60, 0.20),
    ]
    return [(c, p, ch, quantize(a), quantize(b), quantize(f))
            for c, p, ch, a, b, f in rows]


def test_coarse2fine_fraction_improved(tmp_path):
    summary = coarse2fine_outputs(coarse2fine_rows(), tmp_path)
    assert summary["n_fine_labels"] == 3
    assert summary["children"]["3"]["improved"] is True
    assert summary["children"]["4"]["improved"] is False
    # child 5: mean fine 0.50 vs mean naive 0.45
    assert summary["children"]["5"]["improved"] is True
    assert summary["n_improved"] == 2
    assert summary["fraction_improved"] == pytest.approx(2 / 3)


def test_coarse2fine_regeneration(tmp_path):
    original = tmp_path / "run"
    rebuilt = tmp_path / "rebuilt"
    coarse2fine_outputs(coarse2fine_rows(), original)
    records = read_rows_csv(original / "coarse2fine_rows.csv")
    rows = [tuple(r[c] for c in ("case_id", "parent_id", "child_id", "coarse_dice",
                                 "naive_dice", "fine_dice")) for r in records]
    coarse2fine_outputs(rows, rebuilt)
    for name in ("coarse2fine_rows.csv", "coarse2fine_summary.json",
                 "coarse2fine_per_child.csv", "coarse2fine_bars.svg"):
        assert (original / name).read_bytes() == (rebuilt / name).read_bytes()


# --- tiny end-to-end drivers ----------------------------------------------------


def tiny_config(**overrides):
    base = dict(seed=4, grid=(16, 16, 16), n_cases=5, split_sizes=(1, 1, 1, 2),
                repeats=1, num_levels=3, epochs=2, lr=1e-3, batch_size=1,
                val_interval=1, sweep_counts=(2,), many_k=3, many_c_max=2,
                fine_n_coarse=2, fine_children=2)
    base.update(overrides)
    return ExperimentConfig(**base)


def test_run_class_sweep_end_to_end(tmp_path):
    summary = run_class_sweep(tiny_config(), tmp_path)
    assert list(summary["counts"]) == ["2"]
    arm = summary["counts"]["2"]
    assert len(arm["repeats"]) == 1
    assert 0.0 <= arm["lcs_mean"] <= 1.0
    rows = read_rows_csv(tmp_path / "sweep_rows.csv")
    # 1 count x 1 repeat x 2 models x 2 test cases x 2 classes
    assert len(rows) == 8
    assert (tmp_path / "sweep_pairs.svg").exists()


def test_run_many_class_end_to_end(tmp_path):
    summary = run_many_class(tiny_config(), tmp_path)
    assert summary["k"] == 3
    assert summary["baseline_models"] == 2
    mem = json.loads((tmp_path / "manyclass_memory.json").read_text())
    assert mem["lcs_bytes"] < mem["baseline_at_k_bytes"]
    rows = read_rows_csv(tmp_path / "manyclass_rows.csv")
    # 2 models x 2 test cases x 3 classes
    assert len(rows) == 12


def test_run_coarse_to_fine_end_to_end(tmp_path):
    summary = run_coarse_to_fine(tiny_config(), tmp_path)
    # 2 parents x 2 children each
    assert summary["n_fine_labels"] == 4
    assert 0.0 <= summary["fraction_improved"] <= 1.0
    rows = read_rows_csv(tmp_path / "coarse2fine_rows.csv")
    assert len(rows) == 8
    for record in rows:
        assert record["parent_id"] in {"1", "2"}


def test_sweep_is_seed_reproducible(tmp_path):
    a = run_class_sweep(tiny_config(), tmp_path / "a")
    b = run_class_sweep(tiny_config(), tmp_path / "b")
    del a, b
    assert ((tmp_path / "a" / "sweep_rows.csv").read_bytes()
            == (tmp_path / "b" / "sweep_rows.csv").read_bytes())
    assert ((tmp_path / "a" / "sweep_summary.json").read_bytes()
            == (tmp_path / "b" / "sweep_summary.json").read_bytes())
