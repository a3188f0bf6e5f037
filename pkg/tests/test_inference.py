import numpy as np
import pytest

from lcseg import (
    BinaryMask,
    GridMismatchError,
    ImageVolume,
    LabelMap,
    MemoryLedger,
    ProbMap,
    assemble,
    build_model,
    estimate_activation_memory,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    segment_all,
    segment_all_baseline,
    segment_case,
    segment_novel,
    segment_one,
)
from lcseg.inference import checkpoint_atlas, trained_class_ids
from lcseg.model import ModelConfig


def prob(data, class_id):
    return ProbMap(np.asarray(data, dtype=np.float32)[None], (frozenset({class_id}),))


def single_voxel(value):
    return np.full((1, 1, 1), value, dtype=np.float32)


# --- assembly -------------------------------------------------------------------


def test_assemble_background_and_normalization_worked_example():
    # two classes score 0.2 and 0.8 on one voxel: background = 1 - 0.8 = 0.2,
    # sum = 1.2, so the stack becomes (1/6, 1/6, 4/6) and argmax picks class 2
    out, discrete = assemble([prob(single_voxel(0.2), 1), prob(single_voxel(0.8), 2)])
    assert out.data[:, 0, 0, 0] == pytest.approx([0.2 / 1.2, 0.2 / 1.2, 0.8 / 1.2])
    assert discrete.data[0, 0, 0] == 2


def test_assemble_all_zero_scores_give_background():
    out, discrete = assemble([prob(single_voxel(0.0), 1), prob(single_voxel(0.0), 2)])
    assert out.data[:, 0, 0, 0] == pytest.approx([1.0, 0.0, 0.0])
    assert discrete.data[0, 0, 0] == 0


def test_assemble_sums_to_one_on_random_stacks():
    rng = np.random.default_rng(0)
    maps = [prob(rng.random((4, 4, 4)).astype(np.float32), cid) for cid in (1, 2, 3)]
    out, _ = assemble(maps)
    totals = out.data.sum(axis=0)
    assert np.allclose(totals, 1.0, atol=1e-5)
    assert out.normalized


def test_assemble_confident_winner_survives_normalization():
    out, discrete = assemble([prob(single_voxel(1.0), 1), prob(single_voxel(0.3), 2)])
    # background = 0, channel sum = 1.3
    assert out.data[:, 0, 0, 0] == pytest.approx([0.0, 1.0 / 1.3, 0.3 / 1.3])
    assert discrete.data[0, 0, 0] == 1


def test_assemble_tie_prefers_lowest_id_and_background_first():
    out, discrete = assemble([prob(single_voxel(0.5), 3), prob(single_voxel(0.5), 7)])
    # both classes tie with background at 0.5/1.5 each; id 0 wins the tie
    assert discrete.data[0, 0, 0] == 0
    full = assemble([prob(single_voxel(1.0), 3), prob(single_voxel(1.0), 7)])[1]
    assert full.data[0, 0, 0] == 3  # classes tie at 0.5, background at 0


def test_assemble_channel_order_is_sorted_by_id():
    maps = [prob(single_voxel(0.9), 5), prob(single_voxel(0.1), 2)]
    out, discrete = assemble(maps, vocabulary=[(2, "two"), (5, "five")])
    assert out.channel_labels == (frozenset(), frozenset({2}), frozenset({5}))
    assert discrete.vocabulary == ((2, "two"), (5, "five"))


def test_assemble_input_order_irrelevant():
    rng = np.random.default_rng(1)
    maps = [prob(rng.random((3, 3, 3)).astype(np.float32), cid) for cid in (1, 2, 3)]
    a = assemble(maps)
    b = assemble(list(reversed(maps)))
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_assemble_merged_set_keyed_by_lowest_id():
    merged = ProbMap(single_voxel(0.9)[None], (frozenset({4, 6}),))
    out, discrete = assemble([merged, prob(single_voxel(0.2), 5)])
    assert discrete.data[0, 0, 0] == 4
    assert out.channel_labels[1] == frozenset({4, 6})


def test_assemble_validation_errors():
    with pytest.raises(ValueError):
        assemble([])
    with pytest.raises(ValueError):
        assemble([prob(single_voxel(0.1), 1), prob(single_voxel(0.2), 1)])
    with pytest.raises(ValueError):
        assemble([prob(single_voxel(0.1), 0)])
    two_channel = ProbMap(np.zeros((2, 1, 1, 1), dtype=np.float32),
                          (frozenset({1}), frozenset({2})))
    with pytest.raises(ValueError):
        assemble([two_channel])
    with pytest.raises(GridMismatchError):
        assemble([prob(single_voxel(0.1), 1),
                  prob(np.zeros((2, 2, 2), dtype=np.float32), 2)])


# --- ledger ---------------------------------------------------------------------


def test_ledger_peak_counts_concurrent_passes_only():
    ledger = MemoryLedger(bytes_per_scalar=4, per_pass_activation_bytes=1000,
                          passes=24, concurrent=1, model_bytes=10)
    assert ledger.peak_activation_bytes == 1000
    assert ledger.total_activation_bytes == 24_000
    wide = MemoryLedger(4, 1000, 24, 4, 10)
    assert wide.peak_activation_bytes == 4000


def test_ledger_concurrency_capped_by_passes():
    ledger = MemoryLedger(4, 1000, 2, 8, 10)
    assert ledger.peak_activation_bytes == 2000


# --- conditioned routes (trained fixtures from conftest) ------------------------------


def test_segment_all_shapes_and_vocabulary(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    ckpt = lcs_checkpoint
    model = model_from_checkpoint(ckpt)
    case = split.test[0]
    result = segment_all(model, cohort.image(case), checkpoint_atlas(ckpt),
                         [1, 2, 3], vocabulary=ckpt.vocabulary)
    grid = cohort.image(case).shape
    assert result.labels.shape == grid
    assert result.probs.data.shape == (4,) + grid
    assert result.raw_probs.data.shape == (3,) + grid
    assert set(np.unique(result.labels.data)) <= {0, 1, 2, 3}
    assert result.ledger.passes == 3


def test_segment_all_worker_count_does_not_change_outputs(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    image = cohort.image(split.test[0])
    serial = segment_all(model, image, atlas, [1, 2, 3], workers=1)
    threaded = segment_all(model, image, atlas, [1, 2, 3], workers=4)
    assert np.array_equal(serial.labels.data, threaded.labels.data)
    assert np.array_equal(serial.probs.data, threaded.probs.data)
    assert np.array_equal(serial.raw_probs.data, threaded.raw_probs.data)
    assert threaded.ledger.concurrent == 4
    assert serial.ledger.peak_activation_bytes < threaded.ledger.peak_activation_bytes


def test_segment_one_matches_segment_all_channel(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    image = cohort.image(split.test[0])
    solo = segment_one(model, image, atlas, frozenset({2}))
    full = segment_all(model, image, atlas, [1, 2, 3])
    assert np.array_equal(solo.data[0], full.raw_channel(2))


def test_segment_one_peak_memory_independent_of_class_count(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    image = cohort.image(split.test[0])
    one = segment_all(model, image, atlas, [1], workers=1)
    three = segment_all(model, image, atlas, [1, 2, 3], workers=1)
    assert one.ledger.peak_activation_bytes == three.ledger.peak_activation_bytes
    assert three.ledger.total_activation_bytes == 3 * one.ledger.total_activation_bytes


def test_segment_novel_runs_on_atlas_mask(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    image = cohort.image(split.test[0])
    mask = BinaryMask((atlas.labels.data == 1).astype(np.uint8))
    out = segment_novel(model, image, atlas, mask, label_id=99)
    assert out.data.shape == (1,) + image.shape
    assert out.channel_labels == (frozenset({99}),)
    # conditioning on class 1's own voxels reproduces the class-1 channel
    direct = segment_one(model, image, atlas, frozenset({1}))
    assert np.array_equal(out.data, direct.data)


def test_segment_novel_grid_mismatch(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    with pytest.raises(GridMismatchError):
        segment_novel(model, cohort.image(split.test[0]), atlas,
                      BinaryMask(np.zeros((8, 8, 8), dtype=np.uint8)), 9)


def test_baseline_route_uses_same_assembly(baseline_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(baseline_checkpoint)
    image = cohort.image(split.test[0])
    result = segment_all_baseline(model, image, [1, 2, 3],
                                  vocabulary=baseline_checkpoint.vocabulary)
    raw = result.raw_probs.data
    expected_prob, expected_discrete = assemble(
        [ProbMap(raw[i][None], (frozenset({cid}),)) for i, cid in enumerate([1, 2, 3])],
        vocabulary=baseline_checkpoint.vocabulary,
    )
    assert np.array_equal(result.probs.data, expected_prob.data)
    assert np.array_equal(result.labels.data, expected_discrete.data)
    assert result.ledger.passes == 1


def test_baseline_channel_count_checked(baseline_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(baseline_checkpoint)
    with pytest.raises(ValueError):
        segment_all_baseline(model, cohort.image(split.test[0]), [1, 2])


# --- checkpoint front door -----------------------------------------------------------


def test_segment_case_all_matches_segment_all(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    image = cohort.image(split.test[0])
    via_case = segment_case(lcs_checkpoint, image, labels="all")
    model = model_from_checkpoint(lcs_checkpoint)
    direct = segment_all(model, image, checkpoint_atlas(lcs_checkpoint),
                         trained_class_ids(lcs_checkpoint),
                         vocabulary=lcs_checkpoint.vocabulary)
    assert np.array_equal(via_case.labels.data, direct.labels.data)
    assert np.array_equal(via_case.probs.data, direct.probs.data)


def test_segment_case_subset_ids(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    image = cohort.image(split.test[0])
    result = segment_case(lcs_checkpoint, image, labels="1,3")
    assert result.raw_probs.data.shape[0] == 2
    assert set(np.unique(result.labels.data)) <= {0, 1, 3}


def test_segment_case_baseline_subset_reassembles(baseline_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    image = cohort.image(split.test[0])
    full = segment_case(baseline_checkpoint, image, labels="all")
    sub = segment_case(baseline_checkpoint, image, labels="2")
    assert np.array_equal(sub.raw_probs.data[0], full.raw_channel(2))
    assert sub.probs.data.shape[0] == 2  # background + class 2
    with pytest.raises(ValueError):
        segment_case(baseline_checkpoint, image, labels="9")


def test_segment_case_novel_mask_path(tmp_path, lcs_checkpoint, small_cohort):
    from lcseg.volume_io import save_mask

    cohort = small_cohort
    split = cohort.splits[0]
    image = cohort.image(split.test[0])
    atlas = checkpoint_atlas(lcs_checkpoint)
    mask = BinaryMask((atlas.labels.data == 2).astype(np.uint8))
    save_mask(mask, tmp_path / "novel")
    result = segment_case(lcs_checkpoint, image, labels=f"@{tmp_path / 'novel.f32raw'}")
    novel_id = max(cid for cid, _ in lcs_checkpoint.vocabulary) + 1
    assert result.raw_probs.channel_labels == (frozenset({novel_id}),)
    assert set(np.unique(result.labels.data)) <= {0, novel_id}


def test_segment_case_novel_mask_needs_conditioned_head(tmp_path, baseline_checkpoint,
                                                        small_cohort):
    from lcseg.volume_io import save_mask

    cohort = small_cohort
    split = cohort.splits[0]
    mask = BinaryMask(np.zeros(cohort.image(split.test[0]).shape, dtype=np.uint8))
    save_mask(mask, tmp_path / "m")
    with pytest.raises(ValueError, match="conditioned"):
        segment_case(baseline_checkpoint, cohort.image(split.test[0]),
                     labels=f"@{tmp_path / 'm.f32raw'}")


def test_checkpoint_atlas_round_trip(tmp_path, lcs_checkpoint):
    save_checkpoint(lcs_checkpoint, tmp_path / "m.lcsz")
    atlas = checkpoint_atlas(load_checkpoint(tmp_path / "m.lcsz"))
    original = checkpoint_atlas(lcs_checkpoint)
    assert np.array_equal(atlas.image.data, original.image.data)
    assert np.array_equal(atlas.labels.data, original.labels.data)
    assert atlas.case_id == original.case_id


def test_checkpoint_atlas_requires_embedding(baseline_checkpoint):
    with pytest.raises(ValueError):
        checkpoint_atlas(baseline_checkpoint)


def test_ledger_values_come_from_memory_estimator(lcs_checkpoint, small_cohort):
    cohort = small_cohort
    split = cohort.splits[0]
    model = model_from_checkpoint(lcs_checkpoint)
    result = segment_all(model, cohort.image(split.test[0]),
                         checkpoint_atlas(lcs_checkpoint), [1, 2])
    expected = estimate_activation_memory(model.config, 4, training=False)
    assert result.ledger.per_pass_activation_bytes == expected
    assert result.ledger.model_bytes > 0


def test_forward_grid_checked_against_config(lcs_checkpoint):
    model = model_from_checkpoint(lcs_checkpoint)
    atlas = checkpoint_atlas(lcs_checkpoint)
    wrong = ImageVolume(np.random.default_rng(0).random((64, 64, 64)).astype(np.float32))
    with pytest.raises(ValueError):
        segment_all(model, wrong, atlas, [1])
