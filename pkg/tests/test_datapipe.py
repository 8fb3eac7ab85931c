import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsggan.datapipe import (BISENET_MAPPING, GROUP_MIDPOINTS, N_CLASSES, DataError, FacePairBatch,
                             InsufficientDataError, SemanticLayout, UnknownLabelError, apply_noise,
                             count_stripes, generate_synthetic_dataset, group_of_age, load_image_folder,
                             make_condition, make_pair_batches, merge_parsing, sample_noise,
                             split_by_identity, write_synthetic_dataset)

layouts = arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 11))


def test_merge_all_zero_identity_mapping():
    layout = merge_parsing(np.zeros((5, 7), int), {i: i for i in range(12)})
    assert np.array_equal(layout.onehot[0], np.ones((5, 7)))
    assert not layout.onehot[1:].any()


def test_merge_eyes_union_matches_pixel_loop():
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 19, size=(16, 16))
    layout = merge_parsing(raw, BISENET_MAPPING)
    oracle = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            oracle[i, j] = raw[i, j] in (4, 5)
    assert np.array_equal(layout.onehot[3], oracle)


def test_merge_unknown_label():
    with pytest.raises(UnknownLabelError):
        merge_parsing(np.full((2, 2), 99), BISENET_MAPPING)


@given(layouts)
def test_onehot_sums_to_one(classes):
    onehot = SemanticLayout(classes).onehot
    assert onehot.shape == (N_CLASSES,) + classes.shape
    assert np.array_equal(onehot.sum(axis=0), np.ones(classes.shape))


def test_layout_rejects_bad_ids():
    with pytest.raises(DataError):
        SemanticLayout(np.full((2, 2), 12))


def test_condition_maps():
    cond = make_condition(1, 4, 4)
    assert np.array_equal(cond.onehot_maps[1], np.ones((4, 4)))
    assert cond.onehot_maps.sum() == 16
    assert make_condition(0, 3, 3).onehot_maps[0].all()
    with pytest.raises(DataError):
        make_condition(4, 4, 4)


@pytest.mark.parametrize("age,group", [(16, 0), (30, 0), (30.5, 1), (31, 1), (40, 1), (41, 2), (50, 2),
                                       (51, 3), (77, 3)])
def test_group_of_age(age, group):
    assert group_of_age(age) == group


def test_midpoints():
    assert GROUP_MIDPOINTS == (23.0, 35.5, 45.5, 64.0)


@given(layouts)
def test_unit_noise_is_identity(classes):
    layout = SemanticLayout(classes)
    out = apply_noise(layout, np.ones((1,) + classes.shape, np.float32), drop_classes=())
    assert np.array_equal(out, layout.onehot)


@given(layouts, st.integers(0, 2**31 - 1))
def test_dropped_channels_zero(classes, seed):
    layout = SemanticLayout(classes)
    out = apply_noise(layout, sample_noise(*classes.shape, seed), (3, 7, 8))
    assert not out[[3, 7, 8]].any()


@given(layouts, st.integers(0, 2**31 - 1))
def test_noise_elementwise_oracle(classes, seed):
    layout = SemanticLayout(classes)
    noise = sample_noise(*classes.shape, seed)
    out = apply_noise(layout, noise, ())
    for (i, j), c in np.ndenumerate(classes):
        assert out[c, i, j] == noise.data[0, i, j]
        assert not np.delete(out[:, i, j], c).any()


def test_noise_deterministic():
    assert np.array_equal(sample_noise(8, 8, 5).data, sample_noise(8, 8, 5).data)
    assert not np.array_equal(sample_noise(8, 8, 5).data, sample_noise(8, 8, 6).data)


def test_single_young_face_has_no_stripes():
    (sample,) = generate_synthetic_dataset(1, [0], 64)
    assert sample.meta.wrinkle_count == 0
    assert count_stripes(sample.image, sample.layout) == 0


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(3, (0, 2), 64, seed=9)
    b = generate_synthetic_dataset(3, (0, 2), 64, seed=9)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert np.array_equal(x.layout.classes, y.layout.classes)


def test_ages_differ_only_inside_skin():
    young, old = generate_synthetic_dataset(1, [0, 3], 64, seed=4)
    assert young.meta.wrinkle_count == 0 and old.meta.wrinkle_count == 3
    assert np.array_equal(young.layout.classes, old.layout.classes)
    changed = np.abs(young.image - old.image).max(axis=0) > 0
    assert changed.any()
    assert np.all(young.layout.classes[changed] == 1)


@pytest.mark.parametrize("size", [32, 64, 128])
def test_renderer_oracle_agreement(size):
    samples = generate_synthetic_dataset(25, (0, 1, 2, 3), size, seed=size)
    assert len(samples) == 100
    assert all(count_stripes(s.image, s.layout) == s.meta.wrinkle_count for s in samples)


def test_uniform_gray_has_no_stripes():
    (sample,) = generate_synthetic_dataset(1, [2], 64)
    assert count_stripes(np.zeros_like(sample.image), sample.layout) == 0


def test_pair_single_pair_each_epoch():
    data = generate_synthetic_dataset(1, (0, 3), 32)
    for epoch in range(3):
        (batch,) = list(make_pair_batches(data, 1, seed=0, epoch=epoch))
        assert batch.young[0] is data[0] and batch.old[0] is data[1]


@given(st.integers(0, 1000), st.integers(0, 5), st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_pairs_strictly_ordered_and_cover(seed, epoch, batch_size):
    data = generate_synthetic_dataset(6, (0, 1, 2, 3), 32)
    seen = set()
    for batch in make_pair_batches(data, batch_size, seed, epoch):
        assert batch.batch_size <= batch_size
        for y, o in zip(batch.young, batch.old):
            assert y.condition.group < o.condition.group
            seen.update({id(y), id(o)})
    assert len(seen) == len(data)


def test_pairs_seeded():
    data = generate_synthetic_dataset(5, (0, 1, 2, 3), 32)

    def ids(seed, epoch):
        return [(id(y), id(o)) for b in make_pair_batches(data, 3, seed, epoch) for y, o in zip(b.young, b.old)]

    assert ids(1, 0) == ids(1, 0)
    assert ids(1, 0) != ids(1, 1)


def test_pairs_need_two_groups():
    with pytest.raises(InsufficientDataError):
        list(make_pair_batches(generate_synthetic_dataset(3, [0], 32), 2, 0))
    with pytest.raises(InsufficientDataError):
        list(make_pair_batches([], 2, 0))


def test_pair_batch_rejects_bad_order():
    data = generate_synthetic_dataset(1, (0, 2), 32)
    with pytest.raises(DataError):
        FacePairBatch([data[1]], [data[0]])


def test_batch_tensors():
    data = generate_synthetic_dataset(2, (0, 3), 32)
    t = FacePairBatch([data[0], data[2]], [data[1], data[3]]).tensors()
    assert t["x_y"].shape == (2, 3, 32, 32) and t["seg_o"].shape == (2, 12, 32, 32)
    assert t["g_y"].tolist() == [0, 0] and t["g_o"].tolist() == [3, 3]
    assert t["age_o"][0].item() == pytest.approx(64 / 77)


def test_folder_round_trip(tmp_path):
    data = generate_synthetic_dataset(2, (0, 1, 2, 3), 32, seed=1)
    manifest = write_synthetic_dataset(data, tmp_path, seed=1)
    records = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(records) == 8 and {"identity_id", "group", "seed", "image", "seg"} <= set(records[0])
    loaded = load_image_folder(tmp_path)
    assert len(loaded) == 8
    by_key = {(s.meta.identity_id, s.condition.group): s for s in loaded}
    for s in data:
        back = by_key[(s.meta.identity_id, s.meta.group)]
        assert np.array_equal(back.layout.classes, s.layout.classes)
        assert np.abs(back.image - s.image).max() <= 1 / 127.5 + 1e-6
        assert count_stripes(back.image, back.layout) == s.meta.wrinkle_count


def test_folder_missing_layout(tmp_path):
    data = generate_synthetic_dataset(1, (0,), 32)
    write_synthetic_dataset(data, tmp_path, 0)
    next(tmp_path.glob("0/*_seg.png")).unlink()
    with pytest.raises(DataError, match="missing layout"):
        load_image_folder(tmp_path)


def test_folder_exact_age(tmp_path):
    data = generate_synthetic_dataset(1, (1,), 32)
    manifest = write_synthetic_dataset(data, tmp_path, 0)
    rec = json.loads(manifest.read_text())
    rec["age"] = 33
    manifest.write_text(json.dumps(rec) + "\n")
    assert load_image_folder(tmp_path)[0].meta.age == 33.0


def test_split_by_identity_disjoint():
    data = generate_synthetic_dataset(10, (0, 1), 32)
    train, test = split_by_identity(data, 0.2, seed=0)
    assert len(test) == 4 and len(train) == 16
    assert not {s.meta.identity_id for s in train} & {s.meta.identity_id for s in test}
