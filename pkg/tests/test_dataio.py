import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from meds.dataio import (
    FeatureDataset,
    SynthSpec,
    concat_datasets,
    contamination_counts,
    dataset_from_text,
    dataset_to_text,
    generate_synthetic_dataset,
    inject_contamination,
    pool_patch_features,
    read_feature_file,
    write_feature_file,
)
from meds.errors import (
    BadMagicError,
    ConfigurationError,
    ContractError,
    DimensionOverflowError,
    FeatureFileError,
    InsufficientPoolError,
    TruncatedFileError,
    UnknownClassError,
    VersionMismatchError,
)

from conftest import random_dataset


def test_synthetic_generation_is_bit_identical_per_seed():
    spec = SynthSpec(classes=1, images_per_class=50, height=8, width=8, channels=4, seed=7)
    a_clean, a_pool = generate_synthetic_dataset(spec)
    b_clean, b_pool = generate_synthetic_dataset(spec)
    assert a_clean.equals(b_clean) and a_pool.equals(b_pool)
    assert a_clean.features.tobytes() == b_clean.features.tobytes()
    c_clean, _ = generate_synthetic_dataset(SynthSpec(classes=1, images_per_class=50, height=8, width=8,
                                                      channels=4, seed=8))
    assert not a_clean.equals(c_clean)


def test_zero_shift_is_permitted():
    clean, pool = generate_synthetic_dataset(SynthSpec(anomaly_shift=0.0, images_per_class=10))
    assert len(clean) == len(pool) == 10
    assert pool.labels.all() and pool.masks.any(axis=(1, 2)).all()


@pytest.mark.parametrize("bad", [
    dict(classes=0), dict(images_per_class=0), dict(channels=0), dict(anomaly_shift=-1.0),
    dict(anomaly_region=(3, 2)), dict(height=4, width=4, anomaly_region=(2, 5)),
])
def test_invalid_specs_are_configuration_errors(bad):
    with pytest.raises(ConfigurationError):
        generate_synthetic_dataset(SynthSpec(**bad))


def test_shifted_anomalies_sit_farther_from_the_clean_pool():
    spec = SynthSpec(images_per_class=40, channels=4, cluster_spread=0.1, anomaly_shift=1.0, seed=2)
    clean, pool = generate_synthetic_dataset(spec)
    C = spec.channels
    bank = clean.features[:30].reshape(-1, C)
    held_out = clean.features[30:].reshape(-1, C)
    anomalous = pool.features[pool.masks.astype(bool)]
    # brute force over every pair
    d_norm = cdist(held_out, bank).min(axis=1).mean()
    d_anom = cdist(anomalous, bank).min(axis=1).mean()
    assert d_anom > d_norm


def test_masks_mark_exactly_one_rectangle(small_synth):
    clean, pool = small_synth
    assert not clean.masks.any()
    assert np.all(clean.labels == 0)
    for m in pool.masks.astype(bool):
        rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
        box = np.zeros_like(m)
        box[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
        assert m.any() and np.array_equal(m, box)
        assert 2 <= rows.size <= 4 and 2 <= cols.size <= 4


def test_features_are_exactly_representable_in_single_precision(small_synth):
    clean, _ = small_synth
    assert np.array_equal(clean.features, clean.features.astype(np.float32).astype(np.float64))


def test_ratio_zero_injection_returns_the_clean_set(small_synth):
    clean, pool = small_synth
    out = inject_contamination(clean, pool, 0.0, seed=1)
    assert np.array_equal(out.features, clean.features)
    assert np.array_equal(out.class_ids, clean.class_ids)
    assert not out.labels.any()


def test_sixty_clean_images_at_forty_percent_gain_forty_anomalies():
    clean, pool = generate_synthetic_dataset(SynthSpec(classes=2, images_per_class=100, height=4,
                                                       width=4, channels=4))
    train = clean.subset(np.concatenate([clean.indices_of(c)[:60] for c in clean.classes]))
    assert contamination_counts(train, 0.4) == {0: 40, 1: 40}
    out = inject_contamination(train, pool, 0.4, seed=0)
    for c in (0, 1):
        idx = out.indices_of(c)
        assert idx.size == 100 and out.labels[idx].sum() == 40


def test_injection_is_deterministic_in_seed(small_synth):
    clean, pool = small_synth
    a = inject_contamination(clean, pool, 0.1, seed=11)
    b = inject_contamination(clean, pool, 0.1, seed=11)
    assert a.equals(b)


def test_insufficient_pool_names_the_class(small_synth):
    clean, pool = small_synth
    short = pool.subset(np.concatenate([pool.indices_of(0), pool.indices_of(1)[:2]]))
    with pytest.raises(InsufficientPoolError) as err:
        inject_contamination(clean, short, 0.4, seed=0)
    assert err.value.class_id == 1 and "class 1" in str(err.value)


@given(ratio=st.floats(0.0, 0.6), sizes=st.lists(st.integers(1, 25), min_size=1, max_size=3),
       seed=st.integers(0, 2**16))
def test_injection_is_stratified_by_class(ratio, sizes, seed):
    rng = np.random.default_rng(seed)
    cls = np.repeat(np.arange(len(sizes)), sizes)
    clean = FeatureDataset(rng.standard_normal((cls.size, 2, 2, 2)), cls)
    pool_cls = np.repeat(np.arange(len(sizes)), 40)
    masks = np.zeros((pool_cls.size, 2, 2), np.uint8)
    masks[:, 0, 0] = 1
    pool = FeatureDataset(rng.standard_normal((pool_cls.size, 2, 2, 2)), pool_cls,
                          np.ones(pool_cls.size, np.uint8), masks)
    out = inject_contamination(clean, pool, ratio, seed)
    for c, n in enumerate(sizes):
        idx = out.indices_of(c)
        achieved = out.labels[idx].mean()
        assert abs(achieved - ratio) <= 1 / idx.size + 1e-12
        assert idx.size - out.labels[idx].sum() == n


def test_every_labelled_image_has_a_mask_and_vice_versa(small_synth):
    clean, pool = small_synth
    out = inject_contamination(clean, pool, 0.3, seed=4)
    has_mask = out.masks.any(axis=(1, 2))
    assert np.array_equal(has_mask, out.labels.astype(bool))


def test_labelled_normal_images_may_not_carry_masks():
    masks = np.zeros((1, 2, 2), np.uint8)
    masks[0, 0, 0] = 1
    with pytest.raises(ContractError):
        FeatureDataset(np.zeros((1, 2, 2, 1)), np.zeros(1, np.int64), np.zeros(1, np.uint8), masks)


def test_patch_pool_of_two_tiny_images_follows_lexicographic_order():
    feats = np.arange(2 * 2 * 2 * 3, dtype=np.float64).reshape(2, 2, 2, 3)
    data = FeatureDataset(feats, np.zeros(2, np.int64))
    vectors, refs = pool_patch_features(data, 0)
    assert vectors.shape == (8, 3)
    expected = [(i, h, w) for i in range(2) for h in range(2) for w in range(2)]
    assert [tuple(r) for r in refs] == expected
    for v, (i, h, w) in zip(vectors, refs):
        assert np.array_equal(v, feats[i, h, w])


def test_patch_pool_of_a_single_patch_is_that_vector():
    data = FeatureDataset(np.array([[[[1.5, -2.0]]]]), np.array([3]))
    vectors, refs = pool_patch_features(data, 3)
    assert np.array_equal(vectors, [[1.5, -2.0]]) and refs.tolist() == [[0, 0, 0]]


def test_patch_pool_regroups_into_the_original_maps(rng):
    data = random_dataset(rng, n=7, grid=(3, 2, 4), classes=2)
    vectors, refs = pool_patch_features(data, 1)
    rebuilt = {}
    for v, (i, h, w) in zip(vectors, refs):
        rebuilt.setdefault(int(i), np.zeros(data.grid))[h, w] = v
    assert sorted(rebuilt) == data.indices_of(1).tolist()
    for i, fmap in rebuilt.items():
        assert np.array_equal(fmap, data.features[i])


def test_patch_pool_rejects_an_unknown_class(rng):
    with pytest.raises(UnknownClassError):
        pool_patch_features(random_dataset(rng), 9)


def test_empty_dataset_is_a_header_only_file(tmp_path):
    empty = FeatureDataset(np.zeros((0, 2, 3, 4)), np.zeros(0, np.int64))
    path = tmp_path / "empty.meds"
    write_feature_file(empty, path)
    assert path.stat().st_size == struct.calcsize("<4sHHQIII")
    back = read_feature_file(path)
    assert len(back) == 0 and back.grid == (2, 3, 4)


def test_labelled_masked_dataset_round_trips_byte_exactly(tmp_path, small_synth):
    clean, pool = small_synth
    data = inject_contamination(clean, pool, 0.25, seed=9)
    first, second = tmp_path / "a.meds", tmp_path / "b.meds"
    write_feature_file(data, first)
    back = read_feature_file(first)
    assert back.equals(data)
    write_feature_file(back, second)
    assert first.read_bytes() == second.read_bytes()


@given(n=st.integers(0, 5), h=st.integers(1, 3), w=st.integers(1, 3), c=st.integers(1, 3),
       truth=st.booleans(), seed=st.integers(0, 2**16))
def test_feature_file_round_trip_property(tmp_path_factory, n, h, w, c, truth, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n=n, grid=(h, w, c), classes=2, truth=truth)
    path = tmp_path_factory.mktemp("rt") / "d.meds"
    write_feature_file(data, path)
    assert read_feature_file(path).equals(data)


def _valid_file(tmp_path, rng):
    path = tmp_path / "d.meds"
    write_feature_file(random_dataset(rng), path)
    return path, bytearray(path.read_bytes())


def test_corrupted_magic_is_a_parse_error(tmp_path, rng):
    path, raw = _valid_file(tmp_path, rng)
    raw[:4] = b"XXXX"
    path.write_bytes(raw)
    with pytest.raises(BadMagicError):
        read_feature_file(path)


def test_version_mismatch_is_reported(tmp_path, rng):
    path, raw = _valid_file(tmp_path, rng)
    raw[4:6] = struct.pack("<H", 2)
    path.write_bytes(raw)
    with pytest.raises(VersionMismatchError):
        read_feature_file(path)


def test_truncated_payload_is_reported(tmp_path, rng):
    path, raw = _valid_file(tmp_path, rng)
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        read_feature_file(path)
    path.write_bytes(raw[:10])
    with pytest.raises(TruncatedFileError):
        read_feature_file(path)


def test_dimension_overflow_is_reported(tmp_path):
    path = tmp_path / "big.meds"
    path.write_bytes(struct.pack("<4sHHQIII", b"MEDS", 1, 0, 2**40, 64, 64, 512))
    with pytest.raises(DimensionOverflowError):
        read_feature_file(path)


def test_trailing_bytes_are_rejected(tmp_path, rng):
    path, raw = _valid_file(tmp_path, rng)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FeatureFileError):
        read_feature_file(path)


def test_text_form_round_trips(rng):
    data = random_dataset(rng, n=4, classes=2)
    assert dataset_from_text(dataset_to_text(data)).equals(data)


def test_concatenation_keeps_order_and_truth(rng):
    a, b = random_dataset(rng, n=3), random_dataset(rng, n=2)
    joined = concat_datasets(a, b)
    assert np.array_equal(joined.features, np.concatenate([a.features, b.features]))
    assert np.array_equal(joined.labels, np.concatenate([a.labels, b.labels]))


def test_datasets_are_read_only(rng):
    data = random_dataset(rng)
    with pytest.raises(ValueError):
        data.features[0, 0, 0, 0] = 1.0


def test_style_shifts_whole_images_along_a_shared_axis():
    base = SynthSpec(images_per_class=12, height=4, width=4, channels=6, seed=5)
    plain_clean, plain_pool = generate_synthetic_dataset(base)
    clean, pool = generate_synthetic_dataset(replace(base, style_spread=1.5, style_dims=1))
    for a, b in ((plain_clean, clean), (plain_pool, pool)):
        diff = b.features - a.features
        per_image = diff[:, :1, :1]
        # float32 storage rounds each patch separately
        assert np.allclose(diff, per_image, atol=1e-5)
    offsets = np.concatenate([(clean.features - plain_clean.features)[:, 0, 0],
                              (pool.features - plain_pool.features)[:, 0, 0]])
    assert np.linalg.matrix_rank(offsets, tol=1e-4) == 1


def test_direction_jitter_only_moves_defect_patches():
    base = SynthSpec(images_per_class=12, height=4, width=4, channels=6, seed=5)
    _, a = generate_synthetic_dataset(base)
    _, b = generate_synthetic_dataset(replace(base, anomaly_direction_jitter=2.0))
    moved = np.any(a.features != b.features, axis=-1)
    assert np.array_equal(moved, a.masks.astype(bool))


@pytest.mark.parametrize("field", ["style_spread", "anomaly_direction_jitter"])
def test_negative_recipe_knobs_are_rejected(field):
    with pytest.raises(ConfigurationError):
        replace(SynthSpec(), **{field: -0.1}).validate()
    with pytest.raises(ConfigurationError):
        replace(SynthSpec(), style_dims=0).validate()
