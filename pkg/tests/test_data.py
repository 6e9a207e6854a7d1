import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aqfusion.data import (IMAGENET_MEAN, MANIFEST_HEADER, AqiClass, Sample, augment, by_split, classify_aqi,
                           classify_many, corpus_hash, destandardize_sensors, fit_scalers, generate_synthetic,
                           half_haze_probes, half_region, load_manifest, normalize_image, read_image, standardize,
                           standardize_sensors, stratified_split, synthetic_sample, to_arrays, write_manifest,
                           write_png)
from aqfusion.errors import DataError, ParameterError
from aqfusion.rng import Rng

BOUNDARIES = {0: "Good", 50: "Good", 50.5: "Moderate", 51: "Moderate", 100: "Moderate", 101: "UnhealthySensitive",
              150: "UnhealthySensitive", 151: "Unhealthy", 200: "Unhealthy", 201: "VeryUnhealthy",
              300: "VeryUnhealthy", 301: "Hazardous", 500: "Hazardous"}


# ---------------------------------------------------------------- classes
@pytest.mark.parametrize("aqi,name", sorted(BOUNDARIES.items()))
def test_boundary_suite(aqi, name):
    assert classify_aqi(aqi).name == name
    assert AqiClass(classify_many([aqi])[0]).name == name


def test_class_examples():
    assert classify_aqi(42) is AqiClass.Good
    assert classify_aqi(151) is AqiClass.Unhealthy
    assert classify_aqi(300.0001) is AqiClass.Hazardous
    assert classify_aqi(1e6) is AqiClass.Hazardous
    with pytest.raises(ParameterError):
        classify_aqi(-1)


@given(st.floats(0, 2000), st.floats(0, 2000))
def test_classify_total_and_monotone(a, b):
    lo, hi = sorted((a, b))
    assert classify_aqi(lo) <= classify_aqi(hi)
    assert classify_many([lo, hi]).tolist() == [int(classify_aqi(lo)), int(classify_aqi(hi))]


# --------------------------------------------------------------- manifest
def _write_rows(tmp_path, rows, header=MANIFEST_HEADER):
    img = np.random.default_rng(0).random((3, 8, 8))
    write_png(tmp_path / "a.png", img)
    lines = [",".join(header)] + [",".join(r) for r in rows]
    p = tmp_path / "manifest.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_empty_manifest(tmp_path):
    samples, report = load_manifest(_write_rows(tmp_path, []), 8)
    assert samples == [] and report.errors == []


def test_out_of_range_aqi_rejected(tmp_path):
    p = _write_rows(tmp_path, [["x1", "a.png", "612", "1", "1", "1", "1", "1", "1"],
                               ["x2", "a.png", "60", "1", "1", "1", "1", "1", "1"]])
    samples, report = load_manifest(p, 8)
    assert [s.id for s in samples] == ["x2"]
    assert report.skipped == 1 and report.errors[0][1] == "x1" and "612" in report.errors[0][2]


def test_three_row_fixture_in_order(tmp_path):
    rows = [["r1", "a.png", "10", "1", "2", "3", "4", "5", "6"],
            ["r2", "a.png", "250.5", "7", "", "9", "10", "11", "12"],
            ["r3", "a.png", "499", "0", "0", "0", "0", "0", "0"]]
    samples, report = load_manifest(_write_rows(tmp_path, rows), 8)
    assert [s.id for s in samples] == ["r1", "r2", "r3"]
    assert [s.aqi for s in samples] == [10.0, 250.5, 499.0]
    assert samples[0].sensors.tolist() == [1, 2, 3, 4, 5, 6]
    assert samples[1].sensor_mask.tolist() == [True, False, True, True, True, True]
    assert samples[0].image.shape == (3, 8, 8) and report.loaded == 3


def test_bad_rows_are_itemized(tmp_path):
    rows = [["b1", "missing.png", "10", "1", "1", "1", "1", "1", "1"],
            ["b2", "a.png", "10", "-3", "1", "1", "1", "1", "1"],
            ["b3", "a.png", "10", "1", "1"]]
    samples, report = load_manifest(_write_rows(tmp_path, rows), 8)
    assert samples == [] and [e[1] for e in report.errors] == ["b1", "b2", "b3"]


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope.csv")
    with pytest.raises(DataError):
        load_manifest(_write_rows(tmp_path, [], header=("id", "aqi")))


def test_write_then_load_round_trip(tmp_path):
    samples = generate_synthetic(12, 16, seed=3)
    samples[0].sensor_mask[2] = False
    loaded, report = load_manifest(write_manifest(samples, tmp_path), 16)
    assert report.skipped == 0
    for a, b in zip(samples, loaded):
        assert a.id == b.id and a.aqi == b.aqi
        assert np.array_equal(a.image, b.image)         # 8-bit images survive PNG exactly
        assert np.array_equal(a.sensor_mask, b.sensor_mask)
        assert np.allclose(a.sensors[a.sensor_mask], b.sensors[b.sensor_mask])


# -------------------------------------------------------------- splitting
def _uniform_corpus(n, classes=6):
    return [Sample(np.zeros((3, 8, 8)), np.ones(6), 25.0 + 50 * (i % classes) if i % classes < 5 else 400.0, f"s{i}")
            for i in range(n)]


def test_split_sizes_and_determinism():
    s = stratified_split(_uniform_corpus(100))
    assert [len(by_split(s, k)) for k in ("train", "val", "test")] == [70, 15, 15]
    assert [x.split for x in s] == [x.split for x in stratified_split(_uniform_corpus(100))]
    assert [x.split for x in s] != [x.split for x in stratified_split(_uniform_corpus(100), seed=1)]


def test_split_keeps_two_class_ratio():
    corpus = [Sample(np.zeros((3, 8, 8)), np.ones(6), 10.0 if i < 60 else 120.0, f"s{i}") for i in range(100)]
    s = stratified_split(corpus)
    for name, size in (("train", 70), ("val", 15), ("test", 15)):
        part = by_split(s, name)
        good = sum(x.aqi_class is AqiClass.Good for x in part)
        assert abs(good - 0.6 * size) <= 1


@given(st.lists(st.integers(0, 5), min_size=3, max_size=80), st.integers(0, 1000))
def test_split_partition_property(classes, seed):
    corpus = [Sample(np.zeros((3, 1, 1)), np.ones(6), [25, 75, 125, 175, 250, 400][c], f"s{i}")
              for i, c in enumerate(classes)]
    s = stratified_split(corpus, seed=seed)
    n = len(corpus)
    sizes = [len(by_split(s, k)) for k in ("train", "val", "test")]
    assert sum(sizes) == n and [x.id for x in s] == [x.id for x in corpus]
    ideal = [0.7 * n, 0.15 * n, 0.15 * n]
    assert all(abs(a - b) < 1 for a, b in zip(sizes, ideal))


# ---------------------------------------------------------------- scalers
def test_scaler_examples():
    train = [dataclasses.replace(s, split="train") for s in generate_synthetic(50, 16, seed=1)]
    stats = fit_scalers(train)
    z = standardize_sensors(stats.sensor_mean, stats)
    assert np.allclose(z, 0.0)
    img = np.zeros((3, 2, 2))
    img[0] = 0.485
    assert np.allclose(normalize_image(img)[0], 0.0)
    v = np.random.default_rng(0).normal(50, 20, 6)
    assert np.allclose(destandardize_sensors(standardize_sensors(v, stats), stats), v, atol=1e-9)
    arr = to_arrays(train, stats)
    assert np.all(np.abs(arr.sensors.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(arr.sensors.std(axis=0) - 1.0) < 1e-6)
    assert np.all(stats.sensor_std > 0)
    z = standardize(train[0], stats)
    assert np.allclose(z.sensors, arr.sensors[0])


def test_scalers_refuse_other_splits_and_clamp_zero_variance(caplog):
    s = [Sample(np.zeros((3, 8, 8)), [1, 2, 3, 4, 5, 6], 50.0, "a", split="val")]
    with pytest.raises(ParameterError):
        fit_scalers(s)
    stats = fit_scalers([dataclasses.replace(s[0], split="train")] * 3)
    assert np.all(stats.sensor_std == 1e-8)
    assert "zero variance" in caplog.text


def test_scalers_ignore_masked_readings():
    a = Sample(np.zeros((3, 8, 8)), [1, 2, 3, 4, 5, 6], 50.0, "a", sensor_mask=[True] * 6)
    b = Sample(np.zeros((3, 8, 8)), [1000, 4, 3, 4, 5, 6], 60.0, "b", sensor_mask=[False] + [True] * 5)
    stats = fit_scalers([a, b])
    assert stats.sensor_mean[0] == 1.0 and stats.sensor_mean[1] == 3.0


# ----------------------------------------------------------- augmentation
def test_augment_identity_and_involution():
    img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    same = augment(img, Rng(0), flip=False, brightness=1.0, contrast=1.0, angle=0.0)
    assert np.array_equal(same, img)
    once = augment(img, Rng(0), flip=True, brightness=1.0, contrast=1.0, angle=0.0)
    assert np.array_equal(augment(once, Rng(1), flip=True, brightness=1.0, contrast=1.0, angle=0.0), img)


def test_augment_range_sweep():
    rng = Rng(42).split("sweep")
    img = np.random.default_rng(1).random((3, 12, 12)).astype(np.float32)
    for i in range(1000):
        out = augment(img, rng.split(i))
        assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0


def test_augment_leaves_sample_untouched():
    s = synthetic_sample(0, 16, seed=2)
    s.split = "train"
    before = (s.image.copy(), s.sensors.copy(), s.aqi, s.sensor_mask.copy(), s.split)
    augment(s.image, Rng(3))
    assert np.array_equal(s.image, before[0]) and np.array_equal(s.sensors, before[1])
    assert s.aqi == before[2] and np.array_equal(s.sensor_mask, before[3]) and s.split == before[4]


# -------------------------------------------------------------- generator
def test_zero_aqi_has_no_haze():
    s = synthetic_sample(0, 16, seed=1, aqi=0.0)
    assert s.meta["haze_opacity"] == 0.0 and s.meta["pm25_true"] == 0.0


def test_class_counts_near_uniform():
    counts = np.bincount(classify_many([s.aqi for s in generate_synthetic(6000, 8, seed=42)]), minlength=6)
    assert np.all(np.abs(counts - 1000) <= 100)


def test_corpus_hash_deterministic():
    assert corpus_hash(generate_synthetic(20, 16, 5)) == corpus_hash(generate_synthetic(20, 16, 5))
    assert corpus_hash(generate_synthetic(20, 16, 5)) != corpus_hash(generate_synthetic(20, 16, 6))


def test_pm25_haze_correlation():
    samples = generate_synthetic(1000, 16, seed=42)
    pm = [s.sensors[0] for s in samples]
    haze = [s.meta["haze_opacity"] for s in samples]
    assert np.corrcoef(pm, haze)[0, 1] > 0.9


def test_sample_invariants():
    for s in generate_synthetic(50, 16, seed=9):
        assert 0 <= s.aqi <= 500 and (s.sensors >= 0).all()
        assert s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("half", ["top", "bottom", "left", "right"])
def test_half_haze_probes_leave_other_half_clean(half):
    probe = half_haze_probes(1, 16, half=half)[0]
    rng = Rng(7).split(f"probe_{half}_/0")
    from aqfusion.data import render_scene, _quantize
    clean = _quantize(render_scene(rng.split("scene"), 16))
    region = half_region(half, 16)
    assert np.array_equal(probe.image[:, ~region], clean[:, ~region])
    assert not np.array_equal(probe.image[:, region], clean[:, region])
    assert probe.aqi >= 150


def test_read_image_resizes(tmp_path):
    write_png(tmp_path / "x.png", np.random.default_rng(0).random((3, 20, 20)))
    assert read_image(tmp_path / "x.png", 8).shape == (3, 8, 8)
