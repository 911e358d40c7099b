import struct

import numpy as np
import pytest

from nullhead.data import (
    blob_means,
    gen_blobs,
    load_csv,
    load_idx,
    stratified_batches,
    stratified_split,
)
from nullhead.errors import DataError


def write_idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload))


def test_csv_parse(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("label,f0,f1\n0,1.5,2\n1,3,4\n0,-1,0\n")
    ds = load_csv(f)
    np.testing.assert_allclose(ds.inputs, [[1.5, 3, -1], [2, 4, 0]])
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])


def test_csv_remaps_labels(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("label,f0\n9,1\n5,2\n9,3\n")
    ds = load_csv(f)
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    assert ds.label_map == (5, 9) and ds.num_classes == 2


@pytest.mark.parametrize(
    "body, match",
    [
        ("label,f0\n0,1\n1,x\n", ":3:"),
        ("label,f0,f1\n0,1,2\n1,2\n", ":3: expected 3 columns"),
        ("label,f0\n0,1\n0,2\n", "single class"),
        ("lbl,f0\n0,1\n", ":1:"),
    ],
)
def test_csv_errors(tmp_path, body, match):
    f = tmp_path / "d.csv"
    f.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(f)


def test_idx_round_trip(tmp_path):
    pixels = np.arange(32, dtype=np.uint8).reshape(2, 4, 4) * 8
    pixels[1, 3, 3] = 255
    write_idx(tmp_path / "img", 0x803, (2, 4, 4), pixels.ravel())
    write_idx(tmp_path / "lab", 0x801, (2,), [3, 7])
    flat = load_idx(tmp_path / "img", tmp_path / "lab")
    assert flat.inputs.shape == (16, 2)
    np.testing.assert_allclose(flat.inputs[:, 0], pixels[0].ravel() / 255)
    assert flat.inputs[15, 1] == 1.0
    np.testing.assert_array_equal(flat.labels, [0, 1])
    img = load_idx(tmp_path / "img", tmp_path / "lab", flatten=False)
    assert img.inputs.shape == (1, 4, 4, 2)
    np.testing.assert_array_equal(img.inputs[0, :, :, 1], pixels[1] / 255)


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "img", 0x803, (2, 4, 4), range(20))
    write_idx(tmp_path / "lab", 0x801, (2,), [0, 1])
    with pytest.raises(DataError, match="expected 48 bytes, got 36"):
        load_idx(tmp_path / "img", tmp_path / "lab")
    with pytest.raises(DataError, match="magic"):
        load_idx(tmp_path / "lab", tmp_path / "lab")


def test_blobs_zero_spread():
    ds = gen_blobs(2, 3, 4, 0.0, seed=1)
    for c in range(2):
        cols = ds.inputs[:, ds.labels == c]
        np.testing.assert_array_equal(cols, cols[:, :1].repeat(4, axis=1))
    assert np.linalg.norm(ds.inputs[:, 0] - ds.inputs[:, -1]) == pytest.approx(1.0)


def test_blobs_deterministic_and_separated():
    a, b = gen_blobs(5, 20, 100, 1.0, seed=7), gen_blobs(5, 20, 100, 1.0, seed=7)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    means = blob_means(5, 20, 1.0, seed=7)
    dists = np.linalg.norm(means[:, :, None] - means[:, None, :], axis=0)
    np.testing.assert_allclose(dists[~np.eye(5, dtype=bool)], 6.0)
    nearest = np.argmin(((a.inputs[:, None, :] - means[:, :, None]) ** 2).sum(axis=0), axis=0)
    assert np.mean(nearest == a.labels) > 0.99


def test_blobs_invalid():
    with pytest.raises(DataError):
        gen_blobs(1, 3, 4, 1.0, 0)


def test_stratified_split_and_batches():
    ds = gen_blobs(5, 4, 200, 1.0, seed=2)
    train, test = stratified_split(ds, 0.5, seed=3)
    assert train.size == test.size == 500
    np.testing.assert_array_equal(np.bincount(test.labels), [100] * 5)
    rng = np.random.default_rng(0)
    batches = stratified_batches(train.labels, 128, 5, rng)
    assert len(batches) == 3
    np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(500))
    for idx in batches:
        assert np.bincount(train.labels[idx], minlength=5).min() >= 2
    # a rare class limits the batch count
    labels = np.array([0] * 5 + [1] * 95)
    batches = stratified_batches(labels, 10, 2, rng)
    assert len(batches) == 2 and all(np.sum(labels[b] == 0) >= 2 for b in batches)
