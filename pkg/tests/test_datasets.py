import numpy as np
import pytest
from PIL import Image

from udll.datasets import (
    ImageDataset,
    downsample,
    load_binary,
    load_image_dir,
    load_labels,
    save_binary,
    save_labels,
    synth_blobs,
)
from udll.exceptions import DataFormatError


def write_pgm(path, arr, maxval=255):
    arr = np.asarray(arr)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    dtype = ">u2" if maxval > 255 else "u1"
    path.write_bytes(header + arr.astype(dtype).tobytes())


def test_binary_round_trip_bitwise(tmp_path):
    ds = synth_blobs(3, 4, 8, 8, 0.1, seed=1)
    a, b = tmp_path / "a.udlb", tmp_path / "b.udlb"
    save_binary(ds, a)
    loaded = load_binary(a)
    save_binary(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert loaded.images.shape == (12, 8, 8, 1)


def test_binary_empty(tmp_path):
    ds = ImageDataset(np.zeros((0, 4, 4, 1)), np.zeros(0, dtype=int), 2)
    p = tmp_path / "e.udlb"
    save_binary(ds, p)
    loaded = load_binary(p)
    assert loaded.n == 0 and loaded.provenance["empty"]


def test_binary_truncation_reports_sizes(tmp_path):
    ds = synth_blobs(2, 2, 4, 4, 0.0)
    p = tmp_path / "t.udlb"
    save_binary(ds, p)
    raw = bytearray(p.read_bytes())
    raw[8:12] = (5).to_bytes(4, "little")  # claim 5 samples instead of 4
    p.write_bytes(bytes(raw))
    expected = 28 + 4 * 5 * 16 + 4 * 5
    with pytest.raises(DataFormatError, match=f"expected {expected} bytes, got {len(raw)}"):
        load_binary(p)


def test_binary_bad_magic_and_label(tmp_path):
    ds = synth_blobs(2, 2, 4, 4, 0.0)
    p = tmp_path / "m.udlb"
    save_binary(ds, p)
    raw = bytearray(p.read_bytes())
    p.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(DataFormatError, match="magic"):
        load_binary(p)
    raw[-4:] = (9).to_bytes(4, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="label"):
        load_binary(p)


def test_image_dir_basic(tmp_path):
    write_pgm(tmp_path / "0_0.pgm", [[0, 255], [128, 64]])
    write_pgm(tmp_path / "1_0.pgm", [[10, 20], [30, 40]])
    ds = load_image_dir(tmp_path)
    assert ds.n == 2
    np.testing.assert_array_equal(ds.labels, [0, 1])
    assert ds.images[0, 0, 1, 0] == 1.0


def test_image_dir_16bit_max_maps_to_one(tmp_path):
    write_pgm(tmp_path / "a_0.pgm", [[0, 65535]], maxval=65535)
    write_pgm(tmp_path / "b_0.pgm", [[65535, 0]], maxval=65535)
    ds = load_image_dir(tmp_path)
    assert ds.images.max() == 1.0
    np.testing.assert_array_equal(ds.labels, [0, 1])


def test_image_dir_order_independent_of_listing(tmp_path, monkeypatch, rng):
    for c in range(3):
        for i in (0, 2, 10):
            write_pgm(tmp_path / f"{c}_{i}.pgm", rng.integers(0, 256, size=(3, 3)))
    reference = load_image_dir(tmp_path)
    from pathlib import Path

    original = Path.glob

    def shuffled(self, pattern):
        items = list(original(self, pattern))
        rng.shuffle(items)
        return iter(items)

    for _ in range(3):
        monkeypatch.setattr(Path, "glob", shuffled)
        again = load_image_dir(tmp_path)
        np.testing.assert_array_equal(again.images, reference.images)
        np.testing.assert_array_equal(again.labels, reference.labels)


def test_image_dir_png_natural_class_order(tmp_path):
    for c in (1, 2, 10):
        for i in (0, 5):
            Image.fromarray(np.full((4, 4), 10 * c, dtype=np.uint8)).save(tmp_path / f"obj{c}__{i}.png")
    (tmp_path / "notes.txt").write_text("ignored")
    ds = load_image_dir(tmp_path)
    np.testing.assert_array_equal(ds.labels, [0, 0, 1, 1, 2, 2])
    np.testing.assert_allclose(ds.images[::2, 0, 0, 0], [10 / 255, 20 / 255, 100 / 255])


def test_image_dir_bad_name(tmp_path):
    write_pgm(tmp_path / "nounderscore.pgm", [[1]])
    with pytest.raises(DataFormatError, match="file name"):
        load_image_dir(tmp_path)


def test_image_dir_rejects_color(tmp_path):
    Image.new("RGB", (2, 2)).save(tmp_path / "0_0.ppm")
    with pytest.raises(DataFormatError, match="grayscale"):
        load_image_dir(tmp_path, pattern="*.ppm")


def test_downsample_examples(rng):
    img = rng.uniform(size=(5, 7))
    np.testing.assert_array_equal(downsample(img, 5, 7), img)
    np.testing.assert_allclose(downsample(np.full((9, 6), 0.3), 4, 2), 0.3, atol=1e-15)
    checker = np.indices((4, 4)).sum(axis=0) % 2
    np.testing.assert_allclose(downsample(checker.astype(float), 2, 2), 0.5)
    with pytest.raises(ValueError):
        downsample(img, 0, 3)
    with pytest.raises(ValueError):
        downsample(img, 6, 7)


def test_synth_blobs_deterministic_and_clean():
    a, b = synth_blobs(3, 5, 16, 16, 0.05, seed=3), synth_blobs(3, 5, 16, 16, 0.05, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    clean = synth_blobs(3, 5, 16, 16, 0.0)
    for c in range(3):
        block = clean.images[clean.labels == c]
        assert all(np.array_equal(block[0], x) for x in block)


def test_synth_blobs_separation():
    clean = synth_blobs(3, 1, 16, 16, 0.0)
    t = clean.images.reshape(3, -1)
    dmin = min(np.linalg.norm(t[i] - t[j]) for i in range(3) for j in range(i + 1, 3))
    noise = 0.05 * np.sqrt(16 * 16)  # expected norm of the pixel noise
    assert dmin > 10 * noise
    ds = synth_blobs(3, 20, 16, 16, 0.05, seed=0)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_labels_file_round_trip(tmp_path):
    p = tmp_path / "labels.txt"
    save_labels([2, 0, 1], p)
    assert p.read_text() == "2\n0\n1\n"
    np.testing.assert_array_equal(load_labels(p), [2, 0, 1])
