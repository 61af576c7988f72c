import warnings

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from xlstm_fer.data import (DataError, class_pattern, decode_image, load_images, load_manifest, preprocess, resize,
                            stack_samples, synth_dataset, write_image_tree)


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path


def test_tree_manifest(tmp_path):
    for cls in ("angry", "happy"):
        for j in range(2):
            write_png(tmp_path / cls / f"{j}.png", np.zeros((4, 4)))
    (tmp_path / "happy" / "notes.txt").write_text("ignored")
    m = load_manifest(tmp_path)
    assert m.classes == ["angry", "happy"]
    assert len(m) == 4
    assert [lab for _, lab in m.records] == [0, 0, 1, 1]


def test_csv_manifest(tmp_path):
    for j in range(3):
        write_png(tmp_path / "img" / f"{j}.png", np.zeros((4, 4)))
    (tmp_path / "m.csv").write_text("path,label\nimg/2.png,happy\nimg/0.png,Anger\nimg/1.png,happy\n")
    with pytest.warns(UserWarning, match="784"):
        m = load_manifest(tmp_path / "m.csv", label_map="ckplus")
    assert m.classes[0] == "anger"
    assert [lab for _, lab in m.records] == [0, 4, 4]


def test_csv_unknown_label_rejected(tmp_path):
    write_png(tmp_path / "a.png", np.zeros((4, 4)))
    (tmp_path / "m.csv").write_text("path,label\na.png,bored\n")
    with pytest.raises(DataError, match="a.png.*bored"):
        load_manifest(tmp_path / "m.csv", label_map="rafdb")


def test_tree_unknown_class_and_empty_rejected(tmp_path):
    write_png(tmp_path / "t" / "bored" / "0.png", np.zeros((4, 4)))
    with pytest.raises(DataError, match="bored"):
        load_manifest(tmp_path / "t", label_map="ckplus")
    (tmp_path / "e" / "happy").mkdir(parents=True)
    with pytest.raises(DataError, match="empty"):
        load_manifest(tmp_path / "e")
    with pytest.raises(DataError, match="no such"):
        load_manifest(tmp_path / "missing")


def test_rafdb_tree_warns_about_split_size(tmp_path):
    for cls in ("surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral"):
        write_png(tmp_path / cls / "0.png", np.zeros((4, 4)))
    with pytest.warns(UserWarning, match="12271"):
        m = load_manifest(tmp_path, label_map="rafdb")
    assert m.num_classes == 7


def test_unrelated_tree_does_not_warn(tmp_path):
    write_png(tmp_path / "a" / "0.png", np.zeros((4, 4)))
    write_png(tmp_path / "b" / "0.png", np.zeros((4, 4)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_manifest(tmp_path)


def test_solid_gray(tmp_path):
    path = write_png(tmp_path / "g.png", np.full((10, 12), 128))
    img = preprocess(decode_image(path), (6, 6))
    np.testing.assert_allclose(img, 128 / 255, rtol=1e-12)
    rgb = preprocess(np.full((8, 8, 3), 128, np.uint8), (8, 8))
    np.testing.assert_allclose(rgb, 128 / 255, rtol=1e-12)


def test_same_size_resize_is_identity(rng):
    img = rng.uniform(0, 1, (7, 5, 3))
    assert np.array_equal(resize(img, (7, 5)), img)


@pytest.mark.parametrize("src,dst", [((16, 16), (8, 8)), ((12, 20), (5, 7)), ((8, 8), (13, 11))])
def test_resample_matches_reference(src, dst):
    yy, xx = np.indices(src)
    board = ((yy // 2 + xx // 3) % 2).astype(np.float64)
    ours = resize(board[..., None], dst)[..., 0]
    ref = ndimage.zoom(board, (dst[0] / src[0], dst[1] / src[1]), order=1, grid_mode=True, mode="nearest")
    assert ref.shape == dst
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_corrupt_and_unsupported_images_rejected(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataError, match="bad.png"):
        decode_image(bad)
    with pytest.raises(DataError, match="unsupported"):
        decode_image(tmp_path / "x.bmp")


def test_normalization(rng):
    img = preprocess(np.full((4, 4), 255, np.uint8), (4, 4), normalization="half")
    np.testing.assert_allclose(img, 1.0)
    with pytest.raises(DataError, match="normalization"):
        preprocess(np.zeros((4, 4), np.uint8), (4, 4), normalization="zscore")


def test_synth_is_deterministic():
    a, b = synth_dataset(3, 4, seed=7), synth_dataset(3, 4, seed=7)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.label == y.label
    assert synth_dataset(3, 4, seed=8)[0].image.tobytes() != a[0].image.tobytes()


def test_zero_noise_gives_identical_class_members():
    images, labels = stack_samples(synth_dataset(4, 5, noise=0.0))
    for c in range(4):
        members = images[labels == c]
        assert all(np.array_equal(m, members[0]) for m in members)
        np.testing.assert_array_equal(members[0], class_pattern(c, 4, (32, 32)))


def test_synth_values_and_layout():
    images, labels = stack_samples(synth_dataset(3, 4, channels=3, size=(16, 24)))
    assert images.shape == (12, 16, 24, 3)
    assert images.min() >= 0 and images.max() <= 1
    assert labels.tolist() == [0, 1, 2] * 4


def test_class_prototypes_differ():
    protos = [class_pattern(c, 8, (32, 32)) for c in range(8)]
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.abs(protos[i] - protos[j]).mean() > 0.01


def test_synth_is_learnable_by_nearest_neighbours():
    train_x, train_y = stack_samples(synth_dataset(3, 32, seed=7))
    test_x, test_y = stack_samples(synth_dataset(3, 32, seed=1007))
    a, b = train_x.reshape(len(train_x), -1), test_x.reshape(len(test_x), -1)
    d = ((b[:, None, :] - a[None, :, :]) ** 2).sum(-1)
    nn = np.argsort(d, axis=1)[:, :3]
    pred = np.array([np.bincount(train_y[row], minlength=3).argmax() for row in nn])
    assert (pred == test_y).mean() > 0.9


def test_image_tree_round_trip(tmp_path):
    samples = synth_dataset(3, 2, size=(8, 8), noise=0.0)
    write_image_tree(tmp_path, samples, ["a", "b", "c"])
    m = load_manifest(tmp_path)
    images, labels = load_images(m, (8, 8), 1)
    assert images.shape == (6, 8, 8, 1)
    assert sorted(labels.tolist()) == [0, 0, 1, 1, 2, 2]
    # 8-bit quantization is the only loss
    ref = {s.label: s.image for s in samples}
    for img, lab in zip(images, labels):
        assert np.max(np.abs(img - ref[lab])) <= 0.5 / 255 + 1e-12
