import numpy as np
import pytest
from PIL import Image

from kdf import data
from kdf.data import EMOTIONS, DataFormatError


def one_per_class_csv(tmp_path, usage="Training"):
    pixels, labels, usages = data.fer_fixture(1, usages=(usage,))
    return data.write_fer_csv(tmp_path / "fer.csv", pixels, labels, usages)


def test_seven_row_fixture(tmp_path):
    ds = data.read_fer_csv(one_per_class_csv(tmp_path))
    assert len(ds) == 7
    assert ds.images.shape == (7, 3, 64, 64)
    assert ds.stats().counts == {"Training": [1] * 7}


def test_pixels_are_scaled_to_unit_range(tmp_path):
    ds = data.read_fer_csv(one_per_class_csv(tmp_path), channels=1, size=(48, 48))
    pixels, _, _ = data.fer_fixture(1)
    np.testing.assert_allclose(ds.images[:, 0], pixels / 255.0, atol=1e-6)


def test_splits_by_usage(tmp_path):
    pixels, labels, usages = data.fer_fixture(2, usages=data.FER_SPLITS)
    path = data.write_fer_csv(tmp_path / "f.csv", pixels, labels, usages)
    stats = data.read_fer_csv(path, size=(8, 8)).stats()
    assert {s: stats.total(s) for s in data.FER_SPLITS} == {s: 14 for s in data.FER_SPLITS}


def _corrupt(tmp_path, row):
    path = tmp_path / "bad.csv"
    good = " ".join(["0"] * 2304)
    path.write_text("emotion,pixels,Usage\n" + f"0,{good},Training\n" + row + "\n")
    return path


@pytest.mark.parametrize("row,message", [
    ("1," + " ".join(["0"] * 2303) + ",Training", "expected 2304 pixels, got 2303"),
    ("1," + " ".join(["0"] * 2303) + " x,Training", "non-integer pixel"),
    ("9," + " ".join(["0"] * 2304) + ",Training", "unknown emotion code 9"),
    ("1," + " ".join(["0"] * 2304) + ",Validation", "unknown Usage"),
    ("1," + " ".join(["300"] * 2304) + ",Training", "0..255"),
])
def test_row_addressed_errors(tmp_path, row, message):
    with pytest.raises(DataFormatError, match=message) as info:
        data.read_fer_csv(_corrupt(tmp_path, row))
    assert "bad.csv:3" in str(info.value)


def test_missing_columns(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("label,pixels\n")
    with pytest.raises(DataFormatError, match="missing columns"):
        data.read_fer_csv(path)


# -- folders ----------------------------------------------------------------------

def make_folder(root, per_class=2, skip=()):
    rng = np.random.default_rng(0)
    for sub in ("train", "test"):
        for emotion in EMOTIONS:
            d = root / sub / emotion.lower()
            d.mkdir(parents=True)
            if emotion in skip:
                continue
            for i in range(per_class):
                img = rng.integers(0, 256, (48, 48), dtype=np.uint8)
                Image.fromarray(img).save(d / f"{i}.png")
    return root


def test_folder_fixture(tmp_path):
    ds = data.read_image_folder(make_folder(tmp_path / "raf"), size=(16, 16))
    assert len(ds) == 28
    stats = ds.stats()
    assert stats.counts == {"Training": [2] * 7, "Test": [2] * 7}


def test_folder_empty_class_warns(tmp_path):
    ds = data.read_image_folder(make_folder(tmp_path / "raf", skip=("Fear",)), size=(8, 8))
    assert any("fear" in w for w in ds.stats().warnings)


def test_folder_layout_error(tmp_path):
    root = tmp_path / "raf"
    (root / "train").mkdir(parents=True)
    with pytest.raises(DataFormatError, match="missing 'test'.*expected layout"):
        data.read_image_folder(root)


def test_undecodable_image_names_file(tmp_path):
    root = make_folder(tmp_path / "raf", per_class=1)
    bad = root / "train" / "happy" / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataFormatError, match="broken.png"):
        data.read_image_folder(root)


def test_unknown_class_directory(tmp_path):
    root = make_folder(tmp_path / "raf", per_class=1)
    (root / "test" / "contempt").mkdir()
    with pytest.raises(DataFormatError, match="contempt"):
        data.read_image_folder(root)


# -- statistics and weights --------------------------------------------------------

def test_published_distribution_totals():
    stats = data.DatasetStats.from_table(data.FER2013_DISTRIBUTION)
    assert stats.total("Training") == 28709
    assert stats.total("PublicTest") == 3589
    assert stats.total("PrivateTest") == 3589
    assert stats.count("Training", "Happy") == 7215
    raf = data.DatasetStats.from_table(data.RAFDB_DISTRIBUTION)
    assert (raf.total("Training"), raf.total("Test")) == (12271, 3068)


def test_class_weights_published_counts():
    w = data.class_weights(data.DatasetStats.from_table(data.FER2013_DISTRIBUTION))
    assert w[EMOTIONS.index("Happy")] == pytest.approx(28709 / (7 * 7215))
    assert w[EMOTIONS.index("Happy")] == pytest.approx(0.5684, abs=1e-4)
    assert w[EMOTIONS.index("Disgust")] == pytest.approx(9.406, abs=1e-3)
    assert w.argmax() == EMOTIONS.index("Disgust")


def test_balanced_weights_are_one():
    stats = data.DatasetStats.from_labels(np.repeat(np.arange(7), 3), ["Training"] * 21)
    np.testing.assert_array_equal(data.class_weights(stats), np.ones(7))


def test_zero_count_class_is_an_error():
    stats = data.DatasetStats.from_labels(np.arange(6), ["Training"] * 6)
    with pytest.raises(ValueError, match="Neutral"):
        data.class_weights(stats)


def test_stats_outputs():
    stats = data.DatasetStats.from_table(data.FER2013_DISTRIBUTION)
    js = stats.to_json()
    assert list(js["classes"]) == list(data.TABLE_ORDER)
    assert js["totals"]["Training"] == 28709
    assert stats.to_csv().splitlines()[-1] == "Total,28709,3589,3589"


# -- preprocessing -----------------------------------------------------------------

def test_resize_identity_and_shape():
    img = np.random.default_rng(0).random((48, 48)).astype(np.float32)
    np.testing.assert_array_equal(data.resize_bilinear(img, (48, 48)), img)
    assert data.resize_bilinear(img, (64, 64)).shape == (64, 64)


def test_resize_keeps_constants():
    out = data.resize_bilinear(np.full((48, 48), 0.25, dtype=np.float32), (64, 64))
    np.testing.assert_allclose(out, 0.25, atol=1e-6)


def test_flip_twice_is_identity():
    x = np.random.default_rng(0).random((2, 3, 4, 5))
    np.testing.assert_array_equal(data.horizontal_flip(data.horizontal_flip(x)), x)


def test_random_flip_extremes():
    x = np.random.default_rng(0).random((4, 1, 3, 3))
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(data.random_flip(x, rng, 0.0), x)
    np.testing.assert_array_equal(data.random_flip(x, rng, 1.0), x[..., ::-1])


def test_train_val_split_partitions():
    pixels, labels, usages = data.fer_fixture(3)
    ds = data.Dataset(np.zeros((21, 1, 2, 2)), labels, np.array(usages, dtype=object))
    train, val = ds.train_val_split(0.2, seed=0)
    assert len(train) + len(val) == 21 and len(val) == 4


def test_blobs_are_reproducible_and_share_centres():
    a, ya = data.synthetic_blobs(3, seed=0)
    b, yb = data.synthetic_blobs(3, seed=0)
    np.testing.assert_array_equal(a, b)
    c, _ = data.synthetic_blobs(3, seed=1, spread=0.0)
    d, _ = data.synthetic_blobs(3, seed=2, spread=0.0)
    np.testing.assert_array_equal(c, d)
