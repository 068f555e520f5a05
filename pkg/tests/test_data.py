import numpy as np
import pytest

from grain_ad import data
from grain_ad.data import Dataset, Item, SubsetScheme
from grain_ad.errors import ConfigError, DataError
from grain_ad.image import write_mask_png, write_png


def _png(path, value=0.5, size=8):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_png(path, np.full((size, size, 3), value, np.float32))


@pytest.fixture
def split_tree(tmp_path):
    for k in range(10):
        _png(tmp_path / "train" / "good" / f"{k:02d}.png")
    for k in range(4):
        _png(tmp_path / "test" / "good" / f"{k:02d}.png")
    for k in range(6):
        _png(tmp_path / "test" / "defect" / f"{k:02d}.png", 0.9)
    return tmp_path


def test_split_tree_sizes(split_tree):
    train, test = data.load_dataset(split_tree, size=0)
    assert (len(train), len(test), test.n_positive) == (10, 10, 6)
    assert train.ids == sorted(train.ids)
    assert train.load(0).pixels.shape == (8, 8, 3)


def test_foreground_mask_next_to_image(tmp_path):
    _png(tmp_path / "good" / "a.png")
    mask = np.zeros((8, 8), bool)
    mask[2:5, 2:5] = True
    write_mask_png(tmp_path / "good" / "a_fg.png", mask)
    items = data.load_items(tmp_path)
    assert len(items) == 1 and items[0].mask_path is not None
    img = Dataset(items, None, size=0).load(0)
    np.testing.assert_array_equal(img.foreground, mask)


def test_manifest_layout(tmp_path):
    for name in ("a", "b", "c"):
        _png(tmp_path / "img" / f"{name}.png")
    (tmp_path / "manifest.tsv").write_text(
        "# comment\nimg/a.png\t0\tHY\nimg/b.png\t0\tHY\n\nimg/c.png\t1\tMY\n", encoding="utf-8"
    )
    items = data.load_items(tmp_path)
    assert [(it.id, it.label, it.category) for it in items] == [
        ("img/a.png", 0, "HY"), ("img/b.png", 0, "HY"), ("img/c.png", 1, "MY")
    ]
    train, test = data.load_dataset(tmp_path, size=0)
    assert len(train) == 1 and len(test) == 2 and test.n_positive == 1


@pytest.mark.parametrize(
    "manifest",
    ["img/a.png\t2\tHY\n", "img/a.png\t0\n", "img/missing.png\t0\tHY\n", "img/a.png\t0\tHY\tnomask.png\n"],
)
def test_malformed_manifest(tmp_path, manifest):
    _png(tmp_path / "img" / "a.png")
    (tmp_path / "manifest.tsv").write_text(manifest, encoding="utf-8")
    with pytest.raises(DataError):
        data.load_items(tmp_path)


def test_unreadable_image_is_reported(tmp_path):
    (tmp_path / "good").mkdir()
    (tmp_path / "good" / "x.png").write_bytes(b"garbage")
    with pytest.raises(DataError, match="x.png"):
        data.load_items(tmp_path)


def test_missing_root_and_empty_tree(tmp_path):
    with pytest.raises(DataError):
        data.load_items(tmp_path / "nope")
    with pytest.raises(DataError):
        data.load_items(tmp_path)
    with pytest.raises(DataError):
        data.load_items(tmp_path, layout="weird")


def test_train_split_refuses_anomalies():
    with pytest.raises(DataError):
        Dataset([Item("x", 1)], "train")


def _grain_items(counts):
    items = []
    for cat, n in counts.items():
        items += [Item(f"{cat}/{k:03d}", 0, cat) for k in range(n)]
    return items


GRAIN_COUNTS = {"HY": 40, "BN": 11, "AP": 7, "BP": 9, "HD": 3, "SD": 5, "FS": 6, "MY": 4, "IM": 2}


def test_set1_scheme():
    train, test = data.apply_subset_scheme(_grain_items(GRAIN_COUNTS), data.SET1, 0.7, seed=0)
    assert {it.category for it in train.items} == {"HY"}
    assert len(train) == 28
    assert test.n_positive == sum(GRAIN_COUNTS.values()) - 40
    assert all(it.label == 0 for it in test.items if it.category == "HY")


def test_set2_scheme_keeps_category_ratios():
    train, test = data.apply_subset_scheme(_grain_items(GRAIN_COUNTS), data.SET2, 0.7, seed=1)
    n_normal = 40 + 11 + 7 + 9 + 3
    assert len(train) == int(0.7 * n_normal)
    for cat in ("HY", "BN", "AP", "BP", "HD"):
        got = sum(it.category == cat for it in train.items)
        assert int(0.7 * GRAIN_COUNTS[cat]) <= got <= int(0.7 * GRAIN_COUNTS[cat]) + 1
    anomalous = {it.category for it in test.items if it.label == 1}
    assert anomalous == {"SD", "FS", "MY", "IM"}
    assert test.n_positive == 5 + 6 + 4 + 2


def test_split_is_seeded_and_disjoint():
    items = _grain_items(GRAIN_COUNTS)
    a = data.apply_subset_scheme(items, data.SET2, seed=4)
    b = data.apply_subset_scheme(items, data.SET2, seed=4)
    assert a[0].ids == b[0].ids
    assert not set(a[0].ids) & set(a[1].ids)
    assert len(a[0]) + len(a[1]) == len(items)


def test_scheme_errors():
    with pytest.raises(ConfigError):
        SubsetScheme("x", frozenset({"A"}), frozenset({"A"}))
    with pytest.raises(ConfigError):
        data.apply_subset_scheme(_grain_items({"ZZ": 3}), data.SET1)
    with pytest.raises(ConfigError):
        data.apply_subset_scheme(_grain_items({"HY": 3}), data.SET1, split_ratio=1.0)


def test_corpus_without_anomalies():
    params = data.CorpusParams(n_train=5, n_test_normal=3, n_test_anomalous=0, size=32)
    train, test = data.generate_synthetic_corpus(params, seed=0)
    assert len(train) == 5 and test.n_positive == 0


def test_corpus_is_deterministic_and_local():
    params = data.CorpusParams(n_train=2, n_test_normal=2, n_test_anomalous=6, size=64)
    _, a = data.generate_synthetic_corpus(params, seed=7, keep_clean=True)
    _, b = data.generate_synthetic_corpus(params, seed=7)
    for x, y in zip(a.items, b.items):
        np.testing.assert_array_equal(x.pixels, y.pixels)
    kinds = [it.category for it in a.items if it.label == 1]
    assert kinds == ["spot", "hole", "discoloration"] * 2
    for it in a.items:
        if it.label == 1:
            assert it.defect_mask.any()
            outside = ~it.defect_mask
            np.testing.assert_array_equal(it.pixels[outside], it.clean[outside])
            assert np.abs(it.pixels.astype(int) - it.clean.astype(int)).max() > 20


def test_corpus_param_validation():
    with pytest.raises(ConfigError):
        data.CorpusParams(n_train=0)
    with pytest.raises(ConfigError):
        data.CorpusParams(defect_types=("crack",))
    with pytest.raises(ConfigError):
        data.CorpusParams(defect_types=())


def test_write_dataset_roundtrip(tmp_path, tiny_corpus):
    train, test = tiny_corpus
    data.write_dataset(train, tmp_path)
    data.write_dataset(test, tmp_path)
    tr, te = data.load_dataset(tmp_path, size=64)
    assert len(tr) == len(train) and te.n_positive == test.n_positive
    np.testing.assert_array_equal(tr.load(0).pixels, train.load(0).pixels)
    np.testing.assert_array_equal(tr.load(0).foreground, train.load(0).foreground)


def test_record_reads(tiny_corpus):
    train, test = tiny_corpus
    with data.record_reads() as log:
        train.load(0)
        test.load(len(test) - 1)
    assert log[0] == ("train", train.ids[0], 0)
    assert log[1][0] == "test" and log[1][2] == 1
    train.load(1)
    assert len(log) == 2
