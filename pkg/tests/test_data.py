import numpy as np
import pytest
from hypothesis import given, strategies as st

from remarnet.data import (DataError, Dataset, SplitSpec, batches, generate_synthetic, load_dataset,
                           load_manifest, one_hot, reduce_per_class, save_dataset, select_prototypes,
                           split_indices, stratified_split)
from remarnet.formats import FormatError, encode_pnm, save_tns


def toy(per_class=10, k=2):
    labels = np.repeat(np.arange(k), per_class)
    images = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1) * np.ones((1, 1, 4, 4)) / len(labels)
    return Dataset(images, labels)


# ---------------------------------------------------------------- synthetic

def test_synthetic_shapes_and_range():
    ds = generate_synthetic(4, 50, 1, 32, 32, 0.25, seed=0)
    assert ds.images.shape == (200, 1, 32, 32)
    assert np.bincount(ds.labels).tolist() == [50] * 4
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synthetic_zero_noise_equals_template():
    ds = generate_synthetic(3, 4, 2, 8, 8, 0.0, seed=1)
    for k in range(3):
        members = ds.images[ds.labels == k]
        assert all(np.array_equal(m, members[0]) for m in members)
    assert not np.array_equal(ds.images[0], ds.images[4])


def test_template_is_box_blurred_uniform():
    ds = generate_synthetic(1, 2, 1, 8, 8, 0.0, seed=2)
    t = ds.images[0, 0]
    # a 4x4 mean of U(0,1) values is much smoother than the raw noise
    assert 0.2 < t.mean() < 0.8
    assert np.abs(np.diff(t, axis=1)).mean() < 0.2


def test_synthetic_deterministic():
    a = generate_synthetic(2, 3, 1, 8, 8, 0.3, seed=4)
    b = generate_synthetic(2, 3, 1, 8, 8, 0.3, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    c = generate_synthetic(2, 3, 1, 8, 8, 0.3, seed=5)
    assert a.images.tobytes() != c.images.tobytes()


@pytest.mark.parametrize("args", [(2, 1, 1, 8, 8), (2, 3, 1, 6, 8), (0, 3, 1, 8, 8)])
def test_synthetic_rejects_bad_dims(args):
    with pytest.raises(DataError):
        generate_synthetic(*args, 0.1, seed=0)


# ---------------------------------------------------------------- split

def test_split_counts():
    train, test = stratified_split(toy(), SplitSpec(0.7, seed=0))
    assert np.bincount(train.labels).tolist() == [7, 7]
    assert np.bincount(test.labels).tolist() == [3, 3]


def test_split_regression_values():
    tr, te = split_indices(toy(), SplitSpec(0.7, seed=1))
    assert tr.tolist() == [0, 1, 2, 5, 6, 8, 9, 10, 12, 13, 14, 16, 18, 19]
    assert te.tolist() == [3, 4, 7, 11, 15, 17]
    tr2, _ = split_indices(toy(), SplitSpec(0.7, seed=2))
    assert tr2.tolist() == [0, 1, 2, 3, 5, 6, 8, 10, 11, 12, 14, 15, 18, 19]


@given(st.integers(0, 2 ** 32), st.integers(2, 15), st.integers(1, 4), st.floats(0.1, 0.9))
def test_split_partition_property(seed, per_class, k, frac):
    ds = toy(per_class, k)
    n_train = int(np.floor(frac * per_class + 0.5))
    if not 1 <= n_train <= per_class - 1:
        with pytest.raises(DataError):
            split_indices(ds, SplitSpec(frac, seed))
        return
    tr, te = split_indices(ds, SplitSpec(frac, seed))
    assert not set(tr) & set(te)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(len(ds)))
    for c in range(k):
        assert np.count_nonzero(ds.labels[tr] == c) == n_train


def test_split_rejects_bad_fraction():
    with pytest.raises(DataError):
        split_indices(toy(), SplitSpec(1.0, 0))


def test_reduce_per_class():
    ds = reduce_per_class(toy(5), 2)
    assert np.bincount(ds.labels).tolist() == [3, 3]
    with pytest.raises(DataError):
        reduce_per_class(toy(5), 5)


# ---------------------------------------------------------------- prototypes

def test_prototypes():
    ds = toy(10, 8)
    protos = select_prototypes(ds, seed=3)
    assert len(protos.indices) == 8
    assert ds.labels[protos.indices].tolist() == list(range(8))
    assert np.array_equal(select_prototypes(ds, 3).indices, protos.indices)
    assert select_prototypes(toy(), 3).indices.tolist() == [1, 12]


def test_single_sample_class_prototype():
    ds = Dataset(np.zeros((3, 1, 4, 4)), [0, 0, 1])
    assert select_prototypes(ds, 11).indices[1] == 2


def test_prototype_empty_class():
    ds = Dataset(np.zeros((2, 1, 4, 4)), [0, 0], ["a", "b"])
    with pytest.raises(DataError):
        select_prototypes(ds, 0)


# ---------------------------------------------------------------- batches

def test_batch_sizes_and_permutation():
    ds = toy(50)
    out = list(batches(ds, 32, shuffle_seed=0))
    assert [len(b[2]) for b in out] == [32, 32, 32, 4]
    seen = np.concatenate([b[0][:, 0, 0, 0] for b in out])
    assert sorted(seen.tolist()) == sorted(ds.images[:, 0, 0, 0].tolist())
    for imgs, targets, labels in out:
        assert np.array_equal(targets.argmax(1), labels)


def test_one_hot():
    assert one_hot(np.array([2]), 4).tolist() == [[0, 0, 1, 0]]


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.full((2, 1, 2, 2), np.nan), [0, 0]).validate()
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 2], ["a", "b"]).validate()


# ---------------------------------------------------------------- persistence

def test_save_load_dataset(tmp_path):
    ds = generate_synthetic(2, 3, 1, 8, 8, 0.2, seed=0)
    save_dataset(tmp_path / "d.tns", ds)
    back = load_dataset(str(tmp_path / "d.tns"))
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_manifest(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["path,label"]
    for i, label in enumerate(["cat", "dog", "cat"]):
        img = rng.integers(0, 256, (1, 4, 4)) / 255.0
        (tmp_path / f"{i}.pgm").write_bytes(encode_pnm(img, "P5"))
        rows.append(f"{i}.pgm,{label}")
    save_tns(tmp_path / "3.tns", {"img": np.full((1, 4, 4), 0.5, dtype=np.float32)})
    rows.append("3.tns,dog")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    ds = load_manifest(str(tmp_path / "m.csv"))
    assert ds.images.shape == (4, 1, 4, 4)
    assert ds.class_names == ["cat", "dog"] and ds.labels.tolist() == [0, 1, 0, 1]
    (tmp_path / "bad.csv").write_text("file,class\n0.pgm,cat\n")
    with pytest.raises(FormatError):
        load_manifest(str(tmp_path / "bad.csv"))
