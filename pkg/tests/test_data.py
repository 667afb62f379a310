import hashlib
import itertools
import struct

import numpy as np
import pytest
from scipy.stats import ks_2samp

from tasksample import data as D
from tasksample.errors import ArgumentError, FormatError
from tasksample.geom import PointCloud

SMALL = D.DatasetConfig(per_class=10, n=32, seed=3)


def test_sphere_points_on_unit_sphere():
    pc = D.generate_shape("sphere", 512, 0, noise=0.0)
    np.testing.assert_allclose(np.linalg.norm(pc.points, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("cls", D.CLASSES)
def test_shapes_normalized(cls):
    pc = D.generate_shape(cls, 200, 1)
    norms = np.linalg.norm(pc.points, axis=1)
    assert pc.points.shape == (200, 3)
    assert norms.max() == pytest.approx(1.0, abs=1e-12)


def test_class_distributions_differ():
    """Every pair of classes differs in radius or height profile (KS > 0.2)."""
    feats = {}
    for c in D.CLASSES:
        clouds = [D.generate_shape(c, 256, np.random.default_rng(i)).points for i in range(20)]
        feats[c] = (np.concatenate([np.linalg.norm(p, axis=1) for p in clouds]),
                    np.concatenate([np.abs(p[:, 2]) for p in clouds]))
    for a, b in itertools.combinations(D.CLASSES, 2):
        stat = max(ks_2samp(feats[a][j], feats[b][j]).statistic for j in range(2))
        assert stat > 0.2, (a, b, stat)


def test_unknown_class_and_small_n():
    with pytest.raises(ArgumentError):
        D.generate_shape("teapot", 64, 0)
    with pytest.raises(ArgumentError):
        D.generate_shape("cube", 4, 0)


def test_augment_rotation_and_jitter(rng):
    pts = D.generate_shape("cube", 4000, 0).points
    rot = D.augment(pts, 0, sigma=0.0, angle=0.7)
    np.testing.assert_allclose(rot[:, 2], pts[:, 2])
    np.testing.assert_allclose(np.linalg.norm(rot, axis=1), np.linalg.norm(pts, axis=1))
    jit = D.augment(pts, 1, sigma=0.02, clip=0.05, angle=0.0) - pts
    assert np.abs(jit).max() <= 0.05 + 1e-12
    # clipping at 2.5 sigma trims the std by about 1.4%
    assert jit.std() == pytest.approx(0.02 * 0.986, rel=0.03)


def test_augment_batch_matches_single_rotation(rng):
    x = rng.normal(size=(3, 10, 3))
    out = D.augment_batch(x, np.random.default_rng(5), sigma=0.0)
    theta = np.random.default_rng(5).uniform(0, 2 * np.pi, size=3)
    for i in range(3):
        np.testing.assert_allclose(out[i], x[i] @ D.rotation_z(theta[i]).T, atol=1e-14)


def test_dataset_splits_and_labels():
    ds = D.build_dataset(D.DatasetConfig(per_class=20, n=32))
    assert len(ds) == 160
    for c in range(8):
        m = ds.labels == c
        counts = np.bincount(ds.splits[m], minlength=3)
        assert tuple(counts) == (16, 2, 2)
    assert len(set(ds.ids)) == len(ds)


def test_default_split_sizes():
    cfg = D.DatasetConfig()
    per = cfg.per_class
    n_train = round(cfg.splits[0] * per)
    n_val = round(cfg.splits[1] * per)
    assert (n_train, n_val, per - n_train - n_val) == (512, 64, 64)


def test_dataset_is_pure_function_of_config():
    a = D.dataset_bytes(D.build_dataset(SMALL))
    b = D.dataset_bytes(D.build_dataset(SMALL))
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    other = D.dataset_bytes(D.build_dataset(D.DatasetConfig(per_class=10, n=32, seed=4)))
    assert other != a


def test_cloud_seed_independent_of_dataset_size():
    big = D.build_dataset(D.DatasetConfig(per_class=10, n=32, seed=3, classes=("sphere", "cube")))
    small = D.build_dataset(D.DatasetConfig(per_class=10, n=32, seed=3, classes=("sphere",)))
    np.testing.assert_array_equal(big.points[:10], small.points)


def test_round_trip(tmp_path):
    ds = D.build_dataset(SMALL)
    path = tmp_path / "d.tasd"
    digest = D.save_dataset(ds, path)
    back = D.load_dataset(path)
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
    assert back.points.tobytes() == ds.points.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.splits, ds.splits)
    assert back.ids == ds.ids and back.classes == ds.classes
    assert D.DatasetConfig.from_text(back.config_text) == SMALL


def test_format_errors():
    raw = D.dataset_bytes(D.build_dataset(SMALL))
    with pytest.raises(FormatError, match="truncated"):
        D.dataset_from_bytes(raw[:-7])
    with pytest.raises(FormatError, match="magic"):
        D.dataset_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        D.dataset_from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError, match="trailing"):
        D.dataset_from_bytes(raw + b"\0")


def test_config_text_and_parse():
    cfg = D.DatasetConfig(classes=("sphere", "torus"), per_class=7, n=40, seed=11, noise=0.0)
    assert D.DatasetConfig.from_text(cfg.to_text()) == cfg
    kv = D.parse_kv("# comment\nper_class = 5\n\nn=16  # trailing\n")
    assert kv == {"per_class": "5", "n": "16"}
    with pytest.raises(ArgumentError, match="line 1"):
        D.parse_kv("no equals here")
    with pytest.raises(ArgumentError):
        D.DatasetConfig(splits=(0.5, 0.5, 0.5))
    with pytest.raises(ArgumentError):
        D.DatasetConfig(classes=("blob",))


def test_reconstruction_config():
    cfg = D.reconstruction_config(per_class=20)
    assert cfg.classes == D.RECONSTRUCTION_CLASSES
    assert cfg.splits == (0.85, 0.05, 0.10)


def test_with_points_keeps_metadata():
    ds = D.build_dataset(SMALL)
    sub = ds.with_points(ds.points[:, :8])
    assert sub.n == 8 and sub.ids == ds.ids
    np.testing.assert_array_equal(sub.labels, ds.labels)


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(9, 3))
    D.save_xyz(pts, tmp_path / "a.xyz")
    np.testing.assert_array_equal(D.load_xyz(tmp_path / "a.xyz"), pts)
    (tmp_path / "b.xyz").write_text("1 2\n3 4\n")
    with pytest.raises(FormatError):
        D.load_xyz(tmp_path / "b.xyz")


def test_cloud_accessor():
    ds = D.build_dataset(SMALL)
    pc = ds.cloud(3)
    assert isinstance(pc, PointCloud) and pc.id == ds.ids[3] and pc.label == ds.labels[3]
