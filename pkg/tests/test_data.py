import numpy as np
import pytest

from fullpoint.data import SHAPES, TORUS_MAJOR, TORUS_MINOR, SyntheticDatasetSpec, cloud_label, gen_dataset, sample_surface
from fullpoint.errors import SpecError
from fullpoint.rng import Rng


def spec(**kw):
    base = dict(points_per_cloud=64, train_count=8, test_count=4)
    base.update(kw)
    return SyntheticDatasetSpec(**base)


def test_sphere_normals_equal_positions():
    ds = gen_dataset(spec(kind="sphere-normals"))
    for cloud in ds.train + ds.test:
        assert np.abs(cloud.normals - cloud.positions).max() <= 1e-12


def test_same_seed_same_dataset():
    a, b = gen_dataset(spec(seed=3)), gen_dataset(spec(seed=3))
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(x.positions, y.positions) and np.array_equal(x.labels, y.labels)


def test_different_seed_differs():
    assert not np.array_equal(gen_dataset(spec(seed=1)).train[0].positions, gen_dataset(spec(seed=2)).train[0].positions)


def test_classification_balanced_and_normalized():
    ds = gen_dataset(spec())
    labels = [cloud_label(c) for c in ds.train]
    assert labels == [0, 1, 2, 3] * 2
    for cloud in ds.train:
        r = np.linalg.norm(cloud.positions - cloud.positions.mean(axis=0), axis=1)
        assert abs(r.max() - 1.0) < 1e-12


def test_scene_labels_only_placed_classes():
    ds = gen_dataset(spec(kind="scene-seg", points_per_cloud=200, rotate=True))
    for cloud in ds.train:
        assert set(np.unique(cloud.labels).tolist()) <= set(range(len(SHAPES)))


def test_scene_shapes_do_not_interleave():
    ds = gen_dataset(spec(kind="scene-seg", points_per_cloud=300, rotate=True, noise=0.0))
    for cloud in ds.train:
        labels = cloud.labels[np.argsort(cloud.positions[:, 0], kind="stable")]
        runs = 1 + np.count_nonzero(labels[1:] != labels[:-1])
        assert runs <= 5


@pytest.mark.parametrize("shape", SHAPES)
def test_surface_samples_lie_on_surface(shape):
    p = sample_surface(shape, 500, Rng(0))
    if shape == "sphere":
        np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)
    elif shape == "cube":
        np.testing.assert_allclose(np.abs(p).max(axis=1), 1.0, atol=1e-12)
    elif shape == "torus":
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - TORUS_MAJOR
        np.testing.assert_allclose(np.sqrt(ring**2 + p[:, 2] ** 2), TORUS_MINOR, atol=1e-12)
    else:
        assert np.all(p[:, 2] == 0.0)


def test_unknown_kind():
    with pytest.raises(SpecError):
        gen_dataset(spec(kind="mesh"))


def test_from_dict_rejects_unknown():
    with pytest.raises(SpecError):
        SyntheticDatasetSpec.from_dict({"points": 3})
