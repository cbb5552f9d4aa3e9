import json

import numpy as np
import pytest

from fullpoint import tensor as T
from fullpoint.errors import ParameterError, SpecError
from fullpoint.network import (
    NetworkSpec,
    build_network,
    canonical_seed,
    load_checkpoint,
    merge_structures,
    read_checkpoint,
    save_checkpoint,
)
from fullpoint.rng import Rng


def small(task="classification", **kw):
    base = dict(encoder_channels=[8, 16], middle_channels=[2, 4], k_neighbors=[4, 4], num_classes=3)
    base.update(kw)
    return NetworkSpec.desk(task, **base)


class TestSpec:
    def test_defaults_validate(self):
        NetworkSpec().validate()

    def test_lists_every_problem(self):
        spec = NetworkSpec(layer_kind="conv", sigma=-1.0, num_classes=1)
        with pytest.raises(SpecError) as info:
            spec.validate()
        text = str(info.value)
        assert "layer_kind" in text and "sigma" in text and "num_classes" in text

    def test_indivisible_middle_channels(self):
        with pytest.raises(SpecError, match="middle_channels"):
            small(middle_channels=[3, 4]).validate()

    def test_first_ratio_must_be_one(self):
        with pytest.raises(SpecError, match="sampling_ratios"):
            small(sampling_ratios=[2, 4]).validate()

    def test_dict_round_trip(self):
        spec = small(layer_kind="fpconv", sigma=0.8)
        assert NetworkSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_unknown_field(self):
        with pytest.raises(SpecError):
            NetworkSpec.from_dict({"width": 3})


def test_canonical_seed_is_farthest_from_centroid():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-5, 0, 0], [1, 1, 0.0]])
    assert canonical_seed(pts) == 2


@pytest.mark.parametrize("kind", ["fptransformer", "fpconv", "mlp-baseline"])
@pytest.mark.parametrize("task,shape", [("classification", (3,)), ("segmentation", (50, 3)), ("normal-estimation", (50, 3))])
def test_output_shapes(kind, task, shape):
    net = build_network(small(task, layer_kind=kind), 0)
    assert net(Rng(1).normal(size=(50, 3))).shape == shape


def test_normals_are_unit():
    net = build_network(small("normal-estimation"), 0)
    out = net(Rng(2).normal(size=(40, 3))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["fptransformer", "fpconv"])
def test_classification_permutation_invariance(kind):
    net = build_network(small(layer_kind=kind), 3)
    pts = Rng(4).normal(size=(64, 3))
    perm = Rng(5).permutation(64)
    a, b = net(pts).data, net(pts[perm]).data
    assert np.abs(a - b).max() / np.abs(a).max() <= 1e-9


def test_segmentation_permutation_equivariance():
    net = build_network(small("segmentation"), 3)
    pts = Rng(6).normal(size=(48, 3))
    perm = Rng(7).permutation(48)
    np.testing.assert_allclose(net(pts[perm]).data, net(pts).data[perm], rtol=1e-9, atol=1e-12)


def test_merged_batch_equals_single_clouds():
    net = build_network(small(), 0)
    clouds = [Rng(s).normal(size=(n, 3)) for s, n in ((0, 40), (1, 52), (2, 40))]
    sts = [net.structure(c) for c in clouds]
    batched = net(np.concatenate(clouds), structure=merge_structures(sts)).data
    single = np.stack([net(c).data for c in clouds])
    np.testing.assert_allclose(batched, single, rtol=1e-13, atol=1e-14)


def test_similar_structure_keeps_grouping():
    net = build_network(small(layer_kind="fpconv"), 0)
    pts = Rng(8).normal(size=(40, 3))
    st = net.structure(pts)
    moved = net.similar_structure(st, 1.5, [0.1, -0.2, 0.0])
    fresh = net.structure(pts * 1.5 + np.array([0.1, -0.2, 0.0]))
    np.testing.assert_array_equal(moved.groupings[1].centers, fresh.groupings[1].centers)
    for a, b in zip(moved.local_corr, fresh.local_corr):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_wrong_feature_width():
    net = build_network(small(in_channels=4), 0)
    with pytest.raises(ParameterError):
        net(np.zeros((10, 3)))


def test_deterministic_construction():
    a = build_network(small(), 11).state_dict()
    b = build_network(small(), 11).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


class TestCheckpoint:
    @pytest.mark.parametrize("task", ["classification", "segmentation"])
    def test_round_trip_bit_identical(self, tmp_path, task):
        net = build_network(small(task, layer_kind="fpconv"), 9)
        pts = Rng(10).normal(size=(50, 3))
        path = tmp_path / "m.fpck"
        save_checkpoint(net, path, extra={"note": "x"})
        loaded = load_checkpoint(path)
        assert loaded.spec == net.spec
        assert net(pts).data.tobytes() == loaded(pts).data.tobytes()

    def test_header(self, tmp_path):
        net = build_network(small(), 0)
        path = tmp_path / "m.fpck"
        save_checkpoint(net, path, extra={"epochs": 3})
        header, tensors = read_checkpoint(path)
        assert header["extra"] == {"epochs": 3}
        assert set(tensors) == set(net.state_dict())

    def test_truncated_file(self, tmp_path):
        net = build_network(small(), 0)
        path = tmp_path / "m.fpck"
        save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ParameterError, match="bytes"):
            load_checkpoint(path)


def test_end_to_end_gradient():
    net = build_network(small(encoder_channels=[8, 8], middle_channels=[2, 4]), 1)
    pts = Rng(12).normal(size=(64, 3))
    st = net.structure(pts)
    probe = Rng(13).normal(size=3)
    assert T.grad_check(lambda _: T.sum(net(pts, structure=st) * probe), net.parameters(), eps=1e-6) <= 1e-4
