import numpy as np
import pytest

from fullpoint.cloud import AugmentSpec, PointCloud
from fullpoint.data import SyntheticDatasetSpec, gen_dataset
from fullpoint.errors import ParameterError, SpecError
from fullpoint.network import NetworkSpec, build_network
from fullpoint.train import (
    TrainConfig,
    TrainingDiverged,
    angle_error_degrees,
    class_metrics,
    clip_gradients,
    confusion_matrix,
    evaluate,
    miou_from_counts,
    robustness,
    train,
)
from fullpoint.tensor import Tensor


def tiny_net(task="classification", **kw):
    base = dict(encoder_channels=[8, 16], middle_channels=[2, 4], k_neighbors=[4, 4])
    base.update(kw)
    return build_network(NetworkSpec.desk(task, **base), 0)


def tiny_data(kind="shapes-cls", **kw):
    base = dict(kind=kind, points_per_cloud=48, train_count=8, test_count=4)
    base.update(kw)
    return gen_dataset(SyntheticDatasetSpec(**base))


class TestMetrics:
    def test_miou_hand_example(self):
        assert miou_from_counts([3, 2], [1, 0], [1, 2]) == pytest.approx(0.55, abs=1e-15)

    def test_empty_class_excluded(self):
        assert miou_from_counts([1, 0], [0, 0], [0, 0]) == 1.0

    def test_confusion_and_class_metrics(self):
        conf = confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2)
        assert conf.tolist() == [[1, 1], [1, 2]]
        oa, macc, miou = class_metrics(conf)
        assert oa == pytest.approx(3 / 5)
        assert macc == pytest.approx((1 / 2 + 2 / 3) / 2)
        assert miou == pytest.approx((1 / 3 + 2 / 4) / 2)

    def test_angle_error_is_unoriented(self):
        err = angle_error_degrees([[0, 0, 1], [0, 0, -1], [1, 0, 0]], [[0, 0, 1], [0, 0, 1], [0, 0, 1]])
        np.testing.assert_allclose(err, [0.0, 0.0, 90.0], atol=1e-12)


class TestConfig:
    def test_cosine_schedule_endpoints(self):
        cfg = TrainConfig(epochs=10, lr=0.1)
        assert cfg.lr_at(0) == 0.1 and cfg.lr_at(5) == pytest.approx(0.05)

    def test_step_schedule(self):
        cfg = TrainConfig(lr=0.1, schedule="step", step_size=3, step_gamma=0.5)
        assert [cfg.lr_at(e) for e in (0, 2, 3, 6)] == [0.1, 0.1, 0.05, 0.025]

    def test_validation(self):
        with pytest.raises(SpecError, match="lr"):
            TrainConfig(lr=0.0).validate()

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, scale_range=(0.9, 1.1))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_clip_gradients():
    a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_gradients([a, b], 1.0) == 5.0
    np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8])


def test_zero_epochs_leaves_parameters():
    net = tiny_net()
    before = {k: v.copy() for k, v in net.state_dict().items()}
    _, report = train(net, tiny_data(), TrainConfig(epochs=0))
    assert all(np.array_equal(before[k], v) for k, v in net.state_dict().items())
    assert report.epoch_loss == [] and report.oa is not None


def test_one_step_decreases_loss():
    data = tiny_data(train_count=4)
    clouds = data.train
    cfg = TrainConfig(epochs=1, batch_size=4, lr=0.01, scale_range=(1.0, 1.0), translate_range=0.0, clip_norm=None)
    net = tiny_net()
    _, first = train(net, clouds, cfg)
    _, second = train(net, clouds, TrainConfig(**{**cfg.to_dict(), "lr": 1e-12}))
    assert second.epoch_loss[0] < first.epoch_loss[0]


def test_same_seed_bit_identical():
    runs = []
    for _ in range(2):
        net, _ = train(tiny_net(), tiny_data(), TrainConfig(epochs=2, batch_size=4))
        runs.append({k: v.tobytes() for k, v in net.state_dict().items()})
    assert runs[0] == runs[1]


@pytest.mark.parametrize("task,kind", [("segmentation", "scene-seg"), ("normal-estimation", "sphere-normals")])
def test_other_tasks_train(task, kind):
    _, report = train(tiny_net(task), tiny_data(kind, points_per_cloud=64), TrainConfig(epochs=1, batch_size=4))
    assert len(report.epoch_loss) == 1
    if task == "segmentation":
        assert 0 <= report.miou <= 1
    else:
        assert 0 <= report.normal_angle_error <= 90


def test_task_mismatch():
    with pytest.raises(ParameterError):
        train(tiny_net("normal-estimation"), tiny_data(), TrainConfig(epochs=1))


def test_divergence_reports_epoch_and_step():
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_net(), tiny_data(), TrainConfig(epochs=3, lr=1e300, clip_norm=None))
    err = info.value
    assert f"epoch {err.epoch}, step {err.step}" in str(err)


class TestEvaluate:
    def setup_method(self):
        self.net = tiny_net()
        self.clouds = tiny_data().test

    def test_identity_perturbation(self):
        plain = evaluate(self.net, self.clouds)
        same = evaluate(self.net, self.clouds, AugmentSpec())
        assert (plain.oa, plain.macc, plain.miou) == (same.oa, same.macc, same.miou)

    def test_permutation_invariant(self):
        plain = evaluate(self.net, self.clouds)
        perm = evaluate(self.net, self.clouds, AugmentSpec(permute=True), seed=5)
        assert abs(plain.oa - perm.oa) <= 1e-9

    def test_density_subsamples(self):
        report = evaluate(self.net, self.clouds, density=16)
        assert 0 <= report.oa <= 1

    def test_robustness_report(self):
        rep = robustness(self.net, self.clouds, densities=(48, 32, 16))
        names = [n for n, _ in rep.rows]
        assert names[:2] == ["none", "permutation"] and len(rep.density) == 3
        for denser, sparser in rep.monotonicity_violations:
            assert denser > sparser


def test_unlabelled_clouds_rejected():
    with pytest.raises(ParameterError):
        evaluate(tiny_net(), [PointCloud(np.zeros((8, 3)))])
