"""Training loop, metrics and the robustness protocol."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .cloud import AugmentSpec, PointCloud, augment
from .data import Dataset, cloud_label
from .errors import NumericError, ParameterError, SpecError
from .network import Network, Structure, merge_structures
from .nn import SGD
from .rng import Rng

DENSITIES = (1024, 512, 256, 128, 64)


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # or "step"
    step_size: int = 10
    step_gamma: float = 0.5
    # per-sample random similarity augmentation: uniform scale, uniform shift per axis
    scale_range: tuple = (0.67, 1.5)
    translate_range: float = 0.2
    clip_norm: float | None = 1.0  # global gradient-norm clip; None disables
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lr > 0:
            problems.append("lr: must be > 0")
        if self.epochs < 0:
            problems.append("epochs: must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.schedule not in ("cosine", "step"):
            problems.append(f"schedule: unknown {self.schedule!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            problems.append("scale_range: need 0 < low <= high")
        if self.clip_norm is not None and not self.clip_norm > 0:
            problems.append("clip_norm: must be > 0 or null")
        if self.translate_range < 0:
            problems.append("translate_range: must be >= 0")
        if problems:
            raise SpecError(problems)
        return self

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / max(self.epochs, 1)))
        return self.lr * self.step_gamma ** (epoch // self.step_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SpecError([f"{name}: unknown field" for name in unknown])
        data = dict(data)
        if "scale_range" in data:
            data["scale_range"] = tuple(data["scale_range"])
        return cls(**data)


@dataclass
class MetricsReport:
    task: str
    epoch_loss: list = field(default_factory=list)
    epoch_train_accuracy: list = field(default_factory=list)
    oa: float | None = None
    macc: float | None = None
    miou: float | None = None
    normal_angle_error: float | None = None
    wall_clock: float = 0.0
    parameter_count: int = 0
    schedule: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- metrics


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    return np.bincount(target * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou_from_counts(tp, fp, fn) -> float:
    """Mean of TP / (TP + FP + FN) over classes whose union is non-empty."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    union = tp + fp + fn
    present = union > 0
    if not present.any():
        return float("nan")
    return float(np.mean(tp[present] / union[present]))


def class_metrics(conf: np.ndarray) -> tuple[float, float, float]:
    """(OA, mAcc, mIoU) from a confusion matrix indexed [target, pred]."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    support = conf.sum(axis=1)
    oa = float(tp.sum() / conf.sum()) if conf.sum() else float("nan")
    seen = support > 0
    macc = float(np.mean(tp[seen] / support[seen])) if seen.any() else float("nan")
    miou = miou_from_counts(tp, conf.sum(axis=0) - tp, support - tp)
    return oa, macc, miou


def angle_error_degrees(pred, target) -> np.ndarray:
    """Unoriented angle between unit vectors, in [0, 90]."""
    cos = np.abs(np.sum(np.asarray(pred) * np.asarray(target), axis=-1))
    return np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))


# ---------------------------------------------------------------- batches


def _targets(task: str, clouds: list[PointCloud]):
    if task == "classification":
        return np.array([cloud_label(c) for c in clouds])
    if task == "segmentation":
        return np.concatenate([c.labels for c in clouds])
    return np.concatenate([c.normals for c in clouds])


def _loss(task: str, out: T.Tensor, target) -> T.Tensor:
    if task == "normal-estimation":
        # sign-agnostic: 1 - |cos| between the predicted and true normals
        cos = T.sum(out * target, axis=-1)
        return T.mean(1.0 - T.abs(cos))
    return T.cross_entropy(out, target)


def _forward_batch(network: Network, clouds: list[PointCloud], structures: list[Structure]) -> T.Tensor:
    positions = np.concatenate([st.positions[0] for st in structures])
    out = network(positions, structure=merge_structures(structures))
    if network.spec.task == "classification" and out.ndim == 1:
        out = T.reshape(out, (1, -1))
    return out


def _accuracy(task: str, out: np.ndarray, target) -> float:
    if task == "normal-estimation":
        return float(np.mean(angle_error_degrees(out, target)))
    return float(np.mean(np.argmax(out, axis=-1) == target))


def train(network: Network, dataset, config: TrainConfig | None = None):
    """Minibatch SGD with momentum; returns ``(network, MetricsReport)``.

    ``dataset`` is a :class:`Dataset` (trained on ``train``, reported on
    ``test``) or a plain list of training clouds. Deterministic given
    ``config.seed``.
    """
    config = (config or TrainConfig()).validate()
    task = network.spec.task
    train_clouds = dataset.train if isinstance(dataset, Dataset) else list(dataset)
    test_clouds = dataset.test if isinstance(dataset, Dataset) else []
    if not train_clouds:
        raise ParameterError("no training clouds")
    _check_task(task, train_clouds[0])
    start = time.perf_counter()
    structures = [network.structure(c.positions) for c in train_clouds]
    targets = [_targets(task, [c]) for c in train_clouds]
    optimizer = SGD(network.parameters(), config.lr, config.momentum, config.weight_decay)
    rng = Rng(config.seed)
    report = MetricsReport(task, parameter_count=network.parameter_count(), schedule=config.schedule)
    lo, hi = config.scale_range
    for epoch in range(config.epochs):
        optimizer.lr = config.lr_at(epoch)
        order = rng.permutation(len(train_clouds))
        total, seen, score = 0.0, 0, 0.0
        for step, first in enumerate(range(0, len(order), config.batch_size)):
            batch = order[first : first + config.batch_size]
            scales = rng.uniform(lo, hi, size=len(batch))
            shifts = rng.uniform(-config.translate_range, config.translate_range, size=(len(batch), 3))
            sts = [network.similar_structure(structures[i], s, t) for i, s, t in zip(batch, scales, shifts)]
            target = np.concatenate([targets[i] for i in batch])
            optimizer.zero_grad()
            try:
                with T.Tape() as tape:
                    out = _forward_batch(network, [train_clouds[i] for i in batch], sts)
                    loss = _loss(task, out, target)
                T.backward(loss, tape)
            except NumericError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            grads_ok = all(p.grad is None or np.isfinite(p.grad).all() for p in optimizer.params)
            if not np.isfinite(loss.item()) or not grads_ok:
                raise TrainingDiverged(epoch, step, "non-finite loss or gradient")
            if config.clip_norm is not None:
                clip_gradients(optimizer.params, config.clip_norm)
            optimizer.step()
            total += loss.item() * len(batch)
            score += _accuracy(task, out.data, target) * len(batch)
            seen += len(batch)
        report.epoch_loss.append(total / seen)
        report.epoch_train_accuracy.append(score / seen)
    if test_clouds:
        _fill(report, evaluate(network, test_clouds))
    report.wall_clock = time.perf_counter() - start
    return network, report


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


def _check_task(task: str, cloud: PointCloud) -> None:
    if task in ("classification", "segmentation") and cloud.labels is None:
        raise ParameterError(f"{task} needs labelled clouds")
    if task == "normal-estimation" and cloud.normals is None:
        raise ParameterError("normal estimation needs clouds with normals")


def _fill(report: MetricsReport, other: MetricsReport) -> None:
    report.oa, report.macc, report.miou = other.oa, other.macc, other.miou
    report.normal_angle_error = other.normal_angle_error


# ---------------------------------------------------------------- evaluation


def predict(network: Network, cloud: PointCloud) -> np.ndarray:
    with T.no_grad():
        return network(cloud.positions).data


def evaluate(
    network: Network,
    clouds: list[PointCloud],
    perturbation: AugmentSpec | None = None,
    density: int | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Metrics on ``clouds`` after an optional test-time perturbation.

    ``density`` keeps a uniformly random subset of that many points per cloud
    (clouds already at or below it are left whole).
    """
    task = network.spec.task
    rng = Rng(seed)
    start = time.perf_counter()
    preds, targets = [], []
    for cloud in clouds:
        _check_task(task, cloud)
        c = cloud
        if density is not None:
            if density < 1:
                raise ParameterError(f"density must be >= 1, got {density}")
            if density < len(c):
                c = c.subset(np.sort(rng.permutation(len(c))[:density]))
        if perturbation is not None:
            c = augment(c, perturbation, rng)
        preds.append(predict(network, c))
        targets.append(_targets(task, [c]))
    report = MetricsReport(task, parameter_count=network.parameter_count())
    if task == "normal-estimation":
        report.normal_angle_error = float(np.mean(angle_error_degrees(np.concatenate(preds), np.concatenate(targets))))
    else:
        pred = np.array([np.argmax(p) for p in preds]) if task == "classification" else np.argmax(
            np.concatenate(preds), axis=-1
        )
        conf = confusion_matrix(pred, np.concatenate(targets), network.spec.num_classes)
        report.oa, report.macc, report.miou = class_metrics(conf)
    report.wall_clock = time.perf_counter() - start
    return report


def _headline(report: MetricsReport) -> float:
    return report.normal_angle_error if report.task == "normal-estimation" else report.oa


@dataclass
class RobustnessReport:
    metric: str
    rows: list  # (perturbation name, value)
    density: list  # (points, value)
    monotonicity_violations: list  # (denser, sparser) pairs where the sparser cloud scored better

    def value(self, name: str) -> float:
        return dict(self.rows)[name]

    def to_dict(self) -> dict:
        return asdict(self)


def robustness(network: Network, clouds: list[PointCloud], seed: int = 0, densities=DENSITIES) -> RobustnessReport:
    """Test-time perturbations: permutation, +-0.2 shifts, x0.8/x1.2 scaling, jitter, density."""
    perturbations = [
        ("none", None),
        ("permutation", AugmentSpec(permute=True)),
        ("translate+0.2", AugmentSpec(translate=(0.2, 0.2, 0.2))),
        ("translate-0.2", AugmentSpec(translate=(-0.2, -0.2, -0.2))),
        ("scale0.8", AugmentSpec(scale=0.8)),
        ("scale1.2", AugmentSpec(scale=1.2)),
        ("jitter", AugmentSpec(jitter_sigma=0.01)),
    ]
    rows = [(name, _headline(evaluate(network, clouds, spec, seed=seed))) for name, spec in perturbations]
    curve = [(int(d), _headline(evaluate(network, clouds, density=int(d), seed=seed))) for d in densities]
    better = (lambda a, b: a < b) if network.spec.task == "normal-estimation" else (lambda a, b: a > b)
    violations = [(curve[i][0], curve[i + 1][0]) for i in range(len(curve) - 1) if better(curve[i + 1][1], curve[i][1])]
    metric = "angle_error_deg" if network.spec.task == "normal-estimation" else "OA"
    return RobustnessReport(metric, rows, curve, violations)
