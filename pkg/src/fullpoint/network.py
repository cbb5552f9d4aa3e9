"""Declarative encoder/decoder networks and the checkpoint file format."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import (
    GDS,
    SADS,
    TDS,
    FPConvBlock,
    Grouping,
    Interpolation,
    MLPBaselineBlock,
    group,
    interpolation_weights,
    upsample_interpolate,
)
from .cloud import knn
from .encoding import ENCODERS, SIGMA_OBJECT, VARIANTS, global_correlation, local_correlation
from .errors import ParameterError, SpecError
from .fptransformer import FPTransformerBlock
from .nn import MLP, Linear, Module
from .rng import Rng
from .tensor import Tensor

TASKS = ("classification", "segmentation", "normal-estimation")
LAYER_KINDS = ("fptransformer", "fpconv", "mlp-baseline")
SAMPLING_BLOCKS = ("SADS", "TDS", "GDS")


@dataclass
class NetworkSpec:
    task: str = "classification"
    num_classes: int = 4
    in_channels: int = 3
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    middle_channels: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    block_depths: list = field(default_factory=lambda: [1, 2, 2, 6, 2])
    sampling_ratios: list = field(default_factory=lambda: [1, 4, 4, 4, 4])
    k_neighbors: list = field(default_factory=lambda: [16, 16, 16, 16, 16])
    layer_kind: str = "fptransformer"
    sampling_block: str = "SADS"
    sigma: float = SIGMA_OBJECT
    position_encoding: str = "FPE"
    encoder_kind: str = "learnable-mlp"
    aggregator: str = "max"
    norm: bool = True
    stage_count: int | None = None

    @property
    def stages(self) -> int:
        return 5 if self.stage_count is None else self.stage_count

    @property
    def output_dims(self) -> int:
        return 3 if self.task == "normal-estimation" else self.num_classes

    def validate(self) -> "NetworkSpec":
        problems = []
        s = self.stages
        if s < 1:
            problems.append(f"stage_count: must be >= 1, got {s}")
        for name in ("encoder_channels", "middle_channels", "block_depths", "sampling_ratios", "k_neighbors"):
            value = getattr(self, name)
            if len(value) != s:
                problems.append(f"{name}: expected {s} entries, got {len(value)}")
        if problems:
            raise SpecError(problems)
        if self.task not in TASKS:
            problems.append(f"task: unknown {self.task!r}")
        if self.layer_kind not in LAYER_KINDS:
            problems.append(f"layer_kind: unknown {self.layer_kind!r}")
        if self.sampling_block not in SAMPLING_BLOCKS:
            problems.append(f"sampling_block: unknown {self.sampling_block!r}")
        if self.position_encoding not in VARIANTS:
            problems.append(f"position_encoding: unknown {self.position_encoding!r}")
        if self.encoder_kind not in ENCODERS:
            problems.append(f"encoder_kind: unknown {self.encoder_kind!r}")
        if self.aggregator not in ("max", "sum"):
            problems.append(f"aggregator: unknown {self.aggregator!r}")
        ch = self.encoder_channels
        if any(c < 1 for c in ch):
            problems.append("encoder_channels: entries must be >= 1")
        if any(b < a for a, b in zip(ch, ch[1:])):
            problems.append("encoder_channels: must be non-decreasing")
        for i, (c, cm) in enumerate(zip(ch, self.middle_channels)):
            if not 1 <= cm <= c:
                problems.append(f"middle_channels[{i}]: {cm} not in [1, {c}]")
            elif self.layer_kind == "fptransformer" and c % cm:
                problems.append(f"middle_channels[{i}]: {c} not divisible by {cm}")
        if any(d < 0 for d in self.block_depths):
            problems.append("block_depths: entries must be >= 0")
        if any(r < 1 for r in self.sampling_ratios):
            problems.append("sampling_ratios: entries must be >= 1")
        elif self.sampling_ratios and self.sampling_ratios[0] != 1:
            problems.append("sampling_ratios: the first stage does not sample, entry 0 must be 1")
        if any(k < 1 for k in self.k_neighbors):
            problems.append("k_neighbors: entries must be >= 1")
        if not self.sigma > 0:
            problems.append("sigma: must be > 0")
        if self.task != "normal-estimation" and self.num_classes < 2:
            problems.append("num_classes: must be >= 2")
        if self.in_channels < 1:
            problems.append("in_channels: must be >= 1")
        if problems:
            raise SpecError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SpecError([f"{name}: unknown field" for name in unknown])
        return cls(**{k: (list(v) if isinstance(v, tuple) else v) for k, v in data.items()})

    @classmethod
    def desk(cls, task: str = "classification", **overrides) -> "NetworkSpec":
        """Two-stage laptop-scale configuration."""
        base = dict(
            task=task,
            encoder_channels=[16, 32],
            middle_channels=[4, 8],
            block_depths=[1, 1],
            sampling_ratios=[1, 4],
            k_neighbors=[16, 16],
            stage_count=2,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class Structure:
    """Everything about a forward pass that depends only on the input positions."""

    positions: list  # per stage, [N_s, 3]
    neighbors: list  # per stage, [N_s, K_s] self-inclusive kNN
    groupings: list  # per stage; None for stage 0
    interpolations: list  # per stage s < last: stage s+1 -> stage s
    local_corr: list  # per stage for fpconv layers, else None
    counts: list = None  # per stage, points per cloud when several clouds are merged

    @property
    def batch(self) -> int:
        return 1 if self.counts is None else len(self.counts[0])


def merge_structures(structures: list) -> Structure:
    """Concatenate per-cloud structures into one block-diagonal structure.

    Every index array is shifted by the running point count of its stage, so
    one forward pass evaluates all clouds without any cross-cloud neighbors.
    """
    stages = len(structures[0].positions)
    counts = [np.array([st.positions[s].shape[0] for st in structures]) for s in range(stages)]
    offsets = [np.concatenate([[0], np.cumsum(c)[:-1]]) for c in counts]
    positions = [np.concatenate([st.positions[s] for st in structures]) for s in range(stages)]
    neighbors = [np.concatenate([st.neighbors[s] + o for st, o in zip(structures, offsets[s])]) for s in range(stages)]
    groupings = [None]
    for s in range(1, stages):
        prev = offsets[s - 1]
        groupings.append(
            Grouping(
                np.concatenate([st.groupings[s].centers + o for st, o in zip(structures, prev)]),
                np.concatenate([st.groupings[s].neighbors + o for st, o in zip(structures, prev)]),
            )
        )
    interps = []
    for s in range(len(structures[0].interpolations)):
        interps.append(
            Interpolation(
                np.concatenate([st.interpolations[s].indices + o for st, o in zip(structures, offsets[s + 1])]),
                np.concatenate([st.interpolations[s].weights for st in structures]),
            )
        )
    lcs = [
        None if structures[0].local_corr[s] is None else np.concatenate([st.local_corr[s] for st in structures])
        for s in range(stages)
    ]
    return Structure(positions, neighbors, groupings, interps, lcs, counts)


def canonical_seed(positions: np.ndarray) -> int:
    """Point farthest from the centroid; a permutation-invariant FPS start."""
    d = positions - positions.mean(axis=0)
    return int(np.argmax(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]))


class Network(Module):
    def __init__(self, spec: NetworkSpec, rng: Rng):
        spec.validate()
        self.spec = spec
        ch, cm, kind = spec.encoder_channels, spec.middle_channels, spec.layer_kind
        self.stem = MLP([spec.in_channels, ch[0]], rng, final_relu=True)
        self.down = []
        self.encoder = []
        for s in range(spec.stages):
            if s > 0:
                self.down.append(self._sampler(ch[s - 1], ch[s], spec.k_neighbors[s], spec.sampling_ratios[s], rng))
            self.encoder.append([self._layer(ch[s], cm[s], rng) for _ in range(spec.block_depths[s])])
        if spec.task == "classification":
            self.head = MLP([ch[-1], ch[-1], spec.num_classes], rng)
        else:
            self.bottleneck = MLP([ch[-1], ch[-1]], rng, final_relu=True)
            self.bottleneck_layer = self._layer(ch[-1], cm[-1], rng)
            self.merge = [MLP([ch[s + 1] + ch[s], ch[s]], rng, final_relu=True) for s in range(spec.stages - 1)]
            self.decoder = [self._layer(ch[s], cm[s], rng) for s in range(spec.stages - 1)]
            self.head = MLP([ch[0], ch[0], spec.output_dims], rng)

    def _layer(self, c, c_mid, rng):
        spec = self.spec
        if spec.layer_kind == "fptransformer":
            return FPTransformerBlock(
                c, c_mid, rng, norm=spec.norm, variant=spec.position_encoding, encoder=spec.encoder_kind
            )
        if spec.layer_kind == "fpconv":
            return FPConvBlock(c, c_mid, rng, sigma=spec.sigma, aggregator=spec.aggregator, norm=spec.norm)
        return MLPBaselineBlock(c, rng, norm=spec.norm)

    def _sampler(self, c_in, c_out, k, ratio, rng):
        block = self.spec.sampling_block
        if block == "SADS":
            return SADS(c_in, c_out, k, ratio, rng)
        if block == "TDS":
            return TDS(c_in, c_out, k, ratio, rng)
        return GDS(c_in, c_out, k, ratio, rng)

    @property
    def encoder_layer_count(self) -> int:
        return sum(len(stage) for stage in self.encoder)

    def structure(self, positions) -> Structure:
        spec = self.spec
        pos = np.asarray(positions, dtype=np.float64)
        stage_pos, neighbors, groupings, lcs = [], [], [], []
        for s in range(spec.stages):
            if s > 0:
                k = min(spec.k_neighbors[s], pos.shape[0])
                g = group(pos, spec.sampling_ratios[s], k, canonical_seed(pos))
                groupings.append(g)
                pos = pos[g.centers]
            else:
                groupings.append(None)
            k = min(spec.k_neighbors[s], pos.shape[0])
            nbr = knn(pos, pos, k, include_self=True, query_indices=np.arange(pos.shape[0])).indices
            stage_pos.append(pos)
            neighbors.append(nbr)
            if spec.layer_kind == "fpconv":
                lcs.append(local_correlation(pos, nbr, global_correlation(pos, spec.sigma)))
            else:
                lcs.append(None)
        interps = []
        if spec.task != "classification":
            interps = [interpolation_weights(stage_pos[s + 1], stage_pos[s]) for s in range(spec.stages - 1)]
        return Structure(stage_pos, neighbors, groupings, interps, lcs)

    def similar_structure(self, st: Structure, scale: float, translate) -> Structure:
        """Structure of ``positions * scale + translate`` without regrouping.

        kNN order, FPS picks and interpolation weights are invariant under a
        uniform scale plus translation (FPS uses the canonical seed; the
        interpolation epsilon aside), so only positions and the
        sigma-dependent correlation are recomputed. Used for training
        augmentation, where exact floating-point tie behaviour is irrelevant.
        """
        shift = np.asarray(translate, dtype=np.float64)
        positions = [p * scale + shift for p in st.positions]
        lcs = [
            None if lc is None else local_correlation(p, n, global_correlation(p, self.spec.sigma))
            for lc, p, n in zip(st.local_corr, positions, st.neighbors)
        ]
        return Structure(positions, st.neighbors, st.groupings, st.interpolations, lcs, st.counts)

    def _apply(self, layer, s, x, st: Structure):
        if self.spec.layer_kind == "fpconv":
            return layer(st.positions[s], x, st.neighbors[s], local_corr=st.local_corr[s])
        return layer(st.positions[s], x, st.neighbors[s])

    def forward(self, positions, features=None, structure: Structure | None = None) -> Tensor:
        """Logits ``[num_classes]`` (classification), ``[N, num_classes]``
        (segmentation) or unit normals ``[N, 3]``.

        With a merged structure, ``positions``/``features`` are the stacked
        clouds and classification returns ``[B, num_classes]``.
        """
        st = structure or self.structure(positions)
        x = np.asarray(positions if features is None else features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_channels:
            raise ParameterError(f"input features must be [N, {self.spec.in_channels}], got {x.shape}")
        x = self.stem(T.as_tensor(x))
        skips = []
        for s in range(self.spec.stages):
            if s > 0:
                _, x = self.down[s - 1](st.positions[s - 1], x, grouping=st.groupings[s])
            for layer in self.encoder[s]:
                x = self._apply(layer, s, x, st)
            skips.append(x)
        if self.spec.task == "classification":
            return self._classify(x, st)
        last = self.spec.stages - 1
        y = self._apply(self.bottleneck_layer, last, self.bottleneck(skips[-1]), st)
        for s in range(last - 1, -1, -1):
            up = upsample_interpolate(None, y, None, interp=st.interpolations[s])
            y = self.merge[s](T.concat([up, skips[s]], axis=-1))
            y = self._apply(self.decoder[s], s, y, st)
        out = self.head(y)
        if self.spec.task == "normal-estimation":
            out = out / T.sqrt(T.sum(out * out, axis=-1, keepdims=True) + 1e-12)
        return out


    def _classify(self, x: Tensor, st: Structure) -> Tensor:
        if st.counts is None:
            return T.reshape(self.head(T.reshape(T.max(x, axis=0), (1, -1))), (self.spec.num_classes,))
        counts = st.counts[-1]
        if (counts == counts[0]).all():
            pooled = T.max(T.reshape(x, (len(counts), int(counts[0]), x.shape[-1])), axis=1)
        else:
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            rows = [T.max(T.gather(x, np.arange(a, a + n)), axis=0, keepdims=True) for a, n in zip(starts, counts)]
            pooled = T.concat(rows, axis=0)
        return self.head(pooled)


def build_network(spec: NetworkSpec, rng: Rng | int = 0) -> Network:
    return Network(spec, rng if isinstance(rng, Rng) else Rng(rng))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "fullpoint-checkpoint"


def save_checkpoint(network: Network, path, extra: dict | None = None) -> None:
    """One JSON header line (spec + tensor manifest) then little-endian f64 payloads.

    Manifest offsets are byte offsets from the start of the payload.
    """
    manifest, blobs, offset = [], [], 0
    for name, p in network.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "spec": network.spec.to_dict(),
        "tensors": manifest,
        "payload_bytes": offset,
    }
    if extra:
        header["extra"] = extra
    with open(os.fspath(path), "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(os.fspath(path), "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if len(payload) != header["payload_bytes"]:
        raise ParameterError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return header, tensors


def load_checkpoint(path) -> Network:
    header, tensors = read_checkpoint(path)
    net = build_network(NetworkSpec.from_dict(header["spec"]), Rng(0))
    net.load_state_dict(tensors)
    return net


__all__ = [
    "Grouping",
    "Interpolation",
    "Linear",
    "Network",
    "NetworkSpec",
    "Structure",
    "build_network",
    "canonical_seed",
    "load_checkpoint",
    "merge_structures",
    "read_checkpoint",
    "save_checkpoint",
]
