"""Downsampling blocks (SADS, GDS, TDS), interpolation upsampling, baseline layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cloud import farthest_point_sample, knn
from .encoding import PositionEncoding, hierarchical_features
from .errors import ParameterError
from .fpconv import FPConv, fpconv_forward_efficient, fpconv_layer
from .nn import MLP, LayerNorm, Linear, Module
from .rng import Rng
from .tensor import Tensor


@dataclass
class Grouping:
    """FPS centers and their neighborhoods in the pre-sampling cloud."""

    centers: np.ndarray  # [M] indices into the input cloud
    neighbors: np.ndarray  # [M, K] indices into the input cloud


def downsample_count(n: int, ratio: int) -> int:
    return math.ceil(n / ratio)


def group(positions, ratio: int, k: int, seed_index: int = 0) -> Grouping:
    if ratio < 1:
        raise ParameterError(f"ratio must be >= 1, got {ratio}")
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if k > n:
        raise ParameterError(f"k={k} exceeds the {n} available points")
    centers = farthest_point_sample(pos, downsample_count(n, ratio), seed_index)
    nbr = knn(pos, pos[centers], k, include_self=True, query_indices=centers)
    return Grouping(centers, nbr.indices)


class SADS(Module):
    """Shape-aware downsampling: ``max_j MLP(f_ij + H_ij)``.

    ``H`` is the hierarchical position encoding of each center's
    neighborhood. When ``pos_channels`` differs from ``c_in`` a linear
    adapter maps the features to ``pos_channels`` first.
    """

    def __init__(self, c_in: int, c_out: int, k: int, ratio: int, rng: Rng | None = None, pos_channels=None):
        if k < 1 or ratio < 1:
            raise ParameterError(f"need k >= 1 and ratio >= 1, got k={k}, ratio={ratio}")
        rng = rng or Rng(0)
        c_pos = c_in if pos_channels is None else pos_channels
        self.k, self.ratio = k, ratio
        self.adapter = Linear(c_in, c_pos, rng) if c_pos != c_in else None
        self.pos = PositionEncoding(c_pos, rng, "FPE")
        self.mlp = MLP([c_pos, c_out], rng, final_relu=True)

    def forward(self, positions, features: Tensor, grouping: Grouping | None = None, seed_index: int = 0):
        return sads_downsample(features, positions, self, grouping, seed_index)


def sads_downsample(features, positions, params: SADS, grouping: Grouping | None = None, seed_index: int = 0):
    pos = np.asarray(positions, dtype=np.float64)
    grouping = grouping or group(pos, params.ratio, params.k, seed_index)
    f = T.as_tensor(features)
    if params.adapter is not None:
        f = params.adapter(f)
    h = hierarchical_features(pos, grouping.neighbors, params.pos, grouping.centers)
    out = T.max(params.mlp(T.gather(f, grouping.neighbors) + h), axis=1)
    return pos[grouping.centers], out


def gds_downsample(features, positions, ratio: int, k: int, grouping: Grouping | None = None, seed_index: int = 0):
    """FPS + kNN + max over raw neighbor features; nothing learnable."""
    pos = np.asarray(positions, dtype=np.float64)
    grouping = grouping or group(pos, ratio, k, seed_index)
    return pos[grouping.centers], T.max(T.gather(T.as_tensor(features), grouping.neighbors), axis=1)


class TDS(Module):
    """Transition downsampling: pointwise linear (+ layer norm), then GDS."""

    def __init__(self, c_in: int, c_out: int, k: int, ratio: int, rng: Rng | None = None, norm: bool = True):
        rng = rng or Rng(0)
        self.k, self.ratio = k, ratio
        self.linear = Linear(c_in, c_out, rng)
        self.norm = LayerNorm(c_out) if norm else None

    def forward(self, positions, features: Tensor, grouping: Grouping | None = None, seed_index: int = 0):
        return tds_downsample(features, positions, self, grouping, seed_index)


def tds_downsample(features, positions, params: TDS, grouping: Grouping | None = None, seed_index: int = 0):
    f = params.linear(T.as_tensor(features))
    if params.norm is not None:
        f = params.norm(f)
    return gds_downsample(f, positions, params.ratio, params.k, grouping, seed_index)


class GDS(Module):
    """GDS followed by a pointwise projection when the channel count changes."""

    def __init__(self, c_in: int, c_out: int, k: int, ratio: int, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.k, self.ratio = k, ratio
        self.proj = MLP([c_in, c_out], rng, final_relu=True) if c_in != c_out else None

    def forward(self, positions, features: Tensor, grouping: Grouping | None = None, seed_index: int = 0):
        new_pos, out = gds_downsample(features, positions, self.ratio, self.k, grouping, seed_index)
        if self.proj is not None:
            out = self.proj(out)
        return new_pos, out


# ---------------------------------------------------------------- upsampling


@dataclass
class Interpolation:
    indices: np.ndarray  # [F, p] coarse indices
    weights: np.ndarray  # [F, p], rows sum to 1


def interpolation_weights(coarse_positions, fine_positions, p: int = 3) -> Interpolation:
    """Inverse-distance weights ``1 / (d + 1e-8)`` over the p nearest coarse points.

    A fine point that coincides with a coarse point takes that point's
    feature exactly.
    """
    coarse = np.asarray(coarse_positions, dtype=np.float64)
    fine = np.asarray(fine_positions, dtype=np.float64)
    if coarse.shape[0] < 1:
        raise ParameterError("upsampling needs at least one coarse point")
    p = min(p, coarse.shape[0])
    nbr = knn(coarse, fine, p)
    d = np.sqrt(nbr.distances)
    w = 1.0 / (d + 1e-8)
    exact = d[:, 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w = w / w.sum(axis=1, keepdims=True)
    return Interpolation(nbr.indices, w)


def upsample_interpolate(coarse_positions, coarse_features, fine_positions, p: int = 3, interp=None) -> Tensor:
    interp = interp or interpolation_weights(coarse_positions, fine_positions, p)
    gathered = T.gather(T.as_tensor(coarse_features), interp.indices)
    return T.sum(gathered * interp.weights[:, :, None], axis=1)


# ---------------------------------------------------------------- aggregation layers


class MLPBaseline(Module):
    """Local point-wise MLP aggregator ``max_j MLP(f_ij)``."""

    def __init__(self, c_in: int, c_out: int | None = None, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.mlp = MLP([c_in, c_in if c_out is None else c_out], rng, final_relu=True)

    def forward(self, positions, features: Tensor, nbr) -> Tensor:
        return mlp_baseline_layer(features, nbr, self)


def mlp_baseline_layer(features, nbr, params: MLPBaseline) -> Tensor:
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    # a shared pointwise MLP commutes with gathering
    return T.max(T.gather(params.mlp(T.as_tensor(features)), idx), axis=1)


class FPConvBlock(Module):
    """``x + relu(FPConv(x))``, or ``x + relu(norm(FPConv(x)))`` with ``norm``.

    The local correlation can be passed in precomputed (cached per cloud).
    """

    def __init__(
        self, c: int, c_mid: int, rng: Rng | None = None, sigma: float = 1.2, aggregator: str = "max", norm=False
    ):
        self.conv = FPConv(c, c_mid, c, rng, aggregator=aggregator, sigma=sigma)
        self.norm = LayerNorm(c) if norm else None

    def forward(self, positions, features: Tensor, nbr, local_corr=None) -> Tensor:
        if local_corr is None:
            y = fpconv_layer(positions, features, nbr, self.conv)
        else:
            y = fpconv_forward_efficient(features, local_corr, nbr, self.conv)
        if self.norm is not None:
            y = self.norm(y)
        return features + T.relu(y)


class MLPBaselineBlock(Module):
    """``x + max_j MLP(x_ij)``, with the residual branch layer-normalised under ``norm``."""

    def __init__(self, c: int, rng: Rng | None = None, norm: bool = False):
        self.layer = MLPBaseline(c, c, rng)
        self.norm = LayerNorm(c) if norm else None

    def forward(self, positions, features: Tensor, nbr) -> Tensor:
        y = self.layer(positions, features, nbr)
        return features + (y if self.norm is None else self.norm(y))
