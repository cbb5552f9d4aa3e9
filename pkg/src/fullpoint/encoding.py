"""Global/local geometric correlation and the hierarchical position encoding.

The correlation fields are parameter-free and computed in numpy. The position
encoding is learnable and differentiable: a global stage embeds absolute
coordinates, ``g_i = [phi_global(p_i), p_i]``, and a local stage embeds the
difference between a center and each neighbor, ``phi_local(g_i - g_ij)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .nn import MLP, Module
from .rng import Rng
from .tensor import Tensor

SIGMA_OBJECT = 1.2
SIGMA_SCENE = 0.2
MAX_GLOBAL_POINTS = 4096

VARIANTS = ("FPE", "LPE", "GPE")
ENCODERS = ("learnable-mlp", "sinusoidal")


def _check_sigma(sigma):
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")


def relation(p, q, sigma: float) -> float:
    """Linear falloff ``max(0, 1 - |p - q| / sigma)``."""
    _check_sigma(sigma)
    d = np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    dist = math.sqrt(float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))
    return max(0.0, 1.0 - dist / sigma)


@dataclass
class GlobalCorrelation:
    values: np.ndarray  # [N, 1]
    sigma: float

    @property
    def flat(self) -> np.ndarray:
        return self.values[:, 0]


def global_correlation(
    positions,
    sigma: float,
    max_global_points: int | None = MAX_GLOBAL_POINTS,
    chunk: int = 256,
) -> GlobalCorrelation:
    """Sum of linear relations from each point to every point of the cloud.

    The self term (relation 1) is included. Above ``max_global_points`` the
    sum runs over an evenly strided subset and is rescaled by N / subset size.
    """
    _check_sigma(sigma)
    pos = positions.positions if hasattr(positions, "positions") else np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    others = pos
    scale = 1.0
    if max_global_points is not None and n > max_global_points:
        stride = math.ceil(n / max_global_points)
        others = pos[::stride]
        scale = n / others.shape[0]
    out = np.empty(n)
    for start in range(0, n, chunk):
        rows = pos[start : start + chunk]
        # per-axis in place: avoids a [chunk, N, 3] temporary
        d2 = rows[:, 0, None] - others[None, :, 0]
        d2 *= d2
        for a in (1, 2):
            da = rows[:, a, None] - others[None, :, a]
            da *= da
            d2 += da
        np.sqrt(d2, out=d2)
        np.divide(d2, sigma, out=d2)
        np.subtract(1.0, d2, out=d2)
        np.maximum(d2, 0.0, out=d2)
        out[start : start + chunk] = d2.sum(axis=1)
    return GlobalCorrelation((out * scale)[:, None], float(sigma))


def local_correlation(positions, nbr, s1: GlobalCorrelation, centers=None) -> np.ndarray:
    """Per-neighbor 8-vector ``[p_ij, p_ij - p_i, |p_ij - p_i|, s1_i - s1_ij]``.

    ``nbr`` is ``[M, K]`` indices into ``positions``; ``centers`` gives the
    index of each row's center (defaults to ``arange(M)``).
    """
    pos = np.asarray(positions, dtype=np.float64)
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    n = pos.shape[0]
    vals = s1.flat if isinstance(s1, GlobalCorrelation) else np.asarray(s1, dtype=np.float64).reshape(-1)
    if vals.shape[0] != n:
        raise ContractError(f"global correlation has {vals.shape[0]} values for {n} points")
    ctr = np.arange(idx.shape[0]) if centers is None else np.asarray(centers, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n) or (ctr.size and (ctr.min() < 0 or ctr.max() >= n)):
        raise ContractError(f"neighbor index out of range [0, {n})")
    p_ij = pos[idx]
    rel = p_ij - pos[ctr][:, None, :]
    dist = np.sqrt(rel[..., 0] * rel[..., 0] + rel[..., 1] * rel[..., 1] + rel[..., 2] * rel[..., 2])
    ds1 = vals[ctr][:, None] - vals[idx]
    return np.concatenate([p_ij, rel, dist[..., None], ds1[..., None]], axis=-1)


def sinusoidal(coords: np.ndarray, c: int) -> np.ndarray:
    """Fixed sin/cos features of 3-D coordinates, width ``c``.

    Frequencies are ``2**k * pi`` for ``k < ceil(c / 6)``; the layout is
    ``[sin(f_k x_a), cos(f_k x_a)]`` for k outer, axis a inner, truncated to c.
    """
    coords = np.asarray(coords, dtype=np.float64)
    nfreq = max(1, math.ceil(c / 6))
    feats = []
    for k in range(nfreq):
        w = (2.0**k) * math.pi
        for a in range(3):
            feats.append(np.sin(w * coords[..., a]))
            feats.append(np.cos(w * coords[..., a]))
    out = np.stack(feats, axis=-1)[..., :c]
    if out.shape[-1] < c:
        pad = np.zeros(out.shape[:-1] + (c - out.shape[-1],))
        out = np.concatenate([out, pad], axis=-1)
    return out


class PositionEncoding(Module):
    """Learnable point position encoding producing ``[M, K, C]`` per neighborhood.

    ``variant``:
      FPE  ``phi_local(g_i - g_ij)`` with ``g = [phi_global(p), p]``
      LPE  ``phi_local([0_C, p_i - p_ij])`` (relative positions only)
      GPE  ``phi_global(p_i)`` repeated over the K neighbors

    ``encoder="sinusoidal"`` swaps every stage that consumes raw 3-D
    coordinates for :func:`sinusoidal`; the FPE local stage stays learnable.
    """

    def __init__(self, c: int, rng: Rng, variant: str = "FPE", encoder: str = "learnable-mlp"):
        if variant not in VARIANTS:
            raise ParameterError(f"unknown position encoding variant {variant!r}")
        if encoder not in ENCODERS:
            raise ParameterError(f"unknown encoder kind {encoder!r}")
        self.c = c
        self.variant = variant
        self.encoder = encoder
        learn_global = encoder == "learnable-mlp" and variant in ("FPE", "GPE")
        learn_local = variant == "FPE" or (variant == "LPE" and encoder == "learnable-mlp")
        self.phi_global = MLP([3, c, c], rng) if learn_global else None
        self.phi_local = MLP([c + 3, c, c], rng) if learn_local else None

    def zero_(self) -> None:
        for mlp in (self.phi_global, self.phi_local):
            if mlp is not None:
                mlp.zero_()

    def global_embedding(self, positions: np.ndarray) -> Tensor:
        """``[phi_global(p), p]`` for every point, ``[N, C + 3]``."""
        pos = np.asarray(positions, dtype=np.float64)
        if self.phi_global is not None:
            emb = self.phi_global(T.as_tensor(pos))
        else:
            emb = T.as_tensor(sinusoidal(pos, self.c))
        return T.concat([emb, T.as_tensor(pos)], axis=-1)

    def forward(self, positions, nbr, centers=None) -> Tensor:
        pos = np.asarray(positions, dtype=np.float64)
        idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
        ctr = np.arange(idx.shape[0]) if centers is None else np.asarray(centers, dtype=np.int64)
        if ctr.shape[0] != idx.shape[0]:
            raise DimensionError(f"{ctr.shape[0]} centers for {idx.shape[0]} neighbor rows")
        m, k = idx.shape
        if self.variant == "FPE":
            g = self.global_embedding(pos)
            diff = T.reshape(T.gather(g, ctr), (m, 1, self.c + 3)) - T.gather(g, idx)
            return self.phi_local(diff)
        if self.variant == "LPE":
            rel = pos[ctr][:, None, :] - pos[idx]
            if self.phi_local is None:
                return T.as_tensor(sinusoidal(rel, self.c))
            padded = np.concatenate([np.zeros((m, k, self.c)), rel], axis=-1)
            return self.phi_local(T.as_tensor(padded))
        # GPE
        if self.phi_global is not None:
            emb = self.phi_global(T.as_tensor(pos[ctr]))
        else:
            emb = T.as_tensor(sinusoidal(pos[ctr], self.c))
        return T.broadcast_to(T.reshape(emb, (m, 1, self.c)), (m, k, self.c))


def full_position_encoding(positions, nbr, params: PositionEncoding, centers=None) -> Tensor:
    return params(positions, nbr, centers)


def hierarchical_features(positions, nbr, params: PositionEncoding, centers) -> Tensor:
    """Hierarchical features of sampled centers: the FPE encoding around each center."""
    if params.variant != "FPE":
        raise ContractError("hierarchical features use the FPE variant")
    return params(positions, nbr, centers)
