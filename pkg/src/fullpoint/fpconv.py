"""Full point convolution.

The kernel for neighbor j of point i mixes ``C_m`` shared basis kernels
(``t_c1``, laid out ``[C, C_m * C_out]`` with column ``m * C_out + o``) using
coefficients ``T2[i, j, :] = softmax(phi_ce(local_corr[i, j]))``. The
efficient path never builds the per-neighbor kernel; :func:`fpconv_forward_naive`
does, and is kept as the oracle.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoding import SIGMA_OBJECT, global_correlation, local_correlation
from .errors import ContractError, DimensionError, NumericError, ParameterError
from .nn import MLP, Module, uniform_init
from .rng import Rng
from .tensor import Tensor

NAIVE_MAX_ENTRIES = 2**24
AGGREGATORS = ("max", "sum")


class FPConv(Module):
    def __init__(
        self,
        c_in: int,
        c_mid: int,
        c_out: int | None = None,
        rng: Rng | None = None,
        aggregator: str = "max",
        sigma: float = SIGMA_OBJECT,
    ):
        c_out = c_in if c_out is None else c_out
        if not 1 <= c_mid <= c_in:
            raise ParameterError(f"c_mid must lie in [1, c_in={c_in}], got {c_mid}")
        if aggregator not in AGGREGATORS:
            raise ParameterError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
        if not sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {sigma}")
        rng = rng or Rng(0)
        self.c_in, self.c_mid, self.c_out = c_in, c_mid, c_out
        self.aggregator = aggregator
        self.sigma = float(sigma)
        self.t_c1 = uniform_init(rng, c_in, (c_in, c_mid * c_out))
        self.weight_mlp = MLP([8, c_mid, c_mid], rng)

    def coefficients(self, local_corr) -> Tensor:
        """Softmax-normalised mixing weights over the C_m axis, ``[N, K, C_m]``."""
        lc = T.as_tensor(local_corr)
        if lc.ndim != 3 or lc.shape[-1] != 8:
            raise DimensionError(f"local correlation must be [N, K, 8], got {lc.shape}")
        return T.softmax(self.weight_mlp(lc), axis=-1)

    def forward(self, positions, features: Tensor, nbr, mask_absolute: bool = False) -> Tensor:
        return fpconv_layer(positions, features, nbr, self, mask_absolute=mask_absolute)


def _check(features: Tensor, idx: np.ndarray, params: FPConv):
    if features.ndim != 2 or features.shape[1] != params.c_in:
        raise DimensionError(f"features must be [N, {params.c_in}], got {features.shape}")
    if idx.ndim != 2:
        raise DimensionError(f"neighbor index must be [N, K], got {idx.shape}")
    if idx.shape[0] != features.shape[0]:
        raise DimensionError(f"{idx.shape[0]} neighbor rows for {features.shape[0]} points")


def fpconv_forward_efficient(features, local_corr, nbr, params: FPConv, coefficients=None) -> Tensor:
    """``aggregate_j sum_m T2[i,j,m] * (f_ij @ t_c1)[m, :]`` without materialising kernels.

    ``coefficients`` overrides T2 (used by tests that force specific weights).
    """
    features = T.as_tensor(features)
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    _check(features, idx, params)
    n, k = idx.shape
    t2 = params.coefficients(local_corr) if coefficients is None else T.as_tensor(coefficients)
    if t2.shape != (n, k, params.c_mid):
        raise DimensionError(f"coefficients must be {(n, k, params.c_mid)}, got {t2.shape}")
    # the 1x1 convolution is shared over neighbors, so it is applied before gathering
    basis = T.matmul(features, params.t_c1)
    basis = T.reshape(T.gather(basis, idx), (n, k, params.c_mid, params.c_out))
    per_neighbor = T.sum(T.reshape(t2, (n, k, params.c_mid, 1)) * basis, axis=2)
    out = T.reduce(per_neighbor, axis=1, kind=params.aggregator)
    if not np.isfinite(out.data).all():
        raise NumericError("fpconv produced non-finite output")
    return out


def fpconv_forward_naive(features, local_corr, nbr, params: FPConv, coefficients=None) -> np.ndarray:
    """Oracle: build ``W[i,j,c,o] = sum_m T2[i,j,m] t_c1[c,m,o]`` then contract.

    Sum aggregation only; returns a plain array.
    """
    if params.aggregator != "sum":
        raise ContractError("the naive expansion is defined for the sum aggregator only")
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    _check(T.as_tensor(feats), idx, params)
    n, k = idx.shape
    c, cm, co = params.c_in, params.c_mid, params.c_out
    if n * k * c * co > NAIVE_MAX_ENTRIES:
        raise ParameterError(f"naive kernel tensor would hold {n * k * c * co} entries (limit {NAIVE_MAX_ENTRIES})")
    if coefficients is None:
        with T.no_grad():
            t2 = params.coefficients(local_corr).data
    else:
        t2 = np.asarray(getattr(coefficients, "data", coefficients), dtype=np.float64)
    basis = params.t_c1.data.reshape(c, cm, co)
    weights = np.zeros((n, k, c, co))
    for m in range(cm):
        weights += t2[:, :, m, None, None] * basis[None, None, :, m, :]
    gathered = feats[idx]
    out = np.zeros((n, co))
    for j in range(k):
        for ch in range(c):
            out += weights[:, j, ch, :] * gathered[:, j, ch, None]
    return out


def fpconv_layer(positions, features, nbr, params: FPConv, mask_absolute: bool = False, s1=None) -> Tensor:
    """Global correlation -> local correlation -> efficient FPConv.

    ``mask_absolute`` zeroes the absolute-position channels of the local
    correlation (a translation-invariance diagnostic).
    """
    pos = np.asarray(positions, dtype=np.float64)
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    if s1 is None:
        s1 = global_correlation(pos, params.sigma)
    lc = local_correlation(pos, idx, s1)
    if mask_absolute:
        lc[..., :3] = 0.0
    return fpconv_forward_efficient(features, lc, idx, params)
