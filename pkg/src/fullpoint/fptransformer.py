"""Full point transformer: grouped vector attention with full position encoding.

Channels are viewed as ``[C / C_m, C_m]`` (channel ``c = g * C_m + m``); all
C/C_m channels sharing the same ``m`` share one attention weight per
neighbor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoding import PositionEncoding
from .errors import DimensionError, NumericError, ParameterError
from .nn import MLP, LayerNorm, Linear, Module
from .rng import Rng
from .tensor import Tensor


class FPTransformer(Module):
    def __init__(
        self,
        c: int,
        c_mid: int,
        rng: Rng | None = None,
        variant: str = "FPE",
        encoder: str = "learnable-mlp",
        share_position_encoding: bool = True,
    ):
        if not 1 <= c_mid <= c:
            raise ParameterError(f"c_mid must lie in [1, c={c}], got {c_mid}")
        if c % c_mid:
            raise ParameterError(f"c={c} is not divisible by c_mid={c_mid}")
        rng = rng or Rng(0)
        self.c, self.c_mid = c, c_mid
        self.w_q = Linear(c, c, rng)
        self.w_k = Linear(c, c, rng)
        self.w_v = Linear(c, c, rng)
        self.pos = PositionEncoding(c, rng, variant, encoder)
        self.pos_value = None if share_position_encoding else PositionEncoding(c, rng, variant, encoder)
        self.attn_mlp = MLP([c, c, c_mid], rng)

    def forward(self, positions, features: Tensor, nbr) -> Tensor:
        return fptransformer_forward_efficient(features, positions, nbr, self)


def qkv_project(features, params: FPTransformer):
    features = T.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != params.c:
        raise DimensionError(f"features must be [N, {params.c}], got {features.shape}")
    return params.w_q(features), params.w_k(features), params.w_v(features)


def _front(features, positions, nbr, params: FPTransformer):
    """Projections, encodings and attention weights shared by both paths."""
    idx = np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)
    features = T.as_tensor(features)
    if idx.ndim != 2 or idx.shape[0] != features.shape[0]:
        raise DimensionError(f"neighbor index {idx.shape} does not match features {features.shape}")
    n, k = idx.shape
    q, kk, v = qkv_project(features, params)
    delta = params.pos(positions, idx)
    delta_v = delta if params.pos_value is None else params.pos_value(positions, idx)
    rel = T.reshape(q, (n, 1, params.c)) - T.gather(kk, idx)
    logits = params.attn_mlp(rel + delta)
    attn = T.softmax(logits, axis=1)
    values = T.gather(v, idx) + delta_v
    return attn, values


def fptransformer_forward_efficient(features, positions, nbr, params: FPTransformer) -> Tensor:
    """``out[i, g, m] = sum_j attn[i, j, m] * values[i, j, g, m]`` flattened to ``[N, C]``."""
    attn, values = _front(features, positions, nbr, params)
    n, k, c = values.shape
    groups = c // params.c_mid
    grouped = T.reshape(values, (n, k, groups, params.c_mid))
    weights = T.reshape(attn, (n, k, 1, params.c_mid))
    out = T.reshape(T.sum(weights * grouped, axis=1), (n, c))
    if not np.isfinite(out.data).all():
        raise NumericError("fptransformer produced non-finite output")
    return out


def fptransformer_forward_naive(features, positions, nbr, params: FPTransformer) -> np.ndarray:
    """Oracle: repeat the C_m attention weights to a full ``[N, K, C]`` map and
    apply ungrouped vector attention channel by channel."""
    with T.no_grad():
        attn, values = _front(features, positions, nbr, params)
    a, vals = attn.data, values.data
    n, k, c = vals.shape
    full = np.tile(a, (1, 1, c // params.c_mid))
    out = np.zeros((n, c))
    for ch in range(c):
        for j in range(k):
            out[:, ch] += full[:, j, ch] * vals[:, j, ch]
    return out


def attention_weights(features, positions, nbr, params: FPTransformer) -> Tensor:
    return _front(features, positions, nbr, params)[0]


class FPTransformerBlock(Module):
    """``x + post(attention(relu(pre(x))))``.

    With ``norm`` each branch stage is layer-normalised:
    ``x + n3(post(relu(n2(attention(relu(n1(pre(x))))))))``.
    """

    def __init__(self, c: int, c_mid: int, rng: Rng | None = None, norm: bool = False, **attn_kwargs):
        rng = rng or Rng(0)
        self.pre = Linear(c, c, rng)
        self.attn = FPTransformer(c, c_mid, rng, **attn_kwargs)
        self.post = Linear(c, c, rng)
        self.norms = [LayerNorm(c) for _ in range(3)] if norm else None

    def forward(self, positions, features: Tensor, nbr) -> Tensor:
        return fptransformer_block(features, positions, nbr, self)


def fptransformer_block(features, positions, nbr, block: FPTransformerBlock) -> Tensor:
    features = T.as_tensor(features)
    n = block.norms or [None] * 3
    norm = lambda i, x: x if n[i] is None else n[i](x)  # noqa: E731
    h = T.relu(norm(0, block.pre(features)))
    h = fptransformer_forward_efficient(h, positions, nbr, block.attn)
    if block.norms is not None:
        h = T.relu(norm(1, h))
    return features + norm(2, block.post(h))
